"""
Процедурный игрушечный корпус промышленных дефектов.

Текстуры (wood_grain / tile / plain) плюс параметрические дефекты
(царапина, отверстие, цветное пятно, полоса клея) с точными масками.
Все функции чистые: результат определяется только аргументами и сидом.
"""

from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import cv2
import numpy as np
import torch
from pydantic import BaseModel, Field, model_validator
from tqdm import tqdm

from .config import DEFAULT_PROMPTS, GOOD_PROMPT, CorpusConfig, TextureFamily, derive_seed, prompt_for_kind
from .dataset import make_unpaired_pairs
from .models import GOOD_LABEL, DatasetManifest, Pairing, PromptVocabulary, SampleRecord
from .storage import write_manifest

# Минимальная средняя |target - input| внутри маски (с запасом на 8-битную PNG-квантизацию)
DEFECT_FLOOR = 0.1
_FLOOR_WITH_MARGIN = DEFECT_FLOOR + 0.02


class DefectKind(str, Enum):
    SCRATCH = "scratch"
    HOLE = "hole"
    COLOR_BLOB = "color_blob"
    GLUE_STRIP = "glue_strip"


class DefectSpec(BaseModel):
    """Геометрия в пикселях: line = (x0, y0, x1, y1), center = (x, y), rect = (x, y, w, h)."""

    kind: DefectKind
    intensity: float = Field(default=0.7, ge=0.0, le=1.0)
    line: Optional[Tuple[int, int, int, int]] = None
    width: int = Field(default=2, ge=1)
    center: Optional[Tuple[int, int]] = None
    radius: Optional[int] = Field(default=None, ge=1)
    blob_seed: int = 0
    rect: Optional[Tuple[int, int, int, int]] = None

    @model_validator(mode="after")
    def _geometry_present(self) -> "DefectSpec":
        required = {
            DefectKind.SCRATCH: ("line",),
            DefectKind.HOLE: ("center", "radius"),
            DefectKind.COLOR_BLOB: ("center", "radius"),
            DefectKind.GLUE_STRIP: ("rect",),
        }[self.kind]
        missing = [name for name in required if getattr(self, name) is None]
        if missing:
            raise ValueError(f"Для дефекта {self.kind.value} не заданы поля {missing}")
        return self

    def check_bounds(self, height: int, width: int) -> None:
        def inside(x: float, y: float) -> bool:
            return 0 <= x < width and 0 <= y < height

        ok = True
        if self.kind == DefectKind.SCRATCH:
            x0, y0, x1, y1 = self.line  # type: ignore[misc]
            ok = inside(x0, y0) and inside(x1, y1)
        elif self.kind in (DefectKind.HOLE, DefectKind.COLOR_BLOB):
            cx, cy = self.center  # type: ignore[misc]
            r = self.radius or 0
            ok = inside(cx - r, cy - r) and inside(cx + r, cy + r)
        elif self.kind == DefectKind.GLUE_STRIP:
            x, y, w, h = self.rect  # type: ignore[misc]
            ok = w > 0 and h > 0 and inside(x, y) and inside(x + w - 1, y + h - 1)
        if not ok:
            raise ValueError(f"Геометрия дефекта {self.kind.value} выходит за границы {height}×{width}")


def generate_texture(family: TextureFamily | str, size: int, seed: int) -> torch.Tensor:
    """Текстура (3, size, size) в [0, 1]."""
    if size % 8 != 0:
        raise ValueError(f"size должен быть кратен 8, получено {size}")
    try:
        family = TextureFamily(family)
    except ValueError:
        raise ValueError(f"Неподдерживаемое семейство текстур: {family}") from None

    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    if family == TextureFamily.PLAIN:
        base = rng.uniform(0.3, 0.7, size=3)
        image = base[:, None, None] + rng.normal(0.0, 0.02, size=(3, size, size))
    elif family == TextureFamily.WOOD_GRAIN:
        angle = rng.uniform(0.0, np.pi)
        freq = rng.uniform(0.25, 0.5)
        phase = rng.uniform(0.0, 2 * np.pi)
        u = xx * np.cos(angle) + yy * np.sin(angle)
        v = -xx * np.sin(angle) + yy * np.cos(angle)
        warp = 1.5 * np.sin(0.08 * v + rng.uniform(0.0, 2 * np.pi))
        grain = 0.5 + 0.5 * np.sin(freq * u + warp + phase)
        light = np.array([0.72, 0.52, 0.32]) + rng.uniform(-0.05, 0.05, size=3)
        dark = np.array([0.45, 0.28, 0.14]) + rng.uniform(-0.05, 0.05, size=3)
        image = dark[:, None, None] + (light - dark)[:, None, None] * grain[None]
        image = image + rng.normal(0.0, 0.02, size=(3, size, size))
    else:
        period = int(rng.choice([8, 16]))
        grout = int(rng.integers(1, 3))
        tile_color = rng.uniform(0.55, 0.85, size=3)
        grout_color = tile_color * rng.uniform(0.35, 0.55)
        offset_x, offset_y = rng.integers(0, period, size=2)
        is_grout = (((xx + offset_x) % period) < grout) | (((yy + offset_y) % period) < grout)
        image = np.where(is_grout[None], grout_color[:, None, None], tile_color[:, None, None])
        image = image + rng.normal(0.0, 0.015, size=(3, size, size))

    return torch.from_numpy(np.clip(image, 0.0, 1.0).astype(np.float32))


def _render_support(spec: DefectSpec, height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    """Возвращает (бинарная маска uint8, карта затенения внутри маски в [0.6, 1])."""
    mask = np.zeros((height, width), dtype=np.uint8)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    shade = np.ones((height, width), dtype=np.float64)

    if spec.kind == DefectKind.SCRATCH:
        x0, y0, x1, y1 = spec.line  # type: ignore[misc]
        cv2.line(mask, (x0, y0), (x1, y1), color=1, thickness=spec.width, lineType=cv2.LINE_8)
    elif spec.kind == DefectKind.HOLE:
        cx, cy = spec.center  # type: ignore[misc]
        dist2 = (xx - cx) ** 2 + (yy - cy) ** 2
        mask[dist2 <= spec.radius**2] = 1  # type: ignore[operator]
        shade = 1.0 - 0.4 * np.sqrt(dist2) / max(spec.radius or 1, 1)
    elif spec.kind == DefectKind.COLOR_BLOB:
        cx, cy = spec.center  # type: ignore[misc]
        r = spec.radius or 1
        noise = np.random.default_rng(spec.blob_seed).normal(size=(height, width)).astype(np.float32)
        noise = cv2.GaussianBlur(noise, (0, 0), sigmaX=max(r / 3.0, 1.0))
        dist = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
        field = (1.0 - dist / r) + 0.6 * noise / (np.abs(noise).max() + 1e-8)
        mask[(dist <= r) & (field > 0.3)] = 1
        mask[cy, cx] = 1
        shade = 0.6 + 0.4 * np.clip(field, 0.0, 1.0)
    else:
        x, y, w, h = spec.rect  # type: ignore[misc]
        mask[y : y + h, x : x + w] = 1
        along = (xx - x) / max(w, 1) if w >= h else (yy - y) / max(h, 1)
        shade = 0.8 + 0.2 * np.cos(2 * np.pi * np.clip(along, 0.0, 1.0) * 3)

    return mask, np.clip(shade, 0.6, 1.0)


def inject_defect(image: torch.Tensor, spec: DefectSpec) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Вставляет дефект. Изображение меняется только там, где маска = 1;
    средняя |разница| внутри маски не меньше DEFECT_FLOOR.
    """
    _, height, width = image.shape
    spec.check_bounds(height, width)
    support, shade = _render_support(spec, height, width)
    inside = support.astype(bool)
    if not inside.any():
        raise ValueError(f"Пустая маска дефекта {spec.kind.value}")

    src = image.numpy().astype(np.float64)
    mean_inside = src[:, inside].mean(axis=1)
    # тон дефекта противоположен среднему фону внутри маски
    if spec.kind == DefectKind.HOLE:
        tone = np.full(3, 0.05 if mean_inside.mean() > 0.3 else 0.95)
    elif spec.kind == DefectKind.SCRATCH:
        tone = np.full(3, 0.95 if mean_inside.mean() < 0.5 else 0.05)
    elif spec.kind == DefectKind.GLUE_STRIP:
        tone = np.where(mean_inside < 0.5, np.array([0.95, 0.9, 0.6]), np.array([0.25, 0.2, 0.05]))
    else:
        tone = np.where(mean_inside < 0.5, 0.9, 0.1)
        tone = np.roll(tone, spec.blob_seed % 3)
        tone = np.where(np.abs(tone - mean_inside) < 0.3, 1.0 - tone, tone)

    weight = shade[inside][None, :]
    contrast = np.mean(weight * np.abs(tone[:, None] - src[:, inside]))
    alpha = min(1.0, max(spec.intensity, _FLOOR_WITH_MARGIN / max(contrast, 1e-8)))

    out = src.copy()
    blend = alpha * weight
    out[:, inside] = (1.0 - blend) * src[:, inside] + blend * tone[:, None]

    result = torch.from_numpy(out.astype(np.float32))
    result[:, ~torch.from_numpy(inside)] = image[:, ~torch.from_numpy(inside)]
    return result, torch.from_numpy(support.astype(np.float32))[None]


def random_defect_spec(kind: DefectKind | str, size: int, seed: int, intensity_range=(0.5, 0.9)) -> DefectSpec:
    """
    Случайная геометрия дефекта, целиком внутри изображения size×size.
    На малых размерах отступ, длина и радиус ужимаются до размера изображения.
    """
    kind = DefectKind(kind)
    rng = np.random.default_rng(seed)
    intensity = float(rng.uniform(*intensity_range))
    margin = min(max(4, size // 16), size // 4)

    if kind == DefectKind.SCRATCH:
        max_length = size - 2 * margin
        length = rng.uniform(min(size * 0.2, max_length), min(size * 0.45, max_length))
        angle = rng.uniform(0.0, np.pi)
        cx, cy = rng.uniform(margin + length / 2, size - margin - length / 2, size=2)
        dx, dy = np.cos(angle) * length / 2, np.sin(angle) * length / 2
        line = tuple(int(round(v)) for v in (cx - dx, cy - dy, cx + dx, cy + dy))
        return DefectSpec(kind=kind, intensity=intensity, line=line, width=int(rng.integers(1, 4)))  # type: ignore[arg-type]
    if kind in (DefectKind.HOLE, DefectKind.COLOR_BLOB):
        low, high = (max(2, size // 20), max(3, size // 9)) if kind == DefectKind.HOLE else (
            max(3, size // 12),
            max(4, size // 6),
        )
        max_radius = (size - 4) // 2
        radius = int(rng.integers(min(low, max_radius), min(high, max_radius) + 1))
        cx, cy = (int(v) for v in rng.integers(radius + 1, size - radius - 1, size=2))
        return DefectSpec(
            kind=kind,
            intensity=intensity,
            center=(cx, cy),
            radius=radius,
            blob_seed=int(rng.integers(0, 2**31 - 1)),
        )
    long_side = int(rng.integers(size // 4, size // 2 + 1))
    short_side = int(rng.integers(max(2, size // 20), max(3, size // 10) + 1))
    w, h = (long_side, short_side) if rng.random() < 0.5 else (short_side, long_side)
    x = int(rng.integers(0, size - w))
    y = int(rng.integers(0, size - h))
    return DefectSpec(kind=kind, intensity=intensity, rect=(x, y, w, h))


def corpus_vocabulary() -> PromptVocabulary:
    return PromptVocabulary(prompts=list(DEFAULT_PROMPTS))


def build_corpus(config: CorpusConfig) -> Tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """
    Возвращает (paired, unpaired, good) манифесты в памяти.
    Сид каждой записи выводится из (config.seed, роль, индекс).
    """
    vocabulary = corpus_vocabulary()
    size = config.image_size

    good: List[SampleRecord] = []
    for index in range(config.counts.get(GOOD_LABEL, 0)):
        texture = generate_texture(config.texture, size, derive_seed(config.seed, 0, index))
        good.append(
            SampleRecord(
                record_id=f"good_{index:04d}",
                input_image=texture,
                target_image=texture,
                mask=torch.zeros(1, size, size),
                prompt=vocabulary.prompt(GOOD_PROMPT),
                pairing=Pairing.PAIRED,
                label=GOOD_LABEL,
            )
        )

    paired: List[SampleRecord] = []
    defect_only: List[SampleRecord] = []
    record_index = 0
    for kind_index, (kind, count) in enumerate(config.defect_counts.items()):
        prompt = vocabulary.prompt(prompt_for_kind(kind))
        for i in range(count):
            texture = generate_texture(config.texture, size, derive_seed(config.seed, 1, record_index))
            spec = random_defect_spec(
                kind, size, derive_seed(config.seed, 2, kind_index, i), config.intensity_range
            )
            defective, mask = inject_defect(texture, spec)
            record_id = f"{kind}_{i:04d}"
            paired.append(
                SampleRecord(
                    record_id=f"paired_{record_id}",
                    input_image=texture,
                    target_image=defective,
                    mask=mask,
                    prompt=prompt,
                    pairing=Pairing.PAIRED,
                    label=kind,
                )
            )
            defect_only.append(
                SampleRecord(
                    record_id=f"unpaired_{record_id}",
                    target_image=defective,
                    mask=mask,
                    prompt=prompt,
                    pairing=Pairing.MASK_ONLY,
                    label=kind,
                )
            )
            record_index += 1

    unpaired: List[SampleRecord] = []
    if defect_only:
        if good:
            clean_pool = [r.input_image for r in good]
        else:
            clean_pool = [
                generate_texture(config.texture, size, derive_seed(config.seed, 3, i))
                for i in range(len(defect_only))
            ]
        unpaired = make_unpaired_pairs(defect_only, clean_pool, derive_seed(config.seed, 4))  # type: ignore[arg-type]

    return (
        DatasetManifest(records=paired, seed=config.seed),
        DatasetManifest(records=unpaired, seed=config.seed),
        DatasetManifest(records=good, seed=config.seed),
    )


def write_corpus(config: CorpusConfig, out_dir: str | Path, verbose: bool = True) -> Dict[str, Path]:
    """Генерирует корпус и пишет PNG + три манифеста + prompts.txt."""
    out_dir = Path(out_dir)
    if verbose:
        print(f"📦 Генерация корпуса: {config.texture.value}, {config.image_size}px, seed={config.seed}")
    paired, unpaired, good = build_corpus(config)
    vocabulary = corpus_vocabulary()

    paths = {}
    for name, manifest in tqdm(
        (("paired", paired), ("unpaired", unpaired), ("good", good)),
        desc="Запись манифестов",
        disable=not verbose,
    ):
        paths[name] = write_manifest(manifest.records, out_dir, f"{name}.manifest", vocabulary=vocabulary)

    if verbose:
        print(f"✅ Корпус записан: paired={len(paired)}, unpaired={len(unpaired)}, good={len(good)}")
        print(f"📁 Результаты: {out_dir}")
    return paths
