import hashlib
import json
import os
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np
import torch

from . import __version__
from .config import DEFAULT_PROMPTS, prompt_for_kind
from .dataset import validate_record
from .exceptions import ManifestError
from .models import (
    GOOD_LABEL,
    DatasetManifest,
    Pairing,
    PromptVocabulary,
    Provenance,
    SampleRecord,
    Split,
)

MANIFEST_KEYS = ("id", "input", "mask", "target", "prompt", "label", "pairing")
IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
VOCABULARY_FILENAME = "prompts.txt"
METADATA_FILENAME = "run_metadata.json"


def cache_dir() -> Path:
    path = Path(os.getenv("ALIAUG_CACHE_DIR", ".aliaug_cache"))
    path.mkdir(parents=True, exist_ok=True)
    return path


def read_image(path: str | Path) -> torch.Tensor:
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise ValueError(f"Не удалось прочитать изображение: {path}")
    img = cv2.cvtColor(img, cv2.COLOR_BGR2RGB)
    return torch.from_numpy(img).permute(2, 0, 1).float().div(255.0).contiguous()


def read_mask(path: str | Path) -> torch.Tensor:
    """Маска без порога: значения 0/255 дают {0, 1}, прочие остаются дробными."""
    mask = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if mask is None:
        raise ValueError(f"Не удалось прочитать маску: {path}")
    return torch.from_numpy(mask).float().div(255.0).unsqueeze(0).contiguous()


def _to_uint8(tensor: torch.Tensor) -> np.ndarray:
    array = tensor.detach().cpu().clamp(0.0, 1.0).mul(255.0).round().to(torch.uint8)
    return array.permute(1, 2, 0).numpy()


def write_image(image: torch.Tensor, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), cv2.cvtColor(_to_uint8(image), cv2.COLOR_RGB2BGR)):
        raise OSError(f"Не удалось записать изображение: {path}")
    return path


def write_mask(mask: torch.Tensor, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), _to_uint8(mask)[:, :, 0]):
        raise OSError(f"Не удалось записать маску: {path}")
    return path


def load_vocabulary(path: str | Path) -> PromptVocabulary:
    lines = [line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines()]
    return PromptVocabulary(prompts=[line for line in lines if line])


def write_vocabulary(vocabulary: PromptVocabulary, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(vocabulary.prompts) + "\n", encoding="utf-8")
    return path


def vocabulary_for(manifest_path: Path) -> PromptVocabulary:
    candidate = manifest_path.parent / VOCABULARY_FILENAME
    if candidate.exists():
        return load_vocabulary(candidate)
    return PromptVocabulary(prompts=list(DEFAULT_PROMPTS))


def load_manifest(
    path: str | Path, vocabulary: Optional[PromptVocabulary] = None
) -> DatasetManifest:
    """
    Загружает построчный JSON-манифест.

    Пути в записях относительны директории манифеста. Каждая запись проходит
    validate_record; порядок записей совпадает с порядком строк.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"Манифест не найден: {path}")
    if vocabulary is None:
        vocabulary = vocabulary_for(path)

    root = path.parent
    lines = path.read_text(encoding="utf-8").splitlines()
    if not any(line.strip() for line in lines):
        raise ManifestError(f"empty manifest: {path}")

    def _resolve(value: Optional[str], lineno: int) -> Optional[Path]:
        if value is None:
            return None
        file_path = (root / value).resolve()
        if not file_path.exists():
            raise ManifestError(f"{path}:{lineno}: файл не найден: {file_path}")
        return file_path

    records: List[SampleRecord] = []
    seen = set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
        except json.JSONDecodeError as e:
            raise ManifestError(f"{path}:{lineno}: malformed line ({e.msg})") from None
        if not isinstance(entry, dict):
            raise ManifestError(f"{path}:{lineno}: malformed line (ожидался объект)")
        missing = [key for key in ("id", "mask", "prompt", "label", "pairing") if key not in entry]
        if missing:
            raise ManifestError(f"{path}:{lineno}: malformed line (нет ключей {missing})")
        if entry["id"] in seen:
            raise ManifestError(f"{path}:{lineno}: повторяющийся id {entry['id']}")
        seen.add(entry["id"])

        input_path = _resolve(entry.get("input"), lineno)
        mask_path = _resolve(entry["mask"], lineno)
        target_path = _resolve(entry.get("target"), lineno)
        try:
            prompt = vocabulary.prompt(entry["prompt"])
            pairing = Pairing(entry["pairing"])
            provenance = Provenance(entry.get("provenance", Provenance.REAL.value))
        except (KeyError, ValueError) as e:
            raise ManifestError(f"{path}:{lineno}: malformed line ({e})") from None

        record = SampleRecord(
            record_id=str(entry["id"]),
            input_image=None if input_path is None else read_image(input_path),
            mask=read_mask(mask_path),  # type: ignore[arg-type]
            prompt=prompt,
            target_image=None if target_path is None else read_image(target_path),
            pairing=pairing,
            label=str(entry["label"]),
            provenance=provenance,
            input_path=input_path,
            mask_path=mask_path,
            target_path=target_path,
        )
        result = validate_record(record)
        if not result.valid:
            raise ManifestError(f"{path}:{lineno}: запись {record.record_id}: {result.reason}")
        records.append(record)

    return DatasetManifest(records=records, split=Split.UNSPLIT, source=path)


def _relative(path: Path, root: Path) -> str:
    return Path(os.path.relpath(path.resolve(), root.resolve())).as_posix()


def write_manifest(
    records: Sequence[SampleRecord],
    out_dir: str | Path,
    name: str,
    vocabulary: Optional[PromptVocabulary] = None,
) -> Path:
    """
    Пишет PNG-файлы записей в out_dir/images и манифест out_dir/<name>.
    Изображения, уже лежащие на диске, не копируются: манифест ссылается на них.
    """
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)

    lines = []
    for record in records:
        entry: Dict[str, Optional[str]] = {
            "id": record.record_id,
            "prompt": record.prompt.text,
            "label": record.label,
            "pairing": record.pairing.value,
            "provenance": record.provenance.value,
        }
        for key, image, existing, writer in (
            ("input", record.input_image, record.input_path, write_image),
            ("mask", record.mask, record.mask_path, write_mask),
            ("target", record.target_image, record.target_path, write_image),
        ):
            if image is None:
                entry[key] = None
                continue
            if existing is not None and Path(existing).exists():
                entry[key] = _relative(Path(existing), out_dir)
            else:
                file_path = writer(image, images_dir / f"{record.record_id}_{key}.png")
                entry[key] = _relative(file_path, out_dir)
        lines.append(json.dumps(entry, sort_keys=True, ensure_ascii=False))

    manifest_path = out_dir / name
    manifest_path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    if vocabulary is not None:
        write_vocabulary(vocabulary, out_dir / VOCABULARY_FILENAME)
    return manifest_path


def _resize(tensor: torch.Tensor, size: int, is_mask: bool) -> torch.Tensor:
    array = tensor.permute(1, 2, 0).numpy()
    interpolation = cv2.INTER_NEAREST if is_mask else cv2.INTER_AREA
    resized = cv2.resize(array, (size, size), interpolation=interpolation)
    if resized.ndim == 2:
        resized = resized[:, :, None]
    return torch.from_numpy(np.ascontiguousarray(resized)).permute(2, 0, 1).contiguous()


def _list_images(directory: Path) -> List[Path]:
    if not directory.exists():
        return []
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)


def import_mvtec(
    root: str | Path,
    category: str,
    image_size: int = 64,
    vocabulary: Optional[PromptVocabulary] = None,
) -> Tuple[List[SampleRecord], List[SampleRecord], PromptVocabulary]:
    """
    Импорт каталога в раскладке MVTec AD:

        <root>/<category>/train/good/*.png
        <root>/<category>/test/<defect>/*.png
        <root>/<category>/ground_truth/<defect>/<name>_mask.png

    Возвращает (дефектные записи mask_only с целью, good-записи, словарь).
    Маски бинаризуются по порогу 127, изображения масштабируются до image_size.
    """
    base = Path(root) / category
    if not base.exists():
        raise ManifestError(f"Категория MVTec не найдена: {base}")
    if vocabulary is None:
        vocabulary = PromptVocabulary(prompts=list(DEFAULT_PROMPTS))

    test_dir = base / "test"
    defect_kinds = sorted(
        d.name for d in test_dir.iterdir() if d.is_dir() and d.name != GOOD_LABEL
    ) if test_dir.exists() else []
    vocabulary = vocabulary.extended([prompt_for_kind(kind) for kind in defect_kinds])
    good_prompt = vocabulary.prompt(DEFAULT_PROMPTS[-1])

    goods: List[SampleRecord] = []
    good_paths = _list_images(base / "train" / GOOD_LABEL) + _list_images(test_dir / GOOD_LABEL)
    for index, image_path in enumerate(good_paths):
        image = _resize(read_image(image_path), image_size, is_mask=False).clamp(0.0, 1.0)
        goods.append(
            SampleRecord(
                record_id=f"{category}_good_{index:04d}",
                input_image=image,
                target_image=image,
                mask=torch.zeros(1, image_size, image_size),
                prompt=good_prompt,
                pairing=Pairing.PAIRED,
                label=GOOD_LABEL,
            )
        )

    defects: List[SampleRecord] = []
    for kind in defect_kinds:
        prompt = vocabulary.prompt(prompt_for_kind(kind))
        for image_path in _list_images(test_dir / kind):
            mask_path = base / "ground_truth" / kind / f"{image_path.stem}_mask.png"
            if not mask_path.exists():
                print(f"⚠️  Нет маски для {image_path}, пропуск")
                continue
            mask = (_resize(read_mask(mask_path), image_size, is_mask=True) > 0.5).float()
            if not mask.any():
                print(f"⚠️  Пустая маска после масштабирования: {mask_path}, пропуск")
                continue
            defects.append(
                SampleRecord(
                    record_id=f"{category}_{kind}_{image_path.stem}",
                    target_image=_resize(read_image(image_path), image_size, is_mask=False).clamp(0.0, 1.0),
                    mask=mask,
                    prompt=prompt,
                    pairing=Pairing.MASK_ONLY,
                    label=kind,
                )
            )
    return defects, goods, vocabulary


def file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class RunStorage:
    """Директория запуска подкоманды: выходные файлы плюс run_metadata.json."""

    def __init__(self, out_dir: Optional[str | Path] = None):
        if out_dir is None:
            out_dir = os.getenv("ALIAUG_OUT_DIR", "runs")
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def path(self, *parts: str) -> Path:
        path = self.out_dir.joinpath(*parts)
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def content_hashes(self) -> Dict[str, str]:
        hashes = {}
        for file_path in sorted(self.out_dir.rglob("*")):
            if file_path.is_file() and file_path.name != METADATA_FILENAME:
                hashes[_relative(file_path, self.out_dir)] = file_sha256(file_path)
        return hashes

    def write_metadata(self, command: str, config: Optional[Dict] = None, seed: Optional[int] = None) -> Path:
        metadata = {
            "command": command,
            "seed": seed,
            "config": config or {},
            "version": __version__,
            "created_at": datetime.now().isoformat(),
            "content_hashes": self.content_hashes(),
        }
        path = self.out_dir / METADATA_FILENAME
        with open(path, "w") as f:
            json.dump(metadata, f, indent=2, ensure_ascii=False, default=str)
        return path

    def load_metadata(self) -> Optional[Dict]:
        path = self.out_dir / METADATA_FILENAME
        if not path.exists():
            return None
        with open(path, "r") as f:
            return json.load(f)  # type: ignore[no-any-return]
