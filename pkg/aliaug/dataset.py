"""
Операции над наборами данных: валидация записей, разбиение train/test,
сборка непарных пар и классическая аугментация (flip / поворот на k·90° / jitter).
"""

import math
from collections import defaultdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torchvision.transforms.functional as TF
from pydantic import BaseModel, Field
from torch.utils.data import Dataset

from .models import DatasetManifest, Pairing, SampleRecord, Split, ValidationResult


def to_model_range(image: torch.Tensor) -> torch.Tensor:
    return image * 2.0 - 1.0


def to_storage_range(image: torch.Tensor) -> torch.Tensor:
    return ((image + 1.0) / 2.0).clamp(0.0, 1.0)


def _check_image(image: torch.Tensor, name: str) -> Optional[str]:
    if image.ndim != 3 or image.shape[0] != 3:
        return f"{name} must have shape (3, H, W)"
    if not torch.isfinite(image).all():
        return f"{name} must be finite"
    if image.min() < 0.0 or image.max() > 1.0:
        return f"{name} values must lie in [0, 1]"
    if image.shape[1] % 8 != 0 or image.shape[2] % 8 != 0:
        return f"{name} dims must be multiples of 8"
    return None


def validate_record(record: SampleRecord) -> ValidationResult:
    """Принимает запись тогда и только тогда, когда выполнены инварианты SampleRecord."""
    if record.pairing == Pairing.PAIRED:
        if record.input_image is None:
            return ValidationResult.fail("paired requires input")
        if record.target_image is None:
            return ValidationResult.fail("paired requires target")
    elif record.pairing == Pairing.UNPAIRED:
        if record.input_image is None:
            return ValidationResult.fail("unpaired requires input")
        if record.target_image is None:
            return ValidationResult.fail("unpaired requires target")
    elif record.input_image is not None:
        return ValidationResult.fail("mask_only forbids input")

    mask = record.mask
    if mask.ndim != 3 or mask.shape[0] != 1:
        return ValidationResult.fail("mask must have shape (1, H, W)")
    if not torch.all((mask == 0) | (mask == 1)):
        return ValidationResult.fail("mask must be binary")

    for name, image in (("input", record.input_image), ("target", record.target_image)):
        if image is None:
            continue
        problem = _check_image(image, name)
        if problem:
            return ValidationResult.fail(problem)
        if image.shape[1:] != mask.shape[1:]:
            return ValidationResult.fail("shape mismatch")

    if mask.shape[1] % 8 != 0 or mask.shape[2] % 8 != 0:
        return ValidationResult.fail("mask dims must be multiples of 8")
    if record.is_defect and not bool(mask.any()):
        return ValidationResult.fail("defect mask must be nonempty")
    return ValidationResult.ok()


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def split_dataset(
    manifest: DatasetManifest, train_fraction: float, seed: int
) -> Tuple[DatasetManifest, DatasetManifest]:
    """
    Детерминированное разбиение на train/test.

    |train| = round(train_fraction · N). При двух и более классах разбиение
    стратифицировано по метке: каждый класс получает floor(f·n_c) записей,
    оставшиеся места распределяются по наибольшей дробной части.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction должен быть в (0, 1), получено {train_fraction}")
    if len(manifest) == 0:
        raise ValueError("Нельзя разбить пустой манифест")

    rng = np.random.default_rng(seed)
    n_train = _round_half_up(train_fraction * len(manifest))

    groups: Dict[str, List[int]] = defaultdict(list)
    for index, record in enumerate(manifest.records):
        groups[record.label].append(index)
    labels = sorted(groups)

    shuffled = {label: [groups[label][i] for i in rng.permutation(len(groups[label]))] for label in labels}

    if len(labels) < 2:
        quotas = {labels[0]: n_train}
    else:
        exact = {label: train_fraction * len(groups[label]) for label in labels}
        quotas = {label: math.floor(exact[label]) for label in labels}
        remaining = n_train - sum(quotas.values())
        by_fraction = sorted(labels, key=lambda lb: (-(exact[lb] - quotas[lb]), lb))
        for label in by_fraction[:remaining]:
            quotas[label] += 1

    train_idx: List[int] = []
    test_idx: List[int] = []
    for label in labels:
        train_idx.extend(shuffled[label][: quotas[label]])
        test_idx.extend(shuffled[label][quotas[label] :])

    train_idx = [train_idx[i] for i in rng.permutation(len(train_idx))]
    test_idx = [test_idx[i] for i in rng.permutation(len(test_idx))]

    def _subset(indices: List[int], split: Split) -> DatasetManifest:
        return DatasetManifest(
            records=[manifest.records[i] for i in indices],
            split=split,
            seed=seed,
            source=manifest.source,
        )

    return _subset(train_idx, Split.TRAIN), _subset(test_idx, Split.TEST)


def make_unpaired_pairs(
    defect_records: Sequence[SampleRecord], clean_images: Sequence[torch.Tensor], seed: int
) -> List[SampleRecord]:
    """Каждой дефектной записи назначается случайное (по сиду) чистое изображение как вход."""
    if not defect_records:
        raise ValueError("Список дефектных записей пуст")
    if not clean_images:
        raise ValueError("Список чистых изображений пуст")

    rng = np.random.default_rng(seed)
    choices = rng.integers(0, len(clean_images), size=len(defect_records))

    paired: List[SampleRecord] = []
    for record, choice in zip(defect_records, choices, strict=True):
        if record.target_image is None:
            raise ValueError(f"Запись {record.record_id} без целевого изображения")
        clean = clean_images[int(choice)]
        if clean.shape != record.target_image.shape:
            raise ValueError(
                f"Размер чистого изображения {tuple(clean.shape)} не совпадает с "
                f"{tuple(record.target_image.shape)} ({record.record_id})"
            )
        paired.append(
            record.model_copy(
                update={"input_image": clean, "input_path": None, "pairing": Pairing.UNPAIRED}
            )
        )
    return paired


class AugmentPlan(BaseModel):
    flip: bool = False
    rotations: int = Field(default=0, ge=0, le=3, description="Поворот на rotations·90°")
    brightness: float = Field(default=1.0, ge=0.9, le=1.1)
    contrast: float = Field(default=1.0, ge=0.9, le=1.1)

    @property
    def jitter(self) -> bool:
        return self.brightness != 1.0 or self.contrast != 1.0


def draw_augment_plan(seed: int, allow_jitter: bool = True) -> AugmentPlan:
    rng = np.random.default_rng(seed)
    flip = bool(rng.random() < 0.5)
    rotations = int(rng.integers(1, 4)) if rng.random() < 0.5 else 0
    brightness, contrast = 1.0, 1.0
    if rng.random() < 0.5:
        brightness = float(rng.uniform(0.9, 1.1))
        contrast = float(rng.uniform(0.9, 1.1))
    if not allow_jitter:
        brightness, contrast = 1.0, 1.0
    return AugmentPlan(flip=flip, rotations=rotations, brightness=brightness, contrast=contrast)


def _geometric(tensor: torch.Tensor, plan: AugmentPlan) -> torch.Tensor:
    if plan.flip:
        tensor = TF.hflip(tensor)
    if plan.rotations:
        tensor = torch.rot90(tensor, k=plan.rotations, dims=(-2, -1))
    return tensor


def _jitter(image: torch.Tensor, plan: AugmentPlan) -> torch.Tensor:
    if plan.brightness != 1.0:
        image = TF.adjust_brightness(image, plan.brightness)
    if plan.contrast != 1.0:
        image = TF.adjust_contrast(image, plan.contrast)
    return image.clamp(0.0, 1.0)


def apply_augment_plan(
    plan: AugmentPlan, images: Sequence[Optional[torch.Tensor]], mask: torch.Tensor
) -> Tuple[List[Optional[torch.Tensor]], torch.Tensor]:
    """
    Геометрия применяется одинаково ко всем изображениям и маске; jitter
    только к изображениям (маска остается бинарной).
    """
    out: List[Optional[torch.Tensor]] = []
    for image in images:
        if image is None:
            out.append(None)
            continue
        image = _geometric(image, plan)
        if plan.jitter:
            image = _jitter(image, plan)
        out.append(image.contiguous())
    return out, _geometric(mask, plan).contiguous()


def basic_augment(
    image: torch.Tensor, mask: torch.Tensor, seed: int, allow_jitter: bool = True
) -> Tuple[torch.Tensor, torch.Tensor]:
    plan = draw_augment_plan(seed, allow_jitter=allow_jitter)
    (augmented,), new_mask = apply_augment_plan(plan, [image], mask)
    assert augmented is not None
    return augmented, new_mask


def augment_record(record: SampleRecord, seed: int, allow_jitter: bool = True) -> SampleRecord:
    plan = draw_augment_plan(seed, allow_jitter=allow_jitter)
    (inp, tgt), mask = apply_augment_plan(plan, [record.input_image, record.target_image], record.mask)
    return record.model_copy(update={"input_image": inp, "target_image": tgt, "mask": mask})


def resized_crop(
    image: torch.Tensor, size: int, seed: Optional[int] = None, is_mask: bool = False
) -> torch.Tensor:
    """resized_crop_<size>: короткая сторона → size, затем центральный (или по сиду) кроп."""
    height, width = image.shape[-2:]
    if (height, width) == (size, size):
        return image
    interpolation = TF.InterpolationMode.NEAREST if is_mask else TF.InterpolationMode.BILINEAR
    image = TF.resize(image, [size], interpolation=interpolation, antialias=not is_mask)
    height, width = image.shape[-2:]
    if seed is None:
        return TF.center_crop(image, [size, size])
    rng = np.random.default_rng(seed)
    top = int(rng.integers(0, height - size + 1))
    left = int(rng.integers(0, width - size + 1))
    return TF.crop(image, top, left, size, size)


def prepare_record(record: SampleRecord, size: int, seed: Optional[int] = None) -> SampleRecord:
    """Приводит все изображения записи к size×size одним и тем же кропом."""
    if record.mask.shape[-2:] == (size, size):
        return record
    return record.model_copy(
        update={
            "input_image": None
            if record.input_image is None
            else resized_crop(record.input_image, size, seed).clamp(0.0, 1.0),
            "target_image": None
            if record.target_image is None
            else resized_crop(record.target_image, size, seed).clamp(0.0, 1.0),
            "mask": resized_crop(record.mask, size, seed, is_mask=True),
        }
    )


class RecordDataset(Dataset):
    """
    Обертка над записями для обучения: отдает словари тензоров в диапазоне модели.
    Отсутствующий вход заменяется нулями и флагом has_input=False.
    """

    def __init__(
        self,
        records: Sequence[SampleRecord],
        image_size: int,
        augment: bool = False,
        seed: int = 0,
    ):
        if not records:
            raise ValueError("RecordDataset: нет записей")
        self.records = list(records)
        self.image_size = image_size
        self.augment = augment
        self.seed = seed

    def __len__(self) -> int:
        return len(self.records)

    def item(self, index: int, augment_seed: Optional[int] = None) -> Dict[str, torch.Tensor]:
        record = prepare_record(self.records[index], self.image_size, augment_seed)
        if self.augment and augment_seed is not None:
            record = augment_record(record, augment_seed)
        if record.target_image is None:
            raise ValueError(f"Запись {record.record_id} без цели не подходит для обучения")
        has_input = record.input_image is not None
        input_image = record.input_image if has_input else torch.zeros_like(record.target_image)
        return {
            "input": to_model_range(input_image),
            "mask": record.mask,
            "target": to_model_range(record.target_image),
            "prompt_id": torch.tensor(record.prompt.prompt_id, dtype=torch.long),
            "has_input": torch.tensor(has_input),
            "mask_only": torch.tensor(record.pairing == Pairing.MASK_ONLY),
        }

    def __getitem__(self, index: int) -> Dict[str, torch.Tensor]:
        return self.item(index)
