from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, computed_field, model_validator

GOOD_LABEL = "good"
STRATEGIES = ("D_S", "D_S_AUG", "CAS", "NAS")
METRIC_NAMES = ("precision", "recall", "accuracy", "mask_iou")


class Pairing(str, Enum):
    PAIRED = "paired"
    UNPAIRED = "unpaired"
    MASK_ONLY = "mask_only"


class Split(str, Enum):
    TRAIN = "train"
    TEST = "test"
    UNSPLIT = "unsplit"


class Provenance(str, Enum):
    REAL = "real"
    SYNTHETIC = "synthetic"


class Prompt(BaseModel):
    model_config = ConfigDict(frozen=True)

    text: str = Field(..., min_length=1, description="Текст промпта, например 'add scratch'")
    prompt_id: int = Field(..., ge=0, description="Индекс в словаре промптов")


class PromptVocabulary(BaseModel):
    """Закрытый упорядоченный словарь промптов; индекс строки = prompt_id."""

    model_config = ConfigDict(frozen=True)

    prompts: List[str] = Field(..., min_length=1)

    @model_validator(mode="after")
    def _unique(self) -> "PromptVocabulary":
        if len(set(self.prompts)) != len(self.prompts):
            raise ValueError("Промпты в словаре должны быть уникальны")
        if any(not p for p in self.prompts):
            raise ValueError("Пустой промпт в словаре")
        return self

    def __len__(self) -> int:
        return len(self.prompts)

    def __contains__(self, text: object) -> bool:
        return text in self.prompts

    def prompt(self, text: str) -> Prompt:
        if text not in self.prompts:
            raise KeyError(f"Промпт отсутствует в словаре: '{text}'")
        return Prompt(text=text, prompt_id=self.prompts.index(text))

    def extended(self, texts: List[str]) -> "PromptVocabulary":
        extra = [t for t in texts if t not in self.prompts]
        return PromptVocabulary(prompts=[*self.prompts, *dict.fromkeys(extra)])


class SampleRecord(BaseModel):
    """
    Единица обучения/оценки.

    Изображения хранятся как тензоры (3, H, W) float32 в диапазоне хранения [0, 1],
    маска как (1, H, W) со значениями {0, 1}. Пути заполнены, если запись
    загружена из манифеста или уже записана на диск.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    record_id: str
    input_image: Optional[torch.Tensor] = None
    mask: torch.Tensor
    prompt: Prompt
    target_image: Optional[torch.Tensor] = None
    pairing: Pairing
    label: str = Field(..., min_length=1)
    provenance: Provenance = Provenance.REAL
    input_path: Optional[Path] = None
    mask_path: Optional[Path] = None
    target_path: Optional[Path] = None

    @property
    def is_defect(self) -> bool:
        return self.label != GOOD_LABEL

    @property
    def display_image(self) -> torch.Tensor:
        """Изображение, которое видит downstream-модель и FID: цель, иначе вход."""
        image = self.target_image if self.target_image is not None else self.input_image
        if image is None:
            raise ValueError(f"Запись {self.record_id} не содержит изображений")
        return image


class DatasetManifest(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    records: List[SampleRecord] = Field(default_factory=list)
    split: Split = Split.UNSPLIT
    seed: int = 0
    source: Optional[Path] = Field(default=None, description="Файл, из которого загружен манифест")

    @model_validator(mode="after")
    def _unique_ids(self) -> "DatasetManifest":
        seen = set()
        for record in self.records:
            if record.record_id in seen:
                raise ValueError(f"Повторяющийся id записи: {record.record_id}")
            seen.add(record.record_id)
        return self

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> List[str]:
        return [r.label for r in self.records]


class ValidationResult(BaseModel):
    valid: bool
    reason: Optional[str] = Field(default=None, description="Первый нарушенный инвариант")

    @classmethod
    def ok(cls) -> "ValidationResult":
        return cls(valid=True)

    @classmethod
    def fail(cls, reason: str) -> "ValidationResult":
        return cls(valid=False, reason=reason)


class LossBreakdown(BaseModel):
    adv: float
    rec: float
    lpips: float
    promptsim: Optional[float] = None
    total: float
    weights: Dict[str, float] = Field(default_factory=dict, description="Использованные λ")
    disc: Optional[float] = Field(default=None, description="Лосс дискриминатора на этом шаге")
    grad_norm: Optional[float] = Field(default=None, description="Норма градиента до клиппинга")


class FeatureStats(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    mean: np.ndarray
    cov: np.ndarray
    n: int = Field(..., ge=1)

    @computed_field  # type: ignore[misc]
    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])


class FidResult(BaseModel):
    fid: float = Field(..., ge=0.0)
    n_real: int
    n_generated: int


class DownstreamMetrics(BaseModel):
    precision: float = Field(..., ge=0.0, le=1.0)
    recall: float = Field(..., ge=0.0, le=1.0)
    accuracy: float = Field(..., ge=0.0, le=1.0)
    mask_iou: float = Field(..., ge=0.0, le=1.0)
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def as_dict(self) -> Dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}


class EvalReport(BaseModel):
    fid: Optional[float] = Field(default=None, ge=0.0)
    strategies: Dict[str, DownstreamMetrics] = Field(
        default_factory=dict, description="Медианные метрики по стратегиям D_S, D_S_AUG, CAS, NAS"
    )
    per_seed: Dict[str, List[DownstreamMetrics]] = Field(default_factory=dict)
    seeds: List[int] = Field(default_factory=list)
    counts: Dict[str, int] = Field(default_factory=dict, description="Размеры обучающих наборов")


class GenerationResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    record_id: str
    success: bool = True
    error: Optional[str] = None
    record: Optional[SampleRecord] = None
