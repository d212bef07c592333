import os
import random
from enum import Enum
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Type, TypeVar

import numpy as np
import torch
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .exceptions import ConfigError

DEFECT_KINDS = ("scratch", "hole", "color_blob", "glue_strip")
GOOD_PROMPT = "no defect"
UNKNOWN_PROMPT = "<unknown>"

DEFAULT_TIMESTEP = int(os.getenv("ALIAUG_TIMESTEP", "999"))
DEFAULT_IMAGE_SIZE = int(os.getenv("ALIAUG_IMAGE_SIZE", "64"))


def prompt_for_kind(kind: str) -> str:
    return f"add {kind.replace('_', ' ')}"


DEFAULT_PROMPTS: List[str] = [prompt_for_kind(kind) for kind in DEFECT_KINDS] + [GOOD_PROMPT]


class TextureFamily(str, Enum):
    WOOD_GRAIN = "wood_grain"
    TILE = "tile"
    PLAIN = "plain"


class CorpusConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    image_size: int = Field(default=DEFAULT_IMAGE_SIZE, gt=0, description="H = W, кратно 8")
    counts: Dict[str, int] = Field(
        default_factory=lambda: {"good": 10, "scratch": 5, "hole": 5},
        description="Число записей на класс: good и виды дефектов",
    )
    texture: TextureFamily = TextureFamily.WOOD_GRAIN
    seed: int = 0
    intensity_range: Tuple[float, float] = (0.5, 0.9)

    @field_validator("image_size")
    @classmethod
    def _multiple_of_8(cls, value: int) -> int:
        if value % 8 != 0:
            raise ValueError(f"image_size должен быть кратен 8, получено {value}")
        return value

    @field_validator("counts")
    @classmethod
    def _valid_counts(cls, value: Dict[str, int]) -> Dict[str, int]:
        allowed = {"good", *DEFECT_KINDS}
        for key, count in value.items():
            if key not in allowed:
                raise ValueError(f"Неизвестный класс в counts: {key}")
            if count < 0:
                raise ValueError(f"counts[{key}] должен быть >= 0")
        if sum(value.values()) == 0:
            raise ValueError("Нужен хотя бы один ненулевой счетчик в counts")
        return value

    @property
    def defect_counts(self) -> Dict[str, int]:
        return {kind: self.counts.get(kind, 0) for kind in DEFECT_KINDS if self.counts.get(kind, 0)}


class CodecConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    channels: Tuple[int, int, int] = (32, 64, 128)
    latent_channels: int = 4
    lora_rank: int = 4
    lora_alpha: Optional[float] = None
    norm_groups: int = 8


class UNetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    channels: Tuple[int, int] = (64, 128)
    heads: int = 4
    d_ctx: int = 64
    prompt_len: int = 4
    d_t: int = 64
    timestep: int = Field(default=DEFAULT_TIMESTEP, ge=0, lt=1000)
    lora_rank: int = 8
    lora_alpha: Optional[float] = None
    norm_groups: int = 8


class ModelConfig(BaseModel):
    """Архитектура генератора; замороженная база инициализируется из base_seed."""

    model_config = ConfigDict(extra="forbid")

    image_size: int = DEFAULT_IMAGE_SIZE
    codec: CodecConfig = Field(default_factory=CodecConfig)
    unet: UNetConfig = Field(default_factory=UNetConfig)
    vocabulary: List[str] = Field(default_factory=lambda: list(DEFAULT_PROMPTS))
    base_seed: int = 0
    disc_channels: Tuple[int, int, int] = (32, 64, 128)
    feature_channels: Tuple[int, int, int] = (16, 32, 64)
    feature_seed: int = 1234


class GeneratorConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    drop_prob: float = Field(default=0.25, ge=0.0, lt=0.3)
    timestep: int = Field(default=DEFAULT_TIMESTEP, ge=0, lt=1000)
    mode: Literal["train", "eval"] = "eval"


class LossWeights(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lambda_gan: float = 2.5
    lambda_l2: float = 10.0
    lambda_lpips: float = 10.0
    lambda_clipsim: float = 5.0
    use_promptsim: bool = False


class TrainConfig(BaseModel):
    """
    Плоская конфигурация обучения. Ключи повторяют таблицу гиперпараметров
    в snake_case; значения по умолчанию совпадают с ней.
    """

    model_config = ConfigDict(extra="forbid")

    # Лоссы
    gan_disc_type: Literal["multilevel_conv"] = "multilevel_conv"
    gan_loss_type: Literal["multilevel_sigmoid_s", "multilevel_hinge"] = "multilevel_sigmoid_s"
    lambda_gan: float = Field(default=2.5, ge=0.0)
    lambda_lpips: float = Field(default=10.0, ge=0.0)
    lambda_l2: float = Field(default=10.0, ge=0.0)
    lambda_clipsim: float = Field(default=5.0, ge=0.0)
    use_promptsim: bool = False

    # Данные
    train_image_prep: str = "resized_crop_64"
    test_image_prep: str = "resized_crop_64"
    image_size: int = DEFAULT_IMAGE_SIZE

    # Расписание
    eval_frequency: int = Field(default=100, gt=0)
    num_samples_eval: int = Field(default=100, gt=0)
    viz_frequency: int = Field(default=100, gt=0)
    lora_rank_unet: int = Field(default=8, ge=1)
    lora_rank_vae: int = Field(default=4, ge=1)
    batch_size: int = Field(default=1, gt=0)
    num_training_epochs: int = Field(default=10000, gt=0)
    max_steps: int = Field(default=10000, gt=0)
    checkpointing_steps: int = Field(default=500, gt=0)
    gradient_accumulation_steps: int = Field(default=1, gt=0)

    # Оптимизатор
    learning_rate: float = Field(default=5e-4, gt=0.0)
    lr_scheduler: Literal["constant", "cosine_with_restarts"] = "constant"
    warmup_steps: int = Field(default=500, ge=0)
    lr_num_cycles: int = Field(default=1, ge=1)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_weight_decay: float = 1e-2
    max_grad_norm: float = Field(default=1.0, gt=0.0)

    # Генератор
    drop_prob: float = Field(default=0.25, ge=0.0, lt=0.3)
    timestep: int = Field(default=DEFAULT_TIMESTEP, ge=0, lt=1000)

    report_to: Literal["tensorboard", "none"] = "tensorboard"
    seed: int = 42

    @field_validator("train_image_prep", "test_image_prep")
    @classmethod
    def _known_prep(cls, value: str) -> str:
        if not value.startswith("resized_crop_") or not value.rsplit("_", 1)[1].isdigit():
            raise ValueError(f"Неподдерживаемая подготовка изображений: {value}")
        return value

    @model_validator(mode="after")
    def _check_consistency(self) -> "TrainConfig":
        if self.image_size % 8 != 0:
            raise ValueError(f"image_size должен быть кратен 8, получено {self.image_size}")
        for prep in (self.train_image_prep, self.test_image_prep):
            if int(prep.rsplit("_", 1)[1]) != self.image_size:
                raise ValueError(f"{prep} не совпадает с image_size={self.image_size}")
        if self.lr_scheduler == "constant" and self.lr_num_cycles != 1:
            raise ValueError("lr_num_cycles > 1 допустим только с lr_scheduler=cosine_with_restarts")
        return self

    @property
    def train_size(self) -> int:
        return int(self.train_image_prep.rsplit("_", 1)[1])

    @property
    def eval_size(self) -> int:
        """Размер, к которому test_image_prep приводит записи оценки."""
        return int(self.test_image_prep.rsplit("_", 1)[1])

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            lambda_gan=self.lambda_gan,
            lambda_l2=self.lambda_l2,
            lambda_lpips=self.lambda_lpips,
            lambda_clipsim=self.lambda_clipsim,
            use_promptsim=self.use_promptsim,
        )

    def generator_config(self, mode: Literal["train", "eval"] = "train") -> GeneratorConfig:
        return GeneratorConfig(drop_prob=self.drop_prob, timestep=self.timestep, mode=mode)

    def build_model_config(self, vocabulary: Optional[List[str]] = None) -> ModelConfig:
        """Собирает ModelConfig с рангами LoRA из этой конфигурации."""
        config = ModelConfig(
            image_size=self.image_size,
            codec=CodecConfig(lora_rank=self.lora_rank_vae),
            unet=UNetConfig(lora_rank=self.lora_rank_unet, timestep=self.timestep),
            base_seed=self.seed,
        )
        if vocabulary is not None:
            config = config.model_copy(update={"vocabulary": list(vocabulary)})
        return config


ConfigT = TypeVar("ConfigT", bound=BaseModel)


def _read_yaml_mapping(path: Path) -> Dict:
    if not path.exists():
        raise ConfigError(f"Файл конфигурации не найден: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigError(f"Некорректный YAML в {path}: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"Конфигурация {path} должна быть отображением ключ-значение")
    return data


def _build(model: Type[ConfigT], data: Dict, path: Path) -> ConfigT:
    try:
        return model(**data)
    except ValidationError as e:
        first = e.errors()[0]
        key = ".".join(str(p) for p in first["loc"]) or "<root>"
        if first["type"] == "extra_forbidden":
            raise ConfigError(f"{path}: неизвестный ключ '{key}'") from None
        raise ConfigError(f"{path}: ключ '{key}': {first['msg']}") from None


def load_corpus_config(path: str | Path) -> CorpusConfig:
    path = Path(path)
    return _build(CorpusConfig, _read_yaml_mapping(path), path)


def load_train_config(path: str | Path) -> TrainConfig:
    path = Path(path)
    data = _read_yaml_mapping(path)
    for key, value in data.items():
        if isinstance(value, (dict, list)):
            raise ConfigError(f"{path}: ключ '{key}' должен быть скалярным (плоский файл)")
    return _build(TrainConfig, data, path)


def resolve_device(device: Optional[str] = None) -> str:
    if device is None:
        device = os.getenv("ALIAUG_DEVICE")
    if device is not None:
        return device
    if torch.backends.mps.is_available():
        return "mps"
    if torch.cuda.is_available():
        return "cuda"
    return "cpu"


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


def derive_seed(*parts: int) -> int:
    """Детерминированный под-сид из (базовый сид, индекс, ...)."""
    return int(np.random.SeedSequence([p % (2**32) for p in parts]).generate_state(1)[0])
