import shutil
import tempfile
from pathlib import Path
from typing import Generator, List

import pytest
import torch

from aliaug.config import CodecConfig, CorpusConfig, ModelConfig, TrainConfig, UNetConfig
from aliaug.generator import AliAugGenerator, build_generator
from aliaug.models import DatasetManifest, Pairing, Prompt, SampleRecord
from aliaug.synth import build_corpus

TINY_SIZE = 16


@pytest.fixture(autouse=True)
def isolated_env(monkeypatch, tmp_path: Path) -> None:
    """Кэш и устройство изолированы для каждого теста."""
    monkeypatch.setenv("ALIAUG_CACHE_DIR", str(tmp_path / "cache"))
    monkeypatch.setenv("ALIAUG_DEVICE", "cpu")


@pytest.fixture
def temp_dir() -> Generator[Path, None, None]:
    """Создает временную директорию для тестов."""
    temp_path = Path(tempfile.mkdtemp())
    yield temp_path
    if temp_path.exists():
        shutil.rmtree(temp_path, ignore_errors=True)


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    """Уменьшенная архитектура 16×16 для быстрых тестов на CPU."""
    return ModelConfig(
        image_size=TINY_SIZE,
        codec=CodecConfig(channels=(8, 8, 16), lora_rank=2, norm_groups=4),
        unet=UNetConfig(channels=(16, 32), heads=2, d_ctx=16, prompt_len=2, d_t=16, lora_rank=2, norm_groups=4),
        disc_channels=(8, 8, 16),
        feature_channels=(8, 8, 16),
    )


@pytest.fixture
def tiny_generator(tiny_model_config: ModelConfig) -> AliAugGenerator:
    return build_generator(tiny_model_config, "cpu").eval()


@pytest.fixture
def tiny_train_config() -> TrainConfig:
    return TrainConfig(
        image_size=TINY_SIZE,
        train_image_prep=f"resized_crop_{TINY_SIZE}",
        test_image_prep=f"resized_crop_{TINY_SIZE}",
        max_steps=10,
        checkpointing_steps=5,
        eval_frequency=5,
        viz_frequency=5,
        num_samples_eval=4,
        warmup_steps=2,
        report_to="none",
        seed=0,
    )


@pytest.fixture
def tiny_corpus_config() -> CorpusConfig:
    return CorpusConfig(image_size=TINY_SIZE, counts={"good": 4, "scratch": 3, "hole": 3}, seed=1)


@pytest.fixture
def tiny_corpus(tiny_corpus_config: CorpusConfig):
    """(paired, unpaired, good) манифесты в памяти."""
    return build_corpus(tiny_corpus_config)


def make_record(
    record_id: str,
    label: str = "scratch",
    size: int = TINY_SIZE,
    pairing: Pairing = Pairing.PAIRED,
    prompt_id: int = 0,
    prompt_text: str = "add scratch",
    fill: float = 0.5,
) -> SampleRecord:
    mask = torch.zeros(1, size, size)
    if label != "good":
        mask[:, size // 4 : size // 2, size // 4 : size // 2] = 1.0
    image = torch.full((3, size, size), fill)
    target = image.clone()
    target[:, mask[0].bool()] = 0.9
    return SampleRecord(
        record_id=record_id,
        input_image=None if pairing == Pairing.MASK_ONLY else image,
        mask=mask,
        prompt=Prompt(text=prompt_text, prompt_id=prompt_id),
        target_image=target,
        pairing=pairing,
        label=label,
    )


def make_manifest(labels: List[str]) -> DatasetManifest:
    records = []
    for i, label in enumerate(labels):
        if label == "good":
            records.append(make_record(f"r{i:03d}", label=label, prompt_id=4, prompt_text="no defect"))
        else:
            records.append(make_record(f"r{i:03d}", label=label))
    return DatasetManifest(records=records)
