from pathlib import Path

import numpy as np
import pytest
import torch

from aliaug.config import (
    DEFAULT_PROMPTS,
    CorpusConfig,
    GeneratorConfig,
    TrainConfig,
    derive_seed,
    load_corpus_config,
    load_train_config,
    resolve_device,
    seed_everything,
)
from aliaug.exceptions import ConfigError


def test_train_config_defaults_match_hyperparameter_table():
    cfg = TrainConfig()
    assert cfg.lambda_gan == 2.5
    assert cfg.lambda_l2 == 10.0
    assert cfg.lambda_lpips == 10.0
    assert cfg.lambda_clipsim == 5.0
    assert cfg.learning_rate == 5e-4
    assert cfg.warmup_steps == 500
    assert cfg.max_grad_norm == 1.0
    assert cfg.lora_rank_unet == 8
    assert cfg.lora_rank_vae == 4
    assert cfg.batch_size == 1
    assert cfg.train_image_prep == "resized_crop_64"


def test_load_train_config_unknown_key(temp_dir: Path):
    """Тест: неизвестный ключ называется в ошибке."""
    path = temp_dir / "train.yaml"
    path.write_text("learning_rate: 0.001\nlambda_foo: 1.0\n")
    with pytest.raises(ConfigError, match="lambda_foo"):
        load_train_config(path)


def test_load_train_config_rejects_nested_values(temp_dir: Path):
    path = temp_dir / "train.yaml"
    path.write_text("optimizer:\n  lr: 0.1\n")
    with pytest.raises(ConfigError, match="optimizer"):
        load_train_config(path)


def test_load_train_config_reads_values(temp_dir: Path):
    path = temp_dir / "train.yaml"
    path.write_text("learning_rate: 0.001\nmax_steps: 20\nseed: 3\n")
    cfg = load_train_config(path)
    assert cfg.learning_rate == 0.001
    assert cfg.max_steps == 20
    assert cfg.seed == 3


def test_load_train_config_missing_file(temp_dir: Path):
    with pytest.raises(ConfigError):
        load_train_config(temp_dir / "missing.yaml")


def test_prep_must_match_image_size():
    with pytest.raises(ValueError):
        TrainConfig(image_size=32)


def test_load_corpus_config(temp_dir: Path):
    path = temp_dir / "corpus.yaml"
    path.write_text("image_size: 32\ncounts:\n  good: 2\n  hole: 1\ntexture: tile\nseed: 5\n")
    config = load_corpus_config(path)
    assert config.image_size == 32
    assert config.defect_counts == {"hole": 1}


def test_corpus_config_validation():
    with pytest.raises(ValueError):
        CorpusConfig(image_size=20)
    with pytest.raises(ValueError):
        CorpusConfig(counts={"dent": 1})


def test_generator_config_drop_prob_bound():
    """Тест: drop_prob должен быть меньше 0.3."""
    with pytest.raises(ValueError):
        GeneratorConfig(drop_prob=0.3)


def test_build_model_config_uses_lora_ranks():
    cfg = TrainConfig(lora_rank_unet=6, lora_rank_vae=2, seed=9)
    model_config = cfg.build_model_config(["add scratch", "no defect"])
    assert model_config.unet.lora_rank == 6
    assert model_config.codec.lora_rank == 2
    assert model_config.base_seed == 9
    assert model_config.vocabulary == ["add scratch", "no defect"]
    assert cfg.build_model_config().vocabulary == DEFAULT_PROMPTS


def test_resolve_device_env(monkeypatch):
    monkeypatch.setenv("ALIAUG_DEVICE", "cpu")
    assert resolve_device() == "cpu"
    assert resolve_device("cuda") == "cuda"


def test_derive_seed_is_deterministic():
    assert derive_seed(1, 2) == derive_seed(1, 2)
    assert derive_seed(1, 2) != derive_seed(2, 1)


def test_seed_everything_repeats_draws():
    seed_everything(7)
    first = (torch.rand(3), np.random.rand(3))
    seed_everything(7)
    second = (torch.rand(3), np.random.rand(3))
    assert torch.equal(first[0], second[0])
    assert np.array_equal(first[1], second[1])
