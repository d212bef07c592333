import hashlib
import io
import json
import math
from pathlib import Path

import pytest
import torch
import torch.nn as nn

from aliaug.config import ModelConfig, TrainConfig
from aliaug.exceptions import CheckpointError
from aliaug.models import DatasetManifest, Pairing, Prompt
from aliaug.training import (
    CHECKPOINT_VERSION,
    Trainer,
    _clip,
    build_state,
    load_checkpoint,
    load_generator,
    lr_factor,
    make_schedule,
    save_checkpoint,
    train_step,
)
from tests.conftest import make_record


@pytest.fixture
def state(tiny_train_config: TrainConfig, tiny_model_config: ModelConfig):
    return build_state(tiny_train_config, device="cpu", model_config=tiny_model_config)


def _rewrite_archive(path: Path, mutate) -> None:
    archive = torch.load(path, map_location="cpu", weights_only=False)
    mutate(archive)
    torch.save(archive, path)


def test_warmup_schedule():
    """Тест: lr(0)=0, lr(250)=2.5e-4, lr(500)=lr(9999)=5e-4."""
    lr_at = make_schedule(TrainConfig())
    assert lr_at(0) == 0.0
    assert lr_at(250) == pytest.approx(2.5e-4)
    assert lr_at(500) == pytest.approx(5e-4)
    assert lr_at(9999) == pytest.approx(5e-4)


def test_cosine_schedule_with_restarts():
    """Тест: два цикла косинуса без warmup: 1 → 0.5 → рестарт к 1 на середине → 0 к max_steps."""
    cfg = TrainConfig(lr_scheduler="cosine_with_restarts", lr_num_cycles=2, warmup_steps=0, max_steps=100)
    factor = lr_factor(cfg)
    assert factor(0) == pytest.approx(1.0)
    assert factor(25) == pytest.approx(0.5)
    assert factor(50) == pytest.approx(1.0)
    assert factor(75) == pytest.approx(0.5)
    assert factor(100) == 0.0
    assert make_schedule(cfg)(25) == pytest.approx(2.5e-4)


def test_cycles_change_cosine_schedule():
    one = lr_factor(TrainConfig(lr_scheduler="cosine_with_restarts", warmup_steps=10, max_steps=110))
    three = lr_factor(TrainConfig(lr_scheduler="cosine_with_restarts", lr_num_cycles=3, warmup_steps=10, max_steps=110))
    assert one(5) == three(5) == pytest.approx(0.5)
    assert one(35) == pytest.approx(0.5 * (1 + math.cos(math.pi / 4)))
    assert three(35) == pytest.approx(0.5 * (1 + math.cos(3 * math.pi / 4)))


def test_constant_schedule_rejects_cycles():
    with pytest.raises(ValueError, match="lr_num_cycles"):
        TrainConfig(lr_num_cycles=3)


def test_state_starts_at_zero_lr(state):
    assert state.lr == 0.0
    assert state.step == 0


def test_clip_grad_norm():
    """Тест: норма 5.0 до клиппинга становится ровно 1.0."""
    param = nn.Parameter(torch.zeros(2))
    param.grad = torch.tensor([3.0, 4.0])
    norm = _clip([param], 1.0, step=0)
    assert norm == pytest.approx(5.0)
    assert float(param.grad.norm()) == pytest.approx(1.0, abs=1e-6)


def test_train_step_keeps_frozen_base(state, tiny_corpus):
    paired = tiny_corpus[0]
    breakdown = train_step(state, paired.records[:1])
    assert state.step == 1
    assert state.generator.frozen_hash() == state.base_hash
    assert breakdown.disc is not None and breakdown.grad_norm is not None
    assert breakdown.total == pytest.approx(2.5 * breakdown.adv + 10 * breakdown.rec + 10 * breakdown.lpips, rel=1e-5)


def test_train_step_changes_trainable_parameters(state, tiny_corpus):
    before = {k: v.clone() for k, v in state.generator.trainable_state().items()}
    for record in tiny_corpus[0].records[:3]:
        train_step(state, [record])
    after = state.generator.trainable_state()
    assert any(not torch.equal(before[k], after[k]) for k in before)


def test_train_step_batch_size_contract(state, tiny_corpus):
    with pytest.raises(ValueError):
        train_step(state, tiny_corpus[0].records[:2])
    with pytest.raises(ValueError):
        train_step(state, [])


def test_train_step_with_mask_only_records(state, tiny_corpus):
    _, unpaired, _ = tiny_corpus
    mask_only = unpaired.records[0].model_copy(update={"input_image": None, "pairing": Pairing.MASK_ONLY})
    breakdown = train_step(state, [mask_only])
    assert breakdown.rec >= 0.0


def test_checkpoint_cadence(temp_dir: Path, tiny_train_config: TrainConfig, state, tiny_corpus):
    """Тест: max_steps=10, checkpointing_steps=5 → чекпоинты на шагах 5 и 10."""
    trainer = Trainer([tiny_corpus[0]], tiny_train_config, temp_dir, state=state, verbose=False)
    final = trainer.run()
    checkpoints = sorted(p.name for p in (temp_dir / "checkpoints").iterdir())
    assert checkpoints == ["checkpoint-10.pt", "checkpoint-5.pt"]
    assert final == temp_dir / "checkpoints" / "checkpoint-10.pt"

    lines = (temp_dir / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 10
    assert json.loads(lines[-1])["step"] == 10
    assert "fid" in trainer.history[4]
    assert (temp_dir / "samples" / "step_000005.png").exists()


def test_checkpoint_round_trip(temp_dir: Path, state, tiny_corpus):
    train_step(state, tiny_corpus[0].records[:1])
    path = save_checkpoint(state, temp_dir / "ckpt.pt")
    restored = load_checkpoint(path, device="cpu")
    assert restored.step == 1
    original = state.generator.trainable_state()
    for key, value in restored.generator.trainable_state().items():
        assert torch.equal(value, original[key])
    for a, b in zip(state.discriminator.parameters(), restored.discriminator.parameters()):
        assert torch.equal(a, b)

    generator = load_generator(path, device="cpu")
    assert not generator.training
    assert generator.base_hash == state.base_hash


def test_checkpoint_wrong_version(temp_dir: Path, state):
    path = save_checkpoint(state, temp_dir / "ckpt.pt")
    _rewrite_archive(path, lambda archive: archive.update(version="aliaug-ckpt/0"))
    with pytest.raises(CheckpointError, match="aliaug-ckpt/0"):
        load_checkpoint(path)


def test_checkpoint_checksum(temp_dir: Path, state):
    path = save_checkpoint(state, temp_dir / "ckpt.pt")
    _rewrite_archive(path, lambda archive: archive.update(payload=archive["payload"][:-1] + b"\x00"))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_base_hash_mismatch(temp_dir: Path, state):
    path = save_checkpoint(state, temp_dir / "ckpt.pt")

    def mutate(archive):
        payload = torch.load(io.BytesIO(archive["payload"]), map_location="cpu", weights_only=False)
        payload["base_hash"] = "0" * 64
        buffer = io.BytesIO()
        torch.save(payload, buffer)
        archive.update(payload=buffer.getvalue(), sha256=hashlib.sha256(buffer.getvalue()).hexdigest())

    _rewrite_archive(path, mutate)
    assert torch.load(path, weights_only=False)["version"] == CHECKPOINT_VERSION
    with pytest.raises(CheckpointError, match="Хеш"):
        load_checkpoint(path)


def test_missing_checkpoint(temp_dir: Path):
    with pytest.raises(CheckpointError):
        load_checkpoint(temp_dir / "absent.pt")


def test_runs_are_deterministic(temp_dir: Path, tiny_train_config, tiny_model_config, tiny_corpus):
    cfg = tiny_train_config.model_copy(update={"max_steps": 4})
    histories = []
    for name in ("a", "b"):
        state = build_state(cfg, device="cpu", model_config=tiny_model_config)
        trainer = Trainer([tiny_corpus[0]], cfg, temp_dir / name, state=state, verbose=False)
        trainer.run()
        histories.append([entry["total"] for entry in trainer.history])
    assert histories[0] == pytest.approx(histories[1], abs=1e-5)


def test_resume_replays_uninterrupted_run(temp_dir: Path, tiny_train_config, tiny_model_config, tiny_corpus):
    """Тест: продолжение с чекпоинта шага 3 повторяет шаги 4-6 непрерывного прогона."""
    cfg = tiny_train_config.model_copy(update={"max_steps": 6, "checkpointing_steps": 3})
    state = build_state(cfg, device="cpu", model_config=tiny_model_config)
    full = Trainer([tiny_corpus[0]], cfg, temp_dir / "full", state=state, verbose=False)
    full.run()

    resumed_state = load_checkpoint(temp_dir / "full" / "checkpoints" / "checkpoint-3.pt", device="cpu")
    resumed = Trainer([tiny_corpus[0]], cfg, temp_dir / "resumed", state=resumed_state, verbose=False)
    resumed.run()

    assert [e["step"] for e in resumed.history] == [4, 5, 6]
    expected = [e["total"] for e in full.history[3:]]
    assert [e["total"] for e in resumed.history] == pytest.approx(expected, abs=1e-5)


def test_trainer_rejects_records_without_target(temp_dir: Path, tiny_train_config, state, tiny_corpus):
    record = tiny_corpus[0].records[0].model_copy(update={"target_image": None})
    with pytest.raises(ValueError):
        Trainer([DatasetManifest(records=[record])], tiny_train_config, temp_dir, state=state, verbose=False)


def test_trainer_vocabulary_mismatch(temp_dir: Path, tiny_train_config, tiny_corpus):
    record = tiny_corpus[0].records[0].model_copy(update={"prompt": Prompt(text="add dent", prompt_id=0)})
    with pytest.raises(ValueError, match="add dent"):
        Trainer([DatasetManifest(records=[record])], tiny_train_config, temp_dir, verbose=False)


def test_hinge_loss_type_drives_train_step(tiny_train_config, tiny_model_config, tiny_corpus):
    """Тест: gan_loss_type выбирает лосс шага дискриминатора."""
    record = tiny_corpus[0].records[:1]
    disc_losses = {}
    for loss_type in ("multilevel_sigmoid_s", "multilevel_hinge"):
        cfg = tiny_train_config.model_copy(update={"gan_loss_type": loss_type})
        state = build_state(cfg, device="cpu", model_config=tiny_model_config)
        disc_losses[loss_type] = train_step(state, record).disc
    assert disc_losses["multilevel_sigmoid_s"] != pytest.approx(disc_losses["multilevel_hinge"])


def test_fresh_run_truncates_train_log(temp_dir: Path, tiny_train_config, tiny_model_config, tiny_corpus):
    """Тест: повторный запуск с нуля в той же директории не дописывает старый лог."""
    cfg = tiny_train_config.model_copy(update={"max_steps": 3})
    for _ in range(2):
        state = build_state(cfg, device="cpu", model_config=tiny_model_config)
        Trainer([tiny_corpus[0]], cfg, temp_dir, state=state, verbose=False).run()
    steps = [json.loads(line)["step"] for line in (temp_dir / "train_log.jsonl").read_text().splitlines()]
    assert steps == [1, 2, 3]


def test_resume_in_place_keeps_log_prefix(temp_dir: Path, tiny_train_config, tiny_model_config, tiny_corpus):
    """Тест: продолжение с шага 3 в той же директории оставляет шаги 1-3 и переписывает хвост."""
    cfg = tiny_train_config.model_copy(update={"max_steps": 6, "checkpointing_steps": 3})
    state = build_state(cfg, device="cpu", model_config=tiny_model_config)
    Trainer([tiny_corpus[0]], cfg, temp_dir, state=state, verbose=False).run()

    resumed_state = load_checkpoint(temp_dir / "checkpoints" / "checkpoint-3.pt", device="cpu")
    Trainer([tiny_corpus[0]], cfg, temp_dir, state=resumed_state, verbose=False).run()
    steps = [json.loads(line)["step"] for line in (temp_dir / "train_log.jsonl").read_text().splitlines()]
    assert steps == [1, 2, 3, 4, 5, 6]


def test_eval_records_follow_test_image_prep(temp_dir: Path, tiny_train_config, state, tiny_corpus):
    """Тест: записи оценки другого размера приводятся к test_image_prep."""
    eval_manifest = DatasetManifest(records=[make_record("big_0", size=32), make_record("big_1", size=32)])
    trainer = Trainer([tiny_corpus[0]], tiny_train_config, temp_dir, eval_manifest=eval_manifest, state=state, verbose=False)
    assert all(r.mask.shape == (1, 16, 16) for r in trainer.eval_records)
    assert all(r.input_image.shape == (3, 16, 16) for r in trainer.eval_records)
    assert trainer.evaluate_fid() is not None


def test_train_step_grads_only_adapters(state, tiny_corpus):
    """Тест: после шага градиенты есть только у LoRA, ZeroConv и эмбеддера; дискриминатор учитывается отдельно."""
    train_step(state, tiny_corpus[0].records[:1])
    generator, disc = state.generator, state.discriminator

    frozen = [p for p in generator.parameters() if not p.requires_grad]
    assert frozen
    assert all(p.grad is None or not p.grad.any() for p in frozen)
    assert any(p.grad is not None and p.grad.any() for p in generator.trainable_parameters())

    audit = generator.parameter_audit()
    assert audit["trainable"] + audit["frozen"] == sum(p.numel() for p in generator.parameters())
    assert {id(p) for p in disc.parameters()}.isdisjoint(id(p) for p in generator.parameters())
    assert all(p.requires_grad for p in disc.parameters())
    assert {id(p) for group in state.opt_g.param_groups for p in group["params"]}.isdisjoint(
        id(p) for p in disc.parameters()
    )
