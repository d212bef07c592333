"""
Длинные прогоны на игрушечном корпусе 64×64. Исключены из запуска по
умолчанию: `python -m pytest -m load tests/load/`.

Для каждого из трех сидов: корпус из 22 царапин и 10 good, разбиение царапин 70/30
(15 записей в обучение, 7 отложенных), 2000 шагов с drop_prob=0.25.
Все пороги проверяются по медиане трех сидов.
"""

from pathlib import Path
from typing import Dict, List

import numpy as np
import pytest

from aliaug.config import CorpusConfig, GeneratorConfig, TrainConfig
from aliaug.dataset import split_dataset, to_storage_range
from aliaug.evaluation import compute_fid, untrained_generator_like
from aliaug.models import Pairing
from aliaug.report import run_report
from aliaug.synth import build_corpus, corpus_vocabulary
from aliaug.training import Trainer, build_state

TRAIN_STEPS = 2000
SEEDS = (0, 1, 2)


def _train_one(seed: int, out_dir: Path) -> Dict[str, object]:
    paired, _, good = build_corpus(CorpusConfig(counts={"good": 10, "scratch": 22}, seed=seed))
    train, held_out = split_dataset(paired, 0.7, seed)
    cfg = TrainConfig(
        max_steps=TRAIN_STEPS,
        checkpointing_steps=TRAIN_STEPS,
        eval_frequency=TRAIN_STEPS,
        viz_frequency=TRAIN_STEPS,
        num_samples_eval=len(held_out),
        drop_prob=0.25,
        report_to="none",
        seed=seed,
    )
    state = build_state(cfg, corpus_vocabulary().prompts, device="cpu")
    trainer = Trainer([train], cfg, out_dir, eval_manifest=held_out, state=state, verbose=False)
    trainer.run()
    return {"paired": paired, "good": good, "train": train, "held_out": held_out, "trainer": trainer}


@pytest.fixture(scope="module")
def runs(tmp_path_factory) -> List[Dict[str, object]]:
    return [_train_one(seed, Path(tmp_path_factory.mktemp(f"acceptance_{seed}"))) for seed in SEEDS]


def _diffs(generator, records, mask_only: bool = False):
    """Средняя по каналам |output - input| на каждую запись: (вне маски, внутри маски)."""
    outside, inside = [], []
    cfg = GeneratorConfig(mode="eval")
    for index, record in enumerate(records):
        source = record
        if mask_only:
            source = record.model_copy(update={"pairing": Pairing.MASK_ONLY, "input_image": None})
        output = to_storage_range(generator.generate(source, cfg, seed=index))
        diff = (output - record.input_image).abs().mean(dim=0)
        mask = record.mask[0].bool()
        outside.append(float(diff[~mask].mean()))
        inside.append(float(diff[mask].mean()))
    return np.array(outside), np.array(inside)


@pytest.mark.load
def test_reconstruction_loss_halves(runs):
    """Тест: L_rec к 500-му шагу падает минимум вдвое относительно среднего первых 10 шагов."""
    ratios = []
    for run in runs:
        rec = [entry["rec"] for entry in run["trainer"].history]
        ratios.append(np.mean(rec[490:500]) / np.mean(rec[:10]))
    assert np.median(ratios) <= 0.5


@pytest.mark.load
def test_edit_is_local_on_held_out(runs):
    """Тест: на отложенных записях вне маски выход близок ко входу по каждой записи, внутри заметно отличается."""
    medians, p90s, inside_medians = [], [], []
    for run in runs:
        generator = run["trainer"].state.generator.eval()
        outside, inside = _diffs(generator, run["held_out"].records)
        medians.append(np.median(outside))
        p90s.append(np.percentile(outside, 90))
        inside_medians.append(np.median(inside))
    assert np.median(medians) < 0.05
    assert np.median(p90s) < 0.08
    assert np.median(inside_medians) > 0.10


@pytest.mark.load
def test_mask_only_generation_draws_defect(runs):
    """Тест: тот же чекпоинт без входного изображения дает по маске и промпту заметный дефект."""
    inside_medians = []
    for run in runs:
        generator = run["trainer"].state.generator.eval()
        _, inside = _diffs(generator, run["held_out"].records, mask_only=True)
        assert np.isfinite(inside).all()
        inside_medians.append(np.median(inside))
    assert np.median(inside_medians) > 0.10


@pytest.mark.load
def test_trained_fid_beats_untrained(runs):
    trained_fids, fresh_fids = [], []
    cfg = GeneratorConfig(mode="eval")
    for run in runs:
        generator = run["trainer"].state.generator.eval()
        fresh = untrained_generator_like(generator)
        records = run["paired"].records
        real = [r.target_image for r in records]
        trained_out = [to_storage_range(generator.generate(r, cfg, seed=i)) for i, r in enumerate(records)]
        fresh_out = [to_storage_range(fresh.generate(r, cfg, seed=i)) for i, r in enumerate(records)]
        pyramid = run["trainer"].state.pyramid
        trained_fids.append(compute_fid(real, trained_out, pyramid).fid)
        fresh_fids.append(compute_fid(real, fresh_out, pyramid).fid)
    assert np.median(trained_fids) < np.median(fresh_fids)


@pytest.mark.load
def test_strategy_ordering(runs):
    """Тест: accuracy на реальном тесте 30%: NAS >= CAS, NAS >= D_S + 5 пунктов, D_S_AUG >= D_S."""
    run = runs[0]
    generator = run["trainer"].state.generator.eval()
    report = run_report([run["paired"], run["good"]], generator, seeds=SEEDS, verbose=False)
    accuracy = {name: metrics.accuracy for name, metrics in report.strategies.items()}
    assert accuracy["NAS"] >= accuracy["CAS"]
    assert accuracy["NAS"] >= accuracy["D_S"] + 0.05
    assert accuracy["D_S_AUG"] >= accuracy["D_S"]
    assert report.seeds == list(SEEDS)


@pytest.mark.load
def test_reconstruction_insensitive_to_timestep(tmp_path):
    """Тест: итоговый L_rec при t*=0 и t*=999 отличается не больше чем на 20%."""
    paired, _, _ = build_corpus(CorpusConfig(counts={"scratch": 15}, seed=0))
    final_rec = {}
    for timestep in (0, 999):
        cfg = TrainConfig(
            max_steps=500,
            checkpointing_steps=500,
            eval_frequency=500,
            viz_frequency=500,
            num_samples_eval=2,
            timestep=timestep,
            report_to="none",
            seed=0,
        )
        state = build_state(cfg, corpus_vocabulary().prompts, device="cpu")
        trainer = Trainer([paired], cfg, tmp_path / f"t{timestep}", state=state, verbose=False)
        trainer.run()
        final_rec[timestep] = np.mean([entry["rec"] for entry in trainer.history[-10:]])
    assert abs(final_rec[0] - final_rec[999]) <= 0.2 * final_rec[999]
