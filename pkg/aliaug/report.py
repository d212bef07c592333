"""
Полное сравнение стратегий D_S, D_S_AUG, CAS, NAS: разбиение 70/30,
обучение downstream-модели на каждой стратегии для нескольких сидов,
медиана метрик и FID сгенерированных изображений против реальных дефектов.
"""

from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import seaborn as sns  # noqa: E402
import torch  # noqa: E402

from .config import derive_seed  # noqa: E402
from .dataset import split_dataset, to_storage_range  # noqa: E402
from .downstream import DEFAULT_STEPS, eval_downstream, train_downstream  # noqa: E402
from .evaluation import build_cas, build_nas, compute_fid  # noqa: E402
from .features import FeaturePyramid  # noqa: E402
from .generator import AliAugGenerator  # noqa: E402
from .models import (  # noqa: E402
    METRIC_NAMES,
    STRATEGIES,
    DatasetManifest,
    DownstreamMetrics,
    EvalReport,
    SampleRecord,
    Split,
)

DEFAULT_SEEDS = (0, 1, 2)
TRAIN_FRACTION = 0.7


def median_metrics(runs: Sequence[DownstreamMetrics]) -> DownstreamMetrics:
    values = {name: float(np.median([getattr(m, name) for m in runs])) for name in METRIC_NAMES}
    counts = {name: int(np.median([getattr(m, name) for m in runs])) for name in ("tp", "fp", "tn", "fn")}
    return DownstreamMetrics(**values, **counts)


def run_report(
    real_manifests: Sequence[DatasetManifest],
    generator: AliAugGenerator,
    seeds: Sequence[int] = DEFAULT_SEEDS,
    n_per_record: int = 4,
    downstream_steps: int = DEFAULT_STEPS,
    pyramid: Optional[FeaturePyramid] = None,
    verbose: bool = True,
) -> EvalReport:
    """
    real_manifests - реальные записи (обычно paired + good); для каждого сида
    свое стратифицированное разбиение, все стратегии проверяются на одном и
    том же реальном тестовом наборе.
    """
    records = [r for m in real_manifests for r in m.records]
    if not records:
        raise ValueError("Нет реальных записей для отчета")
    if not seeds:
        raise ValueError("Нужен хотя бы один сид")
    manifest = DatasetManifest(records=records, split=Split.UNSPLIT)
    pyramid = pyramid or FeaturePyramid(generator.config.feature_channels, generator.config.feature_seed)

    per_seed: Dict[str, List[DownstreamMetrics]] = {name: [] for name in STRATEGIES}
    fids: List[float] = []
    counts: Dict[str, int] = {}

    for seed in seeds:
        if verbose:
            print(f"🚀 Сид {seed}: разбиение {TRAIN_FRACTION:.0%} / {1 - TRAIN_FRACTION:.0%}")
        train, test = split_dataset(manifest, TRAIN_FRACTION, seed)
        cas = build_cas(train, generator, n_per_record, seed=seed, verbose=verbose)
        nas = build_nas(train, n_per_record=n_per_record, seed=seed, cas=cas, verbose=verbose)

        training_sets = {"D_S": (train, False), "D_S_AUG": (train, True), "CAS": (cas, False), "NAS": (nas, False)}
        for name, (dataset, augment) in training_sets.items():
            model = train_downstream(
                dataset, seed=seed, steps=downstream_steps, augment=augment, verbose=verbose
            )
            metrics = eval_downstream(model, test)
            per_seed[name].append(metrics)
            counts[name] = len(dataset)
            if verbose:
                print(
                    f"   {name:8s} acc={metrics.accuracy:.3f} prec={metrics.precision:.3f} "
                    f"rec={metrics.recall:.3f} iou={metrics.mask_iou:.3f}"
                )

        real_defects = [r for r in train.records if r.is_defect]
        fake_defects = [r for r in cas.records if r.is_defect]
        if len(real_defects) >= 2 and len(fake_defects) >= 2:
            fids.append(compute_fid(real_defects, fake_defects, pyramid).fid)

    counts["test"] = len(test)
    return EvalReport(
        fid=float(np.median(fids)) if fids else None,
        strategies={name: median_metrics(runs) for name, runs in per_seed.items()},
        per_seed=per_seed,
        seeds=list(seeds),
        counts=counts,
    )


def report_lines(report: EvalReport) -> List[str]:
    lines = []
    if report.fid is not None:
        lines.append(f"fid={report.fid:.6f}")
    lines.append("seeds=" + ",".join(str(s) for s in report.seeds))
    for name in STRATEGIES:
        metrics = report.strategies[name]
        for metric in METRIC_NAMES:
            lines.append(f"{name}.{metric}={getattr(metrics, metric):.6f}")
        lines.append(f"{name}.train_size={report.counts.get(name, 0)}")
    return lines


def report_markdown(report: EvalReport) -> str:
    header = "| metric | " + " | ".join(STRATEGIES) + " |"
    rule = "|---|" + "---|" * len(STRATEGIES)
    rows = [
        f"| {metric} | " + " | ".join(f"{getattr(report.strategies[s], metric):.3f}" for s in STRATEGIES) + " |"
        for metric in METRIC_NAMES
    ]
    lines = [header, rule, *rows, ""]
    if report.fid is not None:
        lines.append(f"FID (сгенерированные против реальных дефектов): {report.fid:.3f}")
    lines.append(f"Сиды: {', '.join(str(s) for s in report.seeds)}; метрики - медиана по сидам.")
    lines.append("mAP50 заменен на accuracy / precision / recall / mask IoU.")
    return "\n".join(lines) + "\n"


def plot_heatmap(report: EvalReport, path: Path) -> Path:
    data = np.array([[getattr(report.strategies[s], m) for s in STRATEGIES] for m in METRIC_NAMES])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    sns.heatmap(
        data,
        annot=True,
        fmt=".2f",
        vmin=0.0,
        vmax=1.0,
        cmap="viridis",
        xticklabels=list(STRATEGIES),
        yticklabels=list(METRIC_NAMES),
        ax=ax,
    )
    ax.set_title("Downstream-метрики по стратегиям")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


@torch.no_grad()
def plot_samples(
    records: Sequence[SampleRecord],
    generator: AliAugGenerator,
    path: Path,
    count: int = 4,
    seed: int = 0,
) -> Path:
    """Сетка input | mask | output | target по строке на запись."""
    records = list(records)[:count]
    if not records:
        raise ValueError("Нет записей для сетки примеров")
    fig, axes = plt.subplots(len(records), 4, figsize=(8, 2 * len(records)), squeeze=False)
    titles = ("input", "mask", "output", "target")
    for row, record in enumerate(records):
        output = to_storage_range(generator.generate(record, seed=derive_seed(seed, row)))
        blank = torch.zeros_like(output)
        panels = (
            record.input_image if record.input_image is not None else blank,
            record.mask.expand(3, -1, -1),
            output,
            record.target_image if record.target_image is not None else blank,
        )
        for col, (title, image) in enumerate(zip(titles, panels, strict=True)):
            ax = axes[row][col]
            ax.imshow(image.permute(1, 2, 0).clamp(0, 1).numpy())
            ax.set_xticks([])
            ax.set_yticks([])
            if row == 0:
                ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def write_report(report: EvalReport, out_dir: Path) -> Dict[str, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    txt = out_dir / "report.txt"
    txt.write_text("\n".join(report_lines(report)) + "\n", encoding="utf-8")
    md = out_dir / "report.md"
    md.write_text(report_markdown(report), encoding="utf-8")
    heatmap = plot_heatmap(report, out_dir / "report_heatmap.png")
    return {"txt": txt, "md": md, "heatmap": heatmap}
