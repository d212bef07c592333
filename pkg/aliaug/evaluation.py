"""
FID на замороженной пирамиде признаков и сборка CAS / NAS наборов.

CAS - обучающий набор только из сгенерированных изображений (маска
источника служит разметкой), NAS - объединение реальных записей и CAS.
"""

import hashlib
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
import torch
from tqdm import tqdm

from .config import GeneratorConfig, derive_seed
from .dataset import resized_crop, to_model_range
from .features import FeaturePyramid
from .generator import AliAugGenerator
from .models import DatasetManifest, FeatureStats, FidResult, SampleRecord, Split
from .processor import GenerationProcessor
from .storage import cache_dir

COV_JITTER = 1e-6
SHRINKAGE = 0.1

FeatureFn = Callable[[torch.Tensor], torch.Tensor]
ImageSource = Union[DatasetManifest, Sequence[SampleRecord], Sequence[torch.Tensor]]


def stats_from_features(features: np.ndarray, shrink: bool = False) -> FeatureStats:
    """
    μ и несмещенная Σ по строкам матрицы признаков (n, d).
    При shrink и n ≤ d Σ стягивается к (tr Σ / d)·I с весом 0.1.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ValueError(f"Нужно не меньше 2 векторов признаков, получено {features.shape}")
    n, d = features.shape
    mean = features.mean(axis=0)
    cov = np.cov(features, rowvar=False, ddof=1).reshape(d, d)
    if shrink and n <= d:
        target = np.trace(cov) / d * np.eye(d)
        cov = (1.0 - SHRINKAGE) * cov + SHRINKAGE * target
    return FeatureStats(mean=mean, cov=cov, n=n)


def _images(source: ImageSource, image_size: Optional[int] = None) -> List[torch.Tensor]:
    items = source.records if isinstance(source, DatasetManifest) else list(source)
    images = [item.display_image if isinstance(item, SampleRecord) else item for item in items]
    if image_size is None:
        return images
    return [resized_crop(image, image_size).clamp(0.0, 1.0) for image in images]


@torch.no_grad()
def feature_matrix(images: Sequence[torch.Tensor], extractor: Union[FeaturePyramid, FeatureFn], batch_size: int = 32) -> np.ndarray:
    if isinstance(extractor, FeaturePyramid):
        fn: FeatureFn = extractor.pooled
        device = next(extractor.parameters()).device
    else:
        fn = extractor
        device = torch.device("cpu")

    rows = []
    for start in range(0, len(images), batch_size):
        batch = torch.stack([to_model_range(img) for img in images[start : start + batch_size]]).to(device)
        rows.append(fn(batch).double().cpu().numpy())
    return np.concatenate(rows, axis=0)


def extract_features(
    images: ImageSource, extractor: Union[FeaturePyramid, FeatureFn], batch_size: int = 32
) -> FeatureStats:
    """Изображения в диапазоне хранения [0, 1] → статистики глобально пуленых признаков."""
    tensors = _images(images)
    if len(tensors) < 2:
        raise ValueError(f"Для статистик нужно не меньше 2 изображений, получено {len(tensors)}")
    return stats_from_features(feature_matrix(tensors, extractor, batch_size), shrink=True)


def _sqrtm_psd(matrix: np.ndarray) -> np.ndarray:
    eigvals, eigvecs = np.linalg.eigh(matrix)
    return (eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))) @ eigvecs.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """‖μa − μb‖² + Tr(Σa + Σb − 2(ΣaΣb)^½) через собственное разложение симметризованного произведения."""
    if a.dim != b.dim:
        raise ValueError(f"Размерности статистик не совпадают: {a.dim} и {b.dim}")
    for name, stats in (("a", a), ("b", b)):
        if not (np.isfinite(stats.mean).all() and np.isfinite(stats.cov).all()):
            raise ValueError(f"Статистики {name} содержат нечисловые значения")

    eye = np.eye(a.dim)
    cov_a = (a.cov + a.cov.T) / 2.0 + COV_JITTER * eye
    cov_b = (b.cov + b.cov.T) / 2.0 + COV_JITTER * eye

    sqrt_a = _sqrtm_psd(cov_a)
    product = sqrt_a @ cov_b @ sqrt_a
    product = (product + product.T) / 2.0
    trace_sqrt = float(np.sqrt(np.clip(np.linalg.eigvalsh(product), 0.0, None)).sum())

    diff = a.mean - b.mean
    fid = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * trace_sqrt)
    return max(fid, 0.0)


def _content_key(images: Sequence[torch.Tensor], pyramid: FeaturePyramid) -> str:
    digest = hashlib.sha256()
    digest.update(f"pyramid:{pyramid.seed}:{pyramid.channels}".encode())
    for image in images:
        digest.update(image.detach().cpu().float().contiguous().numpy().tobytes())
    return digest.hexdigest()


def cached_stats(images: Sequence[torch.Tensor], pyramid: FeaturePyramid) -> FeatureStats:
    """Статистики реального набора кэшируются в ALIAUG_CACHE_DIR по хешу содержимого."""
    path = cache_dir() / "fid" / f"{_content_key(images, pyramid)}.npz"
    if path.exists():
        data = np.load(path)
        return FeatureStats(mean=data["mean"], cov=data["cov"], n=int(data["n"]))
    stats = extract_features(images, pyramid)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, mean=stats.mean, cov=stats.cov, n=stats.n)
    return stats


def compute_fid(
    real: ImageSource,
    generated: ImageSource,
    extractor: Union[FeaturePyramid, FeatureFn],
    use_cache: bool = False,
    image_size: Optional[int] = None,
) -> FidResult:
    """image_size (resized_crop) приводит оба набора к одному размеру перед извлечением признаков."""
    real_images, generated_images = _images(real, image_size), _images(generated, image_size)
    if use_cache and isinstance(extractor, FeaturePyramid):
        real_stats = cached_stats(real_images, extractor)
    else:
        real_stats = extract_features(real_images, extractor)
    fake_stats = extract_features(generated_images, extractor)
    return FidResult(
        fid=frechet_distance(real_stats, fake_stats),
        n_real=len(real_images),
        n_generated=len(generated_images),
    )


def clean_pool(records: Sequence[SampleRecord]) -> List[torch.Tensor]:
    """Бездефектные изображения обучающего набора: входы записей и изображения good."""
    pool = [r.input_image for r in records if r.input_image is not None]
    pool.extend(r.display_image for r in records if not r.is_defect and r.input_image is None)
    return pool


def build_cas(
    train_manifest: DatasetManifest,
    generator: AliAugGenerator,
    n_per_record: int = 4,
    seed: int = 0,
    cfg: Optional[GeneratorConfig] = None,
    verbose: bool = True,
) -> DatasetManifest:
    """
    Для каждой реальной записи n_per_record генераций: маска и промпт
    источника, вход - случайное (по сиду) чистое изображение из обучающего
    набора, либо генерация только по маске, если чистых изображений нет.
    Ошибочные записи пропускаются и подсчитываются.
    """
    if n_per_record < 1:
        raise ValueError(f"n_per_record должен быть >= 1, получено {n_per_record}")
    records = train_manifest.records
    if not records:
        raise ValueError("Пустой обучающий манифест")

    processor = GenerationProcessor(generator, cfg or GeneratorConfig(mode="eval"))
    pool = clean_pool(records)
    synthetic: List[SampleRecord] = []
    failures = 0

    jobs = [(i, k) for i in range(len(records)) for k in range(n_per_record)]
    for index, k in tqdm(jobs, desc="build-cas", disable=not verbose):
        record = records[index]
        job_seed = derive_seed(seed, index, k)
        override = None
        if pool:
            override = pool[int(np.random.default_rng(job_seed).integers(0, len(pool)))]
        result = processor.process_record(
            record,
            seed=job_seed,
            input_override=override,
            mask_only=override is None,
            record_id=f"{record.record_id}_cas{k}",
        )
        if result.success and result.record is not None:
            synthetic.append(result.record)
        else:
            failures += 1
            if verbose:
                print(f"   ❌ {result.error}")

    if verbose:
        print(f"✅ CAS: {len(synthetic)} синтетических записей, ошибок: {failures}")
    return DatasetManifest(records=synthetic, split=Split.TRAIN, seed=seed)


def build_nas(
    train_manifest: DatasetManifest,
    generator: Optional[AliAugGenerator] = None,
    n_per_record: int = 4,
    seed: int = 0,
    cas: Optional[DatasetManifest] = None,
    verbose: bool = True,
) -> DatasetManifest:
    """Все реальные записи без изменений плюс CAS-записи (готовые или собранные здесь)."""
    if cas is None:
        if generator is None:
            raise ValueError("Нужен генератор или готовый CAS-набор")
        cas = build_cas(train_manifest, generator, n_per_record, seed, verbose=verbose)
    real = list(train_manifest.records)
    if verbose:
        print(f"✅ NAS: {len(real)} реальных + {len(cas)} синтетических")
    return DatasetManifest(records=[*real, *cas.records], split=Split.TRAIN, seed=seed)


def untrained_generator_like(generator: AliAugGenerator) -> AliAugGenerator:
    """Свежий генератор с той же замороженной базой (все ZeroConv и LoRA-B нулевые)."""
    fresh = AliAugGenerator(generator.config, strict_prompts=generator.embedder.strict)
    return fresh.to(generator.input_fuse.conv.weight.device).eval()


def fid_report(
    real: ImageSource,
    generated: ImageSource,
    pyramid: FeaturePyramid,
    out_path: Optional[Path] = None,
    image_size: Optional[int] = None,
) -> FidResult:
    result = compute_fid(real, generated, pyramid, use_cache=True, image_size=image_size)
    if out_path is not None:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(
            f"fid={result.fid:.6f}\nn_real={result.n_real}\nn_generated={result.n_generated}\n",
            encoding="utf-8",
        )
    return result
