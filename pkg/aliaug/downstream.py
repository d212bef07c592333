"""
Эталонная downstream-модель протокола D_S / D_S_AUG / CAS / NAS: общий
сверточный ствол, голова классификации "есть дефект" и голова маски.
Обучается на стратегии X, проверяется только на реальном тестовом наборе.
"""

from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from .config import derive_seed, resolve_device
from .dataset import basic_augment, prepare_record, to_model_range
from .models import DatasetManifest, DownstreamMetrics, Provenance, SampleRecord

DEFAULT_STEPS = 1500


class DownstreamNet(nn.Module):
    def __init__(self, channels: Tuple[int, int] = (16, 32)):
        super().__init__()
        c0, c1 = channels
        self.trunk = nn.Sequential(
            nn.Conv2d(3, c0, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(c0, c1, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(c1, c1, 3, padding=1),
            nn.ReLU(),
        )
        self.cls_head = nn.Linear(c1, 1)
        self.seg_head = nn.Conv2d(c1, 1, 1)

    def forward(self, image: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        features = self.trunk(image)
        cls_logit = self.cls_head(features.mean(dim=(-2, -1))).squeeze(-1)
        seg_logit = F.interpolate(self.seg_head(features), size=image.shape[-2:], mode="bilinear", align_corners=False)
        return cls_logit, seg_logit

    @torch.no_grad()
    def predict(self, image: torch.Tensor, threshold: float = 0.5) -> Tuple[torch.Tensor, torch.Tensor]:
        cls_logit, seg_logit = self.forward(image)
        return torch.sigmoid(cls_logit) >= threshold, torch.sigmoid(seg_logit) >= threshold


def _records(source: DatasetManifest | Sequence[SampleRecord]) -> Sequence[SampleRecord]:
    return source.records if isinstance(source, DatasetManifest) else source


def _tensors(records: Sequence[SampleRecord], image_size: int) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    prepared = [prepare_record(r, image_size) for r in records]
    images = torch.stack([r.display_image for r in prepared])
    masks = torch.stack([r.mask for r in prepared])
    labels = torch.tensor([r.is_defect for r in prepared], dtype=torch.float32)
    return images, masks, labels


def train_downstream(
    manifest: DatasetManifest | Sequence[SampleRecord],
    seed: int,
    steps: int = DEFAULT_STEPS,
    augment: bool = False,
    batch_size: int = 8,
    learning_rate: float = 1e-3,
    image_size: Optional[int] = None,
    require_both_classes: bool = True,
    device: Optional[str] = None,
    verbose: bool = True,
) -> DownstreamNet:
    """
    Фиксированный бюджет шагов, детерминированно по seed. augment=True включает
    только отражение и поворот на k·90° (стратегия D_S_AUG).
    """
    records = _records(manifest)
    if not records:
        raise ValueError("Пустой обучающий набор downstream-модели")
    labels_present = {r.is_defect for r in records}
    if require_both_classes and len(labels_present) < 2:
        raise ValueError("Для головы классификации нужны и дефектные, и good-записи")

    device = resolve_device(device)
    image_size = image_size or int(records[0].mask.shape[-1])
    images, masks, labels = _tensors(records, image_size)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, 11))
        model = DownstreamNet().to(device)
    optimizer = torch.optim.Adam(model.parameters(), lr=learning_rate)
    rng = np.random.default_rng(derive_seed(seed, 12))

    model.train()
    for step in tqdm(range(steps), desc="downstream", disable=not verbose):
        indices = rng.integers(0, len(records), size=min(batch_size, len(records)))
        batch_images, batch_masks = [], []
        for j, index in enumerate(indices):
            image, mask = images[index], masks[index]
            if augment:
                image, mask = basic_augment(image, mask, derive_seed(seed, step, j), allow_jitter=False)
            batch_images.append(to_model_range(image))
            batch_masks.append(mask)
        x = torch.stack(batch_images).to(device)
        y_mask = torch.stack(batch_masks).to(device)
        y_label = labels[torch.from_numpy(indices)].to(device)

        cls_logit, seg_logit = model(x)
        loss = F.binary_cross_entropy_with_logits(cls_logit, y_label) + F.binary_cross_entropy_with_logits(
            seg_logit, y_mask
        )
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()

    model.eval()
    return model


def _iou(pred: np.ndarray, truth: np.ndarray) -> float:
    union = np.logical_or(pred, truth).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, truth).sum() / union)


def metrics_from_predictions(
    predicted: Sequence[bool],
    actual: Sequence[bool],
    predicted_masks: Optional[Sequence[np.ndarray]] = None,
    actual_masks: Optional[Sequence[np.ndarray]] = None,
) -> DownstreamMetrics:
    """
    Метрики по матрице ошибок. Precision при отсутствии положительных
    предсказаний равна 0, recall без положительных примеров тоже 0.
    IoU усредняется по изображениям; пустая маска против пустой дает 1.
    """
    if len(predicted) != len(actual) or not actual:
        raise ValueError("Нужны непустые предсказания той же длины, что и разметка")
    pred = np.asarray(predicted, dtype=bool)
    true = np.asarray(actual, dtype=bool)
    tp = int(np.sum(pred & true))
    fp = int(np.sum(pred & ~true))
    tn = int(np.sum(~pred & ~true))
    fn = int(np.sum(~pred & true))

    mask_iou = 1.0
    if predicted_masks is not None and actual_masks is not None:
        mask_iou = float(
            np.mean([_iou(np.asarray(p, bool), np.asarray(t, bool)) for p, t in zip(predicted_masks, actual_masks, strict=True)])
        )

    return DownstreamMetrics(
        precision=tp / (tp + fp) if tp + fp else 0.0,
        recall=tp / (tp + fn) if tp + fn else 0.0,
        accuracy=(tp + tn) / len(true),
        mask_iou=mask_iou,
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
    )


@torch.no_grad()
def eval_downstream(
    model: DownstreamNet,
    test_manifest: DatasetManifest | Sequence[SampleRecord],
    threshold: float = 0.5,
    batch_size: int = 32,
) -> DownstreamMetrics:
    records = _records(test_manifest)
    if not records:
        raise ValueError("Пустой тестовый набор")
    synthetic = [r.record_id for r in records if r.provenance != Provenance.REAL]
    if synthetic:
        raise ValueError(f"Тестовый набор должен быть реальным, синтетические записи: {synthetic[:5]}")
    device = next(model.parameters()).device
    images, masks, labels = _tensors(records, int(records[0].mask.shape[-1]))

    pred_labels, pred_masks = [], []
    for start in range(0, len(records), batch_size):
        x = to_model_range(images[start : start + batch_size]).to(device)
        cls_pred, seg_pred = model.predict(x, threshold)
        pred_labels.extend(cls_pred.cpu().tolist())
        pred_masks.extend(seg_pred.cpu().numpy())

    return metrics_from_predictions(
        pred_labels,
        labels.bool().tolist(),
        pred_masks,
        [m.numpy() for m in masks],
    )
