"""
Замороженная случайная пирамида признаков Φ.

Используется и перцептивным лоссом (по уровням), и FID (глобальный пулинг
последнего уровня, d = 64). Веса задаются сидом и никогда не обучаются.
"""

from typing import List, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F


class FeaturePyramid(nn.Module):
    def __init__(self, channels: Sequence[int] = (16, 32, 64), seed: int = 1234):
        super().__init__()
        self.seed = seed
        self.channels = tuple(channels)

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            layers = []
            in_channels = 3
            for out_channels in self.channels:
                conv = nn.Conv2d(in_channels, out_channels, 3, stride=2, padding=1)
                nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
                nn.init.zeros_(conv.bias)
                layers.append(conv)
                in_channels = out_channels
        self.levels = nn.ModuleList(layers)

        for param in self.parameters():
            param.requires_grad_(False)
        self.eval()

    @property
    def dim(self) -> int:
        return self.channels[-1]

    def train(self, mode: bool = True) -> "FeaturePyramid":
        # пирамида всегда в eval
        return super().train(False)

    def forward(self, image: torch.Tensor) -> List[torch.Tensor]:
        features = []
        x = image
        for conv in self.levels:
            x = F.leaky_relu(conv(x), 0.2)
            features.append(x)
        return features

    def pooled(self, image: torch.Tensor) -> torch.Tensor:
        """(B, d): среднее по пространству последнего уровня."""
        return self.forward(image)[-1].mean(dim=(-2, -1))

    def masked_pooled(self, image: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """(B, d): среднее последнего уровня по пикселям маски (маска уменьшается до его размера)."""
        last = self.forward(image)[-1]
        weights = F.adaptive_avg_pool2d(mask.to(last.dtype), last.shape[-2:])
        denom = weights.sum(dim=(-2, -1)).clamp_min(1e-6)
        return (last * weights).sum(dim=(-2, -1)) / denom


def unit_normalize(features: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    """Нормировка вектора признаков каждого пикселя на единичную длину по каналам."""
    norm = torch.sqrt(torch.sum(features**2, dim=1, keepdim=True) + eps)
    return features / norm
