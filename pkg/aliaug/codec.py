from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import CodecConfig
from .lora import ZeroConv


class DownBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, groups: int):
        super().__init__()
        self.down = nn.Conv2d(in_channels, out_channels, 3, stride=2, padding=1)
        self.norm = nn.GroupNorm(min(groups, out_channels), out_channels)
        self.conv = nn.Conv2d(out_channels, out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.silu(self.down(x))
        return F.silu(self.conv(self.norm(x)))


class UpBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, groups: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, in_channels, 3, padding=1)
        self.norm = nn.GroupNorm(min(groups, in_channels), in_channels)
        self.up = nn.Conv2d(in_channels, out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.silu(self.conv(self.norm(x)))
        x = F.interpolate(x, scale_factor=2.0, mode="nearest")
        return F.silu(self.up(x))


class Encoder(nn.Module):
    """
    Детерминированный энкодер E: три stride-2 блока (32→64→128) и 1×1
    проекция в 4 латентных канала. Выход каждого блока сохраняется как skip-tap.
    """

    def __init__(self, config: CodecConfig):
        super().__init__()
        c0, c1, c2 = config.channels
        self.stem = nn.Conv2d(3, c0, 3, padding=1)
        self.blocks = nn.ModuleList(
            [
                DownBlock(c0, c0, config.norm_groups),
                DownBlock(c0, c1, config.norm_groups),
                DownBlock(c1, c2, config.norm_groups),
            ]
        )
        self.proj = nn.Conv2d(c2, config.latent_channels, 1)

    def forward(self, image: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        if image.ndim != 4 or image.shape[-2] % 8 != 0 or image.shape[-1] % 8 != 0:
            raise ValueError(f"Размер входа {tuple(image.shape)} должен быть (B, 3, H, W) с H, W кратными 8")
        x = F.silu(self.stem(image))
        taps = []
        for block in self.blocks:
            x = block(x)
            taps.append(x)
        return self.proj(x), taps


class Decoder(nn.Module):
    """
    Декодер D, зеркальный энкодеру. Блок k получает свою активацию плюс
    ZeroConv_k(tap_k), taps берутся в обратном порядке. Выход ограничен tanh.
    """

    def __init__(self, config: CodecConfig):
        super().__init__()
        c0, c1, c2 = config.channels
        self.tap_channels = (c0, c1, c2)
        self.proj = nn.Conv2d(config.latent_channels, c2, 3, padding=1)
        self.blocks = nn.ModuleList(
            [
                UpBlock(c2, c1, config.norm_groups),
                UpBlock(c1, c0, config.norm_groups),
                UpBlock(c0, c0, config.norm_groups),
            ]
        )
        self.out = nn.Conv2d(c0, 3, 3, padding=1)

    def forward(
        self,
        latent: torch.Tensor,
        taps: Optional[Sequence[torch.Tensor]] = None,
        skip_convs: Optional[Sequence[ZeroConv]] = None,
    ) -> torch.Tensor:
        x = F.silu(self.proj(latent))
        if taps is not None:
            if skip_convs is None or len(skip_convs) != len(taps) or len(taps) != len(self.blocks):
                raise ValueError(
                    f"Ожидалось {len(self.blocks)} taps и столько же ZeroConv, "
                    f"получено {len(taps)} / {0 if skip_convs is None else len(skip_convs)}"
                )
        for k, block in enumerate(self.blocks):
            if taps is not None and skip_convs is not None:
                index = len(self.blocks) - 1 - k
                tap = taps[index]
                if tap.shape[1:] != x.shape[1:]:
                    raise ValueError(
                        f"Tap {index}: форма {tuple(tap.shape[1:])} не совпадает с блоком {tuple(x.shape[1:])}"
                    )
                x = x + skip_convs[index](tap)
            x = block(x)
        return torch.tanh(self.out(x))


class Codec(nn.Module):
    """Общий энкодер E (для изображения и маски) и skip-декодер D."""

    def __init__(self, config: CodecConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.decoder = Decoder(config)

    def make_skip_convs(self) -> nn.ModuleList:
        return nn.ModuleList([ZeroConv(c, c) for c in self.decoder.tap_channels])

    def encode(self, image: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        return self.encoder(image)

    def decode(
        self,
        latent: torch.Tensor,
        taps: Optional[Sequence[torch.Tensor]] = None,
        skip_convs: Optional[Sequence[ZeroConv]] = None,
    ) -> torch.Tensor:
        return self.decoder(latent, taps, skip_convs)
