"""
LoRA-адаптеры: замороженный базовый вес W и обучаемая добавка (α/r)·B·A.
B инициализируется нулями, поэтому до обучения слой совпадает с базой.
"""

from typing import Iterator, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F


class ZeroConv(nn.Module):
    """1×1 свертка с нулевыми весом и смещением: на инициализации выход ≡ 0."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=1)
        nn.init.zeros_(self.conv.weight)
        nn.init.zeros_(self.conv.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class LoRAAdapter(nn.Module):
    base: nn.Module

    def __init__(self, base: nn.Module, rank: int, alpha: Optional[float] = None, seed: int = 0):
        super().__init__()
        d_out, d_in = self.dims(base)
        if rank < 1 or rank > min(d_in, d_out):
            raise ValueError(f"Ранг LoRA {rank} вне [1, min({d_in}, {d_out})]")

        self.base = base
        for param in self.base.parameters():
            param.requires_grad_(False)

        self.rank = rank
        self.alpha = float(rank if alpha is None else alpha)
        self.scale = self.alpha / rank

        generator = torch.Generator().manual_seed(seed)
        weight = base.weight  # type: ignore[union-attr]
        a = torch.randn(rank, d_in, generator=generator, dtype=torch.float32) / d_in**0.5
        self.lora_A = nn.Parameter(a.to(device=weight.device, dtype=weight.dtype))
        self.lora_B = nn.Parameter(torch.zeros(d_out, rank, device=weight.device, dtype=weight.dtype))

    @staticmethod
    def dims(layer: nn.Module) -> Tuple[int, int]:
        if isinstance(layer, nn.Conv2d):
            kh, kw = layer.kernel_size
            return layer.out_channels, layer.in_channels // layer.groups * kh * kw
        if isinstance(layer, nn.Linear):
            return layer.out_features, layer.in_features
        raise TypeError(f"LoRA поддерживает только Conv2d и Linear, получено {type(layer).__name__}")

    def delta_weight(self) -> torch.Tensor:
        return (self.lora_B @ self.lora_A).view_as(self.base.weight) * self.scale  # type: ignore[union-attr]

    def effective_weight(self) -> torch.Tensor:
        return self.base.weight + self.delta_weight()  # type: ignore[union-attr, operator]

    def trainable_count(self) -> int:
        return self.lora_A.numel() + self.lora_B.numel()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        base = self.base
        weight = self.effective_weight()
        if isinstance(base, nn.Conv2d):
            return F.conv2d(x, weight, base.bias, base.stride, base.padding, base.dilation, base.groups)
        return F.linear(x, weight, base.bias)  # type: ignore[arg-type]


def wrap_lora(layer: nn.Module, rank: int, alpha: Optional[float] = None, seed: int = 0) -> LoRAAdapter:
    return LoRAAdapter(layer, rank=rank, alpha=alpha, seed=seed)


def inject_lora(module: nn.Module, rank: int, alpha: Optional[float] = None, seed: int = 0) -> int:
    """
    Рекурсивно оборачивает каждый Conv2d / Linear в LoRAAdapter (кроме ZeroConv
    и уже обернутых слоев). Возвращает число обернутых слоев.
    """
    counter = 0

    def _visit(parent: nn.Module) -> None:
        nonlocal counter
        for name, child in list(parent.named_children()):
            if isinstance(child, (ZeroConv, LoRAAdapter)):
                continue
            if isinstance(child, (nn.Conv2d, nn.Linear)):
                d_out, d_in = LoRAAdapter.dims(child)
                layer_rank = min(rank, d_in, d_out)
                setattr(parent, name, LoRAAdapter(child, layer_rank, alpha, seed=seed + counter))
                counter += 1
            else:
                _visit(child)

    _visit(module)
    return counter


def lora_adapters(module: nn.Module) -> Iterator[LoRAAdapter]:
    for child in module.modules():
        if isinstance(child, LoRAAdapter):
            yield child


def zero_convs(module: nn.Module) -> Iterator[ZeroConv]:
    for child in module.modules():
        if isinstance(child, ZeroConv):
            yield child
