"""
Дискриминатор и составной лосс генератора:
L_total = λ_adv·L_adv + λ_rec·L_rec + λ_lpips·L_lpips (+ λ_clipsim·L_promptsim).
"""

import math
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import LossWeights
from .exceptions import TrainingDivergedError
from .features import FeaturePyramid, unit_normalize
from .models import LossBreakdown

MIN_DISC_SIZE = 16

Number = Union[float, torch.Tensor]
Extractor = Callable[[torch.Tensor], List[torch.Tensor]]


class Discriminator(nn.Module):
    """
    Многоуровневый сверточный дискриминатор: три уровня со страйдами 2, 4, 8
    и 1×1 логит-голова на каждом уровне.
    """

    def __init__(self, channels: Sequence[int] = (32, 64, 128)):
        super().__init__()
        levels = []
        heads = []
        in_channels = 3
        for out_channels in channels:
            levels.append(
                nn.Sequential(
                    nn.Conv2d(in_channels, out_channels, 3, stride=2, padding=1),
                    nn.LeakyReLU(0.2),
                    nn.Conv2d(out_channels, out_channels, 3, padding=1),
                    nn.LeakyReLU(0.2),
                )
            )
            heads.append(nn.Conv2d(out_channels, 1, 1))
            in_channels = out_channels
        self.levels = nn.ModuleList(levels)
        self.heads = nn.ModuleList(heads)

    def forward(self, image: torch.Tensor) -> List[torch.Tensor]:
        if image.ndim != 4 or min(image.shape[-2:]) < MIN_DISC_SIZE:
            raise ValueError(
                f"Дискриминатору нужно изображение не меньше {MIN_DISC_SIZE}×{MIN_DISC_SIZE}, "
                f"получено {tuple(image.shape)}"
            )
        logits = []
        x = image
        for level, head in zip(self.levels, self.heads, strict=True):
            x = level(x)
            logits.append(head(x))
        return logits


def disc_forward(disc: Discriminator, image: torch.Tensor) -> List[torch.Tensor]:
    return disc(image)


def _bce(logits: torch.Tensor, target: float) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(logits, torch.full_like(logits, target))


def _check_role(fake_logits: Sequence[torch.Tensor], role: str, real_logits: Optional[Sequence[torch.Tensor]]) -> None:
    if role == "disc":
        if real_logits is None or len(real_logits) != len(fake_logits):
            raise ValueError("Для роли disc нужны логиты real на тех же уровнях")
    elif role != "gen":
        raise ValueError(f"Неизвестная роль: {role}")


def adversarial_loss_from_logits(
    fake_logits: Sequence[torch.Tensor],
    role: str,
    real_logits: Optional[Sequence[torch.Tensor]] = None,
) -> torch.Tensor:
    """multilevel_sigmoid_s: BCE с логитами, усредненная по пикселям и уровням."""
    _check_role(fake_logits, role, real_logits)
    if role == "disc":
        per_level = [_bce(r, 1.0) + _bce(f, 0.0) for r, f in zip(real_logits, fake_logits, strict=True)]  # type: ignore[arg-type]
    else:
        per_level = [_bce(f, 1.0) for f in fake_logits]
    return torch.stack(per_level).mean()


def hinge_loss_from_logits(
    fake_logits: Sequence[torch.Tensor],
    role: str,
    real_logits: Optional[Sequence[torch.Tensor]] = None,
) -> torch.Tensor:
    """multilevel_hinge: relu(1 − real) + relu(1 + fake) для D, −fake для G."""
    _check_role(fake_logits, role, real_logits)
    if role == "disc":
        per_level = [
            F.relu(1.0 - r).mean() + F.relu(1.0 + f).mean() for r, f in zip(real_logits, fake_logits, strict=True)  # type: ignore[arg-type]
        ]
    else:
        per_level = [-f.mean() for f in fake_logits]
    return torch.stack(per_level).mean()


LogitLoss = Callable[..., torch.Tensor]

DISCRIMINATORS: Dict[str, Callable[..., Discriminator]] = {"multilevel_conv": Discriminator}
ADVERSARIAL_LOSSES: Dict[str, LogitLoss] = {
    "multilevel_sigmoid_s": adversarial_loss_from_logits,
    "multilevel_hinge": hinge_loss_from_logits,
}


def build_discriminator(disc_type: str, channels: Sequence[int] = (32, 64, 128)) -> Discriminator:
    if disc_type not in DISCRIMINATORS:
        raise ValueError(f"Неизвестный тип дискриминатора: {disc_type}")
    return DISCRIMINATORS[disc_type](channels)


def adversarial_loss(
    disc: Discriminator,
    real: torch.Tensor,
    fake: torch.Tensor,
    role: str,
    loss_type: str = "multilevel_sigmoid_s",
) -> torch.Tensor:
    if real.shape != fake.shape:
        raise ValueError(f"Формы real {tuple(real.shape)} и fake {tuple(fake.shape)} не совпадают")
    if loss_type not in ADVERSARIAL_LOSSES:
        raise ValueError(f"Неизвестный тип GAN-лосса: {loss_type}")
    from_logits = ADVERSARIAL_LOSSES[loss_type]
    if role == "disc":
        return from_logits(disc_forward(disc, fake.detach()), "disc", real_logits=disc_forward(disc, real))
    return from_logits(disc_forward(disc, fake), role)


def reconstruction_loss(output: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if output.shape != target.shape:
        raise ValueError(f"Формы {tuple(output.shape)} и {tuple(target.shape)} не совпадают")
    return F.mse_loss(output, target)


def perceptual_loss(output: torch.Tensor, target: torch.Tensor, extractor: Extractor) -> torch.Tensor:
    """
    LPIPS-подобная дистанция: для каждого уровня признаки нормируются по
    каналам, берется среднее квадратов разности, уровни суммируются.
    """
    if output.shape != target.shape:
        raise ValueError(f"Формы {tuple(output.shape)} и {tuple(target.shape)} не совпадают")
    total = output.new_zeros(())
    for f_out, f_tgt in zip(extractor(output), extractor(target), strict=True):
        total = total + (unit_normalize(f_out) - unit_normalize(f_tgt)).pow(2).mean()
    return total


def promptsim_loss(
    pyramid: FeaturePyramid, output: torch.Tensor, mask: torch.Tensor, prompt_ctx: torch.Tensor
) -> torch.Tensor:
    """1 − cos между признаками выхода внутри маски и средним эмбеддингом промпта."""
    image_features = pyramid.masked_pooled(output, mask)
    text_features = prompt_ctx.mean(dim=1)
    if image_features.shape[-1] != text_features.shape[-1]:
        raise ValueError(
            f"Размерность признаков {image_features.shape[-1]} не совпадает с d_ctx {text_features.shape[-1]}"
        )
    return (1.0 - F.cosine_similarity(image_features, text_features.to(image_features.dtype), dim=-1)).mean()


def _as_float(value: Number) -> float:
    return float(value.detach()) if isinstance(value, torch.Tensor) else float(value)


def total_loss(
    parts: Mapping[str, Number],
    weights: Union[Mapping[str, float], LossWeights],
    step: int = -1,
) -> Tuple[torch.Tensor, LossBreakdown]:
    """
    Взвешенная сумма частей adv / rec / lpips (+ promptsim). Принимает LossWeights
    или словарь с ключами lambda_gan, lambda_l2, lambda_lpips, lambda_clipsim.
    NaN/Inf в любой части прерывает шаг через TrainingDivergedError.
    """
    if not isinstance(weights, Mapping):
        weights = weights.model_dump()
    lambdas: Dict[str, float] = {
        "adv": float(weights.get("lambda_gan", 2.5)),
        "rec": float(weights.get("lambda_l2", 10.0)),
        "lpips": float(weights.get("lambda_lpips", 10.0)),
    }
    if parts.get("promptsim") is not None:
        lambdas["promptsim"] = float(weights.get("lambda_clipsim", 5.0))

    for name in ("adv", "rec", "lpips"):
        if name not in parts:
            raise KeyError(f"Нет части лосса '{name}'")

    values = {name: _as_float(parts[name]) for name in lambdas}
    for name, value in values.items():
        if not math.isfinite(value):
            raise TrainingDivergedError(step, f"{name} = {value}")

    total: Number = 0.0
    for name, weight in lambdas.items():
        total = total + weight * parts[name]
    total_tensor = total if isinstance(total, torch.Tensor) else torch.tensor(total, dtype=torch.float64)

    breakdown = LossBreakdown(
        adv=values["adv"],
        rec=values["rec"],
        lpips=values["lpips"],
        promptsim=values.get("promptsim"),
        total=_as_float(total_tensor),
        weights=lambdas,
    )
    return total_tensor, breakdown
