"""
Одношаговый U-Net с cross-attention на эмбеддинг промпта и фиксированным
эмбеддингом шага t*.

Лестница каналов 64→128: два down-блока, middle (ResBlock, attention,
ResBlock), два up-блока с внутренними skip-соединениями.
"""

import math
from typing import Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import UNetConfig
from .models import Prompt

MAX_TIMESTEP = 1000


def time_embed(t: Union[int, torch.Tensor], dim: int = 64) -> torch.Tensor:
    """
    Синусоидальное позиционное кодирование шага t ∈ [0, 1000).

    Первая половина вектора - синусы, вторая - косинусы; частота i равна
    10000^(-i / (dim/2)). Для скаляра возвращается (dim,), для (B,) - (B, dim).
    """
    if dim % 2 != 0:
        raise ValueError(f"Размерность эмбеддинга времени должна быть четной, получено {dim}")
    steps = torch.as_tensor(t, dtype=torch.float64)
    if torch.any(steps < 0) or torch.any(steps >= MAX_TIMESTEP):
        raise ValueError(f"Шаг t должен лежать в [0, {MAX_TIMESTEP}), получено {t}")

    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = steps.unsqueeze(-1) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1).to(torch.float32)


class PromptEmbedder(nn.Module):
    """
    Обучаемая таблица эмбеддингов по закрытому словарю промптов плюс
    позиционные смещения: prompt_id → (L, d_ctx).

    Строка с индексом vocab_size зарезервирована под неизвестный промпт
    и используется только в нестрогом режиме.
    """

    def __init__(self, vocab_size: int, prompt_len: int = 4, d_ctx: int = 64, strict: bool = True):
        super().__init__()
        self.vocab_size = vocab_size
        self.prompt_len = prompt_len
        self.d_ctx = d_ctx
        self.strict = strict
        self.table = nn.Embedding(vocab_size + 1, prompt_len * d_ctx)
        self.positional = nn.Parameter(0.02 * torch.randn(prompt_len, d_ctx))

    def resolve_ids(self, prompt_ids: torch.Tensor) -> torch.Tensor:
        unknown = (prompt_ids < 0) | (prompt_ids >= self.vocab_size)
        if bool(unknown.any()):
            if self.strict:
                bad = prompt_ids[unknown].tolist()
                raise KeyError(f"Неизвестный prompt_id {bad} (словарь из {self.vocab_size} промптов)")
            prompt_ids = torch.where(unknown, torch.full_like(prompt_ids, self.vocab_size), prompt_ids)
        return prompt_ids

    def forward(self, prompt_ids: torch.Tensor) -> torch.Tensor:
        ids = self.resolve_ids(prompt_ids.long())
        rows = self.table(ids).view(*ids.shape, self.prompt_len, self.d_ctx)
        return rows + self.positional

    def embed_prompt(self, prompt: Prompt) -> torch.Tensor:
        ids = torch.tensor([prompt.prompt_id], device=self.table.weight.device)
        return self.forward(ids)[0]


class ResBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, t_channels: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, in_channels), in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.time_affine = nn.Linear(t_channels, 2 * out_channels)
        self.norm2 = nn.GroupNorm(min(groups, out_channels), out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = (
            nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()
        )

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.time_affine(t)[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """Запросы из пространственных признаков, ключи и значения из контекста промпта."""

    def __init__(self, channels: int, d_ctx: int, heads: int):
        super().__init__()
        if channels % heads != 0:
            raise ValueError(f"channels={channels} не делится на heads={heads}")
        self.heads = heads
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(d_ctx, channels, bias=False)
        self.to_v = nn.Linear(d_ctx, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        batch, tokens, channels = x.shape
        head_dim = channels // self.heads

        def _split(t: torch.Tensor) -> torch.Tensor:
            return t.view(batch, -1, self.heads, head_dim).transpose(1, 2)

        q, k, v = _split(self.to_q(x)), _split(self.to_k(ctx)), _split(self.to_v(ctx))
        weights = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(head_dim), dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(batch, tokens, channels)
        return self.to_out(out)


class SpatialTransformer(nn.Module):
    def __init__(self, channels: int, d_ctx: int, heads: int, groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(min(groups, channels), channels)
        self.proj_in = nn.Conv2d(channels, channels, 1)
        self.ln = nn.LayerNorm(channels)
        self.attn = CrossAttention(channels, d_ctx, heads)
        self.proj_out = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        batch, channels, height, width = x.shape
        h = self.proj_in(self.norm(x))
        h = h.flatten(2).transpose(1, 2)
        h = h + self.attn(self.ln(h), ctx)
        h = h.transpose(1, 2).reshape(batch, channels, height, width)
        return x + self.proj_out(h)


class UNet(nn.Module):
    def __init__(self, config: UNetConfig, latent_channels: int = 4):
        super().__init__()
        self.config = config
        self.latent_channels = latent_channels
        c0, c1 = config.channels
        t_channels = 4 * c0
        groups = config.norm_groups

        self.time_mlp = nn.Sequential(nn.Linear(config.d_t, t_channels), nn.SiLU(), nn.Linear(t_channels, t_channels))
        self.conv_in = nn.Conv2d(latent_channels, c0, 3, padding=1)

        self.down1 = ResBlock(c0, c0, t_channels, groups)
        self.downsample = nn.Conv2d(c0, c0, 3, stride=2, padding=1)
        self.down2 = ResBlock(c0, c1, t_channels, groups)

        self.mid1 = ResBlock(c1, c1, t_channels, groups)
        self.mid_attn = SpatialTransformer(c1, config.d_ctx, config.heads, groups)
        self.mid2 = ResBlock(c1, c1, t_channels, groups)

        self.up2 = ResBlock(c1 + c1, c1, t_channels, groups)
        self.upsample = nn.Conv2d(c1, c1, 3, padding=1)
        self.up1 = ResBlock(c1 + c0, c0, t_channels, groups)

        self.norm_out = nn.GroupNorm(min(groups, c0), c0)
        self.conv_out = nn.Conv2d(c0, latent_channels, 3, padding=1)

    def attention_projections(self) -> Sequence[nn.Module]:
        attn = self.mid_attn.attn
        return [attn.to_q, attn.to_k, attn.to_v, attn.to_out]

    def forward(self, latent: torch.Tensor, t_emb: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        if latent.ndim != 4 or latent.shape[1] != self.latent_channels:
            raise ValueError(
                f"Латент должен иметь форму (B, {self.latent_channels}, h, w), получено {tuple(latent.shape)}"
            )
        if latent.shape[-2] % 2 != 0 or latent.shape[-1] % 2 != 0:
            raise ValueError(f"Пространственные размеры латента должны быть четными: {tuple(latent.shape)}")
        if ctx.ndim != 3 or ctx.shape[-1] != self.config.d_ctx:
            raise ValueError(f"Контекст должен иметь форму (B, L, {self.config.d_ctx}), получено {tuple(ctx.shape)}")

        if t_emb.ndim == 1:
            t_emb = t_emb.unsqueeze(0).expand(latent.shape[0], -1)
        t = self.time_mlp(t_emb.to(latent.dtype))

        h0 = self.conv_in(latent)
        h1 = self.down1(h0, t)
        h2 = self.down2(self.downsample(h1), t)

        h = self.mid1(h2, t)
        h = self.mid_attn(h, ctx)
        h = self.mid2(h, t)

        h = self.up2(torch.cat([h, h2], dim=1), t)
        h = self.upsample(F.interpolate(h, scale_factor=2.0, mode="nearest"))
        h = self.up1(torch.cat([h, h1], dim=1), t)
        return self.conv_out(F.silu(self.norm_out(h)))

