"""
Генератор G(I, M, T): общий энкодер для изображения и маски, слияние
F = F_M + ZeroConv(F_I), один проход U-Net на шаге t* и skip-декодер.
"""

import hashlib
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
from pydantic import BaseModel, ConfigDict

from .backbone import PromptEmbedder, UNet, time_embed
from .codec import Codec
from .config import GeneratorConfig, ModelConfig, derive_seed
from .dataset import to_model_range, validate_record
from .lora import ZeroConv, inject_lora, lora_adapters
from .models import Pairing, Prompt, SampleRecord


def fuse_features(f_mask: torch.Tensor, f_input: torch.Tensor, zc: ZeroConv) -> torch.Tensor:
    if f_mask.shape != f_input.shape:
        raise ValueError(f"Формы признаков не совпадают: {tuple(f_mask.shape)} и {tuple(f_input.shape)}")
    return f_mask + zc(f_input)


class EffectiveInput(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    image: torch.Tensor
    dropped: bool


def draw_drop(drop_prob: float, seed: int) -> bool:
    return bool(np.random.default_rng(seed).random() < drop_prob)


def apply_input_dropout(
    record: SampleRecord, drop_prob: float, seed: int, mode: str = "train"
) -> EffectiveInput:
    """
    Эффективный вход генератора. В режиме train вход заменяется нулями с
    вероятностью drop_prob, в eval только для mask_only записей.
    Сброшенный вход также обнуляет skip-taps (см. AliAugGenerator.forward).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"Неизвестный режим: {mode}")
    if record.pairing == Pairing.MASK_ONLY or record.input_image is None:
        dropped = True
    elif mode == "train":
        dropped = draw_drop(drop_prob, seed)
    else:
        dropped = False

    if dropped:
        height, width = record.mask.shape[-2:]
        return EffectiveInput(image=torch.zeros(3, height, width), dropped=True)
    assert record.input_image is not None
    return EffectiveInput(image=record.input_image, dropped=False)


def input_keep_mask(
    mask_only: torch.Tensor, drop_prob: float, seed: int, mode: str = "train"
) -> torch.Tensor:
    """Батчевая версия: (B,) bool, True - вход сохраняется."""
    keep = ~mask_only.bool()
    if mode == "train" and drop_prob > 0:
        draws = np.random.default_rng(seed).random(mask_only.shape[0]) < drop_prob
        keep = keep & ~torch.from_numpy(draws).to(keep.device)
    return keep


class AliAugGenerator(nn.Module):
    """
    Замороженная база (кодек + U-Net) инициализируется из config.base_seed,
    поверх нее LoRA-адаптеры. Обучаемы только LoRA, ZeroConv и эмбеддер промптов.
    """

    def __init__(self, config: ModelConfig, strict_prompts: bool = True):
        super().__init__()
        self.config = config
        self.vocabulary = list(config.vocabulary)

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.base_seed)
            self.codec = Codec(config.codec)
            self.unet = UNet(config.unet, latent_channels=config.codec.latent_channels)
            torch.manual_seed(derive_seed(config.base_seed, 2))
            self.embedder = PromptEmbedder(
                len(self.vocabulary),
                prompt_len=config.unet.prompt_len,
                d_ctx=config.unet.d_ctx,
                strict=strict_prompts,
            )

        for param in [*self.codec.parameters(), *self.unet.parameters()]:
            param.requires_grad_(False)
        self._base_hash = self._hash_frozen()

        inject_lora(self.codec, config.codec.lora_rank, config.codec.lora_alpha, seed=derive_seed(config.base_seed, 1))
        inject_lora(self.unet, config.unet.lora_rank, config.unet.lora_alpha, seed=derive_seed(config.base_seed, 3))

        self.skip_convs = self.codec.make_skip_convs()
        self.input_fuse = ZeroConv(config.codec.latent_channels, config.codec.latent_channels)
        self.timestep = config.unet.timestep

    def _hash_frozen(self) -> str:
        digest = hashlib.sha256()
        named = sorted(
            (name, param) for name, param in self.named_parameters() if not param.requires_grad
        )
        for name, param in named:
            # имена адаптеров содержат ".base."; приводим к исходным именам слоев
            digest.update(name.replace(".base.", ".").encode("utf-8"))
            digest.update(param.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()

    @property
    def base_hash(self) -> str:
        return self._base_hash

    def frozen_hash(self) -> str:
        """Хеш текущих замороженных весов; совпадает с base_hash, пока база не тронута."""
        return self._hash_frozen()

    def trainable_parameters(self) -> Iterator[nn.Parameter]:
        return (p for p in self.parameters() if p.requires_grad)

    def trainable_state(self) -> Dict[str, torch.Tensor]:
        names = {name for name, p in self.named_parameters() if p.requires_grad}
        return {k: v.detach().clone() for k, v in self.state_dict().items() if k in names}

    def load_trainable_state(self, state: Dict[str, torch.Tensor]) -> None:
        missing = {name for name, p in self.named_parameters() if p.requires_grad} - set(state)
        if missing:
            raise KeyError(f"В состоянии нет обучаемых параметров: {sorted(missing)[:5]}")
        self.load_state_dict(state, strict=False)

    def parameter_audit(self) -> Dict[str, int]:
        lora = sum(a.trainable_count() for a in lora_adapters(self))
        zero = sum(p.numel() for m in [*self.skip_convs, self.input_fuse] for p in m.parameters())
        embedder = sum(p.numel() for p in self.embedder.parameters())
        return {
            "lora": lora,
            "zero_conv": zero,
            "embedder": embedder,
            "trainable": sum(p.numel() for p in self.trainable_parameters()),
            "frozen": sum(p.numel() for p in self.parameters() if not p.requires_grad),
        }

    def prompt_ids(self, prompts: Sequence[Prompt]) -> torch.Tensor:
        ids: List[int] = []
        for prompt in prompts:
            known = prompt.prompt_id < len(self.vocabulary) and self.vocabulary[prompt.prompt_id] == prompt.text
            if not known and self.embedder.strict:
                raise KeyError(f"Неизвестный промпт: '{prompt.text}' (id {prompt.prompt_id})")
            ids.append(prompt.prompt_id if known else len(self.vocabulary))
        return torch.tensor(ids, dtype=torch.long, device=self.input_fuse.conv.weight.device)

    def encode_mask(self, mask: torch.Tensor) -> torch.Tensor:
        """Маска (B, 1, H, W) в {0,1} → 3-канальное изображение 2m−1 → тот же энкодер; taps отбрасываются."""
        latent, _ = self.codec.encode((mask * 2.0 - 1.0).expand(-1, 3, -1, -1))
        return latent

    def forward(
        self,
        input_image: Optional[torch.Tensor],
        mask: torch.Tensor,
        prompt_ids: torch.Tensor,
        keep: Optional[torch.Tensor] = None,
        timestep: Optional[int] = None,
    ) -> torch.Tensor:
        """
        Один шаг редактирования. input_image в диапазоне модели [-1, 1] или None.
        keep (B,) bool: False - вход сброшен (нулевое изображение и нулевые taps).
        """
        if mask is None:
            raise ValueError("Маска обязательна")
        batch = mask.shape[0]
        if input_image is None:
            input_image = torch.zeros(batch, 3, *mask.shape[-2:], dtype=mask.dtype, device=mask.device)
            keep = torch.zeros(batch, dtype=torch.bool, device=mask.device)
        if keep is not None:
            gate = keep.to(input_image.dtype).view(-1, 1, 1, 1)
            input_image = input_image * gate

        f_input, taps = self.codec.encode(input_image)
        if keep is not None:
            taps = [tap * gate for tap in taps]
        f_mask = self.encode_mask(mask.to(input_image.dtype))
        fused = fuse_features(f_mask, f_input, self.input_fuse)

        ctx = self.embedder(prompt_ids)
        t_emb = time_embed(self.timestep if timestep is None else timestep, self.config.unet.d_t)
        latent = self.unet(fused, t_emb.to(fused.device), ctx.to(fused.dtype))
        return self.codec.decode(latent, taps, self.skip_convs)

    @torch.no_grad()
    def generate(
        self,
        record: SampleRecord,
        cfg: Optional[GeneratorConfig] = None,
        seed: int = 0,
        input_override: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """
        Одношаговая генерация для одной записи. Возвращает изображение (3, H, W)
        в диапазоне модели [-1, 1]. input_override (диапазон хранения)
        подменяет вход записи, например чистым изображением при сборке CAS.
        """
        cfg = cfg or GeneratorConfig()
        if input_override is not None:
            record = record.model_copy(update={"input_image": input_override, "pairing": Pairing.UNPAIRED})
            if record.target_image is None:
                record = record.model_copy(update={"target_image": input_override})
        result = validate_record(record)
        if not result.valid:
            raise ValueError(f"Некорректная запись {record.record_id}: {result.reason}")

        effective = apply_input_dropout(record, cfg.drop_prob, seed, cfg.mode)
        device = self.input_fuse.conv.weight.device
        image = to_model_range(effective.image).unsqueeze(0).to(device)
        mask = record.mask.unsqueeze(0).to(device)
        keep = torch.tensor([not effective.dropped], device=device)
        ids = self.prompt_ids([record.prompt])
        return self.forward(image, mask, ids, keep=keep, timestep=cfg.timestep)[0].cpu()


def build_generator(config: ModelConfig, device: str = "cpu", strict_prompts: bool = True) -> AliAugGenerator:
    return AliAugGenerator(config, strict_prompts=strict_prompts).to(device)
