"""
Цикл обучения генератора: чередование шагов дискриминатора и генератора,
warmup-расписание, клиппинг градиентов, периодические FID / сетки примеров /
чекпоинты. Запуск полностью определяется (манифесты, конфигурация, seed).
"""

import hashlib
import io
import json
import math
import random
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
from torch.optim import AdamW
from torch.optim.lr_scheduler import LambdaLR
from torch.utils.tensorboard import SummaryWriter
from torchvision.utils import save_image
from tqdm import tqdm

from .config import DEFAULT_PROMPTS, ModelConfig, TrainConfig, derive_seed, resolve_device
from .dataset import RecordDataset, prepare_record, to_storage_range
from .exceptions import CheckpointError, TrainingDivergedError
from .features import FeaturePyramid
from .generator import AliAugGenerator, build_generator, input_keep_mask
from .losses import adversarial_loss, build_discriminator, perceptual_loss, promptsim_loss, reconstruction_loss, total_loss
from .models import DatasetManifest, LossBreakdown, SampleRecord
from .storage import vocabulary_for

CHECKPOINT_VERSION = "aliaug-ckpt/1"


def make_schedule(cfg: TrainConfig) -> Callable[[int], float]:
    """lr(step) = learning_rate · lr_factor(cfg)(step)."""
    factor = lr_factor(cfg)

    def lr_at(step: int) -> float:
        return cfg.learning_rate * factor(step)

    return lr_at


def lr_factor(cfg: TrainConfig) -> Callable[[int], float]:
    """
    Множитель lr: линейный warmup от 0 за warmup_steps, затем константа
    (constant) или косинус до нуля к max_steps с lr_num_cycles жесткими
    рестартами (cosine_with_restarts).
    """
    warmup, cycles = cfg.warmup_steps, cfg.lr_num_cycles
    decay_steps = max(1, cfg.max_steps - warmup)

    def factor(step: int) -> float:
        if step < warmup:
            return step / warmup
        if cfg.lr_scheduler == "constant":
            return 1.0
        progress = (step - warmup) / decay_steps
        if progress >= 1.0:
            return 0.0
        return 0.5 * (1.0 + math.cos(math.pi * ((cycles * progress) % 1.0)))

    return factor


class TrainState:
    """Все, что меняется за время обучения, плюс замороженная часть для проверки хеша."""

    def __init__(
        self,
        cfg: TrainConfig,
        model_config: ModelConfig,
        device: str = "cpu",
    ):
        self.cfg = cfg
        self.model_config = model_config
        self.device = device
        self.step = 0

        self.generator: AliAugGenerator = build_generator(model_config, device)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(cfg.seed, 4))
            self.discriminator = build_discriminator(cfg.gan_disc_type, model_config.disc_channels).to(device)
        self.pyramid = FeaturePyramid(model_config.feature_channels, model_config.feature_seed).to(device)

        betas = (cfg.adam_beta1, cfg.adam_beta2)
        self.opt_g = AdamW(
            list(self.generator.trainable_parameters()),
            lr=cfg.learning_rate,
            betas=betas,
            weight_decay=cfg.adam_weight_decay,
        )
        self.opt_d = AdamW(
            self.discriminator.parameters(),
            lr=cfg.learning_rate,
            betas=betas,
            weight_decay=cfg.adam_weight_decay,
        )
        self.sched_g = LambdaLR(self.opt_g, lr_factor(cfg))
        self.sched_d = LambdaLR(self.opt_d, lr_factor(cfg))

    @property
    def lr(self) -> float:
        return float(self.opt_g.param_groups[0]["lr"])

    @property
    def base_hash(self) -> str:
        return self.generator.base_hash


def build_state(
    cfg: TrainConfig,
    vocabulary: Optional[Sequence[str]] = None,
    device: Optional[str] = None,
    model_config: Optional[ModelConfig] = None,
) -> TrainState:
    if model_config is None:
        model_config = cfg.build_model_config(list(vocabulary) if vocabulary is not None else None)
    return TrainState(cfg, model_config, resolve_device(device))


def _collate(
    records: Sequence[SampleRecord], image_size: int, seed: int, augment: bool, device: str
) -> Dict[str, torch.Tensor]:
    dataset = RecordDataset(records, image_size=image_size, augment=augment, seed=seed)
    items = [dataset.item(i, derive_seed(seed, i)) for i in range(len(dataset))]
    return {key: torch.stack([item[key] for item in items]).to(device) for key in items[0]}


def _clip(parameters: Sequence[nn.Parameter], max_norm: float, step: int) -> float:
    norm = float(torch.nn.utils.clip_grad_norm_(parameters, max_norm))
    if not np.isfinite(norm):
        raise TrainingDivergedError(step, f"норма градиента = {norm}")
    return norm


def train_step(state: TrainState, batch: Sequence[SampleRecord], augment: bool = True) -> LossBreakdown:
    """
    Один шаг оптимизации над batch_size · gradient_accumulation_steps записями:
    (1) дискриминатор на target против отсоединенного fake, (2) генератор на
    total_loss при текущем D. Градиенты клиппируются до max_grad_norm.
    """
    cfg = state.cfg
    accum = cfg.gradient_accumulation_steps
    if not batch:
        raise ValueError(f"Пустой батч на шаге {state.step}")
    if len(batch) != cfg.batch_size * accum:
        raise ValueError(
            f"Ожидалось {cfg.batch_size * accum} записей (batch_size · gradient_accumulation_steps), "
            f"получено {len(batch)}"
        )

    step = state.step
    seed = derive_seed(cfg.seed, step)
    generator, disc = state.generator, state.discriminator
    generator.train()
    disc.train()

    micro_batches = []
    for k in range(accum):
        records = batch[k * cfg.batch_size : (k + 1) * cfg.batch_size]
        data = _collate(records, cfg.train_size, derive_seed(seed, k), augment, state.device)
        keep = input_keep_mask(data["mask_only"], cfg.drop_prob, derive_seed(seed, 1000 + k), "train")
        keep = keep & data["has_input"]
        fake = generator(data["input"], data["mask"], data["prompt_id"], keep=keep)
        micro_batches.append((data, fake))

    # дискриминатор
    state.opt_d.zero_grad(set_to_none=True)
    disc_total = 0.0
    for data, fake in micro_batches:
        loss_d = adversarial_loss(disc, data["target"], fake, "disc", cfg.gan_loss_type)
        (loss_d / accum).backward()
        disc_total += float(loss_d.detach()) / accum
    if not np.isfinite(disc_total):
        raise TrainingDivergedError(step, f"лосс дискриминатора = {disc_total}")
    _clip(list(disc.parameters()), cfg.max_grad_norm, step)
    state.opt_d.step()
    state.sched_d.step()

    # генератор
    disc.requires_grad_(False)
    state.opt_g.zero_grad(set_to_none=True)
    breakdowns: List[LossBreakdown] = []
    try:
        for data, fake in micro_batches:
            parts = {
                "adv": adversarial_loss(disc, data["target"], fake, "gen", cfg.gan_loss_type),
                "rec": reconstruction_loss(fake, data["target"]),
                "lpips": perceptual_loss(fake, data["target"], state.pyramid),
            }
            if cfg.use_promptsim:
                parts["promptsim"] = promptsim_loss(
                    state.pyramid, fake, data["mask"], generator.embedder(data["prompt_id"])
                )
            loss, breakdown = total_loss(parts, cfg.loss_weights(), step=step)
            (loss / accum).backward()
            breakdowns.append(breakdown)
    finally:
        disc.requires_grad_(True)

    trainable = list(generator.trainable_parameters())
    grad_norm = _clip(trainable, cfg.max_grad_norm, step)
    state.opt_g.step()
    state.sched_g.step()
    state.step += 1

    def _mean(name: str) -> float:
        return float(np.mean([getattr(b, name) for b in breakdowns]))

    promptsim = _mean("promptsim") if cfg.use_promptsim else None
    return LossBreakdown(
        adv=_mean("adv"),
        rec=_mean("rec"),
        lpips=_mean("lpips"),
        promptsim=promptsim,
        total=_mean("total"),
        weights=breakdowns[0].weights,
        disc=disc_total,
        grad_norm=grad_norm,
    )


def _rng_state() -> Dict:
    return {"torch": torch.get_rng_state(), "numpy": np.random.get_state(), "python": random.getstate()}


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    """
    Версионированный архив: хеш замороженной базы (сами веса базы не
    сохраняются, они восстанавливаются из base_seed), обучаемые тензоры,
    дискриминатор, оптимизаторы, расписания, шаг, RNG и снимки конфигураций.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "base_hash": state.generator.frozen_hash(),
        "generator": state.generator.trainable_state(),
        "discriminator": state.discriminator.state_dict(),
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
        "sched_g": state.sched_g.state_dict(),
        "sched_d": state.sched_d.state_dict(),
        "step": state.step,
        "rng": _rng_state(),
        "train_config": state.cfg.model_dump(mode="json"),
        "model_config": state.model_config.model_dump(mode="json"),
    }
    buffer = io.BytesIO()
    torch.save(payload, buffer)
    blob = buffer.getvalue()
    torch.save(
        {"version": CHECKPOINT_VERSION, "sha256": hashlib.sha256(blob).hexdigest(), "payload": blob},
        path,
    )
    return path


def _read_payload(path: Path) -> Dict:
    if not path.exists():
        raise CheckpointError(f"Чекпоинт не найден: {path}")
    try:
        archive = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise CheckpointError(f"Не удалось прочитать чекпоинт {path}: {e}") from e
    if not isinstance(archive, dict) or "payload" not in archive:
        raise CheckpointError(f"Поврежденный чекпоинт: {path}")
    if archive.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"Версия чекпоинта {archive.get('version')!r} не совпадает с {CHECKPOINT_VERSION!r}: {path}"
        )
    blob = archive["payload"]
    if hashlib.sha256(blob).hexdigest() != archive.get("sha256"):
        raise CheckpointError(f"Контрольная сумма чекпоинта не совпадает: {path}")
    return torch.load(io.BytesIO(blob), map_location="cpu", weights_only=False)  # type: ignore[no-any-return]


def load_checkpoint(path: str | Path, device: Optional[str] = None, restore_rng: bool = True) -> TrainState:
    path = Path(path)
    payload = _read_payload(path)
    cfg = TrainConfig(**payload["train_config"])
    model_config = ModelConfig(**payload["model_config"])
    state = build_state(cfg, device=device, model_config=model_config)

    if state.generator.base_hash != payload["base_hash"]:
        raise CheckpointError(
            f"Хеш замороженной базы не совпадает ({state.generator.base_hash[:12]} != "
            f"{payload['base_hash'][:12]}): {path}"
        )
    state.generator.load_trainable_state(payload["generator"])
    state.discriminator.load_state_dict(payload["discriminator"])
    state.opt_g.load_state_dict(payload["opt_g"])
    state.opt_d.load_state_dict(payload["opt_d"])
    state.sched_g.load_state_dict(payload["sched_g"])
    state.sched_d.load_state_dict(payload["sched_d"])
    state.step = int(payload["step"])
    if restore_rng:
        rng = payload["rng"]
        torch.set_rng_state(rng["torch"])
        np.random.set_state(rng["numpy"])
        random.setstate(rng["python"])
    return state


def load_generator(path: str | Path, device: Optional[str] = None) -> AliAugGenerator:
    """Генератор из чекпоинта для инференса (без оптимизаторов и дискриминатора)."""
    path = Path(path)
    payload = _read_payload(path)
    model_config = ModelConfig(**payload["model_config"])
    generator = build_generator(model_config, resolve_device(device))
    if generator.base_hash != payload["base_hash"]:
        raise CheckpointError(f"Хеш замороженной базы не совпадает: {path}")
    generator.load_trainable_state(payload["generator"])
    generator.eval()
    return generator


class Trainer:
    """
    Обучение по одному или нескольким манифестам. Порядок записей - перестановка
    по эпохам, вычисляемая из (seed, эпоха), поэтому возобновление с чекпоинта
    воспроизводит непрерывный прогон шаг в шаг.
    """

    def __init__(
        self,
        manifests: Sequence[DatasetManifest],
        cfg: TrainConfig,
        out_dir: str | Path,
        eval_manifest: Optional[DatasetManifest] = None,
        state: Optional[TrainState] = None,
        device: Optional[str] = None,
        verbose: bool = True,
    ):
        records = [record for manifest in manifests for record in manifest.records]
        if not records:
            raise ValueError("Обучающий манифест пуст")
        missing = [r.record_id for r in records if r.target_image is None]
        if missing:
            raise ValueError(f"Записи без целевого изображения не подходят для обучения: {missing[:5]}")

        self.records = records
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        eval_source = eval_manifest.records if eval_manifest is not None else records
        self.eval_records = [prepare_record(r, cfg.eval_size) for r in eval_source]
        self.verbose = verbose
        self.history: List[Dict] = []
        self._orders: Dict[int, np.ndarray] = {}

        if state is None:
            vocabulary = self._vocabulary(manifests, records)
            state = build_state(cfg, vocabulary, device)
        self.state = state

        self.writer: Optional[SummaryWriter] = None
        if cfg.report_to == "tensorboard":
            self.writer = SummaryWriter(log_dir=str(self.out_dir / "logs"))

    @staticmethod
    def _vocabulary(manifests: Sequence[DatasetManifest], records: Sequence[SampleRecord]) -> List[str]:
        source = next((m.source for m in manifests if m.source is not None), None)
        prompts = vocabulary_for(source).prompts if source is not None else list(DEFAULT_PROMPTS)
        for record in records:
            prompt = record.prompt
            if prompt.prompt_id >= len(prompts) or prompts[prompt.prompt_id] != prompt.text:
                raise ValueError(
                    f"Промпт '{prompt.text}' записи {record.record_id} не совпадает со словарем ({len(prompts)} промптов)"
                )
        return list(prompts)

    def _order(self, epoch: int) -> np.ndarray:
        # кэш перестановки текущей эпохи
        if epoch not in self._orders:
            rng = np.random.default_rng(derive_seed(self.cfg.seed, 7919, epoch))
            self._orders = {epoch: rng.permutation(len(self.records))}
        return self._orders[epoch]

    def batch_for_step(self, step: int) -> List[SampleRecord]:
        per_step = self.cfg.batch_size * self.cfg.gradient_accumulation_steps
        batch = []
        for j in range(per_step):
            position = step * per_step + j
            epoch, offset = divmod(position, len(self.records))
            batch.append(self.records[int(self._order(epoch)[offset])])
        return batch

    @property
    def log_path(self) -> Path:
        return self.out_dir / "train_log.jsonl"

    def _reset_log(self) -> None:
        """Новый запуск начинает лог с нуля; продолжение оставляет записи до текущего шага."""
        if not self.log_path.exists():
            return
        kept: List[str] = []
        if self.state.step > 0:
            lines = self.log_path.read_text(encoding="utf-8").splitlines()
            kept = [line for line in lines if line.strip() and json.loads(line)["step"] <= self.state.step]
        self.log_path.write_text("".join(f"{line}\n" for line in kept), encoding="utf-8")

    def _log(self, step: int, breakdown: LossBreakdown) -> None:
        entry = {"step": step, "lr": self.state.lr, **breakdown.model_dump(exclude={"weights"})}
        self.history.append(entry)
        with open(self.log_path, "a", encoding="utf-8") as f:
            f.write(json.dumps(entry, sort_keys=True) + "\n")
        if self.writer is not None:
            for key in ("adv", "rec", "lpips", "promptsim", "total", "disc", "grad_norm"):
                value = entry.get(key)
                if value is not None:
                    self.writer.add_scalar(f"loss/{key}", value, step)
            self.writer.add_scalar("train/lr", entry["lr"], step)

    @torch.no_grad()
    def evaluate_fid(self) -> Optional[float]:
        from .evaluation import extract_features, frechet_distance

        records = self.eval_records[: self.cfg.num_samples_eval]
        if len(records) < 2:
            return None
        generator = self.state.generator
        generator.eval()
        cfg = self.cfg.generator_config("eval")
        outputs = [to_storage_range(generator.generate(r, cfg, seed=derive_seed(self.cfg.seed, i))) for i, r in enumerate(records)]
        real = extract_features([r.display_image for r in records], self.state.pyramid)
        fake = extract_features(outputs, self.state.pyramid)
        generator.train()
        return frechet_distance(real, fake)

    @torch.no_grad()
    def save_samples(self, step: int, count: int = 4) -> Path:
        generator = self.state.generator
        generator.eval()
        cfg = self.cfg.generator_config("eval")
        rows = []
        for i, record in enumerate(self.eval_records[:count]):
            output = to_storage_range(generator.generate(record, cfg, seed=derive_seed(self.cfg.seed, i)))
            blank = torch.zeros_like(output)
            rows.extend(
                [
                    record.input_image if record.input_image is not None else blank,
                    record.mask.expand(3, -1, -1),
                    output,
                    record.target_image if record.target_image is not None else blank,
                ]
            )
        generator.train()
        path = self.out_dir / "samples" / f"step_{step:06d}.png"
        path.parent.mkdir(parents=True, exist_ok=True)
        save_image(torch.stack(rows), path, nrow=4, padding=2)
        return path

    def checkpoint_path(self, step: int) -> Path:
        return self.out_dir / "checkpoints" / f"checkpoint-{step}.pt"

    def run(self) -> Path:
        cfg = self.cfg
        self.out_dir.mkdir(parents=True, exist_ok=True)
        state = self.state
        self._reset_log()
        final_path = self.checkpoint_path(cfg.max_steps)

        if self.verbose:
            print(f"🚀 Обучение: {len(self.records)} записей, шаги {state.step}→{cfg.max_steps}")
            print(f"⚙️  Устройство: {state.device}, lr={cfg.learning_rate}, warmup={cfg.warmup_steps}")
            audit = state.generator.parameter_audit()
            print(f"📦 Обучаемых параметров: {audit['trainable']:,} (LoRA {audit['lora']:,}), заморожено {audit['frozen']:,}")

        progress = tqdm(
            range(state.step, cfg.max_steps),
            initial=state.step,
            total=cfg.max_steps,
            desc="train",
            disable=not self.verbose,
        )
        for step in progress:
            breakdown = train_step(state, self.batch_for_step(step))
            done = state.step
            self._log(done, breakdown)
            progress.set_postfix(total=f"{breakdown.total:.4f}", rec=f"{breakdown.rec:.4f}")

            try:
                if done % cfg.eval_frequency == 0:
                    fid = self.evaluate_fid()
                    if fid is not None:
                        self.history[-1]["fid"] = fid
                        if self.writer is not None:
                            self.writer.add_scalar("eval/fid", fid, done)
                if done % cfg.viz_frequency == 0:
                    self.save_samples(done)
                if done % cfg.checkpointing_steps == 0 or done == cfg.max_steps:
                    save_checkpoint(state, self.checkpoint_path(done))
            except OSError as e:
                raise OSError(f"Ошибка ввода-вывода на шаге {done}: {e}") from e

        if not final_path.exists():
            save_checkpoint(state, final_path)
        if self.writer is not None:
            self.writer.close()
        if self.verbose:
            last = self.history[-1]["total"] if self.history else float("nan")
            print(f"✅ Обучение завершено: шаг {state.step}, total={last:.4f}")
            print(f"📦 Чекпоинт: {final_path}")
        return final_path


def train_loop(
    manifests: Sequence[DatasetManifest],
    cfg: TrainConfig,
    out_dir: str | Path,
    eval_manifest: Optional[DatasetManifest] = None,
    resume: Optional[str | Path] = None,
    device: Optional[str] = None,
    verbose: bool = True,
) -> Path:
    state = load_checkpoint(resume, device) if resume is not None else None
    if state is not None and state.cfg.seed != cfg.seed:
        raise CheckpointError(f"seed чекпоинта {state.cfg.seed} не совпадает с конфигурацией {cfg.seed}")
    if state is not None:
        state.cfg = cfg
    trainer = Trainer(manifests, cfg, out_dir, eval_manifest=eval_manifest, state=state, device=device, verbose=verbose)
    return trainer.run()
