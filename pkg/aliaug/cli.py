"""
Единая точка входа: `aliaug <подкоманда> ...`.

Подкоманды повторяют конвейер: synth-corpus / import-mvtec → train →
generate / build-cas / build-nas → eval-fid / eval-downstream → report.
Каждая подкоманда пишет результаты в --out вместе с run_metadata.json.
"""

import argparse
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

import yaml

from . import __version__
from .config import CorpusConfig, TrainConfig, load_corpus_config, load_train_config, seed_everything
from .downstream import DEFAULT_STEPS, eval_downstream, train_downstream
from .evaluation import build_cas, build_nas, fid_report
from .exceptions import AliAugError, ConfigError
from .features import FeaturePyramid
from .models import PromptVocabulary
from .processor import GenerationProcessor
from .report import DEFAULT_SEEDS, plot_samples, run_report, write_report
from .storage import RunStorage, import_mvtec, load_manifest, write_manifest
from .synth import write_corpus
from .training import load_generator, train_loop


def cmd_synth_corpus(args: argparse.Namespace) -> int:
    config = load_corpus_config(args.config) if args.config else CorpusConfig()
    if args.seed is not None:
        config = config.model_copy(update={"seed": args.seed})
    storage = RunStorage(args.out)
    write_corpus(config, storage.out_dir, verbose=not args.quiet)
    storage.write_metadata("synth-corpus", config.model_dump(mode="json"), config.seed)
    return 0


def cmd_import_mvtec(args: argparse.Namespace) -> int:
    storage = RunStorage(args.out)
    defects, goods, vocabulary = import_mvtec(args.root, args.category, args.image_size)
    if not defects and not goods:
        print(f"❌ В {args.root}/{args.category} не найдено изображений")
        return 1
    write_manifest(defects, storage.out_dir, "defects.manifest", vocabulary=vocabulary)
    write_manifest(goods, storage.out_dir, "good.manifest", vocabulary=vocabulary)
    print(f"✅ Импортировано: дефектов {len(defects)}, good {len(goods)}")
    storage.write_metadata(
        "import-mvtec", {"root": str(args.root), "category": args.category, "image_size": args.image_size}
    )
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_train_config(args.config) if args.config else TrainConfig()
    overrides: Dict[str, int] = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.max_steps is not None:
        overrides["max_steps"] = args.max_steps
    if overrides:
        try:
            cfg = TrainConfig(**{**cfg.model_dump(), **overrides})
        except ValueError as e:
            raise ConfigError(f"Некорректное переопределение: {e}") from None

    storage = RunStorage(args.out)
    manifests = [load_manifest(path) for path in args.data]
    eval_manifest = load_manifest(args.eval_data) if args.eval_data else None
    storage.path("train_config.yaml").write_text(
        yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=True, allow_unicode=True), encoding="utf-8"
    )
    final = train_loop(
        manifests,
        cfg,
        storage.out_dir,
        eval_manifest=eval_manifest,
        resume=args.resume,
        device=args.device,
        verbose=not args.quiet,
    )
    storage.write_metadata("train", cfg.model_dump(mode="json"), cfg.seed)
    print(f"📦 Финальный чекпоинт: {final}")
    return 0


def cmd_generate(args: argparse.Namespace) -> int:
    generator = load_generator(args.checkpoint, args.device)
    manifest = load_manifest(args.manifest)
    storage = RunStorage(args.out)

    processor = GenerationProcessor(generator)
    results = processor.process_batch(manifest.records, seed=args.seed, mask_only=args.mask_only, verbose=not args.quiet)
    generated = [r.record for r in results if r.success and r.record is not None]
    if not generated:
        print("❌ Ни одна запись не сгенерирована")
        return 1

    vocabulary = PromptVocabulary(prompts=generator.vocabulary)
    path = write_manifest(generated, storage.out_dir, "generated.manifest", vocabulary=vocabulary)
    print(f"✅ Сгенерировано {len(generated)} из {len(results)}: {path}")
    storage.write_metadata(
        "generate",
        {"checkpoint": str(args.checkpoint), "manifest": str(args.manifest), "mask_only": args.mask_only},
        args.seed,
    )
    return 0


def _cmd_build(name: str, nas: bool) -> Callable[[argparse.Namespace], int]:
    def handler(args: argparse.Namespace) -> int:
        generator = load_generator(args.checkpoint, args.device)
        train = load_manifest(args.manifest)
        storage = RunStorage(args.out)
        verbose = not args.quiet
        cas = build_cas(train, generator, args.n_per_record, seed=args.seed, verbose=verbose)
        result = build_nas(train, seed=args.seed, cas=cas, verbose=verbose) if nas else cas

        vocabulary = PromptVocabulary(prompts=generator.vocabulary)
        path = write_manifest(result.records, storage.out_dir, f"{name}.manifest", vocabulary=vocabulary)
        print(f"📁 {name.upper()}: {len(result)} записей → {path}")
        storage.write_metadata(
            f"build-{name}",
            {"checkpoint": str(args.checkpoint), "manifest": str(args.manifest), "n_per_record": args.n_per_record},
            args.seed,
        )
        return 0

    return handler


def cmd_eval_fid(args: argparse.Namespace) -> int:
    real = load_manifest(args.real)
    generated = load_manifest(args.generated)
    storage = RunStorage(args.out)
    pyramid = FeaturePyramid(seed=args.feature_seed)
    image_size = load_train_config(args.config).eval_size if args.config else None
    result = fid_report(real, generated, pyramid, storage.path("fid.txt"), image_size=image_size)
    print(f"📊 FID = {result.fid:.4f} (real {result.n_real}, generated {result.n_generated})")
    storage.write_metadata(
        "eval-fid",
        {"real": str(args.real), "generated": str(args.generated), "image_size": image_size},
    )
    return 0


def cmd_eval_downstream(args: argparse.Namespace) -> int:
    train = load_manifest(args.train)
    test = load_manifest(args.test)
    storage = RunStorage(args.out)
    model = train_downstream(
        train, seed=args.seed, steps=args.steps, augment=args.augment, device=args.device, verbose=not args.quiet
    )
    metrics = eval_downstream(model, test)
    lines = [f"{key}={value:.6f}" for key, value in metrics.as_dict().items()]
    lines += [f"{key}={getattr(metrics, key)}" for key in ("tp", "fp", "tn", "fn")]
    storage.path("metrics.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("📊 " + ", ".join(lines[:4]))
    storage.write_metadata(
        "eval-downstream",
        {"train": str(args.train), "test": str(args.test), "steps": args.steps, "augment": args.augment},
        args.seed,
    )
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    generator = load_generator(args.checkpoint, args.device)
    manifests = [load_manifest(path) for path in args.manifest]
    storage = RunStorage(args.out)
    report = run_report(
        manifests,
        generator,
        seeds=args.seeds,
        n_per_record=args.n_per_record,
        downstream_steps=args.downstream_steps,
        verbose=not args.quiet,
    )
    paths = write_report(report, storage.out_dir)
    defects = [r for m in manifests for r in m.records if r.is_defect]
    if defects:
        plot_samples(defects, generator, storage.path("samples_grid.png"))
    print(f"✅ Отчет: {paths['md']}")
    storage.write_metadata(
        "report",
        {
            "checkpoint": str(args.checkpoint),
            "manifests": [str(p) for p in args.manifest],
            "n_per_record": args.n_per_record,
            "downstream_steps": args.downstream_steps,
        },
        args.seeds[0],
    )
    return 0


def _common(parser: argparse.ArgumentParser, seed_default: Optional[int] = 0) -> None:
    parser.add_argument("--out", type=Path, required=True, help="Директория результатов")
    parser.add_argument("--seed", type=int, default=seed_default, help="Сид запуска")
    parser.add_argument("--device", type=str, default=None, help="cpu, mps, cuda или автоопределение")
    parser.add_argument("--quiet", action="store_true", help="Без прогресс-баров и статусных строк")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aliaug",
        description="Одношаговая генерация дефектов по маске и промпту для аугментации размеченных данных",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="<command>")

    p = sub.add_parser("synth-corpus", help="Сгенерировать игрушечный корпус дефектов")
    p.add_argument("--config", type=Path, default=None, help="YAML с CorpusConfig")
    _common(p, seed_default=None)
    p.set_defaults(handler=cmd_synth_corpus)

    p = sub.add_parser("import-mvtec", help="Импорт каталога в раскладке MVTec AD")
    p.add_argument("--root", type=Path, required=True)
    p.add_argument("--category", type=str, required=True)
    p.add_argument("--image-size", type=int, default=64)
    _common(p)
    p.set_defaults(handler=cmd_import_mvtec)

    p = sub.add_parser("train", help="Обучить генератор")
    p.add_argument("--config", type=Path, default=None, help="Плоский YAML с TrainConfig")
    p.add_argument("--data", type=Path, action="append", required=True, help="Манифест (можно несколько)")
    p.add_argument("--eval-data", type=Path, default=None, help="Манифест для FID и сеток примеров")
    p.add_argument("--resume", type=Path, default=None, help="Чекпоинт для продолжения")
    p.add_argument("--max-steps", type=int, default=None)
    _common(p, seed_default=None)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("generate", help="Сгенерировать изображения по манифесту")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--mask-only", action="store_true", help="Генерация только по маске и промпту")
    _common(p)
    p.set_defaults(handler=cmd_generate)

    for name, nas in (("cas", False), ("nas", True)):
        p = sub.add_parser(f"build-{name}", help=f"Собрать {name.upper()}-набор")
        p.add_argument("--checkpoint", type=Path, required=True)
        p.add_argument("--manifest", type=Path, required=True, help="Реальный обучающий манифест")
        p.add_argument("--n-per-record", type=int, default=4)
        _common(p)
        p.set_defaults(handler=_cmd_build(name, nas))

    p = sub.add_parser("eval-fid", help="FID между двумя манифестами")
    p.add_argument("--real", type=Path, required=True)
    p.add_argument("--generated", type=Path, required=True)
    p.add_argument("--feature-seed", type=int, default=1234)
    p.add_argument("--config", type=Path, help="train.yaml: изображения приводятся к test_image_prep")
    _common(p)
    p.set_defaults(handler=cmd_eval_fid)

    p = sub.add_parser("eval-downstream", help="Обучить и проверить downstream-модель")
    p.add_argument("--train", type=Path, required=True)
    p.add_argument("--test", type=Path, required=True)
    p.add_argument("--steps", type=int, default=DEFAULT_STEPS)
    p.add_argument("--augment", action="store_true", help="Отражения и повороты (D_S_AUG)")
    _common(p)
    p.set_defaults(handler=cmd_eval_downstream)

    p = sub.add_parser("report", help="Сравнение D_S / D_S_AUG / CAS / NAS")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, action="append", required=True, help="Реальные манифесты")
    p.add_argument("--seeds", type=int, nargs="+", default=list(DEFAULT_SEEDS))
    p.add_argument("--n-per-record", type=int, default=4)
    p.add_argument("--downstream-steps", type=int, default=DEFAULT_STEPS)
    _common(p)
    p.set_defaults(handler=cmd_report)

    return parser


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    try:
        if args.seed is not None:
            seed_everything(args.seed)
        return int(args.handler(args))
    except ConfigError as e:
        print(f"❌ Ошибка конфигурации: {e}", file=sys.stderr)
        return 1
    except (AliAugError, ValueError, KeyError, OSError) as e:
        print(f"❌ {args.command}: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
