"""Subcommand handlers. Each takes the parsed arguments and returns an exit code."""

import argparse
import json
import logging
from pathlib import Path
from typing import Any, Optional

from catreid.config import settings
from catreid.core.exceptions import ConfigValidationError, StageOrderError
from catreid.core.seeding import config_hash
from catreid.schemas.dataset import Split, Stage
from catreid.schemas.suite import SuiteConfig
from catreid.schemas.training import RunConfig
from catreid.services import dataset_service, evaluator, preprocess_service, synth, trainer
from catreid.services.detectors import make_detector
from catreid.services.suite_service import load_suite, run_config

logger = logging.getLogger(__name__)


def _args_hash(args: argparse.Namespace) -> str:
    payload = {k: v for k, v in sorted(vars(args).items()) if k != "handler"}
    return config_hash(json.loads(json.dumps(payload, default=str)))


def _announce(seed: int, digest: str) -> None:
    print(f"seed {seed} config {digest}")


def _suite(args: argparse.Namespace) -> Optional[SuiteConfig]:
    path = getattr(args, "config", None)
    return load_suite(path) if path else None


def _pick(flag: Any, fallback: Any) -> Any:
    return fallback if flag is None else flag


def cmd_synth(args: argparse.Namespace) -> int:
    seed = _pick(args.seed, settings.DEFAULT_SEED)
    _announce(seed, _args_hash(args))
    summary = synth.synthesize(
        Path(args.out), classes=args.classes, per_class=args.per_class, seed=seed, total=args.total
    )
    print(f"{summary.classes} classes, {summary.images} images -> {summary.out_dir}")
    print(f"detector boxes: {summary.detections_file}")
    return 0


def cmd_ingest(args: argparse.Namespace) -> int:
    suite = _suite(args)
    root = args.root or (suite.paths.data_root if suite else None)
    out = args.out or (suite.paths.manifest if suite else None)
    if not root or not out:
        raise ConfigValidationError("ingest needs --root and --out (or a config naming them)")
    min_images = _pick(args.min_images, suite.dataset.min_images if suite else 8)
    seed = _pick(args.seed, suite.dataset.seed if suite else settings.DEFAULT_SEED)
    _announce(seed, config_hash(suite) if suite else _args_hash(args))

    manifest = dataset_service.ingest(Path(root), seed=seed)
    ingested_classes = len({r.class_id for r in manifest.records})
    manifest = dataset_service.filter_small_classes(manifest, min_images)
    dataset_service.save_manifest(manifest, Path(out))

    usable = sum(1 for r in manifest.records if not r.is_excluded)
    excluded_classes = ingested_classes - manifest.num_classes
    print(f"{manifest.num_classes} classes, {usable} images")
    if excluded_classes:
        print(f"{excluded_classes} class{'es' if excluded_classes != 1 else ''} excluded (fewer than {min_images} images)")
    if manifest.errors:
        print(f"{len(manifest.errors)} unreadable files")
    return 0


def cmd_preprocess(args: argparse.Namespace) -> int:
    suite = _suite(args)
    params = suite.preprocess if suite else None
    manifest_path = Path(args.manifest or (suite.paths.manifest if suite else ""))
    detector_spec = args.detector or (params.detector if params else None)
    if not detector_spec:
        raise ConfigValidationError("preprocess needs --detector (stub:FILE, http(s)://URL or cmd:COMMAND)")
    out_dir = args.out or (str(Path(suite.paths.work_dir) / params.out_dir) if suite else None)
    if not out_dir:
        raise ConfigValidationError("preprocess needs --out")

    manifest = dataset_service.load_manifest(manifest_path)
    _announce(manifest.seed, config_hash(suite) if suite else _args_hash(args))
    detector = make_detector(detector_spec)
    try:
        result = preprocess_service.preprocess_manifest(
            manifest,
            detector,
            Path(out_dir),
            conf_threshold=_pick(args.threshold, params.conf_threshold if params else 0.5),
            out_size=_pick(args.size, params.out_size if params else 224),
            target_label=params.target_label if params else "cat",
            workers=args.workers,
        )
    finally:
        close = getattr(detector, "close", None)
        if close is not None:
            close()
    dataset_service.save_manifest(result, manifest_path)

    usable = sum(1 for r in result.records if not r.is_excluded)
    print(f"{result.num_classes} classes, {usable} crops in {out_dir}")
    for reason, count in result.exclusion_counts.items():
        print(f"excluded {reason}: {count}")
    return 0


def cmd_split(args: argparse.Namespace) -> int:
    suite = _suite(args)
    manifest_path = Path(args.manifest or (suite.paths.manifest if suite else ""))
    seed = _pick(args.seed, suite.dataset.seed if suite else settings.DEFAULT_SEED)
    val = _pick(args.val, suite.dataset.val_per_class if suite else 3)
    test = _pick(args.test, suite.dataset.test_per_class if suite else 2)
    _announce(seed, config_hash(suite) if suite else _args_hash(args))

    manifest = dataset_service.load_manifest(manifest_path)
    result = dataset_service.split(manifest, val_per_class=val, test_per_class=test, seed=seed)
    dataset_service.save_manifest(result, manifest_path)
    print(
        f"{len(result.records_in(Split.TRAIN))} train, {len(result.records_in(Split.VAL))} val, "
        f"{len(result.records_in(Split.TEST))} test"
    )
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    suite = load_suite(args.config)
    if suite.full_scale and not args.full_scale:
        raise ConfigValidationError(
            "this suite is the full-scale recipe (hours of accelerator time); pass --full-scale to train it"
        )
    names = sorted(suite.runs) if args.run == "all" else [args.run]
    configs = {name: run_config(suite, name) for name in names}

    manifest_path = Path(suite.paths.manifest)
    manifest = dataset_service.load_manifest(manifest_path)
    dataset_service.require_stage(manifest, Stage.SPLIT, "train")
    device = trainer.resolve_device(args.device) if args.device else None

    for name, cfg in configs.items():
        updates: dict[str, Any] = {}
        if args.epochs is not None:
            updates["epochs_max"] = args.epochs
        if args.seed is not None:
            updates["seed"] = args.seed
        if updates:
            cfg = RunConfig.model_validate({**cfg.model_dump(), **updates})
        _announce(cfg.seed, config_hash(cfg))
        run_dir = Path(suite.paths.work_dir) / "runs" / name
        trainer.train_run(
            cfg,
            manifest,
            run_dir,
            manifest_path=manifest_path,
            out_size=suite.preprocess.out_size,
            device=device,
        )
        print(f"run {name} -> {run_dir}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    info_path = run_dir / "run.json"
    if not info_path.is_file():
        raise StageOrderError(f"no checkpoint in run dir {run_dir}")
    info = json.loads(info_path.read_text())
    manifest_path = args.manifest or info.get("manifest")
    if not manifest_path:
        raise ConfigValidationError("eval needs --manifest (run.json does not name one)")
    _announce(info.get("seed", 0), info.get("config_hash", ""))

    manifest = dataset_service.load_manifest(Path(manifest_path))
    dataset_service.require_stage(manifest, Stage.SPLIT, "eval")
    splits = [Split.VAL, Split.TEST] if args.split == "both" else [Split(args.split)]
    for split in splits:
        accuracy = evaluator.evaluate_run(run_dir, manifest, split)
        print(f"{info.get('model_name', run_dir.name)} {info.get('mode', '')} {split.value} accuracy {accuracy * 100:.1f}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    run_dirs = [Path(p) for p in args.runs]
    results = evaluator.collect_results(run_dirs, force=args.force)
    hashes = sorted({r.config_hash for r in results})
    _announce(settings.DEFAULT_SEED, config_hash({"runs": hashes}))
    rendered = evaluator.render_report(results, out_dir=Path(args.out))
    print(rendered.markdown, end="")
    return 0
