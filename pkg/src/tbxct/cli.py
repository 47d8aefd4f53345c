"""Command-line front door for batch use.

Subcommands: phantom (build a synthetic corpus), gen-train (fit the toy
volume generator), synthesize (write volumes per manifest record), train /
evaluate (one experiment cell), matrix (the full ablation table) and report
(re-render stored results). Option precedence is flags > --config JSON >
built-in defaults; TBX_SEED supplies a default seed. Exit codes: 0 success,
1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

from .classifiers import ModalityTag, load_classifier
from .ct_synthesis import (
    CTGenerator,
    DiskVolumeAdapter,
    GeneratorMode,
    GenTrainConfig,
    load_generator,
    save_generator,
    synthesize_ct,
    prepare_generator_input,
    train_toy_generator,
)
from .data_model import (
    Split,
    Task,
    ViewModality,
    filter_cohort,
    load_image,
    load_manifest,
    read_volume,
    select_views,
    write_volume,
)
from .evaluation import (
    AccuracyMode,
    ExperimentConfig,
    ReportFormat,
    ResultTable,
    SamplePipeline,
    accuracy,
    collect_predictions,
    render_report,
    run_experiment,
    run_experiment_matrix,
)
from .phantom import DEFAULT_CLASS_MIX, build_phantom_corpus
from .preprocessing import SliceMode
from .training import TrainConfig

logger = logging.getLogger("tbxct")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(Exception):
    """Bad flags or config combinations; maps to exit code 2."""


def _load_config_file(path: Optional[str]) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    payload = json.loads(p.read_text(encoding="utf-8"))
    if isinstance(payload, dict) and "config" in payload and "command" in payload:
        payload = payload["config"]  # replaying a run manifest
    if not isinstance(payload, dict):
        raise UsageError(f"config file must hold a JSON object: {p}")
    return payload


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Merge option sources: flag > config file > default."""
    file_config = _load_config_file(getattr(args, "config", None))
    unknown = set(file_config) - set(defaults) - {"command"}
    if unknown:
        raise UsageError(f"unknown config key(s): {sorted(unknown)}")
    resolved = {}
    for name, default in defaults.items():
        flag = getattr(args, name, None)
        if flag is not None:
            resolved[name] = flag
        elif file_config.get(name) is not None:
            resolved[name] = file_config[name]
        else:
            resolved[name] = default
    if "seed" in resolved and resolved["seed"] is None:
        env_seed = os.environ.get("TBX_SEED")
        resolved["seed"] = int(env_seed) if env_seed else 0
    return resolved


def _require(resolved: dict, *names: str) -> None:
    missing = [n for n in names if resolved.get(n) is None]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join('--' + m for m in missing)}")


def _write_run_manifest(out_dir: Path, command: str, config: dict, started: datetime) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    finished = datetime.now(timezone.utc)
    payload = {
        "run_id": f"{command}-{started:%Y%m%dT%H%M%S}-{os.getpid()}",
        "command": command,
        "config": {k: (str(v) if isinstance(v, Path) else v) for k, v in config.items()},
        "timestamps": {"started": started.isoformat(), "finished": finished.isoformat()},
    }
    (out_dir / "run_manifest.json").write_text(
        json.dumps(payload, indent=2) + "\n", encoding="utf-8"
    )


def _parse_mapping(text: str) -> dict[str, float]:
    out = {}
    for item in text.split(","):
        if "=" not in item:
            raise UsageError(f"expected name=value pairs, got {item!r}")
        name, value = item.split("=", 1)
        out[name.strip()] = float(value)
    return out


def _parse_triple(text: str, what: str) -> tuple[float, float, float]:
    parts = [p for p in text.split(",") if p.strip()]
    if len(parts) != 3:
        raise UsageError(f"{what} needs three comma-separated values, got {text!r}")
    return tuple(float(p) for p in parts)  # type: ignore[return-value]


def _load_generator_sources(spec: Optional[str]) -> dict[GeneratorMode, CTGenerator]:
    """Parse a comma list of checkpoint files and/or volume directories.

    Checkpoints register under their own mode; a directory (precomputed
    volumes keyed by patient_id) backs any mode not covered by a checkpoint.
    """
    if not spec:
        return {}
    sources: dict[GeneratorMode, CTGenerator] = {}
    fallback: Optional[DiskVolumeAdapter] = None
    for token in str(spec).split(","):
        token = token.strip()
        if not token:
            continue
        path = Path(token)
        if path.is_dir():
            if fallback is None:
                fallback = DiskVolumeAdapter(path)
        elif path.exists():
            gen = load_generator(path)
            sources.setdefault(gen.mode, gen)
        else:
            raise FileNotFoundError(f"generator source not found: {path}")
    if fallback is not None:
        for mode in GeneratorMode:
            sources.setdefault(mode, fallback)
    return sources


def _slice_mode_from_flag(value: Optional[str]) -> Optional[SliceMode]:
    if value is None:
        return None
    mapping = {"two": SliceMode.TWO_SLICE, "two_slice": SliceMode.TWO_SLICE, "full": SliceMode.FULL}
    if value not in mapping:
        raise UsageError(f"--slices must be 'full' or 'two', got {value!r}")
    return mapping[value]


def _train_config(resolved: dict, default_batch: int) -> TrainConfig:
    try:
        return TrainConfig(
            learning_rate=float(resolved["lr"]),
            batch_size=int(resolved["batch_size"] or default_batch),
            max_epochs=int(resolved["max_epochs"]),
            patience=int(resolved["patience"]),
            seed=int(resolved["seed"]),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


TRAIN_OPTION_DEFAULTS = {
    "lr": 1e-4,
    "batch_size": None,
    "max_epochs": 100,
    "patience": 10,
    "seed": None,
}


def cmd_phantom(args: argparse.Namespace) -> int:
    started = datetime.now(timezone.utc)
    defaults = {
        "n": None,
        "seed": None,
        "out": None,
        "mix": None,
        "ratios": "0.6,0.2,0.2",
        "dims": "64,128,128",
        "noise_sigma": 0.01,
    }
    resolved = _resolve(args, defaults)
    _require(resolved, "n", "out")
    n = int(resolved["n"])
    if n <= 0:
        raise UsageError(f"--n must be positive, got {n}")
    mix = _parse_mapping(resolved["mix"]) if resolved["mix"] else dict(DEFAULT_CLASS_MIX)
    ratios = _parse_triple(str(resolved["ratios"]), "--ratios")
    dims = tuple(int(v) for v in _parse_triple(str(resolved["dims"]), "--dims"))
    out_dir = Path(resolved["out"])
    manifest = build_phantom_corpus(
        n=n,
        class_mix=mix,
        split_ratios=ratios,
        seed=int(resolved["seed"]),
        out_dir=out_dir,
        dims=dims,
        noise_sigma=float(resolved["noise_sigma"]),
    )
    _write_run_manifest(out_dir, "phantom", resolved, started)
    print(manifest)
    return EXIT_OK


def cmd_gen_train(args: argparse.Namespace) -> int:
    started = datetime.now(timezone.utc)
    defaults = {
        "manifest": None,
        "volumes": None,
        "mode": "b",
        "out": None,
        "epochs": 30,
        "lr": 1e-3,
        "batch_size": 8,
        "proj_weight": 0.1,
        "seed": None,
    }
    resolved = _resolve(args, defaults)
    _require(resolved, "manifest", "volumes", "out")
    mode = GeneratorMode(str(resolved["mode"]).upper())
    manifest_path = Path(resolved["manifest"])
    records = load_manifest(manifest_path)
    volumes_dir = Path(resolved["volumes"])
    pairs = []
    skipped = 0
    for rec in records:
        if rec.split is not Split.TRAIN:
            continue
        vol_path = volumes_dir / f"{rec.patient_id}.vol"
        needs_lateral = mode is GeneratorMode.B
        if rec.pa_path is None or (needs_lateral and rec.lateral_path is None) or not vol_path.exists():
            skipped += 1
            continue
        pa = load_image(manifest_path.parent / rec.pa_path)
        lateral = (
            load_image(manifest_path.parent / rec.lateral_path) if needs_lateral else None
        )
        pairs.append((pa, lateral, read_volume(vol_path)))
    if skipped:
        logger.info("gen-train: skipped %d record(s) lacking views or volumes", skipped)
    config = GenTrainConfig(
        epochs=int(resolved["epochs"]),
        learning_rate=float(resolved["lr"]),
        batch_size=int(resolved["batch_size"]),
        projection_weight=float(resolved["proj_weight"]),
        seed=int(resolved["seed"]),
    )
    gen = train_toy_generator(pairs, mode, config)
    out_path = Path(resolved["out"])
    save_generator(gen, out_path)
    _write_run_manifest(out_path.parent, "gen-train", resolved, started)
    log = gen.train_log or {}
    print(
        f"{out_path} (reconstruction mse {log.get('initial_mse', float('nan')):.5f}"
        f" -> {log.get('final_mse', float('nan')):.5f})"
    )
    return EXIT_OK


def cmd_synthesize(args: argparse.Namespace) -> int:
    started = datetime.now(timezone.utc)
    defaults = {"mode": None, "manifest": None, "gen": None, "out": None, "seed": None}
    resolved = _resolve(args, defaults)
    _require(resolved, "mode", "manifest", "gen", "out")
    mode = GeneratorMode(str(resolved["mode"]).upper())
    gen_path = Path(resolved["gen"])
    if not gen_path.exists():
        raise FileNotFoundError(f"generator checkpoint not found: {gen_path}")
    gen = load_generator(gen_path)
    if gen.mode is not mode:
        raise UsageError(
            f"--mode {mode.value} conflicts with checkpoint mode {gen.mode.value}"
        )
    manifest_path = Path(resolved["manifest"])
    records = load_manifest(manifest_path)
    out_dir = Path(resolved["out"])
    import numpy as np

    written = 0
    skipped = 0
    for rec in records:
        if rec.pa_path is None or (mode is GeneratorMode.B and rec.lateral_path is None):
            skipped += 1
            continue
        rng = np.random.default_rng(int(resolved["seed"]))
        if mode is GeneratorMode.B:
            pa_img, lat_img = select_views(rec, ViewModality.PA_L, rng, manifest_path.parent)
            lateral = prepare_generator_input(lat_img, gen.input_size)
        else:
            (pa_img,) = select_views(rec, ViewModality.PA, rng, manifest_path.parent)
            lateral = None
        pa = prepare_generator_input(pa_img, gen.input_size)
        volume = synthesize_ct(gen, pa, lateral, patient_id=rec.patient_id)
        write_volume(volume, out_dir / f"{rec.patient_id}.vol")
        written += 1
    if skipped:
        logger.info("synthesize: skipped %d record(s) without the required views", skipped)
    _write_run_manifest(out_dir, "synthesize", resolved, started)
    print(f"{written} volume(s) written to {out_dir} ({skipped} skipped)")
    return EXIT_OK


def _experiment_pieces(resolved: dict) -> tuple[ExperimentConfig, Path, dict]:
    task = Task(resolved["task"])
    try:
        tag = ModalityTag(str(resolved["modality"]))
    except ValueError:
        raise UsageError(
            f"--modality must be one of {[t.value for t in ModalityTag]}, got {resolved['modality']!r}"
        ) from None
    slice_mode = _slice_mode_from_flag(resolved.get("slices"))
    if tag.is_xray_2d and slice_mode is not None:
        raise UsageError(f"--slices applies only to CT modalities, not {tag.value}")
    if tag.uses_ct and slice_mode is None:
        slice_mode = SliceMode.TWO_SLICE
    default_batch = 1 if tag.is_xray_2d else 20
    train_config = _train_config(resolved, default_batch)
    try:
        config = ExperimentConfig(
            task=task, modality_tag=tag, slice_mode=slice_mode, train_config=train_config
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    generators = _load_generator_sources(resolved.get("gen"))
    if config.generator_mode is not None and config.generator_mode not in generators:
        raise UsageError(
            f"modality {tag.value} needs a generator for mode "
            f"{config.generator_mode.value}; pass --gen with a matching checkpoint"
            " or a volume directory"
        )
    manifest_path = Path(resolved["manifest"])
    return config, manifest_path, generators


def cmd_train(args: argparse.Namespace) -> int:
    started = datetime.now(timezone.utc)
    defaults = {
        "task": None,
        "modality": None,
        "slices": None,
        "manifest": None,
        "gen": None,
        "out": None,
        **TRAIN_OPTION_DEFAULTS,
    }
    resolved = _resolve(args, defaults)
    _require(resolved, "task", "modality", "manifest", "out")
    config, manifest_path, generators = _experiment_pieces(resolved)
    cohort = filter_cohort(load_manifest(manifest_path), config.task)
    out_dir = Path(resolved["out"])
    _, history, metrics = run_experiment(
        config, cohort, manifest_path.parent, generators, out_dir
    )
    _write_run_manifest(out_dir, "train", resolved, started)
    print(
        f"{out_dir}: best epoch {history.best_epoch}, "
        f"val acc {history.best.val_acc:.4f}, test acc {metrics['test_accuracy_exact']:.4f}"
    )
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    started = datetime.now(timezone.utc)
    defaults = {
        "ckpt": None,
        "task": None,
        "modality": None,
        "slices": None,
        "manifest": None,
        "gen": None,
        "out": None,
        **TRAIN_OPTION_DEFAULTS,
    }
    resolved = _resolve(args, defaults)
    _require(resolved, "ckpt", "task", "modality", "manifest")
    config, manifest_path, generators = _experiment_pieces(resolved)
    model = load_classifier(Path(resolved["ckpt"]))
    cohort = filter_cohort(load_manifest(manifest_path), config.task)
    pipeline = SamplePipeline(
        config, manifest_path.parent, generators, view_seed=config.train_config.seed
    )
    preds, targets = collect_predictions(model, cohort.test, pipeline)
    metrics = {
        "test_accuracy_exact": accuracy(preds, targets, AccuracyMode.EXACT),
        "test_accuracy_per_label_mean": accuracy(preds, targets, AccuracyMode.PER_LABEL_MEAN),
        "n_test": len(cohort.test),
    }
    if resolved["out"]:
        out_dir = Path(resolved["out"])
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.json").write_text(
            json.dumps(metrics, indent=2) + "\n", encoding="utf-8"
        )
        _write_run_manifest(out_dir, "evaluate", resolved, started)
    print(json.dumps(metrics))
    return EXIT_OK


def cmd_matrix(args: argparse.Namespace) -> int:
    started = datetime.now(timezone.utc)
    defaults = {
        "task": None,
        "manifest": None,
        "gen": None,
        "out": None,
        "slices": "two",
        **TRAIN_OPTION_DEFAULTS,
    }
    resolved = _resolve(args, defaults)
    _require(resolved, "task", "manifest", "gen", "out")
    task = Task(resolved["task"])
    generators = _load_generator_sources(resolved["gen"])
    needed = (
        set(GeneratorMode) if task is Task.IDENTIFICATION else {GeneratorMode.B}
    )
    missing = needed - set(generators)
    if missing:
        raise UsageError(
            f"matrix for task {task.value!r} needs generator mode(s) "
            f"{sorted(m.value for m in missing)}; pass checkpoints and/or a volume"
            " directory via --gen (comma-separated)"
        )
    base = _train_config(resolved, default_batch=20)
    out_dir = Path(resolved["out"])
    run_experiment_matrix(
        task,
        Path(resolved["manifest"]),
        generators,
        base_config=base,
        out_dir=out_dir,
        ct_slice_mode=_slice_mode_from_flag(resolved["slices"]) or SliceMode.TWO_SLICE,
    )
    _write_run_manifest(out_dir, "matrix", resolved, started)
    print(out_dir / "report.md")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    defaults = {"results": None, "format": "markdown", "out": None}
    resolved = _resolve(args, defaults)
    _require(resolved, "results")
    fmt_value = str(resolved["format"]).lower()
    fmt = ReportFormat.MARKDOWN if fmt_value in ("md", "markdown") else ReportFormat(fmt_value)
    table = ResultTable.from_json(Path(resolved["results"]).read_text(encoding="utf-8"))
    text = render_report(table, fmt)
    if resolved["out"]:
        Path(resolved["out"]).write_text(text, encoding="utf-8")
        print(resolved["out"])
    else:
        print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tbxct",
        description="Phantom-driven test bench for X-ray -> synthetic-CT TB classification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON config file mirroring flag names")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("phantom", help="generate a synthetic paired corpus")
    add_common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--out")
    p.add_argument("--mix", help="class mix, e.g. healthy=0.5,cavitation=0.5")
    p.add_argument("--ratios", help="train,val,test ratios (default 0.6,0.2,0.2)")
    p.add_argument("--dims", help="volume dims D,H,W (default 64,128,128)")
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("gen-train", help="train the toy volume generator")
    add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--volumes", help="directory of ground-truth <patient_id>.vol files")
    p.add_argument("--mode", choices=["sv", "b"])
    p.add_argument("--out", help="output checkpoint path")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--proj-weight", dest="proj_weight", type=float)
    p.set_defaults(func=cmd_gen_train)

    p = sub.add_parser("synthesize", help="write a volume per eligible record")
    add_common(p)
    p.add_argument("--mode", choices=["sv", "b"])
    p.add_argument("--manifest")
    p.add_argument("--gen", help="generator checkpoint")
    p.add_argument("--out")
    p.set_defaults(func=cmd_synthesize)

    def add_experiment_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--task", choices=[t.value for t in Task])
        p.add_argument("--manifest")
        p.add_argument("--gen", help="comma list: checkpoint(s) and/or volume directory")
        p.add_argument("--out")
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--max-epochs", dest="max_epochs", type=int)
        p.add_argument("--patience", type=int)

    p = sub.add_parser("train", help="train one experiment cell")
    add_common(p)
    add_experiment_flags(p)
    p.add_argument("--modality")
    p.add_argument("--slices", help="full or two (CT modalities only)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a trained cell checkpoint")
    add_common(p)
    add_experiment_flags(p)
    p.add_argument("--ckpt")
    p.add_argument("--modality")
    p.add_argument("--slices", help="full or two (CT modalities only)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("matrix", help="run the full ablation table for a task")
    add_common(p)
    add_experiment_flags(p)
    p.add_argument("--slices", help="CT slice mode for 3-row tasks (full or two)")
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("report", help="re-render stored matrix results")
    add_common(p)
    p.add_argument("--results", help="path to results.json")
    p.add_argument("--format", choices=["markdown", "md", "csv"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    if not logging.getLogger().handlers:
        logging.basicConfig(
            level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr
        )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
