"""Command-line pipeline: gen-data, train, eval, corrupt-eval, sweep.

Every command is a pure function of its config file, seed, and input
files: rerunning writes byte-identical outputs. Wall-clock timestamps
appear only in manifest.json, never in results or model files.

Exit codes: 0 success, 2 config error, 3 data error, 4 divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .datasynth import make_default_benchmark, read_split, write_split
from .metrics import (
    accuracy,
    classify,
    export_decision_grid,
    export_histograms,
    grid_bounds,
    mce,
)
from .nn import MlpModel, ModelFileError, init_mlp, load_model, save_model
from .scores import write_score_dump
from .seeding import STREAM_INIT, derive_seed
from .trainer import (
    TrainConfig,
    TrainingDiverged,
    corruption_error_table,
    evaluate_model,
    mahalanobis_populations,
    score_populations,
    sweep,
    train,
)

CONFIG_VERSION = 1

# Default output root when --out is omitted; each command appends its name.
OUT_ROOT_ENV = "OODKIT_OUT_ROOT"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

SOFTMAX_SCORE_KINDS = ("confidence", "entropy", "mutual_information")

# Published schema for results.json (see README). The embedded manifest
# carries the config snapshot and input/output hashes but no timestamps.
RESULTS_SCHEMA = {
    "type": "object",
    "required": ["accuracy", "auc", "warnings", "manifest"],
    "additionalProperties": False,
    "properties": {
        "accuracy": {"type": "number", "minimum": 0, "maximum": 100},
        "auc": {
            "type": "object",
            "required": ["confidence", "entropy", "mutual_information"],
            "additionalProperties": False,
            "properties": {
                "confidence": {"type": "number", "minimum": 0, "maximum": 100},
                "entropy": {"type": "number", "minimum": 0, "maximum": 100},
                "mutual_information": {
                    "type": "number", "minimum": 0, "maximum": 100,
                },
                "mahalanobis": {"type": "number", "minimum": 0, "maximum": 100},
            },
        },
        "mce": {"type": "number", "minimum": 0},
        "warnings": {"type": "array", "items": {"type": "string"}},
        "manifest": {"type": "object"},
    },
}


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


def _load_json(path, what: str) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {what} {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{what} {path} must be a JSON object")
    return doc


def load_config(path) -> dict:
    doc = _load_json(path, "config file")
    version = doc.get("config_version")
    if version != CONFIG_VERSION:
        raise ConfigError(
            f"config_version must be {CONFIG_VERSION}, got {version!r}"
        )
    known = {"config_version", "data", "train", "eval"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return doc


DATA_KEYS = {
    "seed": 0,
    "id_radius": 4.0,
    "ood_radius": 1.5,
    "sigma": 0.5,
    "n_per_class": 500,
    "n_per_ood_component": 500,
    "split_fractions": (0.7, 0.15, 0.15),
}

EVAL_KEYS = {
    "mc_passes": 30,
    "mahalanobis": False,
    "grid_resolution": 200,
    "histogram_bins": 30,
    "seed": 0,
}


def _section(doc: dict, name: str, defaults: dict) -> dict:
    section = doc.get(name, {})
    if not isinstance(section, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    unknown = set(section) - set(defaults)
    if unknown:
        raise ConfigError(
            f"unknown keys in config section {name!r}: {sorted(unknown)}"
        )
    merged = dict(defaults)
    merged.update(section)
    return merged


def train_config_from(doc: dict, seed_override: int | None = None) -> TrainConfig:
    section = doc.get("train", {})
    if not isinstance(section, dict):
        raise ConfigError("config section 'train' must be an object")
    field_names = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(section) - field_names
    if unknown:
        raise ConfigError(f"unknown keys in config section 'train': {sorted(unknown)}")
    kwargs = dict(section)
    if seed_override is not None:
        kwargs["seed"] = seed_override
    if "hidden_dims" in kwargs:
        kwargs["hidden_dims"] = tuple(kwargs["hidden_dims"])
    try:
        return TrainConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid train config: {exc}") from exc


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump_json(doc: dict, path: Path) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=False)
        fh.write("\n")


def _round2(table: dict[str, float] | None) -> dict[str, float] | None:
    if table is None:
        return None
    return {k: round(v, 2) for k, v in table.items()}


def build_manifest(
    command: str,
    config_snapshot: dict,
    seeds: dict[str, int],
    out_dir: Path,
    outputs: list[str],
) -> dict:
    """Hash the named output files. No timestamp; callers add one only
    when writing the standalone manifest.json."""
    entries = {}
    for name in sorted(outputs):
        p = out_dir / name
        entries[name] = {"sha256": _sha256(p), "bytes": p.stat().st_size}
    return {
        "tool": "oodkit",
        "tool_version": __version__,
        "command": command,
        "config": config_snapshot,
        "seeds": seeds,
        "outputs": entries,
    }


def write_manifest_file(manifest: dict, out_dir: Path) -> None:
    doc = dict(manifest)
    doc["created_utc"] = datetime.now(timezone.utc).isoformat()
    _dump_json(doc, out_dir / "manifest.json")


def _load_benchmark_dir(data_dir: Path, required: tuple[str, ...]) -> dict:
    benchmark = {}
    for role in ("train", "val", "test_id", "train_ood", "test_ood"):
        path = data_dir / f"{role}.csv"
        if path.exists():
            try:
                benchmark[role] = read_split(path, role=role)
            except ValueError as exc:
                raise DataError(str(exc)) from exc
    missing = [r for r in required if r not in benchmark]
    if missing:
        raise DataError(
            f"data directory {data_dir} is missing splits: "
            f"{', '.join(m + '.csv' for m in missing)}"
        )
    return benchmark


def _load_model(path) -> MlpModel:
    try:
        return load_model(path)
    except ModelFileError as exc:
        raise DataError(str(exc)) from exc


def _resolve_out(arg_out: str | None, command: str) -> Path:
    """--out wins; otherwise $OODKIT_OUT_ROOT/<command>."""
    if arg_out is not None:
        return Path(arg_out)
    root = os.environ.get(OUT_ROOT_ENV)
    if root:
        return Path(root) / command
    raise ConfigError(
        f"no output directory: pass --out or set {OUT_ROOT_ENV}"
    )


def _parse_scores(arg: str) -> tuple[str, ...]:
    kinds = tuple(k.strip() for k in arg.split(",") if k.strip())
    unknown = [k for k in kinds if k not in SOFTMAX_SCORE_KINDS]
    if unknown:
        raise ConfigError(
            f"unknown score kinds {unknown}; choose from {SOFTMAX_SCORE_KINDS}"
        )
    if not kinds:
        raise ConfigError("--scores must select at least one kind")
    return kinds


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    doc = load_config(args.config)
    section = _section(doc, "data", DATA_KEYS)
    if args.seed is not None:
        section["seed"] = args.seed
    try:
        benchmark = make_default_benchmark(
            seed=int(section["seed"]),
            id_radius=float(section["id_radius"]),
            ood_radius=float(section["ood_radius"]),
            sigma=float(section["sigma"]),
            n_per_class=int(section["n_per_class"]),
            n_per_ood_component=int(section["n_per_ood_component"]),
            split_fractions=tuple(section["split_fractions"]),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid data config: {exc}") from exc
    out_dir = _resolve_out(args.out, "gen-data")
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for role, split in benchmark.items():
        name = f"{role}.csv"
        write_split(split, out_dir / name)
        outputs.append(name)
    manifest = build_manifest(
        "gen-data", section, {"data": int(section["seed"])}, out_dir, outputs
    )
    write_manifest_file(manifest, out_dir)
    for name in sorted(outputs):
        print(f"wrote {out_dir / name}")
    return EXIT_OK


def cmd_train(args) -> int:
    doc = load_config(args.config)
    config = train_config_from(doc, seed_override=args.seed)
    data_dir = Path(args.data)
    required = ("train", "val") + (("train_ood",) if config.needs_ood() else ())
    benchmark = _load_benchmark_dir(data_dir, required)
    model = init_mlp(
        [benchmark["train"].features.shape[1], *config.hidden_dims, config.k],
        config.dropout_rate,
        seed=derive_seed(config.seed, STREAM_INIT),
    )
    try:
        trained, history = train(config, benchmark, model)
    except ValueError as exc:
        raise DataError(str(exc)) from exc

    out_dir = _resolve_out(args.out, "train")
    out_dir.mkdir(parents=True, exist_ok=True)
    save_model(trained, out_dir / "model.json")
    _dump_json(history.to_dict(), out_dir / "history.json")
    manifest = build_manifest(
        "train",
        dataclasses.asdict(config),
        {"train": config.seed, "init": derive_seed(config.seed, STREAM_INIT)},
        out_dir,
        ["model.json", "history.json"],
    )
    write_manifest_file(manifest, out_dir)
    best = history.records[history.best_epoch - 1]
    print(
        f"trained {config.objective} for {config.epochs} epochs; "
        f"best epoch {history.best_epoch} "
        f"(val acc {best.val_accuracy:.2f}%, "
        f"val entropy AUC {best.val_entropy_auc:.2f})"
    )
    print(f"wrote {out_dir / 'model.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    score_kinds = _parse_scores(args.scores)
    model = _load_model(args.model)
    data_dir = Path(args.data)
    required = ("test_id", "test_ood") + (("train",) if args.mahalanobis else ())
    benchmark = _load_benchmark_dir(data_dir, required)
    if model.input_dim != benchmark["test_id"].features.shape[1]:
        raise DataError(
            f"model expects {model.input_dim}-D inputs but data has "
            f"{benchmark['test_id'].features.shape[1]} columns"
        )

    report = evaluate_model(
        model,
        benchmark,
        mc_passes=args.mc_passes,
        seed=args.seed,
        with_mahalanobis=args.mahalanobis,
    )

    out_dir = _resolve_out(args.out, "eval")
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []

    # score dumps and histograms use the MC populations when available;
    # --scores narrows the exported kinds, never the results JSON
    pops = score_populations(
        model,
        benchmark["test_id"],
        benchmark["test_ood"],
        mc_passes=args.mc_passes,
        seed=args.seed,
    )
    pops = {kind: pops[kind] for kind in score_kinds}
    if args.mahalanobis:
        pops["mahalanobis"] = mahalanobis_populations(
            model, benchmark["train"], benchmark["test_id"], benchmark["test_ood"]
        )
    for kind, (s_id, s_ood) in sorted(pops.items()):
        name = f"scores_{kind}.csv"
        write_score_dump(out_dir / name, s_id, s_ood)
        outputs.append(name)
    export_histograms(pops, args.histogram_bins, out_dir / "histograms.csv")
    outputs.append("histograms.csv")

    if model.input_dim == 2:
        bounds = grid_bounds(
            np.concatenate(
                [benchmark["test_id"].features, benchmark["test_ood"].features]
            )
        )
        for quantity in ("predicted_class", "confidence", "entropy"):
            name = f"grid_{quantity}.csv"
            export_decision_grid(
                model, bounds, args.grid_resolution, quantity, out_dir / name
            )
            outputs.append(name)

    manifest = build_manifest(
        "eval",
        {
            "model": str(args.model),
            "data": str(args.data),
            "mc_passes": args.mc_passes,
            "mahalanobis": args.mahalanobis,
            "scores": ",".join(score_kinds),
            "grid_resolution": args.grid_resolution,
            "histogram_bins": args.histogram_bins,
        },
        {"eval": args.seed},
        out_dir,
        outputs,
    )
    results = {
        "accuracy": round(report.id_accuracy, 2),
        "auc": _round2(report.auc),
        "warnings": report.warnings,
        "manifest": manifest,
    }
    _dump_json(results, out_dir / "results.json")
    outputs.append("results.json")
    manifest_full = build_manifest(
        "eval", manifest["config"], {"eval": args.seed}, out_dir, outputs
    )
    write_manifest_file(manifest_full, out_dir)

    print(f"accuracy: {results['accuracy']:.2f}%")
    for kind, val in results["auc"].items():
        print(f"auc[{kind}]: {val:.2f}")
    print(f"wrote {out_dir / 'results.json'}")
    return EXIT_OK


def cmd_corrupt_eval(args) -> int:
    model = _load_model(args.model)
    data_dir = Path(args.data)
    benchmark = _load_benchmark_dir(data_dir, ("test_id",))
    test_id = benchmark["test_id"]
    if model.input_dim != test_id.features.shape[1]:
        raise DataError(
            f"model expects {model.input_dim}-D inputs but data has "
            f"{test_id.features.shape[1]} columns"
        )
    clean_error = round(
        100.0 - accuracy(classify(model, test_id.features), test_id.labels), 2
    )
    table = corruption_error_table(model, test_id, args.seed)
    rounded = {
        kind: {str(sev): round(err, 2) for sev, err in row.items()}
        for kind, row in table.items()
    }
    out_dir = _resolve_out(args.out, "corrupt-eval")
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = build_manifest(
        "corrupt-eval",
        {"model": str(args.model), "data": str(args.data)},
        {"corrupt": args.seed},
        out_dir,
        [],
    )
    results = {
        "clean_error": clean_error,
        "errors": rounded,
        "mce": round(mce(table), 2),
        "warnings": [],
        "manifest": manifest,
    }
    _dump_json(results, out_dir / "corruption_report.json")
    manifest_full = build_manifest(
        "corrupt-eval", manifest["config"], {"corrupt": args.seed}, out_dir,
        ["corruption_report.json"],
    )
    write_manifest_file(manifest_full, out_dir)
    print(f"clean error: {clean_error:.2f}%")
    print(f"mCE: {results['mce']:.2f}")
    print(f"wrote {out_dir / 'corruption_report.json'}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    doc = load_config(args.config)
    base_config = train_config_from(doc, seed_override=args.seed)
    grid_doc = _load_json(args.grid, "grid file")
    if grid_doc.get("grid_version") != CONFIG_VERSION:
        raise ConfigError(
            f"grid_version must be {CONFIG_VERSION}, "
            f"got {grid_doc.get('grid_version')!r}"
        )
    grid = grid_doc.get("grid")
    if not isinstance(grid, list) or not all(isinstance(g, dict) for g in grid):
        raise ConfigError("grid file must contain a 'grid' list of objects")

    if args.workers < 1:
        raise ConfigError(f"--workers must be >= 1, got {args.workers}")
    data_dir = Path(args.data)
    benchmark = _load_benchmark_dir(data_dir, ("train", "val", "train_ood"))
    try:
        best_config, rows = sweep(base_config, grid, benchmark, workers=args.workers)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    # replay the winner standalone and persist its model
    model = init_mlp(
        [benchmark["train"].features.shape[1], *best_config.hidden_dims,
         best_config.k],
        best_config.dropout_rate,
        seed=derive_seed(best_config.seed, STREAM_INIT),
    )
    best_model, _ = train(best_config, benchmark, model)

    out_dir = _resolve_out(args.out, "sweep")
    out_dir.mkdir(parents=True, exist_ok=True)
    save_model(best_model, out_dir / "model.json")
    leaderboard = {
        "rows": [
            {
                **row.to_dict(),
                "val_accuracy": None if row.val_accuracy is None
                else round(row.val_accuracy, 2),
                "val_entropy_auc": None if row.val_entropy_auc is None
                else round(row.val_entropy_auc, 2),
            }
            for row in rows
        ],
    }
    _dump_json(leaderboard, out_dir / "leaderboard.json")
    _dump_json(dataclasses.asdict(best_config), out_dir / "best_config.json")
    manifest = build_manifest(
        "sweep",
        dataclasses.asdict(base_config),
        {"train": base_config.seed},
        out_dir,
        ["model.json", "leaderboard.json", "best_config.json"],
    )
    write_manifest_file(manifest, out_dir)
    winner = next(r for r in rows if r.selected)
    print(
        f"swept {len(rows)} points; selected overrides {winner.overrides} "
        f"(val acc {winner.val_accuracy:.2f}%, "
        f"val entropy AUC {winner.val_entropy_auc:.2f})"
    )
    print(f"wrote {out_dir / 'leaderboard.json'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oodkit",
        description="OOD-aware training objectives on a synthetic benchmark",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    out_help = f"output directory (default: ${OUT_ROOT_ENV}/<command>)"

    p = sub.add_parser("gen-data", help="sample the synthetic benchmark splits")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help=out_help)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one objective on a data directory")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help=out_help)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a trained model on the test splits")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help=out_help)
    p.add_argument("--mc-passes", type=int, default=EVAL_KEYS["mc_passes"])
    p.add_argument("--mahalanobis", action="store_true")
    p.add_argument(
        "--scores",
        default=",".join(SOFTMAX_SCORE_KINDS),
        help="comma-separated score kinds to export as CSV dumps",
    )
    p.add_argument(
        "--grid-resolution", type=int, default=EVAL_KEYS["grid_resolution"]
    )
    p.add_argument(
        "--histogram-bins", type=int, default=EVAL_KEYS["histogram_bins"]
    )
    p.add_argument("--seed", type=int, default=EVAL_KEYS["seed"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser(
        "corrupt-eval", help="error table over the corruption suite"
    )
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help=out_help)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_corrupt_eval)

    p = sub.add_parser("sweep", help="grid search over objective knobs")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help=out_help)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument(
        "--workers", type=int, default=1,
        help="grid points trained in parallel; leaderboard is order-independent",
    )
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
