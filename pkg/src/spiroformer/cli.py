"""Command-line pipeline: synth, preprocess, train, eval, explain.

Every run writes a run-manifest JSON next to its primary output recording
the resolved configuration, seeds, package version, and SHA-256 of each
input file, so any result can be regenerated from the manifest alone.

Exit codes: 0 success; 2 usage errors (argparse); 3 data/schema problems.
Config precedence for training: CLI flags > config file > built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import build_dataset, read_dataset, write_dataset
from .errors import SpiroError
from .evaluation import rows_to_csv, trial_aggregate
from .fileio import atomic_write_text, sha256_file, write_json_atomic
from .fusion import GbdtConfig
from .interpret import (
    ReferenceEquation,
    cls_attention_profile,
    cohort_mean_profile,
    gold_stratify,
    locate_markers,
    overlay_export,
)
from .model import ModelConfig, forward
from .protocol import evaluate_trial, train_trial
from .report import render_auc_figure, render_profile_figure
from .synthdata import (
    benchmark_label_spec,
    generate_cohort,
    planted_label_spec,
    read_cohort,
    write_cohort,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3


def _manifest_path(primary_output: str) -> str:
    return f"{primary_output}.run.json"


def _write_run_manifest(primary_output: str, command: str, config: dict,
                        seeds: list, inputs: list) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "version": f"spiroformer-{__version__}",
        "input_hashes": {str(p): sha256_file(p) for p in inputs},
    }
    write_json_atomic(_manifest_path(primary_output), manifest)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spiroformer",
        description="Spirogram curve modeling pipeline: synthesize cohorts, "
                    "preprocess blows, train and evaluate models, export "
                    "attention overlays.",
    )
    parser.add_argument("--version", action="version",
                        version=f"spiroformer {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort NDJSON")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--profile", choices=("benchmark", "planted"),
                   default="benchmark",
                   help="label generator: benchmark (shape + demographic "
                        "signal) or planted (post-PEF shape signal only)")

    p = sub.add_parser("preprocess", help="cohort NDJSON -> dataset container")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dv", type=float, default=0.01)
    p.add_argument("--tmax", type=int, default=1024)
    p.add_argument("--patch", type=int, default=30)
    p.add_argument("--no-qc", action="store_true",
                   help="skip the percentile quality filter")

    p = sub.add_parser("train", help="train one seed's transformer + fusion")
    p.add_argument("--endpoint", required=True,
                   choices=("copd_risk", "mortality", "exacerbation"))
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None,
                   help="JSON file of ModelConfig overrides")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None,
                   help="overrides the config-file seed")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--float32", action="store_true",
                   help="store checkpoint tensors as float32")

    p = sub.add_parser("eval", help="score trained seeds on their test splits")
    p.add_argument("--endpoint", required=True,
                   choices=("copd_risk", "mortality", "exacerbation"))
    p.add_argument("--data", required=True)
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--csv", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3, 4, 5],
                   help="seed set that must be covered by --models")

    p = sub.add_parser("explain", help="attention overlays per GOLD cohort")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--stratify", choices=("gold",), default="gold")
    p.add_argument("--ref-eq", dest="ref_eq", required=True,
                   help="JSON file with sex-specific predicted-FEV1 "
                        "coefficients {male: [a,b,c], female: [a,b,c]}")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    return parser


def _cmd_synth(args) -> int:
    spec = planted_label_spec() if args.profile == "planted" else benchmark_label_spec()
    records = generate_cohort(n=args.n, seed=args.seed, label_spec=spec)
    write_cohort(records, args.out)
    _write_run_manifest(args.out, "synth",
                        {"n": args.n, "profile": args.profile},
                        [args.seed], [])
    print(f"wrote {len(records)} records to {args.out}")
    return EXIT_OK


def _cmd_preprocess(args) -> int:
    records = read_cohort(args.inp)
    ds, dropped = build_dataset(
        records, dv_l=args.dv, t_max=args.tmax, patch_len=args.patch,
        apply_qc=not args.no_qc,
    )
    write_dataset(ds, args.out)
    _write_run_manifest(args.out, "preprocess",
                        {"dv": args.dv, "tmax": args.tmax, "patch": args.patch,
                         "qc": not args.no_qc, "dropped_ids": dropped},
                        [], [args.inp])
    print(f"wrote dataset of {ds.n_records} records to {args.out} "
          f"({len(dropped)} dropped by QC)")
    return EXIT_OK


def _resolve_model_config(args, patch_len: int) -> ModelConfig:
    obj = {}
    if args.config:
        with open(args.config) as fh:
            obj = json.load(fh)
    if args.seed is not None:
        obj["seed"] = args.seed
    if args.lr is not None:
        obj["lr"] = args.lr
    if args.epochs is not None:
        obj["epochs"] = args.epochs
    obj.setdefault("patch_len", patch_len)
    if obj["patch_len"] != patch_len:
        raise SpiroError(
            f"config patch_len {obj['patch_len']} does not match dataset "
            f"patch length {patch_len}"
        )
    return ModelConfig.from_obj(obj)


def _cmd_train(args) -> int:
    ds = read_dataset(args.data)
    config = _resolve_model_config(args, ds.patch_len)
    artifacts = train_trial(ds, args.endpoint, config)
    save_checkpoint(
        artifacts.params, args.out,
        standardizer=ds.standardizer,
        fusion=artifacts.fusion,
        endpoint=args.endpoint,
        seed=config.seed,
        use_float32=args.float32,
    )
    _write_run_manifest(
        args.out, "train",
        {"endpoint": args.endpoint, "model_config": config.to_obj(),
         "best_epoch": artifacts.history.best_epoch,
         "val_auc": artifacts.history.val_auc},
        [config.seed], [args.data] + ([args.config] if args.config else []),
    )
    print(f"trained seed {config.seed} on {args.endpoint}: best epoch "
          f"{artifacts.history.best_epoch}, val AUC "
          f"{max(artifacts.history.val_auc):.4f} -> {args.out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    ds = read_dataset(args.data)
    by_seed = {}
    for path in args.models:
        ck = load_checkpoint(path)
        if ck.endpoint != args.endpoint:
            raise SpiroError(
                f"model {path} was trained for endpoint {ck.endpoint!r}, "
                f"not {args.endpoint!r}"
            )
        by_seed[ck.seed] = ck
    missing = sorted(set(args.seeds) - set(by_seed))
    if missing:
        raise SpiroError(f"no trained model for seed(s) {missing}")

    results = []
    for seed in args.seeds:
        results.extend(evaluate_trial(ds, args.endpoint, by_seed[seed]))
    rows = trial_aggregate(results, seeds=args.seeds)
    atomic_write_text(args.csv, rows_to_csv(rows))
    figure_path = f"{args.csv}.png"
    render_auc_figure(rows, figure_path)
    _write_run_manifest(
        args.csv, "eval",
        {"endpoint": args.endpoint, "methods": sorted({r.method for r in rows}),
         "figure": figure_path},
        list(args.seeds), [args.data] + list(args.models),
    )
    print(f"wrote {len(rows)} aggregate rows to {args.csv} and figure to "
          f"{figure_path}")
    return EXIT_OK


def _cmd_explain(args) -> int:
    import os

    ds = read_dataset(args.data)
    ck = load_checkpoint(args.model)
    with open(args.ref_eq) as fh:
        ref = ReferenceEquation.from_obj(json.load(fh))
    os.makedirs(args.out_dir, exist_ok=True)

    summaries = ds.summaries()
    cohorts = {"stage12": [], "stage34": []}
    profiles = {"stage12": [], "stage34": []}
    for i in range(ds.n_records):
        demo = _MetaDemo(ds.meta[i])
        tag = gold_stratify(summaries[i], demo, ref)
        trace = forward(ds.standardized_curve(i), ck.params)
        profiles[tag].append(cls_attention_profile(trace))
        cohorts[tag].append(i)

    mean_profiles = {}
    written = []
    for tag, profs in profiles.items():
        if not profs:
            continue
        mean_profiles[tag] = cohort_mean_profile(profs)
        idx = _exemplar_index(ds, cohorts[tag])
        curve = ds.raw_curve(idx)
        markers = locate_markers(summaries[idx], curve)
        prefix = os.path.join(args.out_dir, tag)
        written.extend(
            overlay_export(curve, mean_profiles[tag], markers, prefix,
                           ds.patch_len)
        )
    if not mean_profiles:
        raise SpiroError("no records fell into any GOLD cohort")
    figure_path = os.path.join(args.out_dir, "importance.png")
    render_profile_figure(mean_profiles, figure_path)
    manifest_target = os.path.join(args.out_dir, "explain")
    _write_run_manifest(
        manifest_target, "explain",
        {"stratify": args.stratify,
         "cohort_sizes": {t: len(v) for t, v in cohorts.items()},
         "most_important_patch": {t: p.most_important_patch
                                  for t, p in mean_profiles.items()},
         "figure": figure_path},
        [ck.seed], [args.data, args.model, args.ref_eq],
    )
    print(f"wrote {', '.join(written)} and {figure_path}")
    return EXIT_OK


class _MetaDemo:
    """Demographics view over a dataset metadata row."""

    def __init__(self, meta: dict):
        self.age = meta["age"]
        self.sex = meta["sex"]
        self.smoking = meta["smoking"]
        self.height_cm = meta["height_cm"]


def _exemplar_index(ds, indices: list) -> int:
    """Cohort exemplar: record with the median FVC (ties -> lowest id)."""
    fvcs = [(ds.meta[i]["summary"]["fvc_l"], ds.meta[i]["id"], i) for i in indices]
    fvcs.sort()
    return fvcs[len(fvcs) // 2][2]


_HANDLERS = {
    "synth": _cmd_synth,
    "preprocess": _cmd_preprocess,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "explain": _cmd_explain,
}


def run(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    try:
        return _HANDLERS[args.command](args)
    except (SpiroError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())
