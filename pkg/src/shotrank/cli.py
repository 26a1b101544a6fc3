"""Command-line entry point.

Commands: gen-synthetic, validate, train, eval, grad-check,
export-embeddings, report.  Exit codes: 0 success, 1 configuration error,
2 data error, 3 numeric failure.  Hyperparameters come from an optional JSON
config file (flat keys mirroring TrainConfig, "lambda" included) and can be
overridden by flags; flags win.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import data as datamod
from . import evaluation as evalmod
from . import trainer as trainmod
from .errors import NonFiniteLoss, ShotRankError
from .gradcheck import run_gradient_checks

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # unknown flags are config errors, not warnings
        raise _ConfigError(message)


def _provenance(cfg_hash: str, seed: int) -> dict:
    return {"config_hash": cfg_hash, "seed": seed, "version": __version__}


def _load_train_config(args) -> trainmod.TrainConfig:
    doc: dict = {}
    if args.config is not None:
        try:
            doc = json.loads(Path(args.config).read_text())
        except FileNotFoundError as exc:
            raise _ConfigError(f"config file not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise _ConfigError(f"config file {args.config}: {exc}") from exc
    overrides = {
        "mode": args.mode, "seed": args.seed, "epochs": args.epochs,
        "lr": args.lr, "batch_shots": args.batch_shots, "d": args.d,
        "hidden": args.hidden, "precision": args.precision,
        "lambda": getattr(args, "lam", None), "window": args.window,
    }
    for key, value in overrides.items():
        if value is not None:
            doc[key] = value
    try:
        return trainmod.TrainConfig.from_dict(doc)
    except (ValueError, TypeError) as exc:
        raise _ConfigError(str(exc)) from exc


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (flat TrainConfig keys)")
    p.add_argument("--mode", choices=trainmod.MODES)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-shots", type=int, dest="batch_shots")
    p.add_argument("--d", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--lambda", type=float, dest="lam")
    p.add_argument("--precision", choices=("f32", "f64"))


def build_parser() -> _Parser:
    parser = _Parser(prog="shotrank", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write a synthetic dataset + manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--n-movies", type=int, default=20)
    p.add_argument("--shots-per-movie", type=int, default=200)
    p.add_argument("--feature-dim", type=int, default=64)
    p.add_argument("--key-rate", type=float, default=0.06)
    p.add_argument("--noise-sigma", type=float, default=0.5)
    p.add_argument("--trailer-fraction", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-movies", type=int, default=0,
                   help="hold out the last K movies into manifest_test.json")

    p = sub.add_parser("validate", help="check every file a manifest references")
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path (.cckp)")
    p.add_argument("--log", help="epoch log path (.jsonl)")
    _add_train_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--csv", help="optional per-movie CSV path")
    p.add_argument("--metrics", default="rank@10,rank@20,rank@global")

    p = sub.add_parser("grad-check", help="finite-difference check of every loss term")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("export-embeddings",
                       help="dump pre/post augmentation features per movie")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("report", help="merge eval reports into a modes x metrics table")
    p.add_argument("inputs", nargs="+", help="eval report JSON files")
    p.add_argument("--out", help="merged table JSON path")
    return parser


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _cmd_gen_synthetic(args) -> int:
    spec = datamod.SyntheticSpec(
        n_movies=args.n_movies, shots_per_movie=args.shots_per_movie,
        feature_dim=args.feature_dim, key_rate=args.key_rate,
        noise_sigma=args.noise_sigma, trailer_fraction_of_keys=args.trailer_fraction,
        seed=args.seed)
    movies, trailers = datamod.generate_synthetic(spec)
    prov = {"seed": args.seed, "version": __version__, "spec": asdict(spec)}
    k = args.test_movies
    if k < 0 or k >= len(movies):
        raise _ConfigError(f"--test-movies must be in [0, {len(movies)})")
    split = len(movies) - k
    path = datamod.write_dataset(args.out, movies[:split], trailers[:split],
                                 spec.feature_dim, provenance=prov)
    print(f"wrote {path} ({split} movies)")
    if k:
        path = datamod.write_dataset(args.out, movies[split:], trailers[split:],
                                     spec.feature_dim, manifest_name="manifest_test.json",
                                     provenance=prov)
        print(f"wrote {path} ({k} movies)")
    return EXIT_OK


def _cmd_validate(args) -> int:
    manifest = datamod.load_manifest(args.manifest)
    report = datamod.validate_manifest(manifest)
    if report.ok:
        print(f"{args.manifest}: ok ({len(manifest.pairs)} pairs)")
        return EXIT_OK
    for v in report.violations:
        where = f"{v.file}" + (f" row {v.row}" if v.row is not None else "")
        print(f"violation: {where}: {v.message}")
    return EXIT_DATA


def _cmd_train(args) -> int:
    cfg = _load_train_config(args)
    manifest = datamod.load_manifest(args.manifest)
    dataset = datamod.load_dataset(manifest)
    prov = _provenance(cfg.config_hash(), cfg.seed)
    log_lines: list[str] = [json.dumps({"provenance": prov})]
    checkpoint, logs = trainmod.train(cfg, dataset)
    for entry in logs:
        log_lines.append(json.dumps(entry))
    trainmod.save_checkpoint(args.out, checkpoint, provenance=prov)
    if args.log:
        Path(args.log).write_text("\n".join(log_lines) + "\n")
    final = logs[-1] if logs else {"total": float("nan")}
    print(f"trained mode={cfg.mode} for {cfg.epochs} epochs, "
          f"final loss {final['total']:.6g}; wrote {args.out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    checkpoint = trainmod.load_checkpoint(args.checkpoint)
    manifest = datamod.load_manifest(args.manifest)
    dataset = datamod.load_dataset(manifest)
    metrics = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
    prov = _provenance(checkpoint.config.config_hash(), checkpoint.config.seed)
    report = evalmod.evaluate(checkpoint, dataset, metrics=metrics, provenance=prov)
    report.to_json(args.out)
    if args.csv:
        report.to_csv(args.csv)
    summary = ", ".join(f"{m}={report.averages[m]:.4f}" for m in metrics)
    print(f"eval mode={report.mode}: {summary}; wrote {args.out}")
    return EXIT_OK


def _cmd_grad_check(args) -> int:
    results = run_gradient_checks(seed=args.seed, h=args.h, tol=args.tol)
    failed = False
    for name, report in results.items():
        status = "ok" if report.passed else "FAIL"
        print(f"{name}: max rel err {report.max_rel_err:.3e} ({status})")
        failed = failed or not report.passed
    return EXIT_NUMERIC if failed else EXIT_OK


def _cmd_export_embeddings(args) -> int:
    checkpoint = trainmod.load_checkpoint(args.checkpoint)
    if not checkpoint.config.augmented:
        raise _ConfigError(
            f"checkpoint mode {checkpoint.config.mode!r} does not augment features")
    manifest = datamod.load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for entry in manifest.pairs:
        movie, trailer = datamod.load_pair(entry)
        pre, post = trainmod.export_embeddings(checkpoint, movie, trailer)
        datamod.write_feature_file(out / f"{movie.movie_id}.pre.ccaf", pre)
        datamod.write_feature_file(out / f"{movie.movie_id}.post.ccaf", post)
    print(f"wrote embeddings for {len(manifest.pairs)} movies to {out}")
    return EXIT_OK


def _cmd_report(args) -> int:
    reports = [evalmod.EvalReport.from_json(p) for p in args.inputs]
    table = evalmod.merge_reports(reports)
    if args.out:
        Path(args.out).write_text(json.dumps(table, indent=2, sort_keys=True))
    metrics: list[str] = []
    for mode_row in table["modes"].values():
        for m in mode_row["averages"]:
            if m not in metrics:
                metrics.append(m)
    header = ["mode"] + metrics + ["n"]
    print("  ".join(f"{h:>12}" for h in header))
    order = [m for m in trainmod.MODES if m in table["modes"]]
    order += [m for m in table["modes"] if m not in order]
    for mode in order:
        row = table["modes"][mode]
        cells = [mode] + [f"{row['averages'].get(m, float('nan')):.4f}" for m in metrics]
        cells.append(str(row["n_reports"]))
        print("  ".join(f"{c:>12}" for c in cells))
    return EXIT_OK


_COMMANDS = {
    "gen-synthetic": _cmd_gen_synthetic,
    "validate": _cmd_validate,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "grad-check": _cmd_grad_check,
    "export-embeddings": _cmd_export_embeddings,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except _ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLoss as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ShotRankError, FileNotFoundError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
