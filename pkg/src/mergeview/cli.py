"""Command-line interface.

    mergeview train   --suite lse --method von_full
    mergeview sweep   --suite lse --strategy hessian
    mergeview joint   --suite lse
    mergeview compare --suite lse --preview hessian=out/hessian.csv --exact out/joint.csv
    mergeview report  --suite synthetic

Exit codes: 0 success, 1 runtime failure, 2 usage error.  The artifact store
root comes from --store, else the MERGEVIEW_STORE environment variable, else
``./mergeview-store``.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from .exceptions import ContractViolationError, StoreError
from .experiment import (
    METRIC_SCALES,
    STRATEGY_METHOD,
    SUITES,
    ExperimentConfig,
    build_suite,
    default_config,
    load_config,
    run_compare,
    run_joint,
    run_report,
    run_sweep,
    run_train,
    sweep_report_payload,
)
from .store import ArtifactStore, save_json

_METHOD_CHOICES = ("gd", "von_full", "vi_diag", "sq_grad_laplace", "mixture")
_STRATEGY_CHOICES = tuple(sorted(STRATEGY_METHOD))
ENV_STORE = "MERGEVIEW_STORE"


def _spacing(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 < value <= 1.0:
        raise argparse.ArgumentTypeError("spacing must lie in (0, 1]")
    n = round(1.0 / value)
    if n < 1 or abs(n * value - 1.0) > 1e-6:
        raise argparse.ArgumentTypeError(f"spacing {value} does not divide 1")
    return value


def _preview_pair(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(
            f"expected STRATEGY=CSV_PATH, got {text!r}"
        )
    name, path = text.split("=", 1)
    return name, path


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="experiment config JSON")
    parser.add_argument("--suite", choices=SUITES, help="suite to use defaults for")
    parser.add_argument("--store", help=f"artifact store root (default ${ENV_STORE} or ./mergeview-store)")
    parser.add_argument("--seed", type=int, help="override every trainer seed")
    parser.add_argument("--spacing", type=_spacing, help="preview grid spacing")
    parser.add_argument("--workers", type=int, help="sweep worker threads (default: cpu count)")
    parser.add_argument("--out", help="output path/directory override")
    parser.add_argument("--metric-scale", choices=METRIC_SCALES, dest="metric_scale")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mergeview",
        description="Preview multitask-finetuning outcomes by merging per-task posteriors.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train per-task posteriors")
    _add_common(p)
    p.add_argument("--method", choices=_METHOD_CHOICES, required=True)

    p = sub.add_parser("sweep", help="preview sweep over the simplex grid")
    _add_common(p)
    p.add_argument("--strategy", choices=_STRATEGY_CHOICES, required=True)

    p = sub.add_parser("joint", help="exact joint-training oracle sweep")
    _add_common(p)

    p = sub.add_parser("compare", help="compare preview CSVs against an exact CSV")
    _add_common(p)
    p.add_argument(
        "--preview",
        type=_preview_pair,
        action="append",
        required=True,
        metavar="STRATEGY=CSV",
    )
    p.add_argument("--exact", required=True, metavar="CSV")

    p = sub.add_parser("report", help="train, sweep, joint, and compare in one go")
    _add_common(p)
    return parser


def _load_cfg(args) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
    elif args.suite:
        cfg = default_config(args.suite)
    else:
        raise ContractViolationError("either --config or --suite is required")
    if args.suite and cfg.suite != args.suite:
        raise ContractViolationError(
            f"--suite {args.suite} conflicts with config suite {cfg.suite}"
        )
    if args.spacing is not None:
        cfg = replace(cfg, spacing=args.spacing)
    if args.metric_scale is not None:
        cfg = replace(cfg, metric_scale=args.metric_scale)
    if args.seed is not None:
        cfg = replace(
            cfg,
            trainers={k: replace(v, seed=args.seed) for k, v in cfg.trainers.items()},
        )
    return cfg


def _open_store(args) -> ArtifactStore:
    root = args.store or os.environ.get(ENV_STORE) or "./mergeview-store"
    return ArtifactStore(root)


def _workers(args) -> int:
    if args.workers is not None:
        if args.workers < 1:
            raise ContractViolationError("--workers must be >= 1")
        return args.workers
    return os.cpu_count() or 1


def _fmt_alpha(alpha) -> str:
    return "(" + ", ".join(f"{a:.6g}" for a in alpha) + ")"


def _cmd_train(args) -> int:
    cfg = _load_cfg(args)
    store = _open_store(args)
    artifacts = run_train(cfg, store, args.method)
    for art in artifacts:
        path = store.path_for(
            cfg.experiment, art.provenance.task_id, args.method,
            art.provenance.config.seed,
        )
        print(f"{art.provenance.task_id}: {art.kind} -> {path}")
    return 0


def _cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    store = _open_store(args)
    suite = build_suite(cfg)
    surface, csv_path = run_sweep(
        cfg, store, args.strategy, workers=_workers(args), out=args.out, suite=suite
    )
    payload = sweep_report_payload(cfg, surface, suite.sense)
    json_path = csv_path.with_name(f"sweep_{args.strategy}.json")
    save_json(json_path, payload)
    print(
        f"best_alpha={_fmt_alpha(payload['best_alpha'])} "
        f"best_metric={payload['best_metric']:.6g} "
        f"({len(surface)} points -> {csv_path})"
    )
    return 0


def _cmd_joint(args) -> int:
    cfg = _load_cfg(args)
    store = _open_store(args)
    surface, csv_path = run_joint(
        cfg, store, workers=_workers(args), out=args.out,
        spacing=args.spacing,
    )
    hits = sum(1 for notes in surface.notes for n in notes if n == "cache hit")
    print(f"{len(surface)} points -> {csv_path} ({hits} cache hits)")
    return 0


def _cmd_compare(args) -> int:
    cfg = _load_cfg(args)
    store = _open_store(args)
    report, path = run_compare(
        cfg, store, dict(args.preview), args.exact, out=args.out
    )
    for row in report["rows"]:
        print(
            f"{row['strategy']}: mse={row['mse']:.6g} "
            f"best_alpha={_fmt_alpha(row['best_alpha'])} "
            f"preview_at_best={row['preview_best_metric']:.6g} "
            f"exact_at_best={row['exact_at_best']:.6g}"
        )
    print(
        f"exact best: {report['exact_best_metric']:.6g} at "
        f"{_fmt_alpha(report['exact_best_alpha'])} -> {path}"
    )
    return 0


def _cmd_report(args) -> int:
    cfg = _load_cfg(args)
    store = _open_store(args)
    report, path = run_report(cfg, store, workers=_workers(args), out=args.out)
    for row in report["rows"]:
        print(f"{row['strategy']}: mse={row['mse']:.6g}")
    print(f"report -> {path}")
    return 0


_HANDLERS = {
    "train": _cmd_train,
    "sweep": _cmd_sweep,
    "joint": _cmd_joint,
    "compare": _cmd_compare,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except (ContractViolationError, StoreError, OSError, RuntimeError, ValueError) as exc:
        print(f"mergeview: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
