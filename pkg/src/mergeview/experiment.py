"""Experiment orchestration: suites, configs, and the pipeline behind the
CLI verbs (train -> sweep -> joint -> compare -> report).

A suite bundles tasks, a metric, and an optimization sense:

* ``lse``             -- three 2-D log-sum-exp toys; metric is the weighted
                         loss (lower is better).
* ``synthetic``       -- class-split softmax regression on Gaussian digit
                         blobs; metric is test accuracy over all classes.
                         ``suite_options["split"]`` picks the imbalanced or
                         balanced class split.
* ``mnist_imbalanced``/``mnist_balanced`` -- the same protocol on real MNIST
                         IDX files (``suite_options["mnist_dir"]`` or the
                         MERGEVIEW_MNIST_DIR environment variable).

All digit-suite defaults follow the reference protocol: GD at rate 3.0 for
2500 iterations for point models, full-Gaussian variational training at rate
0.1 with 3 Monte-Carlo samples for 25 iterations, 20-component mixtures from
(seed, budget) run pairs, previews on a 0.02-spaced simplex grid with the
joint oracle on a 0.1 grid compared at shared points.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .exceptions import ContractViolationError, MissingArtifactError
from .merging import SimplexWeights
from .preview import (
    PreviewSurface,
    aligned_mse,
    best_alpha,
    joint_oracle_sweep,
    joint_point_key,
    metric_histogram,
    preview_mse,
    simplex_grid,
)
from .store import (
    ArtifactStore,
    JointCache,
    load_surface_csv,
    save_json,
    save_surface_csv,
)
from .strategies import (
    HessianWeightedMerge,
    MixtureEmMerge,
    SimpleAverageMerge,
    TaskArithmeticMerge,
)
from .preview import preview_sweep
from .tasks import (
    BALANCED_SPLIT,
    IMBALANCED_SPLIT,
    WeightedTask,
    make_class_split_tasks,
    make_lse_tasks,
    make_synthetic_digits,
    union_accuracy_evaluator,
    weighted_loss_evaluator,
)
from .training import (
    TrainerConfig,
    gd_train,
    multi_run_mixture,
    sq_grad_laplace,
    vi_diag_train,
    von_full_train,
)

SUITES = ("lse", "synthetic", "mnist_imbalanced", "mnist_balanced")
METRIC_SCALES = ("fraction", "percent")

#: which training method feeds each sweep strategy
STRATEGY_METHOD = {"simple": "gd", "ta": "gd", "hessian": "von_full", "mixture": "mixture"}


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to rerun an experiment, JSON round-trippable."""

    experiment: str
    suite: str
    spacing: float = 0.02
    joint_spacing: float = 0.02
    strategies: tuple[str, ...] = ("simple", "hessian", "mixture")
    metric_scale: str = "fraction"
    histogram_bins: int = 20
    trainers: dict = field(default_factory=dict)
    mixture_runs: tuple[tuple[int, int], ...] = ()
    suite_options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.suite not in SUITES:
            raise ContractViolationError(
                f"unknown suite {self.suite!r}; choices: {SUITES}"
            )
        if self.metric_scale not in METRIC_SCALES:
            raise ContractViolationError(
                f"metric_scale must be one of {METRIC_SCALES}"
            )
        object.__setattr__(self, "strategies", tuple(self.strategies))
        object.__setattr__(
            self,
            "mixture_runs",
            tuple((int(s), int(i)) for s, i in self.mixture_runs),
        )
        for name in self.strategies:
            if name not in STRATEGY_METHOD:
                raise ContractViolationError(
                    f"unknown strategy {name!r}; choices: {sorted(STRATEGY_METHOD)}"
                )

    def to_dict(self) -> dict:
        from dataclasses import asdict

        d = asdict(self)
        d["strategies"] = list(self.strategies)
        d["mixture_runs"] = [list(pair) for pair in self.mixture_runs]
        d["trainers"] = {k: asdict(v) for k, v in self.trainers.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        d["trainers"] = {
            k: TrainerConfig(**v) for k, v in d.get("trainers", {}).items()
        }
        d["strategies"] = tuple(d.get("strategies", ()))
        d["mixture_runs"] = tuple(
            tuple(pair) for pair in d.get("mixture_runs", ())
        )
        return cls(**d)


def save_config(path, cfg: ExperimentConfig):
    save_json(path, cfg.to_dict())


def load_config(path) -> ExperimentConfig:
    import json

    return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))


def default_config(suite: str, experiment: str | None = None, **overrides) -> ExperimentConfig:
    """The per-suite protocol defaults; keyword overrides replace fields."""
    if suite == "lse":
        # the variational runs share one loss temperature (ess_scale): common
        # precision factors cancel in every merge, but sharper posteriors
        # keep the variational means near the actual minimizers
        von = TrainerConfig(
            method="von_full",
            learning_rate=0.2,
            iterations=300,
            mc_samples=4,
            prior_precision=1e-6,
            ess_scale=20.0,
        )
        base = ExperimentConfig(
            experiment=experiment or "lse",
            suite=suite,
            spacing=0.02,
            joint_spacing=0.02,
            trainers={
                "gd": TrainerConfig(method="gd", learning_rate=0.1, iterations=1500),
                "von_full": von,
                "mixture": von,
                "joint": TrainerConfig(method="gd", learning_rate=0.1, iterations=1500),
            },
            mixture_runs=tuple((0, iters) for iters in (5, 10, 20, 40, 80, 160, 300)),
            suite_options={"seed": 7, "n_rows": 8, "scale": 3.0},
        )
    elif suite in ("synthetic", "mnist_imbalanced", "mnist_balanced"):
        digit_trainers = {
            "gd": TrainerConfig(method="gd", learning_rate=3.0, iterations=2500),
            "von_full": TrainerConfig(
                method="von_full", learning_rate=0.1, iterations=25, mc_samples=3
            ),
            "mixture": TrainerConfig(
                method="von_full", learning_rate=0.1, iterations=25, mc_samples=3
            ),
            "vi_diag": TrainerConfig(
                method="vi_diag", learning_rate=0.1, iterations=25, mc_samples=3
            ),
            "joint": TrainerConfig(method="gd", learning_rate=3.0, iterations=2500),
        }
        # 20 mixture components: independent full-budget runs differing only
        # in seed.  The variational means scatter around each task's basin
        # (Monte Carlo noise), and the responsibility-weighted merge of the
        # ensemble averages that noise away -- an iteration-budget ladder
        # instead spreads components along the optimization path and ruins
        # the preview, so every component gets the full budget.
        runs = tuple((seed, 25) for seed in range(20))
        options: dict = {}
        if suite == "synthetic":
            options = {
                "seed": 11,
                "per_class": 100,
                "eval_per_class": 50,
                "d": 64,
                "noise": 0.15,
                "split": "imbalanced",
                "ess": "per_task",
            }
        else:
            options = {
                "image_size": 14,
                "limit_per_class": 500,
                "mnist_dir": None,
                "ess": "per_task",
            }
        base = ExperimentConfig(
            experiment=experiment or suite,
            suite=suite,
            spacing=0.02,
            joint_spacing=0.1,
            trainers=digit_trainers,
            mixture_runs=runs,
            suite_options=options,
        )
    else:
        raise ContractViolationError(f"unknown suite {suite!r}; choices: {SUITES}")
    if experiment:
        overrides.setdefault("experiment", experiment)
    return replace(base, **overrides) if overrides else base


# ---------------------------------------------------------------------------
# suite construction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Suite:
    """Materialized tasks plus how to score a merged parameter vector."""

    tasks: tuple
    evaluator: object
    sense: str  # "max" or "min"
    init: np.ndarray
    dataset: object = None


def _resolve_split(name_or_split):
    if name_or_split in (None, "imbalanced"):
        return IMBALANCED_SPLIT
    if name_or_split == "balanced":
        return BALANCED_SPLIT
    return tuple(tuple(int(c) for c in part) for part in name_or_split)


def build_suite(cfg: ExperimentConfig) -> Suite:
    opts = cfg.suite_options
    if cfg.suite == "lse":
        tasks = make_lse_tasks(
            seed=int(opts.get("seed", 7)),
            n_rows=int(opts.get("n_rows", 8)),
            scale=float(opts.get("scale", 1.0)),
        )
        return Suite(
            tasks=tuple(tasks),
            evaluator=weighted_loss_evaluator(tasks),
            sense="min",
            init=np.zeros(2),
        )
    if cfg.suite == "synthetic":
        data = make_synthetic_digits(
            seed=int(opts.get("seed", 11)),
            per_class=int(opts.get("per_class", 100)),
            d=int(opts.get("d", 64)),
            noise=float(opts.get("noise", 0.15)),
            eval_per_class=int(opts.get("eval_per_class", 50)),
            split=_resolve_split(opts.get("split")),
        )
    else:
        from .idx import load_mnist_dir

        root = opts.get("mnist_dir") or os.environ.get("MERGEVIEW_MNIST_DIR")
        if not root:
            raise ContractViolationError(
                f"suite {cfg.suite!r} needs an MNIST directory "
                "(suite_options['mnist_dir'] or MERGEVIEW_MNIST_DIR)"
            )
        split = (
            BALANCED_SPLIT if cfg.suite == "mnist_balanced" else IMBALANCED_SPLIT
        )
        data = load_mnist_dir(
            root,
            split=split,
            image_size=opts.get("image_size", 14),
            limit_per_class=opts.get("limit_per_class", 500),
        )
    tasks = make_class_split_tasks(data)
    return Suite(
        tasks=tuple(tasks),
        evaluator=union_accuracy_evaluator(data),
        sense="max",
        init=np.zeros(tasks[0].dim),
        dataset=data,
    )


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _trainer_cfg(cfg: ExperimentConfig, name: str) -> TrainerConfig:
    try:
        return cfg.trainers[name]
    except KeyError:
        raise ContractViolationError(
            f"config has no trainer entry {name!r} "
            f"(available: {sorted(cfg.trainers)})"
        ) from None


def _task_trainer_cfg(cfg: ExperimentConfig, name: str, task) -> TrainerConfig:
    """Per-task trainer config.  With ``suite_options["ess"] == "per_task"``
    the variational loss temperature is the task's example count, so each
    posterior precision carries likelihood weight proportional to its data
    (the per-example losses are means; multiplying by N recovers the summed
    log-likelihood that a posterior is actually shaped by).  Point trainers
    are untouched -- temperature only rescales their loss surface.
    """
    base = _trainer_cfg(cfg, name)
    if cfg.suite_options.get("ess") != "per_task":
        return base
    if base.method not in ("von_full", "vi_diag"):
        return base
    n = int(getattr(task, "num_examples", 0) or 0)
    if n <= 0:
        return base
    return replace(base, ess_scale=base.ess_scale * n)


def run_train(cfg: ExperimentConfig, store: ArtifactStore, method: str,
              suite: Suite | None = None) -> list:
    """Train one posterior per task with the named method and persist them.
    Reinvocation retrains and overwrites (bit-identical for identical
    configs)."""
    suite = suite or build_suite(cfg)
    artifacts = []
    for task in suite.tasks:
        if method == "gd":
            art = gd_train(task, _trainer_cfg(cfg, "gd"), suite.init)
        elif method == "von_full":
            art = von_full_train(task, _task_trainer_cfg(cfg, "von_full", task))
        elif method == "vi_diag":
            art = vi_diag_train(task, _task_trainer_cfg(cfg, "vi_diag", task))
        elif method == "sq_grad_laplace":
            point = _load_or_train_point(cfg, store, task, suite)
            art = sq_grad_laplace(task, point.payload)
        elif method == "mixture":
            if not cfg.mixture_runs:
                raise ContractViolationError("config has no mixture_runs")
            art = multi_run_mixture(
                task, _task_trainer_cfg(cfg, "mixture", task), cfg.mixture_runs
            )
        else:
            raise ContractViolationError(f"unknown training method {method!r}")
        store.save(cfg.experiment, art, method=method)
        artifacts.append(art)
    return artifacts


def _load_or_train_point(cfg, store, task, suite):
    gd_cfg = _trainer_cfg(cfg, "gd")
    try:
        return store.load(cfg.experiment, task.id, "gd", gd_cfg.seed)
    except MissingArtifactError:
        art = gd_train(task, gd_cfg, suite.init)
        store.save(cfg.experiment, art, method="gd")
        return art


def load_artifacts(cfg: ExperimentConfig, store: ArtifactStore, method: str,
                   suite: Suite) -> list:
    """Load the per-task artifacts of one method; missing ones are reported
    together, by store key."""
    seed = _method_seed(cfg, method)
    missing, found = [], []
    for task in suite.tasks:
        try:
            found.append(store.load(cfg.experiment, task.id, method, seed))
        except MissingArtifactError:
            missing.append(str(store.path_for(cfg.experiment, task.id, method, seed)))
    if missing:
        raise MissingArtifactError(
            "missing artifacts (run `mergeview train` first):\n  "
            + "\n  ".join(missing)
        )
    return found


def _method_seed(cfg: ExperimentConfig, method: str) -> int:
    name = "gd" if method == "sq_grad_laplace" else method
    return _trainer_cfg(cfg, name).seed


def ensure_artifacts(cfg: ExperimentConfig, store: ArtifactStore, method: str,
                     suite: Suite) -> list:
    try:
        return load_artifacts(cfg, store, method, suite)
    except MissingArtifactError:
        return run_train(cfg, store, method, suite)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


def _results_dir(cfg: ExperimentConfig, store: ArtifactStore, out=None) -> Path:
    base = Path(out) if out else store.root / cfg.experiment / "results"
    base.mkdir(parents=True, exist_ok=True)
    return base


def make_fitted_strategy(cfg: ExperimentConfig, name: str, artifacts, suite: Suite):
    if name == "simple":
        return SimpleAverageMerge().fit(artifacts)
    if name == "ta":
        # no pretrained anchor in these suites; anchor at the shared init
        return TaskArithmeticMerge().fit(artifacts, anchor=suite.init)
    if name == "hessian":
        return HessianWeightedMerge().fit(artifacts)
    if name == "mixture":
        em = cfg.suite_options.get("em", {})
        return MixtureEmMerge(
            max_iters=int(em.get("max_iters", 50)),
            tol=float(em.get("tol", 1e-10)),
        ).fit(artifacts)
    raise ContractViolationError(f"unknown strategy {name!r}")


def run_sweep(cfg: ExperimentConfig, store: ArtifactStore, strategy: str,
              workers: int = 1, out=None,
              suite: Suite | None = None) -> tuple[PreviewSurface, Path]:
    """Sweep one merge strategy over the preview grid; writes the surface
    CSV and returns it with the surface."""
    suite = suite or build_suite(cfg)
    artifacts = load_artifacts(cfg, store, STRATEGY_METHOD[strategy], suite)
    fitted = make_fitted_strategy(cfg, strategy, artifacts, suite)
    grid = simplex_grid(len(suite.tasks), cfg.spacing)
    surface = preview_sweep(fitted, grid, suite.evaluator, workers=workers)
    out_dir = _results_dir(cfg, store, out)
    csv_path = out_dir / f"{strategy}.csv"
    save_surface_csv(csv_path, surface)
    return surface, csv_path


def sweep_report_payload(cfg: ExperimentConfig, surface: PreviewSurface,
                         sense: str) -> dict:
    """Single-surface report: best weighting, best metric, histogram."""
    best_w, best_m = best_alpha(surface, sense=sense)
    counts, edges = metric_histogram(surface, cfg.histogram_bins)
    s = _scale_factor(cfg.metric_scale)
    return {
        "schema": "mergeview.sweep/1",
        "experiment": cfg.experiment,
        "suite": cfg.suite,
        "method": surface.method,
        "sense": sense,
        "metric_scale": cfg.metric_scale,
        "spacing": surface.grid.spacing,
        "points": len(surface),
        "best_alpha": [float(a) for a in best_w.alpha],
        "best_metric": best_m * s,
        "histogram": {
            "counts": [int(c) for c in counts],
            "edges": [float(e) * s for e in edges],
        },
    }


def run_joint(cfg: ExperimentConfig, store: ArtifactStore, workers: int = 1,
              out=None, spacing: float | None = None,
              suite: Suite | None = None) -> tuple[PreviewSurface, Path]:
    """Joint-training oracle sweep (cached per grid point)."""
    suite = suite or build_suite(cfg)
    grid = simplex_grid(len(suite.tasks), spacing or cfg.joint_spacing)
    cache = JointCache(store.root / cfg.experiment / "joint_cache")
    surface = joint_oracle_sweep(
        suite.tasks,
        grid,
        _trainer_cfg(cfg, "joint"),
        suite.init,
        suite.evaluator,
        cache=cache,
        workers=workers,
    )
    out_dir = _results_dir(cfg, store, out)
    csv_path = out_dir / "joint.csv"
    save_surface_csv(csv_path, surface)
    return surface, csv_path


def exact_metric_at(cfg: ExperimentConfig, store: ArtifactStore,
                    weights: SimplexWeights, grid_n: int,
                    suite: Suite | None = None) -> float:
    """Joint-training metric at one specific weighting (cache-backed), for
    scoring a preview's best alpha on the exact surface."""
    suite = suite or build_suite(cfg)
    counts = tuple(int(round(a * grid_n)) for a in weights.alpha)
    if sum(counts) != grid_n:
        raise ContractViolationError(
            f"weights {weights.alpha} are not multiples of 1/{grid_n}"
        )
    jcfg = _trainer_cfg(cfg, "joint")
    cache = JointCache(store.root / cfg.experiment / "joint_cache")
    key = joint_point_key(suite.tasks, counts, grid_n, jcfg, suite.init)
    theta = cache.get(key)
    if theta is None:
        art = gd_train(WeightedTask(suite.tasks, weights.alpha), jcfg, suite.init)
        theta = art.payload
        cache.put(key, theta)
    return float(suite.evaluator(theta, weights))


# ---------------------------------------------------------------------------
# compare / report
# ---------------------------------------------------------------------------


def _scale_factor(metric_scale: str) -> float:
    return 100.0 if metric_scale == "percent" else 1.0


def compare_surfaces(cfg: ExperimentConfig, store: ArtifactStore,
                     previews: dict[str, PreviewSurface],
                     exact: PreviewSurface,
                     suite: Suite | None = None) -> dict:
    """Consolidated comparison: per-strategy preview MSE against the exact
    surface (restricted to shared grid points when spacings differ), best
    weightings, and the exact metric at each preview's best point.

    Metrics are reported in ``cfg.metric_scale`` units (MSE in squared
    units); surfaces themselves always store fractions.
    """
    suite = suite or build_suite(cfg)
    sense = suite.sense
    s = _scale_factor(cfg.metric_scale)
    exact_best_w, exact_best_m = best_alpha(exact, sense=sense)
    rows = []
    for name, surface in sorted(previews.items()):
        if surface.grid.counts == exact.grid.counts:
            mse = preview_mse(surface, exact)
            shared = len(surface)
        else:
            mse, shared = aligned_mse(surface, exact)
        best_w, best_m = best_alpha(surface, sense=sense)
        exact_at_best = exact_metric_at(
            cfg, store, best_w, surface.grid.n, suite
        )
        gap = (
            exact_best_m - exact_at_best
            if sense == "max"
            else exact_at_best - exact_best_m
        )
        counts, edges = metric_histogram(surface, cfg.histogram_bins)
        rows.append(
            {
                "strategy": name,
                "mse": mse * s * s,
                "shared_points": shared,
                "best_alpha": [float(a) for a in best_w.alpha],
                "preview_best_metric": best_m * s,
                "exact_at_best": exact_at_best * s,
                "gap_to_exact_best": gap * s,
                "em_iterations_max": int(surface.iterations.max()),
                "all_converged": bool(surface.converged.all()),
                "histogram": {
                    "counts": [int(c) for c in counts],
                    "edges": [float(e) * s for e in edges],
                },
            }
        )
    return {
        "schema": "mergeview.report/1",
        "experiment": cfg.experiment,
        "suite": cfg.suite,
        "sense": sense,
        "metric_scale": cfg.metric_scale,
        "preview_spacing": cfg.spacing,
        "joint_spacing": exact.grid.spacing,
        "exact_best_alpha": [float(a) for a in exact_best_w.alpha],
        "exact_best_metric": exact_best_m * s,
        "rows": rows,
        "config": cfg.to_dict(),
    }


def run_compare(cfg: ExperimentConfig, store: ArtifactStore,
                preview_paths: dict[str, str], exact_path, out=None) -> tuple[dict, Path]:
    """CSV-level compare: reload surfaces (row order irrelevant) and emit the
    consolidated report JSON."""
    suite = build_suite(cfg)
    previews = {
        name: load_surface_csv(path, method=name)
        for name, path in preview_paths.items()
    }
    exact = load_surface_csv(exact_path, method="joint")
    report = compare_surfaces(cfg, store, previews, exact, suite)
    out_dir = _results_dir(cfg, store, None)
    path = Path(out) if out else out_dir / "report.json"
    save_json(path, report)
    return report, path


def run_report(cfg: ExperimentConfig, store: ArtifactStore, workers: int = 1,
               out=None) -> tuple[dict, Path]:
    """End-to-end: ensure artifacts, sweep every configured strategy, run the
    joint oracle, and write the consolidated report."""
    suite = build_suite(cfg)
    for method in sorted({STRATEGY_METHOD[s] for s in cfg.strategies}):
        ensure_artifacts(cfg, store, method, suite)
    previews = {}
    for strategy in cfg.strategies:
        surface, _ = run_sweep(cfg, store, strategy, workers=workers, suite=suite)
        previews[strategy] = surface
    exact, _ = run_joint(cfg, store, workers=workers, suite=suite)
    report = compare_surfaces(cfg, store, previews, exact, suite)
    out_dir = _results_dir(cfg, store, None)
    path = Path(out) if out else out_dir / "report.json"
    save_json(path, report)
    return report, path
