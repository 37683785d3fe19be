"""Simplex sweeps: preview surfaces, the exact joint-training oracle, and
surface comparison metrics.

A sweep walks every task-weight vector alpha on a fixed simplex lattice,
produces a parameter vector per point (by closed-form merging, EM, or actual
joint training), scores it with one evaluator, and collects the per-point
metrics into a surface.  Surfaces over the same lattice are compared by mean
squared metric difference; lattices with different spacing are compared on
their shared points only (exact rational point keys, no interpolation).
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property

import numpy as np

from .exceptions import (
    ContractViolationError,
    DegenerateWeightsError,
    DivergenceError,
    GridMismatchError,
    NoInteriorModeError,
    PrecisionRepairError,
)
from .merging import SimplexWeights
from .posteriors import as_param_vector
from .tasks import WeightedTask
from .training import TrainerConfig, gd_train

_SPACING_TOL = 1e-6


# ---------------------------------------------------------------------------
# the grid
# ---------------------------------------------------------------------------


def _count_tuples(total: int, parts: int):
    if parts == 1:
        yield (total,)
        return
    for c in range(total + 1):
        for rest in _count_tuples(total - c, parts - 1):
            yield (c,) + rest


@dataclass(frozen=True)
class SimplexGrid:
    """All lattice points of the (T-1)-simplex at a uniform spacing.

    Points are stored both as integer count tuples (each summing to
    ``n = round(1/spacing)``) and as :class:`SimplexWeights`; enumeration is
    ascending lexicographic in alpha, so ``(0,...,0,1)`` comes first and the
    one-hot ``(1,0,...,0)`` last.
    """

    num_tasks: int
    spacing: float
    n: int
    counts: tuple[tuple[int, ...], ...]
    points: tuple[SimplexWeights, ...]

    def __len__(self) -> int:
        return len(self.points)

    @cached_property
    def _index(self) -> dict:
        return {c: i for i, c in enumerate(self.counts)}

    def index_of(self, counts: tuple[int, ...]) -> int:
        try:
            return self._index[tuple(counts)]
        except KeyError:
            raise GridMismatchError(f"point {counts} not on this grid") from None

    def point_keys(self) -> tuple:
        """Exact rational coordinates, usable as join keys across spacings."""
        return tuple(
            tuple(Fraction(c, self.n) for c in counts) for counts in self.counts
        )


def simplex_grid(num_tasks: int, spacing: float) -> SimplexGrid:
    """Enumerate the simplex lattice.  ``spacing`` must divide 1 (within
    1e-6 after rounding 1/spacing to the nearest integer)."""
    if num_tasks < 1:
        raise ContractViolationError("num_tasks must be >= 1")
    if not 0.0 < spacing <= 1.0:
        raise ContractViolationError("spacing must lie in (0, 1]")
    n = round(1.0 / spacing)
    if n < 1 or abs(n * spacing - 1.0) > _SPACING_TOL:
        raise ContractViolationError(
            f"spacing {spacing} does not divide 1 (n*spacing = {n * spacing})"
        )
    counts = tuple(_count_tuples(n, num_tasks))
    points = tuple(
        SimplexWeights(np.array(c, dtype=np.float64) / n) for c in counts
    )
    return SimplexGrid(num_tasks, spacing, n, counts, points)


# ---------------------------------------------------------------------------
# surfaces
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PreviewSurface:
    """Per-grid-point parameter vectors, metrics, and merge diagnostics.

    A failed point (degenerate merge, diverged training) carries a NaN
    metric, a None theta, and an explanatory note; comparisons refuse
    non-finite metrics rather than silently averaging over them.
    """

    grid: SimplexGrid
    method: str
    thetas: tuple
    metrics: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    notes: tuple = ()

    def __post_init__(self):
        m = np.array(self.metrics, dtype=np.float64)
        it = np.array(self.iterations, dtype=np.int64)
        ok = np.array(self.converged, dtype=bool)
        npts = len(self.grid)
        if not (len(self.thetas) == m.shape[0] == it.shape[0] == ok.shape[0] == npts):
            raise ContractViolationError(
                "surface arrays must have one entry per grid point"
            )
        notes = self.notes or tuple(() for _ in range(npts))
        if len(notes) != npts:
            raise ContractViolationError("notes must have one entry per grid point")
        for a in (m, it, ok):
            a.setflags(write=False)
        object.__setattr__(self, "metrics", m)
        object.__setattr__(self, "iterations", it)
        object.__setattr__(self, "converged", ok)
        object.__setattr__(self, "notes", tuple(tuple(n) for n in notes))

    def __len__(self) -> int:
        return len(self.grid)

    @property
    def all_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.metrics)))

    def metric_at(self, counts: tuple[int, ...]) -> float:
        return float(self.metrics[self.grid.index_of(counts)])


def _run_points(grid: SimplexGrid, work, workers: int) -> list:
    """Evaluate ``work(index, weights)`` for every grid point, fanning out
    over threads but always gathering in grid order."""
    if workers is None or workers <= 1 or len(grid) == 1:
        return [work(i, w) for i, w in enumerate(grid.points)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [
            pool.submit(work, i, w) for i, w in enumerate(grid.points)
        ]
        return [f.result() for f in futures]


def _assemble(grid, method, results) -> PreviewSurface:
    thetas, metrics, iters, converged, notes = [], [], [], [], []
    for theta, metric, it, ok, nts in results:
        thetas.append(theta)
        metrics.append(metric)
        iters.append(it)
        converged.append(ok)
        notes.append(tuple(nts))
    return PreviewSurface(
        grid=grid,
        method=method,
        thetas=tuple(thetas),
        metrics=np.array(metrics),
        iterations=np.array(iters),
        converged=np.array(converged),
        notes=tuple(notes),
    )


def preview_sweep(strategy, grid: SimplexGrid, evaluator, workers: int = 1) -> PreviewSurface:
    """Merge-and-score every grid point with a fitted merge strategy.

    ``strategy`` needs ``merge(weights) -> MergeResult`` and a ``label``;
    ``evaluator(theta, weights) -> float`` supplies the metric.  Degenerate
    merges are recorded per point (NaN metric plus note), not raised.
    """

    def work(i, w):
        try:
            res = strategy.merge(w)
        except (DegenerateWeightsError, NoInteriorModeError, PrecisionRepairError) as exc:
            return None, np.nan, 1, False, (f"merge failed: {exc}",)
        metric = float(evaluator(res.theta, w))
        return res.theta, metric, res.iterations, res.converged, res.notes

    label = getattr(strategy, "label", type(strategy).__name__)
    return _assemble(grid, label, _run_points(grid, work, workers))


def joint_point_key(tasks, counts, n: int, cfg: TrainerConfig, init) -> str:
    """Stable cache key for one joint-training run: task data, exact grid
    point, trainer config, and init all participate."""
    payload = {
        "tasks": [t.fingerprint() for t in tasks],
        "counts": list(counts),
        "n": n,
        "cfg": {
            "method": cfg.method,
            "learning_rate": repr(cfg.learning_rate),
            "iterations": cfg.iterations,
            "mc_samples": cfg.mc_samples,
            "prior_precision": repr(cfg.prior_precision),
            "batch_size": cfg.batch_size,
            "seed": cfg.seed,
            "ess_scale": repr(cfg.ess_scale),
        },
        "init": hashlib.sha256(np.ascontiguousarray(init).tobytes()).hexdigest(),
    }
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def joint_oracle_sweep(
    tasks,
    grid: SimplexGrid,
    cfg: TrainerConfig,
    init,
    evaluator,
    cache=None,
    workers: int = 1,
) -> PreviewSurface:
    """Ground-truth surface: per grid point, train on ``sum_t alpha_t l_t``
    from the shared init and score the result.

    Zero-weight tasks are dropped from the weighted objective, so a one-hot
    point reproduces the plain single-task training run bit for bit.  With a
    ``cache`` (``get(key) -> theta | None`` / ``put(key, theta)``), repeated
    sweeps over unchanged inputs skip training entirely.
    """
    if len(tasks) != grid.num_tasks:
        raise ContractViolationError("grid/task count mismatch")
    init = as_param_vector(init, dim=tasks[0].dim)
    if cache is not None:
        for t in tasks:
            if not hasattr(t, "fingerprint"):
                raise ContractViolationError(
                    f"task {t.id!r} has no fingerprint; caching needs one"
                )

    def work(i, w):
        counts = grid.counts[i]
        key = (
            joint_point_key(tasks, counts, grid.n, cfg, init)
            if cache is not None
            else None
        )
        theta = cache.get(key) if cache is not None else None
        cached = theta is not None
        if theta is None:
            joint = WeightedTask(tasks, w.alpha)
            try:
                art = gd_train(joint, cfg, init)
            except DivergenceError as exc:
                return None, np.nan, exc.iteration + 1, False, (f"diverged: {exc}",)
            theta = art.payload
            if cache is not None:
                cache.put(key, theta)
        metric = float(evaluator(theta, w))
        notes = ("cache hit",) if cached else ()
        return theta, metric, cfg.iterations, True, notes

    return _assemble(grid, "joint", _run_points(grid, work, workers))


# ---------------------------------------------------------------------------
# comparisons
# ---------------------------------------------------------------------------


def _require_finite(surface: PreviewSurface, where: str):
    bad = np.flatnonzero(~np.isfinite(surface.metrics))
    if bad.size:
        raise ContractViolationError(
            f"{where}: {bad.size} non-finite metric(s), first at grid index {bad[0]}"
        )


def preview_mse(preview: PreviewSurface, exact: PreviewSurface) -> float:
    """Mean squared metric difference over an identical grid (same task
    count, same lattice)."""
    if (
        preview.grid.num_tasks != exact.grid.num_tasks
        or preview.grid.n != exact.grid.n
        or preview.grid.counts != exact.grid.counts
    ):
        raise GridMismatchError("surfaces are on different grids")
    _require_finite(preview, "preview surface")
    _require_finite(exact, "exact surface")
    diff = preview.metrics - exact.metrics
    return float(np.mean(diff * diff))


def aligned_mse(preview: PreviewSurface, exact: PreviewSurface) -> tuple[float, int]:
    """Mean squared metric difference over the points the two grids share
    (exact rational match, no interpolation); returns (mse, shared count)."""
    if preview.grid.num_tasks != exact.grid.num_tasks:
        raise GridMismatchError("surfaces have different task counts")
    exact_index = {k: i for i, k in enumerate(exact.grid.point_keys())}
    pairs = [
        (i, exact_index[k])
        for i, k in enumerate(preview.grid.point_keys())
        if k in exact_index
    ]
    if not pairs:
        raise GridMismatchError("grids share no points")
    pi, ei = map(np.array, zip(*pairs))
    pm, em = preview.metrics[pi], exact.metrics[ei]
    if not (np.all(np.isfinite(pm)) and np.all(np.isfinite(em))):
        raise ContractViolationError("non-finite metrics among shared points")
    return float(np.mean((pm - em) ** 2)), len(pairs)


def best_alpha(surface: PreviewSurface, sense: str = "max") -> tuple[SimplexWeights, float]:
    """Optimal grid point by metric; exact ties go to the lexicographically
    smallest alpha (which is the earliest point in enumeration order)."""
    if sense not in ("max", "min"):
        raise ContractViolationError(f"sense must be max or min, got {sense!r}")
    finite = np.isfinite(surface.metrics)
    if not finite.any():
        raise ContractViolationError("surface has no finite metrics")
    vals = surface.metrics[finite]
    best = vals.max() if sense == "max" else vals.min()
    idx = int(np.flatnonzero(finite & (surface.metrics == best))[0])
    return surface.grid.points[idx], float(best)


def metric_histogram(surface: PreviewSurface, bins: int) -> tuple[np.ndarray, np.ndarray]:
    """Counts of grid points per metric bin over [min, max]; a constant
    surface puts all mass in a single bin of a unit-width window."""
    if bins < 1:
        raise ContractViolationError("bins must be >= 1")
    _require_finite(surface, "surface")
    lo, hi = float(surface.metrics.min()), float(surface.metrics.max())
    if hi == lo:
        edges = np.linspace(lo - 0.5, lo + 0.5, bins + 1)
    else:
        edges = np.linspace(lo, hi, bins + 1)
    counts, edges = np.histogram(surface.metrics, bins=edges)
    return counts, edges


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepReport:
    """One method's sweep outcome: the surface, its best point, optional
    comparison against an exact surface on the identical grid, and the
    metric histogram.  ``mse``/``exact_at_best`` are present exactly when an
    exact surface is."""

    preview: PreviewSurface
    best_point: SimplexWeights
    best_metric: float
    histogram_counts: np.ndarray
    histogram_edges: np.ndarray
    exact: PreviewSurface | None = None
    mse: float | None = None
    exact_at_best: float | None = None
    sense: str = "max"

    def __post_init__(self):
        if (self.exact is None) != (self.mse is None):
            raise ContractViolationError(
                "mse must be present exactly when an exact surface is"
            )


def build_report(
    preview: PreviewSurface,
    exact: PreviewSurface | None = None,
    bins: int = 20,
    sense: str = "max",
) -> SweepReport:
    point, metric = best_alpha(preview, sense=sense)
    counts, edges = metric_histogram(preview, bins)
    mse = exact_at = None
    if exact is not None:
        mse = preview_mse(preview, exact)
        best_counts = preview.grid.counts[preview.grid.index_of(
            tuple(int(round(a * preview.grid.n)) for a in point.alpha)
        )]
        exact_at = exact.metric_at(best_counts)
    return SweepReport(
        preview=preview,
        best_point=point,
        best_metric=metric,
        histogram_counts=counts,
        histogram_edges=edges,
        exact=exact,
        mse=mse,
        exact_at_best=exact_at,
        sense=sense,
    )
