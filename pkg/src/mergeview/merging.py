"""Closed-form merges and the EM mode-finder for mixture posteriors.

Every merge answers the same question: given per-task posterior
approximations and a task-weight vector ``alpha`` (with regularizer weight
``gamma = 1 - sum(alpha)``), find the minimizer of the weighted surrogate
objective

    gamma * R(theta) + sum_t alpha_t * surrogate_t(theta).

The surrogate family determines the formula:

* isotropic Gaussians         -> :func:`simple_average`
* isotropic around an anchor  -> :func:`task_arithmetic`
* general Gaussians           -> :func:`hessian_weighted` (normal equations)
* Gaussians sharing a prior-precision anchor -> :func:`hessian_weighted_ta`
* any exponential family      -> :func:`expfam_merge` (add natural params)
* Gaussian mixtures           -> :func:`mog_em_merge` (EM fixed point)

All functions are pure; results are immutable.  Accumulations run in task
order, switching to compensated (Kahan) summation for dimensions >= 1e4 so
sweep outputs do not depend on worker count or chunking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from .exceptions import (
    ContractViolationError,
    DegenerateWeightsError,
)
from .posteriors import (
    DIAG,
    BetaNaturals,
    GaussianPosterior,
    MixturePosterior,
    NaturalParams,
    as_param_vector,
    gaussian_surrogate,
)

_KAHAN_DIM = 10_000

#: tolerance on |sum(alpha) - 1| for operations that require unit weight sum
UNIT_SUM_TOL = 1e-9


@dataclass(frozen=True)
class SimplexWeights:
    """Task weights ``alpha`` with the derived regularizer weight ``gamma``.

    Each ``alpha_t`` must be nonnegative and their sum must not exceed
    ``1 + 1e-12``; ``gamma = 1 - sum(alpha)`` is computed once here and
    clamped to exactly zero when it vanishes to rounding.
    """

    alpha: np.ndarray
    gamma: float = field(init=False)

    def __post_init__(self):
        a = np.array(self.alpha, dtype=np.float64).ravel()
        if a.size == 0:
            raise ContractViolationError("weight vector must be nonempty")
        if not np.all(np.isfinite(a)):
            raise ContractViolationError("weights must be finite")
        if np.any(a < 0.0):
            raise ContractViolationError(f"weights must be nonnegative, got {a}")
        total = float(a.sum())
        if total > 1.0 + 1e-12:
            raise ContractViolationError(
                f"weights sum to {total}, exceeding 1 + 1e-12"
            )
        gamma = 1.0 - total
        if abs(gamma) < 1e-12:
            gamma = 0.0
        a.setflags(write=False)
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "gamma", gamma)

    @classmethod
    def one_hot(cls, num_tasks: int, index: int) -> "SimplexWeights":
        a = np.zeros(num_tasks)
        a[index] = 1.0
        return cls(a)

    @classmethod
    def uniform(cls, num_tasks: int, total: float = 1.0) -> "SimplexWeights":
        return cls(np.full(num_tasks, total / num_tasks))

    @property
    def num_tasks(self) -> int:
        return self.alpha.shape[0]

    @property
    def is_unit_sum(self) -> bool:
        return abs(float(self.alpha.sum()) - 1.0) <= UNIT_SUM_TOL

    def normalized(self) -> "SimplexWeights":
        """Rescale so the weights sum to one (gamma becomes 0)."""
        total = float(self.alpha.sum())
        if total <= 0.0:
            raise DegenerateWeightsError("cannot normalize an all-zero weight vector")
        return SimplexWeights(self.alpha / total)


@dataclass(frozen=True)
class MergeResult:
    """Outcome of a merge.

    ``iterations`` is 1 for closed-form merges.  ``final_objective`` is the
    minimized weighted-surrogate value for closed forms, and the maximized
    mixture objective ``sum_t alpha_t log q_t(theta)`` for EM.  ``trace``
    (EM only, on request) holds the iterates including the initial point.
    """

    theta: np.ndarray
    iterations: int
    converged: bool
    final_objective: float
    notes: tuple[str, ...] = ()
    trace: tuple[np.ndarray, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "theta", as_param_vector(self.theta))
        if self.iterations < 1:
            raise ContractViolationError("iterations must be >= 1")


_EM_INIT_STRATEGIES = ("hessian_uniform", "simple_average", "provided")


@dataclass(frozen=True)
class EmConfig:
    """Knobs for :func:`mog_em_merge`.

    ``tol`` applies to the sup-norm parameter change between iterates;
    ``max_iters`` defaults to 10 (a handful of iterations is enough in
    practice).  ``init_strategy`` selects the starting point: the
    Hessian-weighted merge under uniform responsibilities (default; equals
    one M-step from uniform responsibilities, so EM starts on its own
    trajectory), the plain average of all component means, or a caller-
    provided vector.
    """

    max_iters: int = 10
    tol: float = 1e-8
    init_strategy: str = "hessian_uniform"

    def __post_init__(self):
        if self.max_iters < 1:
            raise ContractViolationError("max_iters must be >= 1")
        if not self.tol > 0.0:
            raise ContractViolationError("tol must be positive")
        if self.init_strategy not in _EM_INIT_STRATEGIES:
            raise ContractViolationError(
                f"init_strategy must be one of {_EM_INIT_STRATEGIES}"
            )


# ---------------------------------------------------------------------------
# accumulation helpers
# ---------------------------------------------------------------------------


def _weighted_sum(terms: Sequence[tuple[float, np.ndarray]], shape, dim: int):
    """sum_i c_i * A_i in the given order; Kahan-compensated for dim >= 1e4."""
    total = np.zeros(shape)
    if dim < _KAHAN_DIM:
        for c, arr in terms:
            if c != 0.0:
                total += c * arr
        return total
    comp = np.zeros(shape)
    for c, arr in terms:
        y = c * arr - comp
        t = total + y
        comp = (t - total) - y
        total = t
    return total


def _check_models(models: Sequence[np.ndarray], w: SimplexWeights) -> list[np.ndarray]:
    if len(models) == 0:
        raise ContractViolationError("need at least one model to merge")
    if len(models) != w.num_tasks:
        raise ContractViolationError(
            f"{len(models)} models but {w.num_tasks} weights"
        )
    first = as_param_vector(models[0])
    out = [first]
    for m in models[1:]:
        out.append(as_param_vector(m, dim=first.shape[0]))
    return out


def _unit_vertex(w: SimplexWeights) -> int | None:
    """Index t when the weights are exactly one-hot (alpha_t == 1, rest 0).

    At such a vertex every merge below returns its task-t input untouched;
    short-circuiting keeps that exact instead of exact-up-to-solver-roundoff.
    """
    if w.gamma != 0.0:
        return None
    nz = np.flatnonzero(w.alpha != 0.0)
    if nz.size == 1 and w.alpha[nz[0]] == 1.0:
        return int(nz[0])
    return None


def _solve_spd(matrix: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve an SPD system, mapping factorization failure to degeneracy."""
    if matrix.ndim == 1:
        if np.any(matrix <= 0.0):
            raise DegenerateWeightsError(
                "combined precision has nonpositive entries"
            )
        return rhs / matrix
    try:
        c, low = scipy.linalg.cho_factor(matrix, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise DegenerateWeightsError("combined precision is singular") from exc
    return scipy.linalg.cho_solve((c, low), rhs)


# ---------------------------------------------------------------------------
# closed-form merges
# ---------------------------------------------------------------------------


def simple_average(models: Sequence[np.ndarray], w: SimplexWeights) -> MergeResult:
    """Weighted parameter average ``theta = sum_t alpha_t theta_t``.

    Equivalently the unique minimizer of
    ``gamma/2 ||theta||^2 + sum_t alpha_t/2 ||theta - theta_t||^2``
    (the gamma term pulls toward zero exactly as much as the weights fall
    short of one, so the minimizer is the plain weighted sum).
    """
    ms = _check_models(models, w)
    dim = ms[0].shape[0]
    theta = _weighted_sum(list(zip(w.alpha, ms)), dim, dim)
    obj = 0.5 * w.gamma * float(theta @ theta)
    for a_t, m in zip(w.alpha, ms):
        d = theta - m
        obj += 0.5 * a_t * float(d @ d)
    return MergeResult(theta, iterations=1, converged=True, final_objective=obj)


def task_arithmetic(
    anchor: np.ndarray, models: Sequence[np.ndarray], w: SimplexWeights
) -> MergeResult:
    """Anchored delta merge ``theta = anchor + sum_t alpha_t (theta_t - anchor)``.

    Minimizes ``gamma/2 ||theta - anchor||^2 + sum_t alpha_t/2
    ||theta - theta_t||^2``: the regularizer pulls toward the anchor instead
    of zero.
    """
    ms = _check_models(models, w)
    dim = ms[0].shape[0]
    anchor = as_param_vector(anchor, dim=dim)
    vertex = _unit_vertex(w)
    if vertex is not None:
        return MergeResult(ms[vertex], iterations=1, converged=True, final_objective=0.0)
    deltas = [m - anchor for m in ms]
    theta = anchor + _weighted_sum(list(zip(w.alpha, deltas)), dim, dim)
    d0 = theta - anchor
    obj = 0.5 * w.gamma * float(d0 @ d0)
    for a_t, m in zip(w.alpha, ms):
        d = theta - m
        obj += 0.5 * a_t * float(d @ d)
    return MergeResult(theta, iterations=1, converged=True, final_objective=obj)


def _check_posteriors(
    posteriors: Sequence[GaussianPosterior], w: SimplexWeights
) -> tuple[list[GaussianPosterior], int, str]:
    if len(posteriors) == 0:
        raise ContractViolationError("need at least one posterior to merge")
    if len(posteriors) != w.num_tasks:
        raise ContractViolationError(
            f"{len(posteriors)} posteriors but {w.num_tasks} weights"
        )
    dim = posteriors[0].dim
    layout = posteriors[0].layout
    for q in posteriors[1:]:
        if q.dim != dim:
            raise ContractViolationError("posteriors must share P")
        if q.layout != layout:
            raise ContractViolationError(
                "posteriors must share precision layout (no silent promotion)"
            )
    return list(posteriors), dim, layout


def hessian_weighted(
    posteriors: Sequence[GaussianPosterior],
    w: SimplexWeights,
    prior: GaussianPosterior | None = None,
) -> MergeResult:
    """Precision-weighted merge via the normal equations.

    Solves ``(gamma H0 + sum_t alpha_t H_t) theta = gamma H0 m0 + sum_t
    alpha_t H_t theta_t``.  With identity precisions and a standard-normal
    prior this collapses to :func:`simple_average`.  Diagonal layouts are
    solved elementwise, full layouts by one SPD factorization.

    Raises :class:`DegenerateWeightsError` when the combined precision is
    singular (e.g. all weights zero with gamma = 0).
    """
    qs, dim, layout = _check_posteriors(posteriors, w)
    gamma = w.gamma
    if gamma > 0.0 and prior is None:
        raise ContractViolationError("gamma > 0 requires a prior posterior")
    if gamma == 0.0 and not np.any(w.alpha > 0.0):
        raise DegenerateWeightsError(
            "all task weights zero and gamma = 0: merge is underdetermined"
        )
    vertex = _unit_vertex(w)
    if vertex is not None:
        return MergeResult(
            qs[vertex].mean, iterations=1, converged=True, final_objective=0.0
        )
    prec_terms: list[tuple[float, np.ndarray]] = []
    rhs_terms: list[tuple[float, np.ndarray]] = []
    if gamma > 0.0:
        if prior.dim != dim or prior.layout != layout:
            raise ContractViolationError("prior must share P and layout")
        prec_terms.append((gamma, prior.precision))
        rhs_terms.append((gamma, _precision_times_mean(prior)))
    for a_t, q in zip(w.alpha, qs):
        prec_terms.append((a_t, q.precision))
        rhs_terms.append((a_t, _precision_times_mean(q)))
    shape = (dim,) if layout == DIAG else (dim, dim)
    combined = _weighted_sum(prec_terms, shape, dim)
    rhs = _weighted_sum(rhs_terms, (dim,), dim)
    theta = _solve_spd(combined, rhs)
    obj = gamma * gaussian_surrogate(prior, theta) if gamma > 0.0 else 0.0
    for a_t, q in zip(w.alpha, qs):
        if a_t != 0.0:
            obj += a_t * gaussian_surrogate(q, theta)
    return MergeResult(theta, iterations=1, converged=True, final_objective=obj)


def _precision_times_mean(q: GaussianPosterior) -> np.ndarray:
    if q.layout == DIAG:
        return q.precision * q.mean
    return q.precision @ q.mean


def hessian_weighted_ta(
    anchor_posterior: GaussianPosterior,
    posteriors: Sequence[GaussianPosterior],
    w: SimplexWeights,
) -> MergeResult:
    """Precision-weighted task arithmetic around an anchor.

    The anchor posterior carries the anchor point and the shared base
    precision ``H0``; each task posterior carries its mean ``theta_t`` and
    the combined precision ``H0 + H_t``.  With ``gamma = 1 - sum(alpha)``
    the minimizer of

        gamma/2 |theta - a|^2_{H0} + sum_t alpha_t/2 |theta - theta_t|^2_{H0 + H_t}

    is ``a + Hbar^{-1} sum_t alpha_t (H0 + H_t)(theta_t - a)`` where
    ``Hbar = H0 + sum_t alpha_t H_t = gamma H0 + sum_t alpha_t (H0 + H_t)``.
    The second form is used so only stored precisions enter (no cancellation
    from recovering ``H_t``).  With all ``H_t = 0`` this reduces to
    :func:`task_arithmetic`.
    """
    qs, dim, layout = _check_posteriors(posteriors, w)
    if anchor_posterior.dim != dim or anchor_posterior.layout != layout:
        raise ContractViolationError("anchor posterior must share P and layout")
    gamma = w.gamma
    vertex = _unit_vertex(w)
    if vertex is not None:
        return MergeResult(
            qs[vertex].mean, iterations=1, converged=True, final_objective=0.0
        )
    anchor = anchor_posterior.mean
    prec_terms: list[tuple[float, np.ndarray]] = []
    if gamma != 0.0:
        prec_terms.append((gamma, anchor_posterior.precision))
    rhs_terms: list[tuple[float, np.ndarray]] = []
    for a_t, q in zip(w.alpha, qs):
        prec_terms.append((a_t, q.precision))
        delta = q.mean - anchor
        if layout == DIAG:
            rhs_terms.append((a_t, q.precision * delta))
        else:
            rhs_terms.append((a_t, q.precision @ delta))
    if not prec_terms:
        raise DegenerateWeightsError(
            "all task weights zero and gamma = 0: merge is underdetermined"
        )
    shape = (dim,) if layout == DIAG else (dim, dim)
    hbar = _weighted_sum(prec_terms, shape, dim)
    rhs = _weighted_sum(rhs_terms, (dim,), dim)
    theta = anchor + _solve_spd(hbar, rhs)
    obj = gamma * gaussian_surrogate(anchor_posterior, theta) if gamma > 0.0 else 0.0
    for a_t, q in zip(w.alpha, qs):
        if a_t != 0.0:
            obj += a_t * gaussian_surrogate(q, theta)
    return MergeResult(theta, iterations=1, converged=True, final_objective=obj)


def expfam_merge(
    naturals: Sequence[NaturalParams | BetaNaturals],
    w: SimplexWeights,
    prior: NaturalParams | BetaNaturals | None = None,
):
    """Merge exponential-family posteriors by combining natural parameters:
    ``gamma * prior + sum_t alpha_t * lambda_t``.

    Works for any natural-parameter type supporting ``+`` and scalar ``*``
    (Gaussian :class:`NaturalParams`, :class:`BetaNaturals`).  For Gaussians,
    feeding the result through ``from_natural`` and reading the mean
    reproduces :func:`hessian_weighted` exactly: the merged mode is available
    in closed form.
    """
    if len(naturals) == 0:
        raise ContractViolationError("need at least one natural-parameter set")
    if len(naturals) != w.num_tasks:
        raise ContractViolationError(
            f"{len(naturals)} natural-parameter sets but {w.num_tasks} weights"
        )
    kind = type(naturals[0])
    for nat in naturals[1:]:
        if type(nat) is not kind:
            raise ContractViolationError("mixed natural-parameter families")
    gamma = w.gamma
    if gamma > 0.0:
        if prior is None:
            raise ContractViolationError("gamma > 0 requires a prior")
        if type(prior) is not kind:
            raise ContractViolationError("prior family differs from tasks'")
        merged = gamma * prior
    else:
        merged = 0.0 * naturals[0]
    for a_t, nat in zip(w.alpha, naturals):
        merged = merged + a_t * nat
    return merged


# ---------------------------------------------------------------------------
# EM mode-finder for mixture posteriors
# ---------------------------------------------------------------------------


def _check_mixtures(
    mixtures: Sequence[MixturePosterior], w: SimplexWeights
) -> tuple[list[MixturePosterior], int, str]:
    if len(mixtures) == 0:
        raise ContractViolationError("need at least one mixture to merge")
    if len(mixtures) != w.num_tasks:
        raise ContractViolationError(
            f"{len(mixtures)} mixtures but {w.num_tasks} weights"
        )
    dim = mixtures[0].dim
    layout = mixtures[0].layout
    for q in mixtures[1:]:
        if q.dim != dim or q.layout != layout:
            raise ContractViolationError("mixtures must share P and layout")
    return list(mixtures), dim, layout


def em_objective(
    mixtures: Sequence[MixturePosterior], w: SimplexWeights, theta
) -> float:
    """The merged mixture objective ``sum_t alpha_t log q_t(theta)``.

    This is the quantity EM ascends; it is exposed separately so monotonicity
    can be checked from outside.  Computed with max-shifted log-sum-exp per
    task.  Tasks with ``alpha_t = 0`` contribute nothing but are accepted.
    """
    qs, dim, _ = _check_mixtures(mixtures, w)
    theta = as_param_vector(theta, dim=dim)
    total = 0.0
    for a_t, q in zip(w.alpha, qs):
        if a_t == 0.0:
            continue
        total += a_t * q.log_density(theta)
    if math.isnan(total):
        raise ContractViolationError("objective is NaN")
    return total


def _responsibilities(q: MixturePosterior, theta: np.ndarray) -> np.ndarray:
    """Posterior component weights of one task at theta, in log space.

    If every component log-density is ``-inf`` (total underflow even after
    shifting), responsibility collapses deterministically onto the lowest
    component index.
    """
    lw = q.component_log_densities(theta)
    m = lw.max()
    if not np.isfinite(m):
        r = np.zeros(len(lw))
        r[0] = 1.0
        return r
    r = np.exp(lw - m)
    r /= r.sum()
    if not np.all(np.isfinite(r)):
        raise ContractViolationError("non-finite responsibilities")
    return r


def _em_m_step(
    mixtures: Sequence[MixturePosterior],
    w: SimplexWeights,
    resp: Sequence[np.ndarray],
    dim: int,
    layout: str,
) -> np.ndarray:
    """theta = H_alpha^{-1} sum_{t,k} r_tk alpha_t H_tk m_tk."""
    prec_terms: list[tuple[float, np.ndarray]] = []
    rhs_terms: list[tuple[float, np.ndarray]] = []
    for a_t, q, r in zip(w.alpha, mixtures, resp):
        for r_k, comp in zip(r, q.components):
            c = a_t * r_k
            prec_terms.append((c, comp.precision))
            rhs_terms.append((c, _precision_times_mean(comp)))
    shape = (dim,) if layout == DIAG else (dim, dim)
    h_alpha = _weighted_sum(prec_terms, shape, dim)
    rhs = _weighted_sum(rhs_terms, (dim,), dim)
    return _solve_spd(h_alpha, rhs)


def mog_em_merge(
    mixtures: Sequence[MixturePosterior],
    w: SimplexWeights,
    cfg: EmConfig = EmConfig(),
    init: np.ndarray | None = None,
    record_trace: bool = False,
) -> MergeResult:
    """Find a mode of the weighted mixture objective by EM.

    Alternates the E-step (responsibilities ``r_tk`` proportional to
    ``pi_k N(theta | m_tk, H_tk^{-1})``, normalized over k within each task,
    in log space) with the M-step (a responsibility-weighted Hessian-weighted
    merge) until the sup-norm parameter change drops below ``cfg.tol`` or
    ``cfg.max_iters`` is reached.  Each sweep never decreases
    :func:`em_objective`.

    Requires ``sum(alpha) = 1`` within 1e-9 -- the regularizer-free setting
    the mixture update is derived in.  Tasks with ``alpha_t = 0`` stay in the
    sums with zero weight.  With all mixtures single-component the first
    iteration lands exactly on the :func:`hessian_weighted` result and the
    loop stops there.
    """
    qs, dim, layout = _check_mixtures(mixtures, w)
    if not w.is_unit_sum:
        raise ContractViolationError(
            f"mixture merging requires sum(alpha) = 1 within {UNIT_SUM_TOL}, "
            f"got {float(w.alpha.sum())!r}"
        )
    if cfg.init_strategy == "provided":
        if init is None:
            raise ContractViolationError(
                "init_strategy='provided' requires an init vector"
            )
        theta = as_param_vector(init, dim=dim)
    elif cfg.init_strategy == "simple_average":
        means = [c.mean for q in qs for c in q.components]
        theta = np.mean(means, axis=0)
    else:  # hessian_uniform: one M-step from uniform responsibilities
        uniform = [np.full(q.num_components, 1.0 / q.num_components) for q in qs]
        theta = _em_m_step(qs, w, uniform, dim, layout)
    trace = [np.array(theta)] if record_trace else None
    converged = False
    iterations = 0
    for _ in range(cfg.max_iters):
        resp = [_responsibilities(q, theta) for q in qs]
        theta_new = _em_m_step(qs, w, resp, dim, layout)
        delta = float(np.max(np.abs(theta_new - theta)))
        theta = theta_new
        iterations += 1
        if trace is not None:
            trace.append(np.array(theta))
        if delta < cfg.tol:
            converged = True
            break
    return MergeResult(
        theta,
        iterations=iterations,
        converged=converged,
        final_objective=em_objective(qs, w, theta),
        trace=tuple(trace) if trace is not None else None,
    )
