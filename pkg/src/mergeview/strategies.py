"""Merge strategies behind one estimator-style interface.

Each strategy is fitted once on the per-task posterior artifacts and then
queried many times, once per task weighting, by the sweep engine:

    strategy = HessianWeightedMerge().fit(artifacts)
    result = strategy.merge(weights)          # one MergeResult
    thetas = strategy.predict(alpha_matrix)   # row per weighting

Artifact kinds are checked strictly at fit time: simple averaging and task
arithmetic take point estimates, Hessian weighting takes Gaussians, the EM
strategy takes mixtures.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .exceptions import ContractViolationError
from .merging import (
    EmConfig,
    MergeResult,
    SimplexWeights,
    hessian_weighted,
    hessian_weighted_ta,
    mog_em_merge,
    simple_average,
    task_arithmetic,
)
from .posteriors import as_param_vector


def _check_artifacts(artifacts, kinds, label):
    if len(artifacts) == 0:
        raise ContractViolationError(f"{label}: no artifacts to fit on")
    dims = {a.dim for a in artifacts}
    if len(dims) != 1:
        raise ContractViolationError(
            f"{label}: artifacts disagree on dimension ({sorted(dims)})"
        )
    for a in artifacts:
        if a.kind not in kinds:
            raise ContractViolationError(
                f"{label}: artifact kind {a.kind!r} not supported "
                f"(expected one of {kinds})"
            )
    return artifacts


def _as_weights(weights, num_tasks) -> SimplexWeights:
    if not isinstance(weights, SimplexWeights):
        weights = SimplexWeights(np.asarray(weights, dtype=np.float64))
    if weights.num_tasks != num_tasks:
        raise ContractViolationError(
            f"expected {num_tasks} task weights, got {weights.num_tasks}"
        )
    return weights


class _MergeStrategy(BaseEstimator):
    """Shared fit/predict plumbing; subclasses implement ``merge``."""

    label = "?"
    _kinds: tuple[str, ...] = ()

    def fit(self, artifacts, y=None):
        self.artifacts_ = tuple(
            _check_artifacts(list(artifacts), self._kinds, self.label)
        )
        self.num_tasks_ = len(self.artifacts_)
        self.dim_ = self.artifacts_[0].dim
        self.task_ids_ = tuple(a.provenance.task_id for a in self.artifacts_)
        return self

    def _fitted(self):
        if not hasattr(self, "artifacts_"):
            raise ContractViolationError(
                f"{type(self).__name__} must be fitted before merging"
            )

    def merge(self, weights) -> MergeResult:
        raise NotImplementedError

    def predict(self, alphas) -> np.ndarray:
        """One merged parameter vector per row of task weights."""
        self._fitted()
        alphas = np.atleast_2d(np.asarray(alphas, dtype=np.float64))
        return np.stack([self.merge(row).theta for row in alphas])


class SimpleAverageMerge(_MergeStrategy):
    """``theta_hat = sum_t alpha_t theta_t`` over point artifacts."""

    label = "simple"
    _kinds = ("point",)

    def merge(self, weights) -> MergeResult:
        self._fitted()
        w = _as_weights(weights, self.num_tasks_)
        return simple_average([a.payload for a in self.artifacts_], w)


class TaskArithmeticMerge(_MergeStrategy):
    """``theta_hat = anchor + sum_t alpha_t (theta_t - anchor)`` over point
    artifacts.  The anchor is given at fit time; None means the origin,
    which makes this coincide with simple averaging."""

    label = "ta"
    _kinds = ("point",)

    def fit(self, artifacts, y=None, anchor=None):
        super().fit(artifacts)
        if anchor is None:
            anchor = np.zeros(self.dim_)
        self.anchor_ = as_param_vector(anchor, dim=self.dim_)
        return self

    def merge(self, weights) -> MergeResult:
        self._fitted()
        w = _as_weights(weights, self.num_tasks_)
        return task_arithmetic(self.anchor_, [a.payload for a in self.artifacts_], w)


class HessianWeightedMerge(_MergeStrategy):
    """Precision-weighted merge of Gaussian artifacts; a prior posterior is
    required only for sub-unit-sum weights (its precision absorbs the
    leftover mass)."""

    label = "hessian"
    _kinds = ("gaussian_diag", "gaussian_full")

    def __init__(self, prior=None):
        self.prior = prior

    def fit(self, artifacts, y=None):
        super().fit(artifacts)
        kinds = {a.kind for a in self.artifacts_}
        if len(kinds) != 1:
            raise ContractViolationError(
                f"{self.label}: mixed Gaussian layouts {sorted(kinds)}"
            )
        return self

    def merge(self, weights) -> MergeResult:
        self._fitted()
        w = _as_weights(weights, self.num_tasks_)
        return hessian_weighted(
            [a.payload for a in self.artifacts_], w, prior=self.prior
        )


class HessianWeightedTaMerge(_MergeStrategy):
    """Curvature-aware task arithmetic around an anchor posterior: moves the
    anchor mean by precision-weighted deltas.  Needs unit-sum or sub-unit
    weights and Gaussian artifacts sharing the anchor's layout."""

    label = "hessian_ta"
    _kinds = ("gaussian_diag", "gaussian_full")

    def __init__(self, anchor_posterior=None):
        self.anchor_posterior = anchor_posterior

    def fit(self, artifacts, y=None):
        super().fit(artifacts)
        if self.anchor_posterior is None:
            raise ContractViolationError(
                f"{self.label}: anchor_posterior is required"
            )
        return self

    def merge(self, weights) -> MergeResult:
        self._fitted()
        w = _as_weights(weights, self.num_tasks_)
        return hessian_weighted_ta(
            self.anchor_posterior, [a.payload for a in self.artifacts_], w
        )


class MixtureEmMerge(_MergeStrategy):
    """EM mode-finding over per-task mixture artifacts.

    EM is defined for unit-sum weights; sub-unit weights are renormalized
    first and the rescaling recorded in the result notes.
    """

    label = "mixture"
    _kinds = ("mixture",)

    def __init__(self, max_iters: int = 50, tol: float = 1e-10,
                 init_strategy: str = "hessian_uniform"):
        self.max_iters = max_iters
        self.tol = tol
        self.init_strategy = init_strategy

    def merge(self, weights) -> MergeResult:
        self._fitted()
        w = _as_weights(weights, self.num_tasks_)
        notes = ()
        if not w.is_unit_sum:
            total = float(np.sum(w.alpha))
            w = w.normalized()
            notes = (f"weights renormalized from sum={total!r}",)
        cfg = EmConfig(
            max_iters=self.max_iters,
            tol=self.tol,
            init_strategy=self.init_strategy,
        )
        res = mog_em_merge([a.payload for a in self.artifacts_], w, cfg)
        if notes:
            res = MergeResult(
                theta=res.theta,
                iterations=res.iterations,
                converged=res.converged,
                final_objective=res.final_objective,
                notes=notes + res.notes,
                trace=res.trace,
            )
        return res


STRATEGIES = {
    cls.label: cls
    for cls in (
        SimpleAverageMerge,
        TaskArithmeticMerge,
        HessianWeightedMerge,
        HessianWeightedTaMerge,
        MixtureEmMerge,
    )
}


def make_strategy(name: str, **params) -> _MergeStrategy:
    try:
        cls = STRATEGIES[name]
    except KeyError:
        raise ContractViolationError(
            f"unknown strategy {name!r}; choices: {sorted(STRATEGIES)}"
        ) from None
    return cls(**params)
