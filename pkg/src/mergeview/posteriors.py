"""Posterior representations and their natural-parameter algebra.

This module holds the value types every merging formula operates on:

* :class:`GaussianPosterior` -- mean plus precision, where the precision is
  either a length-``P`` diagonal vector or a full SPD ``P x P`` matrix.  The
  layout is a type-level tag derived from the array rank; mixing layouts in
  one operation is an error rather than a silent densification.
* :class:`MixturePosterior` -- ``K`` weighted Gaussian components sharing one
  dimension and layout.
* :class:`NaturalParams` / :class:`BetaNaturals` -- exponential-family
  natural coordinates supporting the linear combination that makes merging
  closed-form (posterior products correspond to sums of natural parameters).
* :class:`BetaPosterior` -- the Beta-Bernoulli worked example.

All types are immutable after construction (arrays are copied and marked
read-only) and every function here is pure, so instances can be shared freely
across sweep workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg

from .exceptions import (
    ContractViolationError,
    InvalidPosteriorError,
    NoInteriorModeError,
)

_LOG_2PI = math.log(2.0 * math.pi)

#: Layout tags for precision arrays.
DIAG = "diag"
FULL = "full"


def as_param_vector(values, dim: int | None = None) -> np.ndarray:
    """Validate and normalize a parameter vector.

    Returns a read-only float64 1-D copy.  Raises
    :class:`ContractViolationError` on wrong rank, wrong length (when ``dim``
    is given) or non-finite entries.
    """
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ContractViolationError(
            f"parameter vector must be 1-D, got shape {arr.shape}"
        )
    if dim is not None and arr.shape[0] != dim:
        raise ContractViolationError(
            f"parameter vector has length {arr.shape[0]}, expected {dim}"
        )
    if not np.all(np.isfinite(arr)):
        raise ContractViolationError("parameter vector has non-finite entries")
    arr.setflags(write=False)
    return arr


def precision_layout(precision: np.ndarray) -> str:
    """Return the layout tag (``"diag"`` or ``"full"``) of a precision array."""
    if precision.ndim == 1:
        return DIAG
    if precision.ndim == 2:
        return FULL
    raise ContractViolationError(
        f"precision must be 1-D (diagonal) or 2-D (full), got rank {precision.ndim}"
    )


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class GaussianPosterior:
    """A Gaussian ``N(mean, precision^{-1})`` with diagonal or full precision.

    Parameters
    ----------
    mean : array_like, shape (P,)
        Location of the Gaussian.
    precision : array_like, shape (P,) or (P, P)
        Inverse covariance.  A 1-D array is interpreted as the diagonal of the
        precision and must be strictly positive; a 2-D array must be symmetric
        positive definite (validated by a Cholesky factorization once, here,
        rather than on every use -- merges combine precisions linearly with
        nonnegative weights, which preserves SPD).

    Raises
    ------
    InvalidPosteriorError
        If the precision fails validation.
    ContractViolationError
        If shapes are inconsistent or entries non-finite.
    """

    mean: np.ndarray
    precision: np.ndarray

    def __post_init__(self):
        mean = as_param_vector(self.mean)
        prec = np.array(self.precision, dtype=np.float64)
        layout = precision_layout(prec)
        if not np.all(np.isfinite(prec)):
            raise InvalidPosteriorError("precision has non-finite entries")
        p = mean.shape[0]
        if layout == DIAG:
            if prec.shape != (p,):
                raise ContractViolationError(
                    f"diagonal precision shape {prec.shape} does not match mean length {p}"
                )
            if np.any(prec <= 0.0):
                raise InvalidPosteriorError(
                    "diagonal precision entries must be strictly positive"
                )
        else:
            if prec.shape != (p, p):
                raise ContractViolationError(
                    f"full precision shape {prec.shape} does not match mean length {p}"
                )
            scale = np.abs(prec).max()
            if not np.allclose(prec, prec.T, atol=1e-10 * max(scale, 1.0)):
                raise InvalidPosteriorError("full precision must be symmetric")
            try:
                scipy.linalg.cholesky(prec, lower=True)
            except scipy.linalg.LinAlgError as exc:
                raise InvalidPosteriorError(
                    "full precision is not positive definite"
                ) from exc
        prec.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "precision", prec)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def layout(self) -> str:
        return precision_layout(self.precision)

    @cached_property
    def _chol(self) -> np.ndarray:
        """Lower Cholesky factor of the (full) precision, cached."""
        return scipy.linalg.cholesky(self.precision, lower=True)

    @cached_property
    def log_det_precision(self) -> float:
        if self.layout == DIAG:
            return float(np.sum(np.log(self.precision)))
        return float(2.0 * np.sum(np.log(np.diag(self._chol))))

    def quadratic_form(self, theta: np.ndarray) -> float:
        """(theta - mean)' H (theta - mean), guaranteed nonnegative."""
        d = np.asarray(theta, dtype=np.float64) - self.mean
        if self.layout == DIAG:
            return float(np.dot(self.precision * d, d))
        y = self._chol.T @ d
        return float(np.dot(y, y))

    def log_density(self, theta: np.ndarray) -> float:
        """log N(theta | mean, precision^{-1}), including the normalizer."""
        q = self.quadratic_form(theta)
        return 0.5 * (self.log_det_precision - self.dim * _LOG_2PI - q)

    def sample(self, rng: np.random.Generator, size: int = 1) -> np.ndarray:
        """Draw ``size`` samples, shape (size, P).

        Uses ``x = mean + L^{-T} z`` with ``H = L L'`` so that
        ``cov(x) = (L L')^{-1} = H^{-1}``.
        """
        z = rng.standard_normal((size, self.dim))
        if self.layout == DIAG:
            return self.mean + z / np.sqrt(self.precision)
        x = scipy.linalg.solve_triangular(self._chol, z.T, lower=True, trans="T")
        return self.mean + x.T


@dataclass(frozen=True)
class MixturePosterior:
    """A mixture ``sum_k pi_k N(theta | m_k, H_k^{-1})``.

    Component weights must sum to one within 1e-12 and every component must
    share the same dimension and precision layout.
    """

    weights: np.ndarray
    components: tuple[GaussianPosterior, ...]

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64).ravel()
        comps = tuple(self.components)
        if len(comps) == 0:
            raise InvalidPosteriorError("mixture needs at least one component")
        if w.shape[0] != len(comps):
            raise ContractViolationError(
                f"{w.shape[0]} weights for {len(comps)} components"
            )
        if np.any(w <= 0.0) or np.any(w > 1.0):
            raise InvalidPosteriorError("mixture weights must lie in (0, 1]")
        if abs(w.sum() - 1.0) > 1e-12:
            raise InvalidPosteriorError(
                f"mixture weights sum to {w.sum()!r}, expected 1 within 1e-12"
            )
        dim = comps[0].dim
        layout = comps[0].layout
        for c in comps[1:]:
            if c.dim != dim:
                raise ContractViolationError("mixture components must share P")
            if c.layout != layout:
                raise ContractViolationError(
                    "mixture components must share precision layout"
                )
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "components", comps)

    @property
    def dim(self) -> int:
        return self.components[0].dim

    @property
    def layout(self) -> str:
        return self.components[0].layout

    @property
    def num_components(self) -> int:
        return len(self.components)

    def component_log_densities(self, theta: np.ndarray) -> np.ndarray:
        """log pi_k + log N_k(theta), shape (K,)."""
        return np.array(
            [
                math.log(wk) + comp.log_density(theta)
                for wk, comp in zip(self.weights, self.components)
            ]
        )

    def log_density(self, theta: np.ndarray) -> float:
        """log sum_k pi_k N_k(theta) via a max-shifted log-sum-exp."""
        lw = self.component_log_densities(theta)
        m = lw.max()
        if not np.isfinite(m):
            # every component underflowed; the density is 0 and the log -inf,
            # but callers (EM responsibilities) handle this case explicitly.
            return -math.inf
        return float(m + math.log(np.sum(np.exp(lw - m))))


@dataclass(frozen=True)
class NaturalParams:
    """Gaussian natural coordinates: ``linear = H m`` and ``quadratic = H``.

    ``quadratic`` stores the precision positively; under the exponential form
    the coefficient of ``theta theta'`` is ``-H/2``.  Supports ``+`` and
    scalar ``*`` so that merged posteriors are literal linear combinations.
    """

    linear: np.ndarray
    quadratic: np.ndarray

    def __post_init__(self):
        lin = as_param_vector(self.linear)
        quad = np.array(self.quadratic, dtype=np.float64)
        layout = precision_layout(quad)
        expected = (lin.shape[0],) if layout == DIAG else (lin.shape[0],) * 2
        if quad.shape != expected:
            raise ContractViolationError(
                f"quadratic part shape {quad.shape} does not match linear length"
                f" {lin.shape[0]}"
            )
        if not np.all(np.isfinite(quad)):
            raise ContractViolationError("quadratic part has non-finite entries")
        quad.setflags(write=False)
        object.__setattr__(self, "linear", lin)
        object.__setattr__(self, "quadratic", quad)

    @property
    def dim(self) -> int:
        return self.linear.shape[0]

    @property
    def layout(self) -> str:
        return precision_layout(self.quadratic)

    def __add__(self, other: "NaturalParams") -> "NaturalParams":
        if not isinstance(other, NaturalParams):
            return NotImplemented
        if self.layout != other.layout or self.dim != other.dim:
            raise ContractViolationError(
                "natural parameters differ in layout or dimension"
            )
        return NaturalParams(self.linear + other.linear, self.quadratic + other.quadratic)

    def __mul__(self, c: float) -> "NaturalParams":
        if not isinstance(c, (int, float)):
            return NotImplemented
        return NaturalParams(self.linear * c, self.quadratic * c)

    __rmul__ = __mul__


@dataclass(frozen=True)
class BetaPosterior:
    """Beta(a, b) posterior over a Bernoulli success probability."""

    a: float
    b: float

    def __post_init__(self):
        if not (self.a > 0.0 and self.b > 0.0):
            raise InvalidPosteriorError(
                f"Beta parameters must be positive, got a={self.a}, b={self.b}"
            )

    def to_natural(self) -> "BetaNaturals":
        return BetaNaturals(self.a - 1.0, self.b - 1.0)

    def log_density_unnormalized(self, pi: float) -> float:
        """(a-1) log pi + (b-1) log(1-pi); enough for mode finding."""
        return (self.a - 1.0) * math.log(pi) + (self.b - 1.0) * math.log1p(-pi)


@dataclass(frozen=True)
class BetaNaturals:
    """Beta natural coordinates (a-1, b-1) against sufficient statistics
    (log pi, log(1-pi)).  Supports the same linear algebra as
    :class:`NaturalParams` so one merge routine covers both families."""

    eta_a: float
    eta_b: float

    #: marker so layout checks can treat both natural types uniformly
    layout: str = field(default="beta", init=False, repr=False)

    def __add__(self, other: "BetaNaturals") -> "BetaNaturals":
        if not isinstance(other, BetaNaturals):
            return NotImplemented
        return BetaNaturals(self.eta_a + other.eta_a, self.eta_b + other.eta_b)

    def __mul__(self, c: float) -> "BetaNaturals":
        if not isinstance(c, (int, float)):
            return NotImplemented
        return BetaNaturals(self.eta_a * c, self.eta_b * c)

    __rmul__ = __mul__

    def to_posterior(self) -> BetaPosterior:
        return BetaPosterior(self.eta_a + 1.0, self.eta_b + 1.0)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def gaussian_surrogate(q: GaussianPosterior, theta) -> float:
    """Quadratic surrogate loss: ``(theta - m)' H (theta - m) / 2``.

    This is the negative Gaussian log-density up to its theta-independent
    normalizer; merges depend only on differences and gradients, so the
    constant is dropped.  Nonnegative, and zero exactly at the mean.
    """
    theta = as_param_vector(theta, dim=q.dim)
    return 0.5 * q.quadratic_form(theta)


def mixture_surrogate(q: MixturePosterior, theta) -> float:
    """Mixture surrogate loss: ``-log sum_k pi_k N(theta | m_k, H_k^{-1})``.

    Computed in log space with a max shift, so simultaneous underflow of all
    component densities still yields a finite value.  For ``K = 1`` this is
    ``gaussian_surrogate`` plus the component's log-normalizer (a constant
    offset in theta).
    """
    theta = as_param_vector(theta, dim=q.dim)
    lw = q.component_log_densities(theta)
    m = lw.max()
    if not np.isfinite(m):
        raise ContractViolationError("mixture surrogate received degenerate input")
    return float(-(m + math.log(np.sum(np.exp(lw - m)))))


def to_natural(q: GaussianPosterior) -> NaturalParams:
    """Map ``N(m, H^{-1})`` to natural coordinates ``(H m, H)``."""
    if q.layout == DIAG:
        linear = q.precision * q.mean
    else:
        linear = q.precision @ q.mean
    return NaturalParams(linear, q.precision)


def from_natural(nat: NaturalParams) -> GaussianPosterior:
    """Invert :func:`to_natural`: solve ``H m = linear`` for the mean.

    Raises :class:`InvalidPosteriorError` when the quadratic part is not
    positive definite (diagonal entries nonpositive, or Cholesky failure).
    """
    if nat.layout == DIAG:
        if np.any(nat.quadratic <= 0.0):
            raise InvalidPosteriorError(
                "quadratic part must be strictly positive to invert"
            )
        mean = nat.linear / nat.quadratic
        return GaussianPosterior(mean, nat.quadratic)
    try:
        c, low = scipy.linalg.cho_factor(nat.quadratic, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise InvalidPosteriorError("quadratic part is singular") from exc
    mean = scipy.linalg.cho_solve((c, low), nat.linear)
    return GaussianPosterior(mean, nat.quadratic)


def beta_update(prior: BetaPosterior, y: int) -> BetaPosterior:
    """Conjugate Bernoulli update: ``(a0 + y, b0 + 1 - y)`` for ``y in {0,1}``."""
    if y not in (0, 1):
        raise ContractViolationError(f"observation must be 0 or 1, got {y!r}")
    return BetaPosterior(prior.a + y, prior.b + 1 - y)


def beta_map(q: BetaPosterior) -> float:
    """Interior mode of Beta(a, b): ``(a - 1) / (a + b - 2)``.

    Defined only for ``a > 1`` and ``b > 1``; otherwise the density has no
    interior maximum and :class:`NoInteriorModeError` is raised.  (One source
    display wraps this expression in an extra ``log``; the preceding
    derivation and a dense grid search both agree with the standard mode, so
    the standard form is implemented.)
    """
    if not (q.a > 1.0 and q.b > 1.0):
        raise NoInteriorModeError(
            f"Beta({q.a}, {q.b}) has no interior mode (need a > 1 and b > 1)"
        )
    return (q.a - 1.0) / (q.a + q.b - 2.0)
