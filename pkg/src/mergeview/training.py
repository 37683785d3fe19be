"""Per-task posterior construction.

Four trainers cover the posterior families the merges consume:

* :func:`gd_train` -- full-batch gradient descent, producing a point estimate.
* :func:`von_full_train` -- variational online Newton with a full precision:
  sample around the current mean, average sampled gradients/Hessians, blend
  the precision, and take a preconditioned mean step.
* :func:`vi_diag_train` -- the same scheme restricted to diagonal precisions,
  accumulating the curvature estimate online during training (no extra data
  pass).
* :func:`sq_grad_laplace` -- a Laplace-style diagonal precision from summed
  squared per-example gradients at a given point.

:func:`multi_run_mixture` builds a mixture posterior out of several
independent variational fits over (seed, iteration-budget) pairs.

Determinism contract: identical configs (seed included) produce bitwise
identical artifacts; each run owns a ``numpy`` Generator keyed by its seed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import scipy.linalg

from .exceptions import (
    ContractViolationError,
    DivergenceError,
    PrecisionRepairError,
)
from .posteriors import (
    DIAG,
    FULL,
    GaussianPosterior,
    MixturePosterior,
    as_param_vector,
)

_METHODS = ("gd", "von_full", "vi_diag", "sq_grad_laplace")
_KINDS = ("point", "gaussian_diag", "gaussian_full", "mixture")

#: additive floor keeping diagonal precisions invertible at simplex corners
PRECISION_FLOOR = 1e-8

#: default guard on full-precision storage (P x P)
VON_FULL_DIM_CAP = 2000


@dataclass(frozen=True)
class TrainerConfig:
    """Hyperparameters shared by all trainers.

    ``prior_precision`` is the delta of the shared prior N(0, delta^-1 I).
    ``batch_size`` 0 means full batch (the only mode the desk protocols use);
    positive values subsample examples per step on tasks exposing minibatch
    gradients.  ``ess_scale`` multiplies the loss surface seen by the trainer
    (1.0 keeps posterior precisions on the mean-loss scale the merges expect;
    set it to the dataset size to recover sum-loss Bayesian scaling).
    """

    method: str
    learning_rate: float = 0.1
    iterations: int = 25
    mc_samples: int = 3
    prior_precision: float = 0.0
    batch_size: int = 0
    seed: int = 0
    ess_scale: float = 1.0

    def __post_init__(self):
        if self.method not in _METHODS:
            raise ContractViolationError(
                f"unknown method {self.method!r}, expected one of {_METHODS}"
            )
        if not self.learning_rate > 0.0:
            raise ContractViolationError("learning_rate must be positive")
        if self.iterations < 1:
            raise ContractViolationError("iterations must be >= 1")
        if self.mc_samples < 1:
            raise ContractViolationError("mc_samples must be >= 1")
        if self.prior_precision < 0.0:
            raise ContractViolationError("prior_precision must be >= 0")
        if self.batch_size < 0:
            raise ContractViolationError("batch_size must be >= 0")
        if not self.ess_scale > 0.0:
            raise ContractViolationError("ess_scale must be positive")


@dataclass(frozen=True)
class Provenance:
    """Where an artifact came from: config, task, and final training loss."""

    task_id: str
    config: TrainerConfig
    final_loss: float
    notes: tuple[str, ...] = ()


@dataclass(frozen=True)
class PosteriorArtifact:
    """A trained posterior plus its provenance.

    ``kind`` is one of point / gaussian_diag / gaussian_full / mixture and
    must match the payload type (and, for Gaussians, the precision layout).
    """

    kind: str
    payload: object
    provenance: Provenance

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ContractViolationError(f"unknown artifact kind {self.kind!r}")
        p = self.payload
        if self.kind == "point":
            object.__setattr__(self, "payload", as_param_vector(p))
        elif self.kind == "gaussian_diag":
            if not (isinstance(p, GaussianPosterior) and p.layout == DIAG):
                raise ContractViolationError(
                    "gaussian_diag artifact requires a diagonal GaussianPosterior"
                )
        elif self.kind == "gaussian_full":
            if not (isinstance(p, GaussianPosterior) and p.layout == FULL):
                raise ContractViolationError(
                    "gaussian_full artifact requires a full GaussianPosterior"
                )
        elif not isinstance(p, MixturePosterior):
            raise ContractViolationError(
                "mixture artifact requires a MixturePosterior"
            )

    @property
    def dim(self) -> int:
        p = self.payload
        return p.shape[0] if isinstance(p, np.ndarray) else p.dim


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def _loss_and_grad(task, theta, scale):
    if hasattr(task, "loss_and_grad"):
        loss, g = task.loss_and_grad(theta)
    else:
        loss, g = task.loss(theta), task.grad(theta)
    return scale * loss, scale * np.asarray(g, dtype=np.float64)


def _sample_offsets(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    """Standard-normal offsets; antithetic +/- pairs when count is even."""
    if count % 2 == 0:
        half = rng.standard_normal((count // 2, dim))
        return np.concatenate([half, -half], axis=0)
    return rng.standard_normal((count, dim))


def _task_hessian(task, theta, scale):
    """Exact Hessian when the task provides one, else a Gauss-Newton-style
    fallback from summed per-example gradient outer products."""
    if hasattr(task, "hessian"):
        return scale * np.asarray(task.hessian(theta), dtype=np.float64)
    if hasattr(task, "per_example_grads"):
        h = None
        n = 0
        for g in task.per_example_grads(theta):
            h = np.outer(g, g) if h is None else h + np.outer(g, g)
            n += 1
        return scale * h / n
    raise ContractViolationError(
        f"task {task.id!r} provides neither a Hessian nor per-example gradients"
    )


def _task_hessian_diag(task, theta, scale):
    if hasattr(task, "hessian_diag"):
        return scale * np.asarray(task.hessian_diag(theta), dtype=np.float64)
    return np.diag(_task_hessian(task, theta, scale)).copy()


# ---------------------------------------------------------------------------
# trainers
# ---------------------------------------------------------------------------


def gd_train(task, cfg: TrainerConfig, init) -> PosteriorArtifact:
    """Full-batch gradient descent: ``theta <- theta - rho * grad``.

    Raises :class:`DivergenceError` (carrying the iteration index) as soon as
    a non-finite loss shows up.  ``batch_size > 0`` switches to sampled
    minibatches on tasks exposing ``batch_loss_grad``.
    """
    theta = np.array(as_param_vector(init))
    rho = cfg.learning_rate
    scale = cfg.ess_scale
    rng = np.random.default_rng(cfg.seed)
    use_batches = cfg.batch_size > 0
    if use_batches and not hasattr(task, "batch_loss_grad"):
        raise ContractViolationError(
            f"task {task.id!r} does not support minibatch training"
        )
    for i in range(cfg.iterations):
        if use_batches:
            idx = rng.choice(task.num_examples, size=cfg.batch_size, replace=False)
            loss, g = task.batch_loss_grad(theta, idx)
            loss, g = scale * loss, scale * g
        else:
            loss, g = _loss_and_grad(task, theta, scale)
        if not np.isfinite(loss):
            raise DivergenceError(
                f"non-finite loss at iteration {i} on task {task.id!r}", iteration=i
            )
        theta = theta - rho * g
    final_loss = float(cfg.ess_scale * task.loss(theta))
    if not np.isfinite(final_loss):
        raise DivergenceError(
            f"non-finite final loss on task {task.id!r}", iteration=cfg.iterations
        )
    return PosteriorArtifact(
        kind="point",
        payload=theta,
        provenance=Provenance(task.id, cfg, final_loss),
    )


def von_full_train(
    task,
    cfg: TrainerConfig,
    init: GaussianPosterior | None = None,
    max_dim: int = VON_FULL_DIM_CAP,
) -> PosteriorArtifact:
    """Variational online Newton with a full precision matrix.

    Per iteration, with current ``N(m, S)`` and ``S = (precision)^{-1}``:
    draw ``mc_samples`` points (antithetic pairs when even), average their
    gradients ``g`` and Hessians ``H``, then

        precision <- (1 - rho) precision + rho (H + delta I)
        m         <- m - rho * S_new * (g + delta m)

    where ``delta = prior_precision``.  On quadratic losses the fixed point
    is exactly the loss Hessian (plus delta) and its minimizer.
    """
    dim = task.dim
    if dim > max_dim:
        raise ContractViolationError(
            f"P = {dim} exceeds the full-precision cap {max_dim}"
        )
    if init is None:
        init = GaussianPosterior(np.zeros(dim), np.eye(dim))
    m = np.array(init.mean)
    if init.layout == DIAG:
        prec = np.diag(init.precision).copy()
    else:
        prec = np.array(init.precision)
    rho = cfg.learning_rate
    delta = cfg.prior_precision
    scale = cfg.ess_scale
    rng = np.random.default_rng(cfg.seed)
    eye = np.eye(dim)
    for i in range(cfg.iterations):
        chol = scipy.linalg.cholesky(prec, lower=True)
        z = _sample_offsets(rng, cfg.mc_samples, dim)
        # x = L^{-T} z  =>  cov(x) = precision^{-1}
        offsets = scipy.linalg.solve_triangular(chol, z.T, lower=True, trans="T").T
        g_bar = np.zeros(dim)
        h_bar = np.zeros((dim, dim))
        for x in offsets:
            theta_s = m + x
            loss, g = _loss_and_grad(task, theta_s, scale)
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at iteration {i} on task {task.id!r}",
                    iteration=i,
                )
            g_bar += g
            h_bar += _task_hessian(task, theta_s, scale)
        g_bar /= cfg.mc_samples
        h_bar /= cfg.mc_samples
        prec = (1.0 - rho) * prec + rho * (h_bar + delta * eye)
        try:
            c, low = scipy.linalg.cho_factor(prec, lower=True)
        except scipy.linalg.LinAlgError as exc:
            raise PrecisionRepairError(
                f"precision lost positive definiteness at iteration {i} "
                f"on task {task.id!r}"
            ) from exc
        m = m - rho * scipy.linalg.cho_solve((c, low), g_bar + delta * m)
        if not np.all(np.isfinite(m)):
            raise DivergenceError(
                f"non-finite mean at iteration {i} on task {task.id!r}", iteration=i
            )
    posterior = GaussianPosterior(m, 0.5 * (prec + prec.T))
    return PosteriorArtifact(
        kind="gaussian_full",
        payload=posterior,
        provenance=Provenance(task.id, cfg, float(scale * task.loss(m))),
    )


def vi_diag_train(
    task, cfg: TrainerConfig, init: GaussianPosterior | None = None
) -> PosteriorArtifact:
    """Diagonal variational training: :func:`von_full_train` restricted to
    the diagonal, using the task's diagonal Hessian (accumulated during the
    run -- no separate curvature pass).

    Nonpositive precision updates are clamped to ``PRECISION_FLOOR`` and the
    event is flagged in the artifact's provenance notes, never silent.
    On a zero loss ("no data") this returns exactly the prior it started at.
    """
    dim = task.dim
    if init is None:
        init = GaussianPosterior(np.zeros(dim), np.ones(dim))
    if init.layout != DIAG:
        raise ContractViolationError("vi_diag_train requires a diagonal init")
    m = np.array(init.mean)
    prec = np.array(init.precision)
    rho = cfg.learning_rate
    delta = cfg.prior_precision
    scale = cfg.ess_scale
    rng = np.random.default_rng(cfg.seed)
    floored = False
    for i in range(cfg.iterations):
        z = _sample_offsets(rng, cfg.mc_samples, dim)
        offsets = z / np.sqrt(prec)
        g_bar = np.zeros(dim)
        h_bar = np.zeros(dim)
        for x in offsets:
            theta_s = m + x
            loss, g = _loss_and_grad(task, theta_s, scale)
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at iteration {i} on task {task.id!r}",
                    iteration=i,
                )
            g_bar += g
            h_bar += _task_hessian_diag(task, theta_s, scale)
        g_bar /= cfg.mc_samples
        h_bar /= cfg.mc_samples
        prec = (1.0 - rho) * prec + rho * (h_bar + delta)
        if np.any(prec < PRECISION_FLOOR):
            prec = np.maximum(prec, PRECISION_FLOOR)
            floored = True
        m = m - rho * (g_bar + delta * m) / prec
        if not np.all(np.isfinite(m)):
            raise DivergenceError(
                f"non-finite mean at iteration {i} on task {task.id!r}", iteration=i
            )
    notes = ("precision_floored",) if floored else ()
    return PosteriorArtifact(
        kind="gaussian_diag",
        payload=GaussianPosterior(m, prec),
        provenance=Provenance(task.id, cfg, float(scale * task.loss(m)), notes),
    )


def sq_grad_laplace(task, theta, floor: float = PRECISION_FLOOR) -> PosteriorArtifact:
    """Diagonal Laplace precision from squared per-example gradients:
    ``h_j = sum_i grad_i(theta)_j^2 + floor``, posterior ``N(theta, diag(h)^-1)``.

    The sum (not mean) over examples makes the estimate additive under
    dataset concatenation and independent of example order.
    """
    theta = as_param_vector(theta, dim=task.dim)
    if hasattr(task, "squared_grad_sum"):
        h = np.asarray(task.squared_grad_sum(theta), dtype=np.float64).copy()
    elif hasattr(task, "per_example_grads"):
        h = np.zeros(task.dim)
        for g in task.per_example_grads(theta):
            h += np.asarray(g, dtype=np.float64) ** 2
    else:
        raise ContractViolationError(
            f"task {task.id!r} does not expose per-example gradients"
        )
    h += floor
    cfg = TrainerConfig(method="sq_grad_laplace", iterations=1)
    return PosteriorArtifact(
        kind="gaussian_diag",
        payload=GaussianPosterior(theta, h),
        provenance=Provenance(task.id, cfg, float(task.loss(theta))),
    )


def multi_run_mixture(
    task,
    cfg: TrainerConfig,
    runs: Sequence[tuple[int, int]],
    init: GaussianPosterior | None = None,
) -> PosteriorArtifact:
    """Mixture posterior from independent variational runs.

    ``runs`` is a list of (seed, iteration budget) pairs; each yields one
    component with weight ``1/K`` via the trainer selected by
    ``cfg.method`` (``vi_diag`` for diagonal components, ``von_full`` for
    full ones).  A failing component run aborts the whole build, naming the
    seed.
    """
    if len(runs) == 0:
        raise ContractViolationError("runs must be nonempty")
    if cfg.method == "von_full":
        trainer = von_full_train
    elif cfg.method == "vi_diag":
        trainer = vi_diag_train
    else:
        raise ContractViolationError(
            f"mixture components require vi_diag or von_full, got {cfg.method!r}"
        )
    components = []
    losses = []
    for seed, iters in runs:
        run_cfg = replace(cfg, seed=int(seed), iterations=int(iters))
        try:
            art = trainer(task, run_cfg, init)
        except Exception as exc:
            raise RuntimeError(
                f"mixture component training failed for seed {seed} "
                f"(budget {iters}) on task {task.id!r}: {exc}"
            ) from exc
        components.append(art.payload)
        losses.append(art.provenance.final_loss)
    k = len(components)
    mixture = MixturePosterior(np.full(k, 1.0 / k), tuple(components))
    notes = tuple(f"run seed={s} iters={n}" for s, n in runs)
    return PosteriorArtifact(
        kind="mixture",
        payload=mixture,
        provenance=Provenance(task.id, cfg, float(np.mean(losses)), notes),
    )
