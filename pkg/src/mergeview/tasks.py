"""Desk-scale benchmark tasks.

Two task families:

* :class:`LseTask` -- 2-D convex toys ``l(theta) = log sum_i exp(a_i'theta + b_i)``
  with analytic gradient ``softmax(A theta + b)' A`` and Hessian
  ``A' (diag(p) - p p') A``.
* :class:`SoftmaxSplitTask` -- multiclass logistic regression where each task
  sees only the examples of its own class subset but parameterizes all C
  classes, so every task shares one parameter space of size ``C * (d + 1)``
  (weights plus bias, bias folded in as an augmented feature).

Task losses are means over the task's examples, making the task weights the
sole instrument of weighting in a joint objective.  All tasks are immutable,
pure, and self-test their gradients (and small-P Hessians) against
directional finite differences at construction.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.special

from .exceptions import ContractViolationError

#: class splits of the ten-digit protocols
IMBALANCED_SPLIT = ((0, 1), (2, 3, 4), (5, 6, 7, 8, 9))
BALANCED_SPLIT = ((0, 1, 2), (3, 4, 5, 6), (7, 8, 9))


# ---------------------------------------------------------------------------
# finite-difference checks
# ---------------------------------------------------------------------------


def check_gradient(task, rng=None, points: int = 5, eps: float | None = None,
                   theta_scale: float = 1.0) -> float:
    """Max relative error of directional central differences of the loss
    against ``d . grad`` over random points/directions."""
    rng = np.random.default_rng(0) if rng is None else rng
    worst = 0.0
    for _ in range(points):
        theta = theta_scale * rng.standard_normal(task.dim)
        d = rng.standard_normal(task.dim)
        d /= np.linalg.norm(d)
        h = eps if eps is not None else 3e-6 * (1.0 + np.abs(theta).max())
        fd = (task.loss(theta + h * d) - task.loss(theta - h * d)) / (2.0 * h)
        an = float(np.dot(task.grad(theta), d))
        worst = max(worst, abs(fd - an) / max(1.0, abs(an), abs(fd)))
    return worst


def check_hessian(task, rng=None, points: int = 5, eps: float | None = None,
                  theta_scale: float = 1.0) -> float:
    """Max relative error of directional central differences of the gradient
    against ``H d`` over random points/directions."""
    rng = np.random.default_rng(0) if rng is None else rng
    worst = 0.0
    for _ in range(points):
        theta = theta_scale * rng.standard_normal(task.dim)
        d = rng.standard_normal(task.dim)
        d /= np.linalg.norm(d)
        h = eps if eps is not None else 1e-5 * (1.0 + np.abs(theta).max())
        fd = (task.grad(theta + h * d) - task.grad(theta - h * d)) / (2.0 * h)
        an = np.asarray(task.hessian(theta)) @ d
        denom = max(1.0, float(np.linalg.norm(an)), float(np.linalg.norm(fd)))
        worst = max(worst, float(np.linalg.norm(fd - an)) / denom)
    return worst


def _self_test(task, check_hess: bool = True):
    rng = np.random.default_rng(1234)
    err = check_gradient(task, rng, points=3)
    if err > 1e-5:
        raise ContractViolationError(
            f"task {task.id!r} failed its gradient self-test (rel err {err:.2e})"
        )
    if check_hess and hasattr(task, "hessian") and task.dim <= 256:
        err = check_hessian(task, rng, points=2)
        if err > 1e-4:
            raise ContractViolationError(
                f"task {task.id!r} failed its Hessian self-test (rel err {err:.2e})"
            )


# ---------------------------------------------------------------------------
# log-sum-exp toy
# ---------------------------------------------------------------------------


class LseTask:
    """``l(theta) = log sum_i exp(a_i' theta + b_i)`` over the rows of A.

    Convex with PSD Hessian everywhere.  Requires at least two rows (a single
    row makes the loss affine with zero curvature).  ``eval_metric`` is the
    raw loss.
    """

    def __init__(self, task_id: str, A, b, validate: bool = True):
        A = np.array(A, dtype=np.float64)
        b = np.array(b, dtype=np.float64).ravel()
        if A.ndim != 2 or A.shape[0] != b.shape[0]:
            raise ContractViolationError(
                f"A {A.shape} and b {b.shape} are inconsistent"
            )
        if A.shape[0] < 2:
            raise ContractViolationError("need N >= 2 rows (N=1 is affine)")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
            raise ContractViolationError("non-finite task data")
        A.setflags(write=False)
        b.setflags(write=False)
        self.id = task_id
        self.A = A
        self.b = b
        self.dim = A.shape[1]
        if validate:
            _self_test(self)

    def _scores(self, theta):
        return self.A @ np.asarray(theta, dtype=np.float64) + self.b

    def _lse_and_softmax(self, theta):
        # hand-rolled max-shift: these run millions of times in joint sweeps
        z = self._scores(theta)
        m = z.max()
        e = np.exp(z - m)
        s = e.sum()
        return float(m + np.log(s)), e / s

    def loss(self, theta) -> float:
        return self._lse_and_softmax(theta)[0]

    def grad(self, theta) -> np.ndarray:
        return self._lse_and_softmax(theta)[1] @ self.A

    def loss_and_grad(self, theta):
        lse, p = self._lse_and_softmax(theta)
        return lse, p @ self.A

    def hessian(self, theta) -> np.ndarray:
        p = self._lse_and_softmax(theta)[1]
        ap = self.A.T * p  # (dim, N) columns a_i * p_i
        mean = p @ self.A
        return ap @ self.A - np.outer(mean, mean)

    def hessian_diag(self, theta) -> np.ndarray:
        p = self._lse_and_softmax(theta)[1]
        return p @ (self.A**2) - (p @ self.A) ** 2

    def eval_metric(self, theta) -> float:
        return self.loss(theta)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.id.encode())
        h.update(self.A.tobytes())
        h.update(self.b.tobytes())
        return h.hexdigest()


def make_lse_tasks(seed: int, n_rows: int = 8, scale: float = 1.0) -> list[LseTask]:
    """Three random 2-D log-sum-exp tasks: rows drawn from standard normals
    for the first two, uniform (matched variance) for the third.  Row sets
    are mean-centered so the origin lies inside each convex hull, which makes
    every loss coercive with a finite minimizer."""
    if n_rows < 2:
        raise ContractViolationError("need n_rows >= 2")
    rng = np.random.default_rng(seed)
    tasks = []
    for t in range(3):
        if t < 2:
            A = scale * rng.standard_normal((n_rows, 2))
            b = scale * rng.standard_normal(n_rows)
        else:
            lim = scale * np.sqrt(3.0)
            A = rng.uniform(-lim, lim, size=(n_rows, 2))
            b = rng.uniform(-lim, lim, size=n_rows)
        A = A - A.mean(axis=0)
        tasks.append(LseTask(f"lse-{t + 1}", A, b))
    return tasks


# ---------------------------------------------------------------------------
# class-split multiclass logistic regression
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassSplitDataset:
    """Features in [0,1], integer labels, and a disjoint class split.

    ``eval_features``/``eval_labels`` optionally carry held-out examples used
    for accuracy scoring; otherwise evaluation falls back to the training
    examples.
    """

    features: np.ndarray
    labels: np.ndarray
    split: tuple[tuple[int, ...], ...]
    num_classes: int = 0
    eval_features: np.ndarray | None = None
    eval_labels: np.ndarray | None = None

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64).ravel()
        if feats.ndim != 2 or feats.shape[0] != labels.shape[0]:
            raise ContractViolationError(
                f"features {feats.shape} and labels {labels.shape} inconsistent"
            )
        if feats.size and (feats.min() < -1e-9 or feats.max() > 1.0 + 1e-9):
            raise ContractViolationError("features must lie in [0, 1]")
        split = tuple(tuple(int(c) for c in part) for part in self.split)
        flat = [c for part in split for c in part]
        if len(flat) != len(set(flat)):
            raise ContractViolationError("class subsets must be disjoint")
        num_classes = self.num_classes or (max(flat) + 1)
        if not set(labels.tolist()) <= set(flat):
            raise ContractViolationError(
                "split does not cover all classes present in labels"
            )
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise ContractViolationError("labels out of range")
        feats.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "split", split)
        object.__setattr__(self, "num_classes", num_classes)
        if (self.eval_features is None) != (self.eval_labels is None):
            raise ContractViolationError(
                "eval features and labels must be given together"
            )
        if self.eval_features is not None:
            ef = np.array(self.eval_features, dtype=np.float64)
            el = np.array(self.eval_labels, dtype=np.int64).ravel()
            if ef.ndim != 2 or ef.shape[1] != feats.shape[1] or ef.shape[0] != el.shape[0]:
                raise ContractViolationError("eval arrays inconsistent")
            ef.setflags(write=False)
            el.setflags(write=False)
            object.__setattr__(self, "eval_features", ef)
            object.__setattr__(self, "eval_labels", el)

    @property
    def num_tasks(self) -> int:
        return len(self.split)

    @property
    def dim_features(self) -> int:
        return self.features.shape[1]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.features.tobytes())
        h.update(self.labels.tobytes())
        h.update(repr(self.split).encode())
        if self.eval_features is not None:
            h.update(self.eval_features.tobytes())
            h.update(self.eval_labels.tobytes())
        return h.hexdigest()


def _augment(features: np.ndarray) -> np.ndarray:
    return np.hstack([features, np.ones((features.shape[0], 1))])


def _accuracy(theta, xa, labels, num_classes) -> float:
    w = np.asarray(theta).reshape(num_classes, xa.shape[1])
    preds = np.argmax(xa @ w.T, axis=1)
    return float(np.mean(preds == labels))


class SoftmaxSplitTask:
    """Mean softmax cross-entropy over one class subset's examples.

    The parameter is the flattened ``(C, d+1)`` weight matrix (bias folded in
    via an augmented all-ones feature), so ``P = C*(d+1) = d*C + C`` and all
    tasks of a dataset share the same parameter space.  At ``theta = 0`` the
    loss is exactly ``log C``.
    """

    def __init__(self, task_id, features, labels, num_classes,
                 eval_features=None, eval_labels=None, validate: bool = True):
        if features.shape[0] == 0:
            raise ContractViolationError(f"task {task_id!r} has no examples")
        self.id = task_id
        self.xa = _augment(np.asarray(features, dtype=np.float64))
        self.labels = np.asarray(labels, dtype=np.int64)
        self.num_classes = int(num_classes)
        self.dim = self.num_classes * self.xa.shape[1]
        if eval_features is not None:
            self.eval_xa = _augment(np.asarray(eval_features, dtype=np.float64))
            self.eval_labels = np.asarray(eval_labels, dtype=np.int64)
        else:
            self.eval_xa = self.xa
            self.eval_labels = self.labels
        self.xa.setflags(write=False)
        self.labels.setflags(write=False)
        if validate:
            _self_test(self, check_hess=self.dim <= 256)

    @property
    def num_examples(self) -> int:
        return self.xa.shape[0]

    def _logits(self, theta, xa=None):
        xa = self.xa if xa is None else xa
        w = np.asarray(theta, dtype=np.float64).reshape(self.num_classes, -1)
        return xa @ w.T

    def loss(self, theta) -> float:
        z = self._logits(theta)
        lse = scipy.special.logsumexp(z, axis=1)
        return float(np.mean(lse - z[np.arange(z.shape[0]), self.labels]))

    def _probs_resid(self, theta, xa, labels):
        z = self._logits(theta, xa)
        p = scipy.special.softmax(z, axis=1)
        r = p.copy()
        r[np.arange(r.shape[0]), labels] -= 1.0
        return z, p, r

    def grad(self, theta) -> np.ndarray:
        _, _, r = self._probs_resid(theta, self.xa, self.labels)
        return (r.T @ self.xa).ravel() / self.num_examples

    def loss_and_grad(self, theta):
        z, _, r = self._probs_resid(theta, self.xa, self.labels)
        lse = scipy.special.logsumexp(z, axis=1)
        loss = float(np.mean(lse - z[np.arange(z.shape[0]), self.labels]))
        return loss, (r.T @ self.xa).ravel() / self.num_examples

    def batch_loss_grad(self, theta, indices):
        xa = self.xa[indices]
        labels = self.labels[indices]
        z = self._logits(theta, xa)
        p = scipy.special.softmax(z, axis=1)
        r = p.copy()
        r[np.arange(r.shape[0]), labels] -= 1.0
        lse = scipy.special.logsumexp(z, axis=1)
        loss = float(np.mean(lse - z[np.arange(z.shape[0]), labels]))
        return loss, (r.T @ xa).ravel() / xa.shape[0]

    def hessian(self, theta) -> np.ndarray:
        """Mean of ``(diag(p_i) - p_i p_i') kron (x_i x_i')`` over examples,
        assembled as class-diagonal blocks minus a rank-M cross term."""
        _, p, _ = self._probs_resid(theta, self.xa, self.labels)
        m, dd = self.xa.shape
        c = self.num_classes
        h = np.zeros((self.dim, self.dim))
        for ci in range(c):
            block = self.xa.T @ (p[:, ci : ci + 1] * self.xa)
            h[ci * dd : (ci + 1) * dd, ci * dd : (ci + 1) * dd] = block
        b = (p[:, :, None] * self.xa[:, None, :]).reshape(m, c * dd)
        h -= b.T @ b
        h /= m
        return 0.5 * (h + h.T)

    def hessian_diag(self, theta) -> np.ndarray:
        _, p, _ = self._probs_resid(theta, self.xa, self.labels)
        return ((p * (1.0 - p)).T @ self.xa**2).ravel() / self.num_examples

    def per_example_grads(self, theta):
        """Gradients of the individual (unit-weight) example losses."""
        _, _, r = self._probs_resid(theta, self.xa, self.labels)
        for i in range(self.num_examples):
            yield np.outer(r[i], self.xa[i]).ravel()

    def squared_grad_sum(self, theta) -> np.ndarray:
        _, _, r = self._probs_resid(theta, self.xa, self.labels)
        return ((r**2).T @ self.xa**2).ravel()

    def eval_metric(self, theta) -> float:
        return _accuracy(theta, self.eval_xa, self.eval_labels, self.num_classes)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.id.encode())
        h.update(self.xa.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()


def make_class_split_tasks(
    data: ClassSplitDataset, validate: bool = True
) -> list[SoftmaxSplitTask]:
    """One softmax task per class subset; each sees only its own examples
    but parameterizes all classes."""
    tasks = []
    for t, classes in enumerate(data.split):
        mask = np.isin(data.labels, classes)
        if not mask.any():
            raise ContractViolationError(f"split {t} matches no examples")
        if data.eval_features is not None:
            emask = np.isin(data.eval_labels, classes)
            ef, el = data.eval_features[emask], data.eval_labels[emask]
        else:
            ef = el = None
        tasks.append(
            SoftmaxSplitTask(
                f"split-{t + 1}",
                data.features[mask],
                data.labels[mask],
                data.num_classes,
                eval_features=ef,
                eval_labels=el,
                validate=validate,
            )
        )
    return tasks


def union_accuracy_evaluator(data: ClassSplitDataset) -> Callable:
    """Accuracy over the union of all examples (held-out when available);
    the single scalar a preview surface reports per weight vector."""
    if data.eval_features is not None:
        xa, labels = _augment(data.eval_features), data.eval_labels
    else:
        xa, labels = _augment(data.features), data.labels
    c = data.num_classes

    def evaluator(theta, weights=None) -> float:
        return _accuracy(theta, xa, labels, c)

    return evaluator


def macro_accuracy_evaluator(data: ClassSplitDataset) -> Callable:
    """Unweighted mean of per-task accuracies (exposed as an alternative to
    the union metric)."""
    parts = []
    feats = data.eval_features if data.eval_features is not None else data.features
    labels = data.eval_labels if data.eval_features is not None else data.labels
    for classes in data.split:
        mask = np.isin(labels, classes)
        parts.append((_augment(feats[mask]), labels[mask]))
    c = data.num_classes

    def evaluator(theta, weights=None) -> float:
        return float(np.mean([_accuracy(theta, xa, lab, c) for xa, lab in parts]))

    return evaluator


def weighted_loss_evaluator(tasks: Sequence) -> Callable:
    """``sum_t alpha_t l_t(theta)`` -- the natural surface metric for the
    log-sum-exp toys (lower is better)."""

    def evaluator(theta, weights) -> float:
        alpha = weights.alpha if hasattr(weights, "alpha") else np.asarray(weights)
        return float(
            sum(a * t.loss(theta) for a, t in zip(alpha, tasks) if a != 0.0)
        )

    return evaluator


class WeightedTask:
    """``sum_t alpha_t l_t`` as a task handle, for the joint-training oracle.

    Zero-weight tasks are dropped so a one-hot weighting reproduces the
    single-task training run bit for bit.
    """

    def __init__(self, tasks: Sequence, alpha):
        alpha = np.asarray(alpha, dtype=np.float64).ravel()
        if len(tasks) != alpha.shape[0]:
            raise ContractViolationError("task/weight count mismatch")
        pairs = [(a, t) for a, t in zip(alpha, tasks) if a != 0.0]
        if not pairs:
            raise ContractViolationError("all weights are zero")
        dim = pairs[0][1].dim
        for _, t in pairs:
            if t.dim != dim:
                raise ContractViolationError("tasks must share parameter space")
        self.pairs = pairs
        self.dim = dim
        self.id = "joint(" + ",".join(f"{t.id}:{a:g}" for a, t in pairs) + ")"

    def loss(self, theta) -> float:
        return float(sum(a * t.loss(theta) for a, t in self.pairs))

    def grad(self, theta) -> np.ndarray:
        g = np.zeros(self.dim)
        for a, t in self.pairs:
            g += a * t.grad(theta)
        return g

    def loss_and_grad(self, theta):
        total = 0.0
        g = np.zeros(self.dim)
        for a, t in self.pairs:
            if hasattr(t, "loss_and_grad"):
                l_t, g_t = t.loss_and_grad(theta)
            else:
                l_t, g_t = t.loss(theta), t.grad(theta)
            total += a * l_t
            g += a * g_t
        return total, g

    def hessian(self, theta) -> np.ndarray:
        h = None
        for a, t in self.pairs:
            term = a * np.asarray(t.hessian(theta))
            h = term if h is None else h + term
        return h

    def hessian_diag(self, theta) -> np.ndarray:
        h = np.zeros(self.dim)
        for a, t in self.pairs:
            if hasattr(t, "hessian_diag"):
                h += a * np.asarray(t.hessian_diag(theta))
            else:
                h += a * np.diag(np.asarray(t.hessian(theta)))
        return h

    def eval_metric(self, theta) -> float:
        return self.loss(theta)


# ---------------------------------------------------------------------------
# synthetic digits
# ---------------------------------------------------------------------------


def make_synthetic_digits(
    seed: int,
    per_class: int,
    d: int,
    num_classes: int = 10,
    noise: float = 0.15,
    eval_per_class: int | None = None,
    split: tuple[tuple[int, ...], ...] = IMBALANCED_SPLIT,
) -> ClassSplitDataset:
    """Gaussian class blobs standing in for digit images.

    Per-class means are drawn once from U(0.2, 0.8) per pixel; examples add
    N(0, noise^2) and clip to [0, 1].  Separation grows with sqrt(d), so the
    default noise leaves single-task logistic regression comfortably above
    95% accuracy at d around 196.  Same seed, same dataset, bit for bit.
    """
    if per_class < 1:
        raise ContractViolationError("per_class must be >= 1")
    rng = np.random.default_rng(seed)
    means = rng.uniform(0.2, 0.8, size=(num_classes, d))

    def draw(count):
        labels = np.repeat(np.arange(num_classes), count)
        feats = means[labels] + noise * rng.standard_normal((labels.size, d))
        return np.clip(feats, 0.0, 1.0), labels

    features, labels = draw(per_class)
    if eval_per_class is None:
        eval_per_class = per_class // 4
    if eval_per_class > 0:
        eval_features, eval_labels = draw(eval_per_class)
    else:
        eval_features = eval_labels = None
    return ClassSplitDataset(
        features,
        labels,
        split,
        num_classes=num_classes,
        eval_features=eval_features,
        eval_labels=eval_labels,
    )
