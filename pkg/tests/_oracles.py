"""Independent reference implementations used to check the library.

Everything here is deliberately naive: triple loops instead of BLAS,
Gaussian elimination instead of Cholesky, dense grids instead of closed
forms, scipy.optimize / scipy.stats instead of our own algebra.  Tests
compare library output against these, never against the library itself.
"""

import itertools
import math

import numpy as np
import scipy.optimize
import scipy.special
import scipy.stats


def quad_form_naive(theta, mean, precision):
    """(theta-m)' H (theta-m) / 2 by an explicit double/triple loop."""
    d = [theta[i] - mean[i] for i in range(len(theta))]
    h = np.asarray(precision)
    total = 0.0
    if h.ndim == 1:
        for i in range(len(d)):
            total += d[i] * h[i] * d[i]
    else:
        for i in range(len(d)):
            for j in range(len(d)):
                total += d[i] * h[i, j] * d[j]
    return 0.5 * total


def gauss_logpdf_naive(theta, mean, precision):
    """Full-normalizer Gaussian log-density via scipy.stats."""
    h = np.asarray(precision, dtype=float)
    cov = np.diag(1.0 / h) if h.ndim == 1 else np.linalg.inv(h)
    return float(
        scipy.stats.multivariate_normal(mean=np.asarray(mean, float), cov=cov).logpdf(
            np.asarray(theta, float)
        )
    )


def mixture_logpdf_naive(theta, weights, means, precisions):
    """log sum_k pi_k N_k(theta) by direct density summation."""
    dens = 0.0
    for w, m, h in zip(weights, means, precisions):
        dens += w * math.exp(gauss_logpdf_naive(theta, m, h))
    return math.log(dens)


def gauss_elim_solve(a, b):
    """Solve A x = b by textbook Gaussian elimination with partial pivoting."""
    a = np.array(a, dtype=float)
    b = np.array(b, dtype=float)
    n = len(b)
    for col in range(n):
        pivot = col + int(np.argmax(np.abs(a[col:, col])))
        if pivot != col:
            a[[col, pivot]] = a[[pivot, col]]
            b[[col, pivot]] = b[[pivot, col]]
        for row in range(col + 1, n):
            f = a[row, col] / a[col, col]
            a[row, col:] -= f * a[col, col:]
            b[row] -= f * b[col]
    x = np.zeros(n)
    for row in range(n - 1, -1, -1):
        x[row] = (b[row] - a[row, row + 1 :] @ x[row + 1 :]) / a[row, row]
    return x


def argmin_smooth(f, grad, x0, hess=None):
    """Independent numerical minimizer (trust-region via scipy)."""
    if hess is not None:
        res = scipy.optimize.minimize(
            f, x0, jac=grad, hess=hess, method="trust-exact",
            options={"gtol": 1e-12, "maxiter": 500},
        )
    else:
        res = scipy.optimize.minimize(
            f, x0, jac=grad, method="BFGS",
            options={"gtol": 1e-12, "maxiter": 2000},
        )
    return res.x


def argmin_gd(grad, x0, lr=0.1, iters=20000, tol=1e-12):
    """Plain gradient descent, run until the step stalls."""
    x = np.array(x0, dtype=float)
    for _ in range(iters):
        g = grad(x)
        x_new = x - lr * g
        if np.max(np.abs(x_new - x)) < tol:
            return x_new
        x = x_new
    return x


def fd_grad(f, x, eps=1e-6):
    """Central-difference gradient."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = eps
        g[i] = (f(x + e) - f(x - e)) / (2.0 * eps)
    return g


def fd_hess(grad, x, eps=1e-6):
    """Central-difference Jacobian of a gradient function (the Hessian)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    h = np.zeros((n, n))
    for i in range(n):
        e = np.zeros_like(x)
        e[i] = eps
        h[:, i] = (np.asarray(grad(x + e)) - np.asarray(grad(x - e))) / (2.0 * eps)
    return 0.5 * (h + h.T)


def rel_err(approx, exact):
    denom = max(np.max(np.abs(exact)), 1e-12)
    return np.max(np.abs(np.asarray(approx) - np.asarray(exact))) / denom


def beta_grid_argmax(terms, n=10**6):
    """argmax over a dense interior grid of sum_i c_i [(a_i-1)log p + (b_i-1)log(1-p)].

    ``terms`` is a list of (coefficient, a, b) triples.
    """
    p = np.linspace(0.0, 1.0, n + 2)[1:-1]
    total = np.zeros_like(p)
    for c, a, b in terms:
        total += c * ((a - 1.0) * np.log(p) + (b - 1.0) * np.log1p(-p))
    return float(p[np.argmax(total)])


def grid_modes_1d(f, lo, hi, n=10**6):
    """All strict local maxima of ``f`` on a dense 1-D grid."""
    xs = np.linspace(lo, hi, n)
    ys = f(xs)
    interior = (ys[1:-1] > ys[:-2]) & (ys[1:-1] >= ys[2:])
    return xs[1:-1][interior]


def simplex_points_naive(num_tasks, n):
    """All count tuples summing to n, by brute-force product + filter,
    sorted ascending lexicographically."""
    pts = [
        c
        for c in itertools.product(range(n + 1), repeat=num_tasks)
        if sum(c) == n
    ]
    return sorted(pts)


def stars_and_bars(num_tasks, n):
    return math.comb(n + num_tasks - 1, num_tasks - 1)


def softmax_loss_loop(theta, xs, ys, num_classes):
    """Mean softmax cross-entropy by an explicit per-example loop.

    ``theta`` is class-major: row c of its (C, D) reshape scores class c.
    """
    w = np.asarray(theta, dtype=float).reshape(num_classes, -1)
    total = 0.0
    for x, y in zip(xs, ys):
        logits = np.array([float(w[c] @ x) for c in range(num_classes)])
        total += scipy.special.logsumexp(logits) - logits[int(y)]
    return total / len(ys)


def lse_loss_naive(a_mat, b_vec, theta):
    """log sum_i exp(a_i' theta + b_i) via scipy's logsumexp."""
    return float(scipy.special.logsumexp(np.asarray(a_mat) @ theta + np.asarray(b_vec)))


def random_gaussian(rng, dim, layout):
    """A random valid (mean, precision) pair for tests."""
    mean = rng.normal(size=dim)
    if layout == "diag":
        prec = rng.uniform(0.2, 3.0, size=dim)
    else:
        m = rng.normal(size=(dim, dim))
        prec = m @ m.T + dim * np.eye(dim)
    return mean, prec
