"""Numerical kernels used by the trainer: PCA, Lloyd k-means, SPD solves, L-BFGS."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
import scipy.linalg
from scipy.spatial.distance import cdist

from .errors import DimensionMismatchError, NonFiniteError, SingularMatrixError

# reciprocal condition number (squared Cholesky diagonal ratio) below which
# a system counts as numerically singular
_SINGULAR_RCOND = 1e-14


# --- PCA --------------------------------------------------------------------


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (d, r), orthonormal columns
    explained_variance: np.ndarray  # (r,), descending

    @property
    def r(self):
        return self.components.shape[1]

    def transform(self, X):
        return (np.asarray(X, dtype=np.float64) - self.mean) @ self.components

    def inverse_transform(self, Z):
        return np.asarray(Z) @ self.components.T + self.mean


def pca_fit(vectors, r) -> PcaModel:
    """Top-``r`` principal directions from an eigendecomposition of the covariance.

    Each component's sign is fixed so that its largest-magnitude coordinate is
    positive, which makes the result deterministic.
    """
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionMismatchError("pca_fit expects a 2-D matrix")
    n, d = X.shape
    if not 1 <= r <= min(n, d):
        raise ValueError(f"r={r} must lie in [1, min(N, d)] = [1, {min(n, d)}]")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = (Xc.T @ Xc) / n
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:r]
    comps = evecs[:, order]
    pivot = np.argmax(np.abs(comps), axis=0)
    signs = np.sign(comps[pivot, np.arange(r)])
    signs[signs == 0] = 1.0
    comps = comps * signs
    return PcaModel(mean, comps, np.clip(evals[order], 0.0, None))


# --- k-means ------------------------------------------------------------------


def _assign(X, centroids):
    d2 = cdist(X, centroids, "sqeuclidean")
    a = np.argmin(d2, axis=1)
    return a, d2[np.arange(X.shape[0]), a]


def kmeans(vectors, k, max_iter=25, seed=0, return_distortions=False):
    """Lloyd's algorithm from ``k`` distinct random data points.

    Empty clusters are reseeded at the point farthest from its own centroid.

    Returns:
        ``(centroids, assignments)``, plus the per-iteration within-cluster
        sum of squares when ``return_distortions`` is set (entry 0 is the
        distortion of the initial centroids).
    """
    X = np.asarray(vectors, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, N={n}]")
    rng = np.random.default_rng(seed)
    centroids = X[rng.choice(n, size=k, replace=False)].copy()
    assign, dist = _assign(X, centroids)
    history = [float(dist.sum())]
    for _ in range(max_iter):
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, X)
        filled = counts > 0
        centroids[filled] = sums[filled] / counts[filled, None]
        if not filled.all():
            dist = ((X - centroids[assign]) ** 2).sum(axis=1)
            for c in np.flatnonzero(~filled):
                far = int(np.argmax(dist))
                centroids[c] = X[far]
                dist[far] = -1.0
        new_assign, dist = _assign(X, centroids)
        history.append(float(dist.sum()))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    if return_distortions:
        return centroids, assign, history
    return centroids, assign


# --- linear solves --------------------------------------------------------------


def solve_spd(A, B, ridge=0.0) -> np.ndarray:
    """Solve ``(A + ridge*I) X = B`` for symmetric positive-definite ``A + ridge*I``."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatchError("A must be square")
    if B.shape[0] != A.shape[0]:
        raise DimensionMismatchError(f"A is {A.shape}, B has {B.shape[0]} rows")
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    scale = max(1.0, float(np.abs(A).max(initial=0.0)))
    if not np.allclose(A, A.T, rtol=0.0, atol=1e-10 * scale):
        raise ValueError("A must be symmetric")
    M = 0.5 * (A + A.T)
    if ridge:
        M[np.diag_indices_from(M)] += ridge
    hint = "; pass a positive ridge" if ridge == 0 else ""
    try:
        factor = scipy.linalg.cho_factor(M, lower=True)
    except np.linalg.LinAlgError:
        raise SingularMatrixError(f"matrix is not positive definite{hint}") from None
    diag = np.abs(np.diag(factor[0]))
    if diag.size and (diag.min() / diag.max()) ** 2 < _SINGULAR_RCOND:
        raise SingularMatrixError(f"matrix is numerically singular{hint}")
    return scipy.linalg.cho_solve(factor, B)


# --- L-BFGS ------------------------------------------------------------------------


@dataclass(frozen=True)
class LbfgsConfig:
    max_iterations: int = 100
    memory: int = 10
    gradient_tolerance: float = 1e-5
    c1: float = 1e-4
    c2: float = 0.9
    # relative objective decrease below which the run stops early
    ftol: float = 1e-12
    max_line_search: int = 30

    def __post_init__(self):
        if self.max_iterations < 1 or self.memory < 1:
            raise ValueError("max_iterations and memory must be >= 1")
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError("need 0 < c1 < c2 < 1")
        if not self.gradient_tolerance > 0:
            raise ValueError("gradient_tolerance must be positive")


class LbfgsResult(NamedTuple):
    x: np.ndarray
    fun: float
    iterations: int
    status: str  # converged | max_iterations | ftol | line_search_failed
    grad_norm: float


Objective = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


class _Counted:
    def __init__(self, fun):
        self.fun = fun
        self.calls = 0

    def __call__(self, x):
        self.calls += 1
        f, g = self.fun(x)
        f = float(f)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != x.shape:
            raise DimensionMismatchError(f"gradient shape {g.shape} != {x.shape}")
        if not (np.isfinite(f) and np.all(np.isfinite(g))):
            raise NonFiniteError("objective returned a non-finite value or gradient", x)
        return f, g


def _cubic_min(x1, f1, g1, x2, f2, g2, lo, hi):
    d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2)
    d2_sq = d1 * d1 - g1 * g2
    if d2_sq >= 0:
        d2 = np.sqrt(d2_sq)
        if x1 <= x2:
            t = x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2 * d2))
        else:
            t = x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2 * d2))
        if np.isfinite(t):
            return min(max(t, lo), hi)
    return 0.5 * (lo + hi)


def _strong_wolfe(fun, x, f0, g0, d, alpha, cfg):
    """Bracketing + zoom line search (Nocedal & Wright, alg. 3.5/3.6).

    Returns ``(alpha, f, g, ok)``; on failure the lowest point seen is
    returned with ``ok=False`` (alpha 0 when nothing improved).
    """
    gtd0 = float(g0 @ d)
    best = (0.0, f0, g0)

    def probe(a):
        nonlocal best
        f, g = fun(x + a * d)
        if f < best[1]:
            best = (a, f, g)
        return f, g, float(g @ d)

    a_prev, f_prev, gtd_prev = 0.0, f0, gtd0
    bracket = None
    for i in range(cfg.max_line_search):
        f, g, gtd = probe(alpha)
        if f > f0 + cfg.c1 * alpha * gtd0 or (i > 0 and f >= f_prev):
            bracket = (a_prev, f_prev, gtd_prev, alpha, f, gtd)
            break
        if abs(gtd) <= -cfg.c2 * gtd0:
            return alpha, f, g, True
        if gtd >= 0:
            bracket = (alpha, f, gtd, a_prev, f_prev, gtd_prev)
            break
        nxt = _cubic_min(a_prev, f_prev, gtd_prev, alpha, f, gtd,
                         alpha + 0.01 * (alpha - a_prev), 10.0 * alpha)
        a_prev, f_prev, gtd_prev = alpha, f, gtd
        alpha = nxt
    if bracket is None:
        return best[0], best[1], best[2], False

    lo, f_lo, gtd_lo, hi, f_hi, gtd_hi = bracket
    dmax = float(np.abs(d).max())
    for _ in range(cfg.max_line_search):
        if abs(hi - lo) * dmax < 1e-14:
            break
        a_min, a_max = min(lo, hi), max(lo, hi)
        width = a_max - a_min
        a = _cubic_min(lo, f_lo, gtd_lo, hi, f_hi, gtd_hi, a_min, a_max)
        # keep the trial away from the interval ends
        a = min(max(a, a_min + 0.1 * width), a_max - 0.1 * width)
        f, g, gtd = probe(a)
        if f > f0 + cfg.c1 * a * gtd0 or f >= f_lo:
            hi, f_hi, gtd_hi = a, f, gtd
        else:
            if abs(gtd) <= -cfg.c2 * gtd0:
                return a, f, g, True
            if gtd * (hi - lo) >= 0:
                hi, f_hi, gtd_hi = lo, f_lo, gtd_lo
            lo, f_lo, gtd_lo = a, f, gtd
    return best[0], best[1], best[2], False


def lbfgs_minimize(fun: Objective, x0, cfg: LbfgsConfig | None = None) -> LbfgsResult:
    """Minimize ``fun`` (returning value and gradient) with limited-memory BFGS.

    Every accepted step satisfies the Armijo condition, so the returned value
    never exceeds ``fun(x0)``.
    """
    cfg = cfg or LbfgsConfig()
    fun = _Counted(fun)
    x = np.array(x0, dtype=np.float64, copy=True)
    f, g = fun(x)
    gnorm = float(np.linalg.norm(g))
    if gnorm <= cfg.gradient_tolerance:
        return LbfgsResult(x, f, 0, "converged", gnorm)

    s_hist: deque = deque(maxlen=cfg.memory)
    y_hist: deque = deque(maxlen=cfg.memory)
    rho_hist: deque = deque(maxlen=cfg.memory)
    status = "max_iterations"
    it = 0
    while it < cfg.max_iterations:
        # two-loop recursion
        q = -g
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * (s @ q)
            alphas.append(a)
            q = q - a * y
        if s_hist:
            q = q * ((s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1]))
        for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
            b = rho * (y @ q)
            q = q + (a - b) * s
        d = q
        if d @ g >= 0:
            # lost descent direction; restart from steepest descent
            s_hist.clear(), y_hist.clear(), rho_hist.clear()
            d = -g
        step = min(1.0, 1.0 / float(np.abs(g).sum())) if not s_hist else 1.0
        alpha, f_new, g_new, ok = _strong_wolfe(fun, x, f, g, d, step, cfg)
        if alpha == 0.0 or f_new >= f and not ok:
            status = "line_search_failed"
            break
        it += 1
        x_new = x + alpha * d
        s_vec, y_vec = x_new - x, g_new - g
        sy = float(s_vec @ y_vec)
        if sy > 1e-10 * float(y_vec @ y_vec):
            s_hist.append(s_vec)
            y_hist.append(y_vec)
            rho_hist.append(1.0 / sy)
        f_old = f
        x, f, g = x_new, f_new, g_new
        gnorm = float(np.linalg.norm(g))
        if gnorm <= cfg.gradient_tolerance:
            status = "converged"
            break
        if not ok:
            status = "line_search_failed"
            break
        if (f_old - f) <= cfg.ftol * max(abs(f_old), abs(f), 1.0):
            status = "ftol"
            break
    return LbfgsResult(x, f, it, status, gnorm)
