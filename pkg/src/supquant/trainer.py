"""Alternating optimization of the penalized supervised quantization objective.

    psi = sum_n ||y_n - W^T xbar_n||^2 + lam ||W||_F^2
          + gamma sum_n ||xbar_n - P^T x_n||^2
          + mu sum_n (xi_n - eps)^2

where ``xbar_n`` is the reconstruction of point n and ``xi_n`` the sum of
inner products between its selected elements of distinct dictionaries.
Each outer iteration updates W, P, eps, the codebooks and the codes in turn;
every step is exact or monotone so psi never increases.

Step functions take *features*, i.e. vectors after the optional kernel map.
"""

from __future__ import annotations

import csv
import itertools
import logging
import time
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .dataset_io import LabeledDataset, fit_kernel_map, holdout_split, kernel_map
from .errors import DimensionMismatchError, SingularMatrixError
from .numerics import LbfgsConfig, LbfgsResult, lbfgs_minimize, pca_fit, solve_spd
from .quantizer import (
    Codebooks,
    ModelBundle,
    check_codes,
    code_dtype,
    extend_codebooks,
    inter_dict_products,
    pq_train,
    reconstruct_all,
)

logger = logging.getLogger(__name__)

# per-chunk row count for the code search, bounds the (rows, K) score buffers
_B_STEP_CHUNK = 4096
# K**M at or below which unlabeled encoding enumerates every code
EXHAUSTIVE_LIMIT = 4096


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.01
    mu: float = 0.1
    lam: float = 1.0
    r: int = 256
    m: int = 2
    k: int = 256
    outer_iters: int = 30
    rel_tol: float = 1e-4
    learn_transform: bool = True
    # False drops the classification term (W pinned at zero): plain CQ in the PCA space
    use_labels: bool = True
    kernel_anchors: int | None = None
    pq_iters: int = 25
    lbfgs: LbfgsConfig = field(default_factory=LbfgsConfig)
    seed: int = 0

    def __post_init__(self):
        if min(self.gamma, self.mu, self.lam) < 0:
            raise ValueError("gamma, mu and lam must be nonnegative")
        if self.outer_iters < 1:
            raise ValueError("outer_iters must be >= 1")
        if self.r < 1 or self.m < 1 or self.k < 1:
            raise ValueError("r, m and k must be positive")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive")


class ObjectiveTerms(NamedTuple):
    classification: float
    ridge: float
    quantization: float
    penalty: float


@dataclass
class TraceRecord:
    iteration: int
    psi: float
    terms: ObjectiveTerms
    seconds: float


@dataclass
class TrainTrace:
    records: list = field(default_factory=list)

    def append(self, iteration, psi, terms, seconds):
        self.records.append(TraceRecord(iteration, psi, terms, seconds))

    @property
    def psi(self) -> np.ndarray:
        return np.array([r.psi for r in self.records])

    def __len__(self):
        return len(self.records)

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iteration", "psi", "term_classification", "term_ridge",
                        "term_quantization", "term_penalty", "seconds"])
            for r in self.records:
                w.writerow([r.iteration, repr(r.psi), *(repr(t) for t in r.terms),
                            f"{r.seconds:.6f}"])

    @classmethod
    def read_csv(cls, path):
        trace = cls()
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                terms = ObjectiveTerms(
                    float(row["term_classification"]), float(row["term_ridge"]),
                    float(row["term_quantization"]), float(row["term_penalty"]),
                )
                trace.append(int(row["iteration"]), float(row["psi"]), terms,
                             float(row["seconds"]))
        return trace


def _as_labels(labels, n):
    Y = np.asarray(labels, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[0] != n:
        raise DimensionMismatchError(f"labels must be ({n}, C)")
    return Y


def _check_features(model, vectors):
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.d:
        raise DimensionMismatchError(f"features must be (N, {model.d})")
    return X


def objective(model: ModelBundle, codes, vectors, labels):
    """psi and its four terms (classification, ridge, quantization, penalty)."""
    cb = model.codebooks
    X = _check_features(model, vectors)
    codes = check_codes(codes, cb)
    if codes.shape[0] != X.shape[0]:
        raise DimensionMismatchError("one code per feature row required")
    Y = _as_labels(labels, X.shape[0])
    if Y.shape[1] != model.num_classes:
        raise DimensionMismatchError("label width differs from classifier columns")
    recon = reconstruct_all(cb, codes)
    terms = ObjectiveTerms(
        float(((Y - recon @ model.classifier) ** 2).sum()),
        model.lam * float((model.classifier**2).sum()),
        model.gamma * float(((recon - X @ model.transform) ** 2).sum()),
        model.mu * float(((inter_dict_products(cb, codes, recon) - model.epsilon) ** 2).sum()),
    )
    return sum(terms), terms


def update_w(codes, cb: Codebooks, labels, lam) -> np.ndarray:
    """Closed-form ridge regression of the labels on the reconstructions."""
    recon = reconstruct_all(cb, codes)
    Y = _as_labels(labels, recon.shape[0])
    return solve_spd(recon.T @ recon, recon.T @ Y, lam)


def update_p(vectors, codes, cb: Codebooks) -> np.ndarray:
    """Least-squares transform mapping features onto their reconstructions.

    A ridge of ``1e-10 * trace(X^T X) / d`` is added when the Gram matrix
    is singular.
    """
    X = np.asarray(vectors, dtype=np.float64)
    recon = reconstruct_all(cb, codes)
    gram = X.T @ X
    rhs = X.T @ recon
    try:
        return solve_spd(gram, rhs, 0.0)
    except SingularMatrixError:
        ridge = 1e-10 * float(np.trace(gram)) / gram.shape[0]
        if ridge == 0.0:
            return np.zeros((X.shape[1], cb.dim))
        logger.info("P-step: singular feature Gram matrix, using ridge %.3g", ridge)
        return solve_spd(gram, rhs, ridge)


def update_epsilon(codes, cb: Codebooks) -> float:
    codes = check_codes(codes, cb)
    if codes.shape[0] == 0:
        raise ValueError("epsilon is undefined for an empty code matrix")
    return float(inter_dict_products(cb, codes).mean())


def _c_objective(elements, codes, Z, Y, W, gamma, mu, eps):
    """C-dependent part of psi and its gradient w.r.t. the (M, K, r) elements."""
    m_count, k_count, _ = elements.shape
    sel = [elements[m, codes[:, m]] for m in range(m_count)]
    recon = np.sum(sel, axis=0)
    own = np.sum([(s * s).sum(axis=1) for s in sel], axis=0)
    xi = (recon * recon).sum(axis=1) - own
    cls_res = recon @ W - Y
    q_res = recon - Z
    pen_res = xi - eps
    f = (cls_res**2).sum() + gamma * (q_res**2).sum() + mu * (pen_res**2).sum()

    shared = 2.0 * cls_res @ W.T + 2.0 * gamma * q_res
    coef = 4.0 * mu * pen_res
    grad = np.zeros_like(elements)
    for m in range(m_count):
        contrib = shared + coef[:, None] * (recon - sel[m])
        np.add.at(grad[m], codes[:, m], contrib)
    return float(f), grad


def gradient_c(model: ModelBundle, codes, vectors, labels) -> np.ndarray:
    """d psi / d codebooks, shaped like the element tensor."""
    X = _check_features(model, vectors)
    codes = check_codes(codes, model.codebooks)
    Y = _as_labels(labels, X.shape[0])
    _, grad = _c_objective(model.codebooks.elements, codes, X @ model.transform, Y,
                           model.classifier, model.gamma, model.mu, model.epsilon)
    return grad


def update_c(model: ModelBundle, codes, vectors, labels, lbfgs_cfg: LbfgsConfig | None = None):
    """L-BFGS on the codebooks with everything else fixed.

    Returns:
        ``(codebooks, lbfgs_result)``; the input codebooks come back unchanged
        when the starting gradient is already below tolerance.
    """
    X = _check_features(model, vectors)
    codes = check_codes(codes, model.codebooks)
    Y = _as_labels(labels, X.shape[0])
    Z = X @ model.transform
    shape = model.codebooks.elements.shape
    ridge = model.lam * float((model.classifier**2).sum())

    def fun(flat):
        f, g = _c_objective(flat.reshape(shape), codes, Z, Y, model.classifier,
                            model.gamma, model.mu, model.epsilon)
        return f + ridge, g.ravel()

    res = lbfgs_minimize(fun, model.codebooks.elements.ravel(), lbfgs_cfg)
    if res.iterations == 0:
        return model.codebooks, res
    return Codebooks(res.x.reshape(shape)), res


def _sweep(model: ModelBundle, codes, Z, Y):
    """One pass of exact per-dictionary minimization for every row.

    ``Y=None`` drops the classification term. ``codes`` is updated in place.
    """
    cb = model.codebooks
    C, W = cb.elements, model.classifier
    gamma, mu, eps = model.gamma, model.mu, model.epsilon
    norms = (C**2).sum(axis=2)  # (M, K)
    proj = C @ W if Y is not None else None  # (M, K, C)
    changed = 0
    for start in range(0, codes.shape[0], _B_STEP_CHUNK):
        rows = slice(start, start + _B_STEP_CHUNK)
        cc = codes[rows]
        z = Z[rows]
        recon = reconstruct_all(cb, cc)
        own = norms[np.arange(cb.m), cc].sum(axis=1)
        for m in range(cb.m):
            old = cc[:, m].astype(np.int64)
            base = recon - C[m, old]
            base_own = own - norms[m, old]
            cross = base @ C[m].T  # (rows, K)
            # per-row constants are dropped; they do not move the argmin
            score = gamma * (2.0 * (base - z) @ C[m].T + norms[m])
            xi = ((base * base).sum(axis=1) - base_own)[:, None] + 2.0 * cross
            score += mu * (xi - eps) ** 2
            if Y is not None:
                u = Y[rows] - base @ W
                score += (proj[m] ** 2).sum(axis=1) - 2.0 * u @ proj[m].T
            new = np.argmin(score, axis=1)
            changed += int((new != old).sum())
            cc[:, m] = new
            recon = base + C[m, new]
            own = base_own + norms[m, new]
        codes[rows] = cc
    return changed


def update_b(model: ModelBundle, codes, vectors, labels):
    """One coordinate-descent sweep over dictionaries for every point.

    Each dictionary's index is replaced by the exact minimizer of the point's
    own objective with the other indices fixed (smallest index on ties).
    """
    X = _check_features(model, vectors)
    codes = np.array(check_codes(codes, model.codebooks), dtype=code_dtype(model.k))
    Y = None if labels is None else _as_labels(labels, X.shape[0])
    _sweep(model, codes, X @ model.transform, Y)
    return codes


def _encode_exhaustive(model: ModelBundle, Z):
    cb = model.codebooks
    grid = np.array(list(itertools.product(range(cb.k), repeat=cb.m)), dtype=np.int64)
    recon = reconstruct_all(cb, grid)
    xi = inter_dict_products(cb, grid, recon)
    best = np.empty(Z.shape[0], dtype=np.int64)
    rn = (recon**2).sum(axis=1)
    pen = model.mu * (xi - model.epsilon) ** 2
    for start in range(0, Z.shape[0], _B_STEP_CHUNK):
        z = Z[start : start + _B_STEP_CHUNK]
        score = model.gamma * (rn[None, :] - 2.0 * z @ recon.T) + pen[None, :]
        best[start : start + _B_STEP_CHUNK] = np.argmin(score, axis=1)
    return grid[best].astype(code_dtype(cb.k))


def encode_unlabeled(model: ModelBundle, vectors, max_sweeps=10, exhaustive_limit=EXHAUSTIVE_LIMIT):
    """Encode raw vectors without labels by minimizing the quantization and penalty terms.

    Small code spaces (K**M <= ``exhaustive_limit``) are searched exhaustively.
    Otherwise codes start from a greedy residual assignment and are refined
    by coordinate-descent sweeps until no index changes.
    """
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != model.input_dim:
        raise DimensionMismatchError(f"vectors have dim {X.shape[1]}, model expects {model.input_dim}")
    if model.kernel is not None and X.shape[0]:
        X = kernel_map(X, model.kernel)
    Z = X @ model.transform
    cb = model.codebooks
    if X.shape[0] == 0:
        return np.zeros((0, cb.m), dtype=code_dtype(cb.k))
    if cb.k**cb.m <= exhaustive_limit:
        return _encode_exhaustive(model, Z)
    codes = np.empty((Z.shape[0], cb.m), dtype=code_dtype(cb.k))
    residual = Z.copy()
    norms = (cb.elements**2).sum(axis=2)
    for m in range(cb.m):
        pick = np.argmin(norms[m] - 2.0 * residual @ cb.elements[m].T, axis=1)
        codes[:, m] = pick
        residual -= cb.elements[m, pick]
    for _ in range(max_sweeps):
        if _sweep(model, codes, Z, None) == 0:
            break
    return codes


def train(ds: LabeledDataset, cfg: TrainConfig, warm_start=None, callback=None):
    """Fit a supervised composite quantizer.

    Args:
        ds: training set (raw vectors; the kernel map is fitted here when
            ``cfg.kernel_anchors`` is set).
        cfg: hyperparameters.
        warm_start: optional ``(model, codes)`` from a run with fewer
            dictionaries; its transform, codebooks and codes seed this run
            via zero dictionaries and random extra code columns.
        callback: called as ``callback(iteration, model, codes, psi)`` after
            every outer iteration.

    Returns:
        ``(model, codes, trace)``; trace entry 0 is the initialization.
    """
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    X = np.asarray(ds.vectors, dtype=np.float64)
    Y = ds.labels.astype(np.float64)
    kernel = None
    if cfg.kernel_anchors:
        kernel = fit_kernel_map(X, cfg.kernel_anchors, seeds[0])
        X = kernel_map(X, kernel)
    if cfg.r > X.shape[1]:
        raise ValueError(f"r={cfg.r} exceeds feature dimension {X.shape[1]}")

    t_start = time.perf_counter()
    if warm_start is not None:
        prev, prev_codes = warm_start
        if prev.r != cfg.r or prev.k != cfg.k or prev.d != X.shape[1]:
            raise DimensionMismatchError("warm-start model has incompatible r, K or d")
        P = prev.transform
        cb, codes = extend_codebooks(prev.codebooks, prev_codes, cfg.m, seeds[2])
    else:
        P = pca_fit(X, cfg.r).components
        cb, codes = pq_train(X @ P, cfg.m, cfg.k, seeds[1], max_iter=cfg.pq_iters)
    W = np.zeros((cfg.r, ds.num_classes))
    model = ModelBundle(P, cb, update_epsilon(codes, cb), W, cfg.lam, cfg.gamma, cfg.mu, kernel)

    trace = TrainTrace()
    psi, terms = objective(model, codes, X, Y)
    trace.append(0, psi, terms, time.perf_counter() - t_start)
    logger.info("init psi=%.6g", psi)

    for it in range(1, cfg.outer_iters + 1):
        if cfg.use_labels:
            model = model.replace(classifier=update_w(codes, model.codebooks, Y, cfg.lam))
        if cfg.learn_transform:
            model = model.replace(transform=update_p(X, codes, model.codebooks))
        model = model.replace(epsilon=update_epsilon(codes, model.codebooks))
        new_cb, res = update_c(model, codes, X, Y, cfg.lbfgs)
        model = model.replace(codebooks=new_cb)
        codes = update_b(model, codes, X, Y)

        prev = psi
        psi, terms = objective(model, codes, X, Y)
        trace.append(it, psi, terms, time.perf_counter() - t_start)
        logger.info("iter %d psi=%.6g (C-step %d its, %s)", it, psi, res.iterations, res.status)
        if callback is not None:
            callback(it, model, codes, psi)
        if prev - psi < cfg.rel_tol * max(abs(prev), np.finfo(float).tiny):
            break
    return model, codes, trace


@dataclass
class GridResult:
    best_gamma: float
    best_mu: float
    best_map: float
    # (gamma, mu, map) in grid order
    entries: list

    def to_dict(self):
        return {
            "best": {"gamma": self.best_gamma, "mu": self.best_mu, "map": self.best_map},
            "grid": [{"gamma": g, "mu": m, "map": v} for g, m, v in self.entries],
        }


def validation_map(model: ModelBundle, db_codes, db_labels, queries, query_labels, r_cutoff=None):
    """MAP of lookup-scan rankings for ``queries`` against an encoded database."""
    from .evaluation import mean_average_precision
    from .search import search

    results, _ = search(model, db_codes, queries, top_k=db_codes.shape[0])
    report = mean_average_precision([r.ids for r in results], query_labels, db_labels, r_cutoff)
    return report.map


def validate_grid(ds: LabeledDataset, grid, base_cfg: TrainConfig, validation_fraction=0.1,
                  seed=0, r_cutoff=None) -> GridResult:
    """Pick (gamma, mu) by MAP of held-out training points used as queries.

    One model is trained per grid pair on the remaining points, whose
    training codes form the search database. Ties go to the first pair.
    """
    grid = [(float(g), float(m)) for g, m in grid]
    if not grid:
        raise ValueError("parameter grid is empty")
    train_part, held = holdout_split(ds, validation_fraction, seed)
    entries = []
    for gamma, mu in grid:
        cfg = replace(base_cfg, gamma=gamma, mu=mu)
        model, codes, _ = train(train_part, cfg)
        score = validation_map(model, codes, train_part.labels, held.vectors, held.labels, r_cutoff)
        logger.info("grid gamma=%g mu=%g map=%.4f", gamma, mu, score)
        entries.append((gamma, mu, score))
    best = max(range(len(entries)), key=lambda i: (entries[i][2], -i))
    g, m, v = entries[best]
    return GridResult(g, m, v, entries)


def product_grid(gammas, mus):
    return [(g, m) for g in gammas for m in mus]
