"""Query-time search: transform, per-query distance tables, linear code scan."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.stats import kendalltau

from .dataset_io import kernel_map
from .errors import DimensionMismatchError
from .quantizer import Codebooks, ModelBundle, check_codes, inter_dict_product, inter_dict_products


@dataclass(frozen=True)
class DistanceTable:
    entries: np.ndarray  # (M, K): ||q' - c_mk||^2
    query_norm_term: float  # (M - 1) * ||q'||^2

    @property
    def m(self):
        return self.entries.shape[0]

    @property
    def k(self):
        return self.entries.shape[1]


class SearchResult(NamedTuple):
    ids: np.ndarray
    scores: np.ndarray


class LookupCounter:
    """Counts table lookups per database point during a scan."""

    def __init__(self, n):
        self.per_point = np.zeros(n, dtype=np.int64)

    @property
    def total(self):
        return int(self.per_point.sum())


def transform_query(model: ModelBundle, q) -> np.ndarray:
    """Map raw query vector(s) into the quantization space (kernel map first, if any)."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != model.input_dim:
        raise DimensionMismatchError(f"query dim {q.shape[-1]}, model expects {model.input_dim}")
    if model.kernel is not None:
        q = kernel_map(q, model.kernel)
    return q @ model.transform


def build_table(cb: Codebooks, q_prime) -> DistanceTable:
    q_prime = np.asarray(q_prime, dtype=np.float64)
    if q_prime.shape != (cb.dim,):
        raise DimensionMismatchError(f"q' has shape {q_prime.shape}, codebook dim is {cb.dim}")
    entries = ((cb.elements - q_prime) ** 2).sum(axis=2)
    return DistanceTable(entries, (cb.m - 1) * float(q_prime @ q_prime))


def surrogate_scores(table: DistanceTable, codes, counter: LookupCounter | None = None):
    """Sum over dictionaries of the looked-up element distances, one score per code."""
    codes = np.asarray(codes)
    if codes.ndim != 2 or codes.shape[1] != table.m:
        raise DimensionMismatchError(f"codes must be (N, {table.m})")
    scores = np.zeros(codes.shape[0])
    for m in range(table.m):
        scores += table.entries[m, codes[:, m]]
        if counter is not None:
            counter.per_point += 1
    return scores


def top_k_smallest(scores, ids, top_k) -> SearchResult:
    """The ``top_k`` smallest scores, ascending, ties broken by smaller id."""
    n = scores.shape[0]
    top_k = min(top_k, n)
    if top_k < n:
        kth = np.partition(scores, top_k - 1)[top_k - 1]
        cand = np.flatnonzero(scores <= kth)
    else:
        cand = np.arange(n)
    order = cand[np.lexsort((ids[cand], scores[cand]))][:top_k]
    return SearchResult(ids[order], scores[order])


def scan(
    table: DistanceTable,
    codes,
    top_k,
    ids=None,
    *,
    cb: Codebooks | None = None,
    exact=False,
    counter: LookupCounter | None = None,
) -> SearchResult:
    """Linear scan over the code matrix.

    Scores are the lookup sums by default. With ``exact=True`` (requires
    ``cb``) the query-norm term and each point's own inter-dictionary product
    are added, giving the true squared distance to the reconstruction.
    A ``top_k`` larger than the database returns every point.
    """
    if top_k < 1:
        raise ValueError("top_k must be at least 1")
    codes = np.asarray(codes)
    scores = surrogate_scores(table, codes, counter)
    if exact:
        if cb is None:
            raise ValueError("exact scores need the codebooks")
        scores = scores - table.query_norm_term + inter_dict_products(cb, codes)
    ids = np.arange(codes.shape[0], dtype=np.int64) if ids is None else np.asarray(ids)
    return top_k_smallest(scores, ids, top_k)


def exact_distance(table: DistanceTable, cb: Codebooks, code) -> float:
    """Squared distance from q' to the reconstruction of ``code`` via the table."""
    code = check_codes(code, cb)
    lookups = float(table.entries[np.arange(cb.m), code].sum())
    return lookups - table.query_norm_term + inter_dict_product(cb, code)


def ranking_agreement(table: DistanceTable, cb: Codebooks, codes) -> float:
    """Kendall tau between lookup-sum scores and exact distances (diagnostic)."""
    surrogate = surrogate_scores(table, codes)
    exact = surrogate - table.query_norm_term + inter_dict_products(cb, codes)
    if surrogate.size < 2:
        return 1.0
    tau = kendalltau(surrogate, exact).statistic
    return 1.0 if np.isnan(tau) else float(tau)


def search(model: ModelBundle, codes, queries, top_k, ids=None, exact=False):
    """Search every query row against an encoded database.

    Returns:
        ``(results, timing)`` where ``timing`` holds total seconds spent in
        query preprocessing (transform + table build) and in scanning.
    """
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    codes = check_codes(codes, model.codebooks)
    results = []
    prep = scan_time = 0.0
    for q in queries:
        t0 = time.perf_counter()
        table = build_table(model.codebooks, transform_query(model, q))
        t1 = time.perf_counter()
        results.append(scan(table, codes, top_k, ids, cb=model.codebooks, exact=exact))
        t2 = time.perf_counter()
        prep += t1 - t0
        scan_time += t2 - t1
    return results, {"preprocess_seconds": prep, "scan_seconds": scan_time}
