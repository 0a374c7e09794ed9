"""Retrieval metrics: average precision, MAP and precision@R.

A database item is relevant to a query when their label vectors share a class.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DimensionMismatchError


@dataclass
class EvalReport:
    map: float
    r_cutoff: int
    num_queries: int
    per_query_ap: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)


def is_true_neighbor(query_labels, db_labels) -> bool:
    q = np.asarray(query_labels)
    x = np.asarray(db_labels)
    if q.shape != x.shape:
        raise DimensionMismatchError("label vectors differ in length")
    return bool(np.any((q != 0) & (x != 0)))


def _relevance(ranked_ids, query_labels, db_labels):
    ranked = np.asarray(ranked_ids, dtype=np.int64)
    db_labels = np.asarray(db_labels)
    query_labels = np.asarray(query_labels)
    if query_labels.shape[-1] != db_labels.shape[1]:
        raise DimensionMismatchError("query and database label widths differ")
    if ranked.size and (ranked.min() < 0 or ranked.max() >= db_labels.shape[0]):
        bad = ranked[(ranked < 0) | (ranked >= db_labels.shape[0])][0]
        raise KeyError(f"unknown database id {int(bad)}")
    return (db_labels[ranked] != 0) @ (query_labels != 0) > 0


def _window(n_ranked, r_cutoff, strict):
    if r_cutoff is None:
        return n_ranked
    if r_cutoff < 1:
        raise ValueError("r_cutoff must be positive")
    if n_ranked < r_cutoff:
        if strict:
            raise ValueError(f"ranking has {n_ranked} items, fewer than R={r_cutoff}")
        return n_ranked
    return r_cutoff


def average_precision(ranked_ids, query_labels, db_labels, r_cutoff=None, strict=False) -> float:
    """AP over the top-R window; 0 when the window holds no true neighbor.

    ``ranked_ids`` index rows of ``db_labels``. A ranking shorter than
    ``r_cutoff`` is truncated, or rejected when ``strict`` is set.
    """
    ranked = np.asarray(ranked_ids, dtype=np.int64)
    R = _window(ranked.size, r_cutoff, strict)
    rel = _relevance(ranked[:R], query_labels, db_labels)
    hits = int(rel.sum())
    if hits == 0:
        return 0.0
    precision = np.cumsum(rel) / np.arange(1, R + 1)
    return float(precision[rel].sum() / hits)


def precision_at_r(ranked_ids, query_labels, db_labels, r_cutoff) -> float:
    ranked = np.asarray(ranked_ids, dtype=np.int64)[:r_cutoff]
    if ranked.size == 0:
        return 0.0
    return float(_relevance(ranked, query_labels, db_labels).mean())


def mean_average_precision(all_ranked, query_labels, db_labels, r_cutoff=None) -> EvalReport:
    """Mean AP over queries; ``r_cutoff`` defaults to the database size."""
    query_labels = np.atleast_2d(np.asarray(query_labels))
    if len(all_ranked) == 0:
        raise ValueError("need at least one query")
    if len(all_ranked) != query_labels.shape[0]:
        raise DimensionMismatchError("one ranking per query required")
    R = db_labels.shape[0] if r_cutoff is None else r_cutoff
    aps = [
        average_precision(ranked, q, db_labels, R)
        for ranked, q in zip(all_ranked, query_labels)
    ]
    return EvalReport(math.fsum(aps) / len(aps), int(R), len(aps), aps)
