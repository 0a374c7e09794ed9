"""Reading vector/label files, query splits and the anchor kernel map."""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DimensionMismatchError, FormatError, LabelRangeError

SIGMA_FLOOR = 1e-12


@dataclass
class LabeledDataset:
    """Feature vectors with binary (possibly multi-label) class vectors.

    Attributes:
        vectors: (N, d) feature matrix.
        labels: (N, C) binary matrix, at least one 1 per row.
        ids: (N,) stable integer identifiers; defaults to ``arange(N)``.
    """

    vectors: np.ndarray
    labels: np.ndarray
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors)
        if self.vectors.ndim != 2:
            raise DimensionMismatchError("vectors must be a 2-D matrix")
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 2:
            raise DimensionMismatchError("labels must be a 2-D matrix")
        if self.vectors.shape[0] != self.labels.shape[0]:
            raise DimensionMismatchError(
                f"{self.vectors.shape[0]} vectors but {self.labels.shape[0]} label rows"
            )
        if self.ids is None:
            self.ids = np.arange(len(self), dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.shape != (len(self),):
            raise DimensionMismatchError("ids must have one entry per row")
        if self.vectors.shape[1] < 1:
            raise ValueError("d must be at least 1")
        if self.labels.shape[1] < 2:
            raise ValueError("need at least 2 classes")
        if np.any((self.labels != 0) & (self.labels != 1)):
            raise ValueError("labels must be binary")
        if len(self) and not np.all(self.labels.any(axis=1)):
            bad = int(np.flatnonzero(~self.labels.any(axis=1))[0])
            raise ValueError(f"row {bad} has no class label")

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]

    @property
    def num_classes(self):
        return self.labels.shape[1]

    def subset(self, rows) -> "LabeledDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return LabeledDataset(self.vectors[rows], self.labels[rows], self.ids[rows])


@dataclass(frozen=True)
class KernelMap:
    """Gaussian RBF features against a fixed anchor set."""

    anchors: np.ndarray
    sigma: float

    def __post_init__(self):
        anchors = np.asarray(self.anchors, dtype=np.float64)
        if anchors.ndim != 2 or anchors.shape[0] < 1:
            raise ValueError("need at least one anchor")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        object.__setattr__(self, "anchors", anchors)

    @property
    def h(self):
        return self.anchors.shape[0]

    @property
    def input_dim(self):
        return self.anchors.shape[1]


# --- file formats ---------------------------------------------------------


def _infer_format(path):
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".fvecs":
        return "fvecs"
    if ext == ".ivecs":
        return "ivecs"
    if ext in (".csv", ".txt"):
        return "csv"
    raise ValueError(f"cannot infer vector format from {path!r}; pass format=")


def _read_xvecs(path, dtype):
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0:
        return np.zeros((0, 0), dtype=dtype)
    if raw.size < 4:
        raise FormatError("truncated dimension field", offset=0)
    dim = int(raw[:4].view("<i4")[0])
    if dim < 0:
        raise FormatError(f"negative dimension {dim}", offset=0)
    rec = 4 * (dim + 1)
    if raw.size % rec == 0:
        words = raw.view("<i4").reshape(-1, dim + 1)
        if np.all(words[:, 0] == dim):
            return words[:, 1:].view(dtype).astype(dtype, copy=True)
    # slow path: walk the records to report the first bad one
    offset = 0
    while offset < raw.size:
        if raw.size - offset < 4:
            raise FormatError("truncated dimension field", offset=offset)
        this_dim = int(raw[offset : offset + 4].view("<i4")[0])
        if this_dim != dim:
            raise DimensionMismatchError(
                f"record at byte offset {offset} declares dim {this_dim}, "
                f"expected {dim}"
            )
        if raw.size - offset < rec:
            raise FormatError(
                f"record needs {rec} bytes, only {raw.size - offset} remain",
                offset=offset,
            )
        offset += rec
    raise AssertionError("unreachable")  # pragma: no cover


def _write_xvecs(path, matrix, dtype):
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise DimensionMismatchError("expected a 2-D matrix")
    n, d = matrix.shape
    out = np.empty((n, d + 1), dtype="<i4")
    out[:, 0] = d
    out[:, 1:] = np.ascontiguousarray(matrix, dtype=dtype).view("<i4")
    with open(path, "wb") as f:
        if n:
            f.write(out.tobytes())


def read_vectors(path, format=None) -> np.ndarray:
    """Read an (N, d) matrix from an fvecs, ivecs or CSV file.

    fvecs payloads come back as float32 so a write/read round trip is
    bit-exact; CSV is parsed as float64. An empty file gives a 0-row matrix.
    """
    fmt = format or _infer_format(path)
    if fmt == "fvecs":
        return _read_xvecs(path, np.dtype("<f4"))
    if fmt == "ivecs":
        return _read_xvecs(path, np.dtype("<i4"))
    if fmt == "csv":
        with open(path) as f:
            rows = [line.strip() for line in f]
        rows = [r for r in rows if r]
        if not rows:
            return np.zeros((0, 0))
        out = []
        for lineno, row in enumerate(rows, 1):
            try:
                out.append([float(v) for v in row.split(",")])
            except ValueError as exc:
                raise FormatError(f"line {lineno}: {exc}") from None
            if len(out[-1]) != len(out[0]):
                raise DimensionMismatchError(
                    f"line {lineno} has {len(out[-1])} columns, expected {len(out[0])}"
                )
        return np.array(out, dtype=np.float64)
    raise ValueError(f"unknown vector format {fmt!r}")


def write_vectors(path, matrix, format=None):
    fmt = format or _infer_format(path)
    if fmt == "fvecs":
        _write_xvecs(path, matrix, np.dtype("<f4"))
    elif fmt == "ivecs":
        _write_xvecs(path, matrix, np.dtype("<i4"))
    elif fmt == "csv":
        np.savetxt(path, np.asarray(matrix, dtype=np.float64), delimiter=",", fmt="%.17g")
    else:
        raise ValueError(f"unknown vector format {fmt!r}")


def read_labels(path, num_classes=None) -> np.ndarray:
    """Parse a text label file: one line per point, comma-separated class ids.

    When ``num_classes`` is None it is inferred as ``max id + 1`` (at least 2).
    """
    with open(path, encoding="utf-8") as f:
        lines = f.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    parsed = []
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            raise ValueError(f"line {lineno}: empty label line")
        try:
            ids = [int(tok) for tok in line.split(",")]
        except ValueError:
            raise FormatError(f"line {lineno}: non-integer class id in {line!r}") from None
        parsed.append(ids)
    if num_classes is None:
        num_classes = max(2, max((max(p) for p in parsed), default=0) + 1)
    labels = np.zeros((len(parsed), num_classes), dtype=np.uint8)
    for row, ids in enumerate(parsed):
        for c in ids:
            if not 0 <= c < num_classes:
                raise LabelRangeError(
                    f"class id {c} outside [0, {num_classes})", line=row + 1
                )
            labels[row, c] = 1
    return labels


def write_labels(path, labels):
    labels = np.asarray(labels)
    with open(path, "w", encoding="utf-8") as f:
        for row in labels:
            f.write(",".join(str(c) for c in np.flatnonzero(row)) + "\n")


# --- kernel representation -----------------------------------------------


def sample_anchors(vectors, h, seed) -> np.ndarray:
    """Pick ``h`` distinct rows uniformly without replacement."""
    vectors = np.asarray(vectors)
    n = vectors.shape[0]
    if h < 1:
        raise ValueError("h must be positive")
    if h > n:
        raise ValueError(f"cannot sample {h} anchors from {n} points")
    rng = np.random.default_rng(seed)
    rows = rng.choice(n, size=h, replace=False)
    return np.array(vectors[rows], dtype=np.float64)


def compute_sigma(vectors, anchors, chunk=2048) -> float:
    """Mean over points of the Euclidean distance to the nearest anchor.

    Falls back to ``SIGMA_FLOOR`` (with a warning) when every point
    coincides with an anchor.
    """
    x = np.asarray(vectors, dtype=np.float64)
    a = np.asarray(anchors, dtype=np.float64)
    if x.size == 0 or a.size == 0:
        raise ValueError("compute_sigma needs nonempty vectors and anchors")
    if x.shape[1] != a.shape[1]:
        raise DimensionMismatchError("vectors and anchors differ in dimension")
    total = 0.0
    for start in range(0, x.shape[0], chunk):
        block = x[start : start + chunk]
        total += float(cdist(block, a).min(axis=1).sum())
    sigma = total / x.shape[0]
    if sigma <= 0.0:
        warnings.warn("all points coincide with anchors; sigma floored", RuntimeWarning)
        sigma = SIGMA_FLOOR
    return sigma


def kernel_map(vectors, km: KernelMap) -> np.ndarray:
    """exp(-||x - a_j||^2 / (2 sigma^2)) for every point/anchor pair."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim == 1:
        return kernel_map(x[None, :], km)[0]
    if x.shape[1] != km.input_dim:
        raise DimensionMismatchError(
            f"vectors have dim {x.shape[1]}, anchors have dim {km.input_dim}"
        )
    d2 = cdist(x, km.anchors, "sqeuclidean")
    return np.exp(-d2 / (2.0 * km.sigma**2))


def fit_kernel_map(vectors, h, seed) -> KernelMap:
    anchors = sample_anchors(vectors, h, seed)
    return KernelMap(anchors, compute_sigma(vectors, anchors))


# --- splits ---------------------------------------------------------------


def primary_class(labels) -> np.ndarray:
    """Lowest class id set in each row."""
    labels = np.asarray(labels)
    return np.argmax(labels != 0, axis=1)


def split_dataset(ds: LabeledDataset, queries_per_class, seed):
    """Sample ``queries_per_class`` queries per class; the rest is training data.

    A multi-label point counts toward its lowest class id only.
    """
    if queries_per_class < 0:
        raise ValueError("queries_per_class must be nonnegative")
    if queries_per_class == 0:
        return ds, ds.subset(np.zeros(0, dtype=np.int64))
    rng = np.random.default_rng(seed)
    owner = primary_class(ds.labels)
    picked = []
    for c in range(ds.num_classes):
        members = np.flatnonzero(owner == c)
        if members.size <= queries_per_class:
            raise ValueError(
                f"class {c} has {members.size} members, need more than {queries_per_class}"
            )
        picked.append(rng.choice(members, size=queries_per_class, replace=False))
    query_rows = np.sort(np.concatenate(picked))
    mask = np.ones(len(ds), dtype=bool)
    mask[query_rows] = False
    return ds.subset(np.flatnonzero(mask)), ds.subset(query_rows)


def holdout_split(ds: LabeledDataset, fraction, seed):
    """Random (train, held-out) split with ``round(fraction * N)`` held out."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    n_hold = max(1, int(round(fraction * len(ds))))
    if n_hold >= len(ds):
        raise ValueError("held-out set would consume the whole dataset")
    rng = np.random.default_rng(seed)
    held = np.sort(rng.choice(len(ds), size=n_hold, replace=False))
    mask = np.ones(len(ds), dtype=bool)
    mask[held] = False
    return ds.subset(np.flatnonzero(mask)), ds.subset(held)


def make_blobs(
    n_per_class,
    num_classes,
    dim,
    *,
    spread=1.0,
    separation=4.0,
    noise_dims=0,
    noise_scale=1.0,
    seed=0,
) -> LabeledDataset:
    """Isotropic Gaussian class blobs, optionally padded with pure-noise dimensions.

    Class centers are drawn from N(0, separation^2) in the first ``dim``
    coordinates; ``noise_dims`` extra coordinates carry N(0, noise_scale^2)
    noise independent of the class. Rows are shuffled.
    """
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=separation, size=(num_classes, dim))
    y = np.repeat(np.arange(num_classes), n_per_class)
    x = centers[y] + rng.normal(scale=spread, size=(y.size, dim))
    if noise_dims:
        x = np.hstack([x, rng.normal(scale=noise_scale, size=(y.size, noise_dims))])
    order = rng.permutation(y.size)
    labels = np.zeros((y.size, num_classes), dtype=np.uint8)
    labels[np.arange(y.size), y[order]] = 1
    return LabeledDataset(x[order], labels)
