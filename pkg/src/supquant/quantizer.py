"""Composite quantization primitives and the model container.

A point is encoded by one index per dictionary and approximated by the sum of
the selected elements. Codebooks are stored as an (M, K, r) tensor, codes as
an (N, M) integer matrix (uint8 whenever K <= 256).
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .dataset_io import KernelMap
from .errors import DimensionMismatchError, FormatError
from .numerics import kmeans


@dataclass(frozen=True)
class Codebooks:
    elements: np.ndarray  # (M, K, r)

    def __post_init__(self):
        el = np.asarray(self.elements, dtype=np.float64)
        if el.ndim != 3:
            raise DimensionMismatchError("codebook elements must be an (M, K, r) tensor")
        if not np.all(np.isfinite(el)):
            raise ValueError("codebook elements must be finite")
        object.__setattr__(self, "elements", el)

    @property
    def m(self):
        return self.elements.shape[0]

    @property
    def k(self):
        return self.elements.shape[1]

    @property
    def dim(self):
        return self.elements.shape[2]


def code_dtype(k):
    if k <= 256:
        return np.uint8
    if k <= 65536:
        return np.uint16
    return np.int64


def check_codes(codes, cb: Codebooks) -> np.ndarray:
    """Validate an (N, M) code matrix (or a single M-code) against ``cb``."""
    codes = np.asarray(codes)
    if codes.shape[-1] != cb.m:
        raise DimensionMismatchError(f"codes have {codes.shape[-1]} columns, expected M={cb.m}")
    if codes.size and (codes.min() < 0 or codes.max() >= cb.k):
        raise IndexError(f"code index outside [0, {cb.k})")
    return codes


def reconstruct(cb: Codebooks, code) -> np.ndarray:
    code = check_codes(code, cb)
    return cb.elements[np.arange(cb.m), code].sum(axis=0)


def reconstruct_all(cb: Codebooks, codes) -> np.ndarray:
    """(N, r) matrix of reconstructions, one row per code."""
    codes = check_codes(codes, cb)
    out = np.zeros((codes.shape[0], cb.dim))
    for m in range(cb.m):
        out += cb.elements[m, codes[:, m]]
    return out


def inter_dict_product(cb: Codebooks, code) -> float:
    """Sum of inner products between selected elements over ordered pairs i != j."""
    sel = cb.elements[np.arange(cb.m), check_codes(code, cb)]
    gram = sel @ sel.T
    return float(gram.sum() - np.trace(gram))


def inter_dict_products(cb: Codebooks, codes, recon=None) -> np.ndarray:
    """Vectorized inter_dict_product: ||sum||^2 - sum of squared element norms."""
    codes = check_codes(codes, cb)
    if recon is None:
        recon = reconstruct_all(cb, codes)
    norms = (cb.elements**2).sum(axis=2)
    own = np.zeros(codes.shape[0])
    for m in range(cb.m):
        own += norms[m, codes[:, m]]
    return (recon**2).sum(axis=1) - own


def quantization_error(cb: Codebooks, codes, Z) -> float:
    Z = np.asarray(Z, dtype=np.float64)
    codes = check_codes(codes, cb)
    if Z.shape != (codes.shape[0], cb.dim):
        raise DimensionMismatchError(f"Z is {Z.shape}, expected {(codes.shape[0], cb.dim)}")
    return float(((Z - reconstruct_all(cb, codes)) ** 2).sum())


def pq_train(Z, m, k, seed=0, max_iter=25):
    """Product quantization in the composite layout.

    The r coordinates are split into ``m`` contiguous chunks (after zero
    padding when r is not a multiple of m); each chunk gets its own k-means.
    Element (i, j) is chunk i's centroid j placed at chunk i's coordinates,
    zero elsewhere, so the selected elements of any code never overlap.
    """
    Z = np.asarray(Z, dtype=np.float64)
    n, r = Z.shape
    if m < 1:
        raise ValueError("m must be positive")
    if k > n:
        raise ValueError(f"K={k} exceeds the number of points N={n}")
    sub = -(-r // m)
    padded = np.zeros((n, sub * m))
    padded[:, :r] = Z
    elements = np.zeros((m, k, sub * m))
    codes = np.empty((n, m), dtype=code_dtype(k))
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    seeds = seed.spawn(m)
    for i in range(m):
        lo, hi = i * sub, (i + 1) * sub
        centroids, assign = kmeans(padded[:, lo:hi], k, max_iter=max_iter, seed=seeds[i])
        elements[i, :, lo:hi] = centroids
        codes[:, i] = assign
    return Codebooks(elements[:, :, :r]), codes


def extend_codebooks(cb: Codebooks, codes, new_m, seed=0):
    """Append all-zero dictionaries and uniformly random code columns."""
    codes = check_codes(codes, cb)
    if new_m <= cb.m:
        raise ValueError(f"new_m={new_m} must exceed current M={cb.m}")
    extra = new_m - cb.m
    elements = np.concatenate([cb.elements, np.zeros((extra, cb.k, cb.dim))], axis=0)
    rng = np.random.default_rng(seed)
    new_cols = rng.integers(0, cb.k, size=(codes.shape[0], extra))
    out = np.empty((codes.shape[0], new_m), dtype=code_dtype(cb.k))
    out[:, : cb.m] = codes
    out[:, cb.m :] = new_cols
    return Codebooks(elements), out


# --- model bundle ---------------------------------------------------------------


@dataclass(frozen=True)
class ModelBundle:
    """Everything needed to encode and search: P, codebooks, epsilon, W, hyperparameters.

    ``transform`` maps (kernel-mapped, when ``kernel`` is set) features of
    dimension d into the r-dimensional quantization space as ``x @ transform``.
    """

    transform: np.ndarray  # (d, r)
    codebooks: Codebooks
    epsilon: float
    classifier: np.ndarray  # (r, C)
    lam: float = 1.0
    gamma: float = 1.0
    mu: float = 1.0
    kernel: KernelMap | None = None

    def __post_init__(self):
        P = np.asarray(self.transform, dtype=np.float64)
        W = np.asarray(self.classifier, dtype=np.float64)
        object.__setattr__(self, "transform", P)
        object.__setattr__(self, "classifier", W)
        object.__setattr__(self, "epsilon", float(self.epsilon))
        if P.ndim != 2 or W.ndim != 2:
            raise DimensionMismatchError("transform and classifier must be matrices")
        if not P.shape[1] == self.codebooks.dim == W.shape[0]:
            raise DimensionMismatchError(
                f"transform cols {P.shape[1]}, codebook dim {self.codebooks.dim}, "
                f"classifier rows {W.shape[0]} must agree"
            )
        if self.kernel is not None and self.kernel.h != P.shape[0]:
            raise DimensionMismatchError("kernel anchor count must equal transform rows")

    @property
    def d(self):
        return self.transform.shape[0]

    @property
    def r(self):
        return self.transform.shape[1]

    @property
    def num_classes(self):
        return self.classifier.shape[1]

    @property
    def m(self):
        return self.codebooks.m

    @property
    def k(self):
        return self.codebooks.k

    @property
    def input_dim(self):
        """Dimension of raw vectors accepted by this model."""
        return self.kernel.input_dim if self.kernel is not None else self.d

    def replace(self, **changes) -> "ModelBundle":
        fields = dict(
            transform=self.transform,
            codebooks=self.codebooks,
            epsilon=self.epsilon,
            classifier=self.classifier,
            lam=self.lam,
            gamma=self.gamma,
            mu=self.mu,
            kernel=self.kernel,
        )
        fields.update(changes)
        return ModelBundle(**fields)


MODEL_MAGIC = b"SQCQ"
MODEL_VERSION = 1
_HEADER = struct.Struct("<4sIIIIII4d")
_KERNEL_HEADER = struct.Struct("<IId")


def model_to_bytes(model: ModelBundle) -> bytes:
    parts = [
        _HEADER.pack(
            MODEL_MAGIC, MODEL_VERSION, model.d, model.r, model.num_classes,
            model.m, model.k, model.epsilon, model.lam, model.gamma, model.mu,
        ),
        model.transform.astype("<f8").tobytes(),
        model.classifier.astype("<f8").tobytes(),
        model.codebooks.elements.astype("<f8").tobytes(),
    ]
    if model.kernel is None:
        parts.append(b"\x00")
    else:
        km = model.kernel
        parts.append(b"\x01")
        parts.append(_KERNEL_HEADER.pack(km.h, km.input_dim, km.sigma))
        parts.append(km.anchors.astype("<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def model_from_bytes(buf: bytes) -> ModelBundle:
    if len(buf) < _HEADER.size:
        raise FormatError("file shorter than the model header", offset=len(buf))
    magic, version, d, r, c, m, k, eps, lam, gamma, mu = _HEADER.unpack_from(buf, 0)
    if magic != MODEL_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model version {version}", offset=4)
    pos = _HEADER.size

    def take(count, what):
        nonlocal pos
        nbytes = 8 * count
        if pos + nbytes > len(buf):
            raise FormatError(f"truncated while reading {what}", offset=pos)
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64)
        pos += nbytes
        return arr

    P = take(d * r, "transform").reshape(d, r)
    W = take(r * c, "classifier").reshape(r, c)
    elements = take(m * k * r, "codebooks").reshape(m, k, r)
    if pos + 1 > len(buf):
        raise FormatError("truncated before kernel flag", offset=pos)
    flag = buf[pos]
    pos += 1
    kernel = None
    if flag == 1:
        if pos + _KERNEL_HEADER.size > len(buf):
            raise FormatError("truncated kernel header", offset=pos)
        h, in_dim, sigma = _KERNEL_HEADER.unpack_from(buf, pos)
        pos += _KERNEL_HEADER.size
        anchors = take(h * in_dim, "anchors").reshape(h, in_dim)
        kernel = KernelMap(anchors, sigma)
    elif flag != 0:
        raise FormatError(f"bad kernel flag {flag}", offset=pos - 1)
    if pos + 4 != len(buf):
        raise FormatError(
            f"expected {pos + 4} bytes including checksum, found {len(buf)}", offset=pos
        )
    (crc,) = struct.unpack_from("<I", buf, pos)
    if crc != zlib.crc32(buf[:pos]):
        raise FormatError("checksum mismatch", offset=pos)
    return ModelBundle(P, Codebooks(elements), eps, W, lam, gamma, mu, kernel)


def save_model(model: ModelBundle, path):
    with open(path, "wb") as f:
        f.write(model_to_bytes(model))


def load_model(path) -> ModelBundle:
    with open(path, "rb") as f:
        return model_from_bytes(f.read())


# --- codes file -------------------------------------------------------------------

CODES_MAGIC = b"SQCB"
_CODES_HEADER = struct.Struct("<4sIII")


def codes_to_bytes(codes, k) -> bytes:
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise DimensionMismatchError("codes must be an (N, M) matrix")
    n, m = codes.shape
    dtype = np.dtype(code_dtype(k)).newbyteorder("<")
    return _CODES_HEADER.pack(CODES_MAGIC, n, m, k) + codes.astype(dtype).tobytes()


def codes_from_bytes(buf: bytes):
    """Returns ``(codes, k)``."""
    if len(buf) < _CODES_HEADER.size:
        raise FormatError("file shorter than the codes header", offset=len(buf))
    magic, n, m, k = _CODES_HEADER.unpack_from(buf, 0)
    if magic != CODES_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    dtype = np.dtype(code_dtype(k)).newbyteorder("<")
    expected = _CODES_HEADER.size + n * m * dtype.itemsize
    if len(buf) != expected:
        raise FormatError(f"expected {expected} bytes, found {len(buf)}", offset=_CODES_HEADER.size)
    codes = np.frombuffer(buf, dtype=dtype, offset=_CODES_HEADER.size).reshape(n, m)
    if codes.size and codes.max() >= k:
        raise FormatError("code index exceeds K")
    return codes.astype(code_dtype(k)), k


def save_codes(codes, k, path):
    with open(path, "wb") as f:
        f.write(codes_to_bytes(codes, k))


def load_codes(path):
    with open(path, "rb") as f:
        return codes_from_bytes(f.read())
