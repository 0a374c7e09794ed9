import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from supquant.dataset_io import (
    SIGMA_FLOOR,
    KernelMap,
    LabeledDataset,
    compute_sigma,
    holdout_split,
    kernel_map,
    make_blobs,
    read_labels,
    read_vectors,
    sample_anchors,
    split_dataset,
    write_labels,
    write_vectors,
)
from supquant.errors import DimensionMismatchError, FormatError, LabelRangeError


def _fvecs_bytes(rows):
    out = b""
    for row in rows:
        out += struct.pack("<i", len(row)) + struct.pack(f"<{len(row)}f", *row)
    return out


class TestReadVectors:
    def test_two_records(self, tmp_path):
        path = tmp_path / "a.fvecs"
        path.write_bytes(_fvecs_bytes([[1.0, 2.0, 3.0], [-0.5, 0.25, 8.0]]))
        X = read_vectors(path)
        assert X.shape == (2, 3)
        np.testing.assert_array_equal(X, [[1.0, 2.0, 3.0], [-0.5, 0.25, 8.0]])

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.fvecs"
        path.write_bytes(b"")
        assert read_vectors(path).shape[0] == 0

    def test_dimension_mismatch(self, tmp_path):
        path = tmp_path / "bad.fvecs"
        path.write_bytes(_fvecs_bytes([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0, 4.0]]))
        with pytest.raises(DimensionMismatchError, match="offset 16"):
            read_vectors(path)

    def test_truncated_record(self, tmp_path):
        path = tmp_path / "trunc.fvecs"
        path.write_bytes(_fvecs_bytes([[1.0, 2.0, 3.0]]) + struct.pack("<i", 3) + b"\x00" * 5)
        with pytest.raises(FormatError) as exc:
            read_vectors(path)
        assert exc.value.offset == 16

    def test_csv(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text("1,2\n3.5,-4\n")
        np.testing.assert_array_equal(read_vectors(path), [[1, 2], [3.5, -4]])

    def test_csv_ragged(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text("1,2\n3\n")
        with pytest.raises(DimensionMismatchError):
            read_vectors(path)

    def test_ivecs_roundtrip(self, tmp_path):
        M = np.arange(12, dtype=np.int32).reshape(3, 4) - 5
        write_vectors(tmp_path / "a.ivecs", M)
        np.testing.assert_array_equal(read_vectors(tmp_path / "a.ivecs"), M)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 5)),
                  elements=st.floats(width=32, allow_nan=False)))
    def test_fvecs_roundtrip_bit_exact(self, tmp_path_factory, M):
        path = tmp_path_factory.mktemp("rt") / "m.fvecs"
        write_vectors(path, M)
        back = read_vectors(path)
        assert back.dtype == np.float32
        assert back.tobytes() == M.tobytes()


class TestReadLabels:
    def test_single(self, tmp_path):
        (tmp_path / "l.txt").write_text("3\n")
        np.testing.assert_array_equal(read_labels(tmp_path / "l.txt", 10)[0],
                                      np.eye(10, dtype=np.uint8)[3])

    def test_multi(self, tmp_path):
        (tmp_path / "l.txt").write_text("0,2\n")
        np.testing.assert_array_equal(read_labels(tmp_path / "l.txt", 3), [[1, 0, 1]])

    def test_out_of_range(self, tmp_path):
        (tmp_path / "l.txt").write_text("1\n7\n")
        with pytest.raises(LabelRangeError) as exc:
            read_labels(tmp_path / "l.txt", 5)
        assert exc.value.line == 2

    def test_empty_line(self, tmp_path):
        (tmp_path / "l.txt").write_text("1\n\n2\n")
        with pytest.raises(ValueError, match="line 2"):
            read_labels(tmp_path / "l.txt", 5)

    def test_roundtrip(self, tmp_path):
        L = np.array([[1, 0, 1], [0, 1, 0]], dtype=np.uint8)
        write_labels(tmp_path / "l.txt", L)
        np.testing.assert_array_equal(read_labels(tmp_path / "l.txt", 3), L)


class TestDataset:
    def test_invariants(self):
        with pytest.raises(ValueError):
            LabeledDataset(np.zeros((2, 3)), np.array([[1, 0], [0, 0]]))
        with pytest.raises(DimensionMismatchError):
            LabeledDataset(np.zeros((2, 3)), np.array([[1, 0]]))
        with pytest.raises(ValueError):
            LabeledDataset(np.zeros((1, 3)), np.array([[1]]))


class TestAnchors:
    def test_all_rows(self, rng):
        X = rng.normal(size=(7, 2))
        A = sample_anchors(X, 7, seed=3)
        assert sorted(map(tuple, A)) == sorted(map(tuple, X))

    def test_deterministic(self, rng):
        X = rng.normal(size=(50, 3))
        np.testing.assert_array_equal(sample_anchors(X, 5, 9), sample_anchors(X, 5, 9))

    def test_single_anchor_replay(self):
        X = np.arange(100.0)[:, None] * np.ones((1, 2))
        a = sample_anchors(X, 1, seed=42)
        # replay the sampler with the same generator
        row = np.random.default_rng(42).choice(100, size=1, replace=False)[0]
        np.testing.assert_array_equal(a[0], X[row])
        np.testing.assert_array_equal(sample_anchors(X, 1, 42), a)

    def test_too_many(self, rng):
        with pytest.raises(ValueError):
            sample_anchors(rng.normal(size=(3, 2)), 4, 0)


class TestSigma:
    def test_self_anchors_floor(self, rng):
        X = rng.normal(size=(10, 3))
        with pytest.warns(RuntimeWarning):
            assert compute_sigma(X, X) == SIGMA_FLOOR

    def test_single_pair(self):
        assert compute_sigma([[0.0, 0.0]], [[3.0, 4.0]]) == pytest.approx(5.0)

    def test_brute_force(self, rng):
        X = rng.normal(size=(100, 4))
        A = rng.normal(size=(10, 4))
        expected = 0.0
        for x in X:
            expected += min(np.sqrt(sum((xi - ai) ** 2 for xi, ai in zip(x, a))) for a in A)
        expected /= len(X)
        assert compute_sigma(X, A) == pytest.approx(expected, rel=1e-12)

    def test_permutation_invariant(self, rng):
        X = rng.normal(size=(30, 3))
        A = rng.normal(size=(6, 3))
        s = compute_sigma(X, A)
        assert compute_sigma(X[::-1], A[rng.permutation(6)]) == pytest.approx(s, rel=1e-13)

    def test_empty(self):
        with pytest.raises(ValueError):
            compute_sigma(np.zeros((0, 2)), np.zeros((1, 2)))


class TestKernelMap:
    def test_anchor_maps_to_one(self, rng):
        A = rng.normal(size=(4, 3))
        out = kernel_map(A[2], KernelMap(A, 0.7))
        assert out[2] == 1.0
        assert np.all((out > 0) & (out <= 1))

    def test_large_sigma(self, rng):
        A = rng.uniform(-1, 1, size=(5, 3))
        X = rng.uniform(-1, 1, size=(8, 3))
        np.testing.assert_allclose(kernel_map(X, KernelMap(A, 1e12)), 1.0, atol=1e-6)

    def test_exp_minus_one(self):
        sigma = 1.5
        a = np.zeros((1, 2))
        x = np.array([np.sqrt(2) * sigma, 0.0])
        assert kernel_map(x, KernelMap(a, sigma))[0] == pytest.approx(np.exp(-1), rel=1e-12)
        assert np.exp(-1) == pytest.approx(0.367879, abs=1e-6)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(DimensionMismatchError):
            kernel_map(rng.normal(size=(2, 4)), KernelMap(rng.normal(size=(3, 3)), 1.0))

    def test_row_independent(self, rng):
        km = KernelMap(rng.normal(size=(5, 3)), 1.3)
        X = rng.normal(size=(9, 3))
        perm = rng.permutation(9)
        np.testing.assert_array_equal(kernel_map(X, km)[perm], kernel_map(X[perm], km))


class TestSplit:
    def test_zero_queries(self):
        ds = make_blobs(5, 3, 2)
        train, query = split_dataset(ds, 0, seed=0)
        assert train is ds and len(query) == 0

    def test_counts(self):
        ds = make_blobs(20, 10, 3)
        train, query = split_dataset(ds, 2, seed=1)
        assert len(query) == 20 and len(train) == 180
        assert not set(train.ids) & set(query.ids)
        np.testing.assert_array_equal(query.labels.sum(axis=0), 2)

    def test_deterministic(self):
        ds = make_blobs(20, 4, 3)
        a = split_dataset(ds, 3, seed=5)
        b = split_dataset(ds, 3, seed=5)
        np.testing.assert_array_equal(a[1].ids, b[1].ids)

    def test_class_too_small(self):
        ds = make_blobs(2, 3, 2)
        with pytest.raises(ValueError, match="class 0"):
            split_dataset(ds, 2, seed=0)

    def test_multilabel_counts_first_class(self):
        labels = np.array([[1, 1], [1, 0], [1, 1], [0, 1], [0, 1]], dtype=np.uint8)
        ds = LabeledDataset(np.zeros((5, 1)), labels)
        _, query = split_dataset(ds, 1, seed=0)
        assert len(query) == 2
        # one query owned by class 0 (rows 0-2), one by class 1 (rows 3-4)
        assert sum(i < 3 for i in query.ids) == 1

    def test_holdout(self):
        ds = make_blobs(10, 3, 2)
        train, held = holdout_split(ds, 0.2, seed=0)
        assert len(held) == 6 and len(train) == 24
