import json

import numpy as np
import pytest

from supquant.cli import UsageError, bits_to_m, main, read_results_tsv
from supquant.dataset_io import (
    make_blobs,
    read_vectors,
    split_dataset,
    write_labels,
    write_vectors,
)
from supquant.quantizer import load_codes, load_model
from supquant.search import build_table, scan, transform_query
from supquant.trainer import objective


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ds = make_blobs(30, 3, 10, spread=1.0, separation=3.0, seed=11)
    db, queries = split_dataset(ds, 2, seed=0)
    write_vectors(root / "db.fvecs", db.vectors.astype(np.float32))
    write_labels(root / "db.labels", db.labels)
    write_vectors(root / "q.fvecs", queries.vectors.astype(np.float32))
    write_labels(root / "q.labels", queries.labels)
    args = ["train", "--vectors", str(root / "db.fvecs"), "--labels", str(root / "db.labels"),
            "--bits", "4", "--k", "4", "--r", "4", "--outer-iters", "4",
            "--gamma", "0.5", "--out", str(root / "m.sq")]
    assert main(args) == 0
    return root


def run(argv):
    return main([str(a) for a in argv])


class TestBitsToM:
    def test_bytes(self):
        assert bits_to_m(16, 256) == 2
        assert bits_to_m(128, 256) == 16

    def test_other_k(self):
        assert bits_to_m(12, 16) == 3

    @pytest.mark.parametrize("bits,k", [(12, 256), (16, 100), (0, 256)])
    def test_usage(self, bits, k):
        with pytest.raises(UsageError):
            bits_to_m(bits, k)

    def test_exit_code(self, workspace):
        code = run(["train", "--vectors", workspace / "db.fvecs", "--labels",
                    workspace / "db.labels", "--bits", "12", "--k", "256",
                    "--out", workspace / "x.sq"])
        assert code == 2
        assert not (workspace / "x.sq").exists()


class TestTrain:
    def test_outputs(self, workspace):
        for suffix in ("m.sq", "m.codes", "m.trace.csv", "m.manifest.json"):
            assert (workspace / suffix).exists()
        manifest = json.loads((workspace / "m.manifest.json").read_text())
        assert manifest["command"] == "train"
        assert manifest["config"]["m"] == 2 and manifest["config"]["gamma"] == 0.5
        assert len(manifest["inputs"]["vectors"]["sha256"]) == 64

    def test_same_args_identical_model(self, workspace, tmp_path):
        args = ["train", "--vectors", workspace / "db.fvecs", "--labels", workspace / "db.labels",
                "--bits", "4", "--k", "4", "--r", "4", "--outer-iters", "4", "--gamma", "0.5",
                "--out", tmp_path / "again.sq"]
        assert run(args) == 0
        assert (tmp_path / "again.sq").read_bytes() == (workspace / "m.sq").read_bytes()
        assert (tmp_path / "again.codes").read_bytes() == (workspace / "m.codes").read_bytes()

    def test_figure(self, workspace, tmp_path):
        args = ["train", "--vectors", workspace / "db.fvecs", "--labels", workspace / "db.labels",
                "--bits", "2", "--k", "4", "--r", "4", "--outer-iters", "2",
                "--out", tmp_path / "f.sq", "--figures"]
        assert run(args) == 0
        assert (tmp_path / "f.trace.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_missing_file(self, tmp_path):
        code = run(["train", "--vectors", tmp_path / "nope.fvecs", "--labels", tmp_path / "n",
                    "--out", tmp_path / "m.sq"])
        assert code == 1


class TestEncode:
    def test_not_worse_than_training_codes(self, workspace, tmp_path):
        assert run(["encode", "--model", workspace / "m.sq", "--vectors", workspace / "db.fvecs",
                    "--out", tmp_path / "e.codes"]) == 0
        model = load_model(workspace / "m.sq")
        enc, _ = load_codes(tmp_path / "e.codes")
        trained, _ = load_codes(workspace / "m.codes")
        X = read_vectors(workspace / "db.fvecs")
        # label-free objective: W = 0 and no ridge
        free = model.replace(classifier=np.zeros_like(model.classifier), lam=0.0)
        zero = np.zeros((1, model.num_classes))
        for i in range(X.shape[0]):
            a = objective(free, enc[i : i + 1], X[i : i + 1], zero)[0]
            b = objective(free, trained[i : i + 1], X[i : i + 1], zero)[0]
            assert a <= b + 1e-9 * (1 + b)

    def test_empty_input(self, workspace, tmp_path):
        (tmp_path / "empty.fvecs").write_bytes(b"")
        assert run(["encode", "--model", workspace / "m.sq", "--vectors", tmp_path / "empty.fvecs",
                    "--out", tmp_path / "e.codes"]) == 0
        buf = (tmp_path / "e.codes").read_bytes()
        assert len(buf) == 16 and buf[:4] == b"SQCB"
        assert int.from_bytes(buf[4:8], "little") == 0

    def test_dimension_mismatch(self, workspace, tmp_path):
        write_vectors(tmp_path / "bad.fvecs", np.zeros((2, 3), np.float32))
        assert run(["encode", "--model", workspace / "m.sq", "--vectors", tmp_path / "bad.fvecs",
                    "--out", tmp_path / "e.codes"]) == 1


class TestSearch:
    def test_rows_and_library_match(self, workspace, tmp_path):
        assert run(["search", "--model", workspace / "m.sq", "--codes", workspace / "m.codes",
                    "--queries", workspace / "q.fvecs", "--top-k", "3",
                    "--out", tmp_path / "r.tsv"]) == 0
        lines = (tmp_path / "r.tsv").read_text().splitlines()
        assert lines[0] == "query_id\trank\tdb_id\tscore"
        assert len(lines) - 1 == 6 * 3
        model = load_model(workspace / "m.sq")
        codes, _ = load_codes(workspace / "m.codes")
        Q = read_vectors(workspace / "q.fvecs")
        ranked = read_results_tsv(tmp_path / "r.tsv")
        for qi, q in enumerate(Q):
            ref = scan(build_table(model.codebooks, transform_query(model, q)), codes, 3)
            assert ranked[qi] == list(ref.ids)

    def test_two_queries(self, workspace, tmp_path, capsys):
        write_vectors(tmp_path / "two.fvecs", read_vectors(workspace / "q.fvecs")[:2])
        assert run(["search", "--model", workspace / "m.sq", "--codes", workspace / "m.codes",
                    "--queries", tmp_path / "two.fvecs", "--top-k", "3"]) == 0
        out, err = capsys.readouterr()
        assert len(out.splitlines()) == 1 + 6
        assert "preprocess" in err and "scan" in err

    def test_own_reconstruction_first(self, workspace, tmp_path, capsys):
        model = load_model(workspace / "m.sq")
        codes, _ = load_codes(workspace / "m.codes")
        target = 7
        recon = model.codebooks.elements[np.arange(model.m), codes[target]].sum(axis=0)
        # a raw query mapping exactly onto that reconstruction
        q = np.linalg.lstsq(model.transform.T, recon, rcond=None)[0]
        np.savetxt(tmp_path / "q.csv", q[None], delimiter=",")
        assert run(["search", "--model", workspace / "m.sq", "--codes", workspace / "m.codes",
                    "--queries", tmp_path / "q.csv", "--top-k", "1", "--exact"]) == 0
        row = capsys.readouterr().out.splitlines()[1].split("\t")
        chosen = codes[int(row[2])]
        np.testing.assert_array_equal(chosen, codes[target])

    def test_bad_top_k(self, workspace):
        assert run(["search", "--model", workspace / "m.sq", "--codes", workspace / "m.codes",
                    "--queries", workspace / "q.fvecs", "--top-k", "0"]) == 2


class TestEvaluate:
    def _fixture(self, tmp_path, rows):
        (tmp_path / "db.labels").write_text("0\n1\n0\n1\n")
        (tmp_path / "q.labels").write_text("0\n")
        text = "query_id\trank\tdb_id\tscore\n" + "".join(
            f"0\t{r}\t{d}\t{float(r)!r}\n" for r, d in enumerate(rows, 1))
        (tmp_path / "r.tsv").write_text(text)

    def _run(self, tmp_path, *extra):
        return run(["evaluate", "--results", tmp_path / "r.tsv", "--query-labels",
                    tmp_path / "q.labels", "--db-labels", tmp_path / "db.labels", *extra])

    def test_perfect(self, tmp_path, capsys):
        self._fixture(tmp_path, [0, 2, 1, 3])
        assert self._run(tmp_path) == 0
        assert json.loads(capsys.readouterr().out)["map"] == 1.0

    def test_adversarial(self, tmp_path, capsys):
        self._fixture(tmp_path, [1, 3, 0, 2])
        assert self._run(tmp_path) == 0
        # relevant at ranks 3 and 4
        assert json.loads(capsys.readouterr().out)["map"] == pytest.approx((1 / 3 + 2 / 4) / 2)

    def test_clamped(self, tmp_path, capsys):
        self._fixture(tmp_path, [0, 2, 1, 3])
        assert self._run(tmp_path, "--r-cutoff", "50") == 0
        out, err = capsys.readouterr()
        assert json.loads(out)["r_cutoff"] == 4 and "clamped" in err

    def test_missing_query(self, tmp_path, capsys):
        self._fixture(tmp_path, [0, 2, 1, 3])
        (tmp_path / "q.labels").write_text("0\n1\n1\n")
        assert self._run(tmp_path) == 1
        assert "[1, 2]" in capsys.readouterr().err

    def test_histogram(self, tmp_path):
        self._fixture(tmp_path, [0, 2, 1, 3])
        assert self._run(tmp_path, "--out", tmp_path / "rep.json", "--figures") == 0
        assert (tmp_path / "rep.ap.png").exists()


class TestTune:
    def _args(self, workspace, tmp_path, gammas, mus):
        return ["tune", "--vectors", workspace / "db.fvecs", "--labels", workspace / "db.labels",
                "--bits", "4", "--k", "4", "--r", "4", "--outer-iters", "2",
                "--gamma-grid", gammas, "--mu-grid", mus, "--validation-fraction", "0.2",
                "--out", tmp_path / "t.json", "--figures"]

    def test_argmax_consistent(self, workspace, tmp_path):
        assert run(self._args(workspace, tmp_path, "0.01,1", "0.1,1")) == 0
        out = json.loads((tmp_path / "t.json").read_text())
        best = max(out["grid"], key=lambda e: e["map"])
        assert out["best"]["map"] == best["map"]
        first = next(e for e in out["grid"] if e["map"] == best["map"])
        assert (out["best"]["gamma"], out["best"]["mu"]) == (first["gamma"], first["mu"])
        assert (tmp_path / "t.grid.png").exists()

    def test_single_pair(self, workspace, tmp_path):
        assert run(self._args(workspace, tmp_path, "0.5", "0.2")) == 0
        out = json.loads((tmp_path / "t.json").read_text())
        assert (out["best"]["gamma"], out["best"]["mu"]) == (0.5, 0.2)

    def test_duplicates(self, workspace, tmp_path):
        assert run(self._args(workspace, tmp_path, "0.5,0.5", "0.2")) == 0
        out = json.loads((tmp_path / "t.json").read_text())
        assert out["grid"][0]["map"] == out["grid"][1]["map"] == out["best"]["map"]

    def test_empty_grid(self, workspace, tmp_path):
        assert run(self._args(workspace, tmp_path, "", "0.2")) == 2
