"""Command-line entry point: ``supquant {train,encode,search,evaluate,tune}``.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .dataset_io import LabeledDataset, read_labels, read_vectors
from .errors import SupquantError
from .evaluation import mean_average_precision
from .quantizer import load_codes, load_model, save_codes, save_model
from .search import search
from .trainer import TrainConfig, encode_unlabeled, product_grid, train, validate_grid

log = logging.getLogger("supquant")


class UsageError(Exception):
    pass


def bits_to_m(bits, k):
    """Number of dictionaries for a code length in bits with K-element dictionaries."""
    if k < 2 or k & (k - 1):
        raise UsageError(f"--k must be a power of two >= 2, got {k}")
    per_index = int(math.log2(k))
    if bits < per_index or bits % per_index:
        raise UsageError(f"--bits {bits} is not a positive multiple of log2(K)={per_index}")
    return bits // per_index


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(path, command, config, inputs):
    manifest = {
        "tool": "supquant",
        "version": __version__,
        "command": command,
        "config": config,
        "inputs": {k: {"path": str(p), "sha256": _sha256(p)} for k, p in sorted(inputs.items())},
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _sidecar(out, suffix):
    out = Path(out)
    return out.with_name(out.stem + suffix)


def _load_dataset(args):
    vectors = read_vectors(args.vectors, args.format)
    labels = read_labels(args.labels, args.num_classes)
    return LabeledDataset(vectors, labels)


def _train_config(args, m):
    return TrainConfig(
        gamma=args.gamma,
        mu=args.mu,
        lam=args.lam,
        r=args.r,
        m=m,
        k=args.k,
        outer_iters=args.outer_iters,
        rel_tol=args.rel_tol,
        learn_transform=not args.no_transform,
        use_labels=not args.unsupervised,
        kernel_anchors=args.kernel,
        seed=args.seed,
    )


def _config_dict(cfg: TrainConfig):
    d = asdict(cfg)
    d["lbfgs"] = asdict(cfg.lbfgs)
    return d


def cmd_train(args):
    m = bits_to_m(args.bits, args.k)
    cfg = _train_config(args, m)
    ds = _load_dataset(args)
    model, codes, trace = train(ds, cfg)
    out = Path(args.out)
    save_model(model, out)
    save_codes(codes, model.k, _sidecar(out, ".codes"))
    trace_path = _sidecar(out, ".trace.csv")
    trace.write_csv(trace_path)
    config = _config_dict(cfg) | {"bits": args.bits, "format": args.format}
    _write_manifest(_sidecar(out, ".manifest.json"), "train", config,
                    {"vectors": args.vectors, "labels": args.labels})
    if args.figures:
        from .plotting import plot_trace

        plot_trace(trace, _sidecar(out, ".trace.png"))
    print(f"trained M={model.m} K={model.k} r={model.r}: psi {trace.psi[0]:.6g} -> "
          f"{trace.psi[-1]:.6g} in {len(trace) - 1} iterations", file=sys.stderr)


def cmd_encode(args):
    model = load_model(args.model)
    vectors = read_vectors(args.vectors, args.format)
    if vectors.shape[0] == 0:
        vectors = np.zeros((0, model.input_dim))
    codes = encode_unlabeled(model, vectors)
    save_codes(codes, model.k, args.out)
    _write_manifest(_sidecar(args.out, ".manifest.json"), "encode", {"format": args.format},
                    {"model": args.model, "vectors": args.vectors})


def write_results_tsv(f, results):
    f.write("query_id\trank\tdb_id\tscore\n")
    for qid, res in enumerate(results):
        for rank, (db_id, score) in enumerate(zip(res.ids, res.scores), 1):
            f.write(f"{qid}\t{rank}\t{int(db_id)}\t{float(score)!r}\n")


def read_results_tsv(path):
    """Parse a results TSV into ``{query_id: [db_id, ...]}`` ordered by rank."""
    rows = {}
    with open(path) as f:
        header = f.readline().rstrip("\n").split("\t")
        if header[:3] != ["query_id", "rank", "db_id"]:
            raise ValueError(f"{path}: unexpected header {header}")
        for lineno, line in enumerate(f, 2):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            try:
                qid, rank, db_id = int(parts[0]), int(parts[1]), int(parts[2])
            except (ValueError, IndexError):
                raise ValueError(f"{path}: malformed row at line {lineno}") from None
            rows.setdefault(qid, []).append((rank, db_id))
    return {q: [d for _, d in sorted(v)] for q, v in rows.items()}


def cmd_search(args):
    if args.top_k < 1:
        raise UsageError("--top-k must be at least 1")
    model = load_model(args.model)
    codes, k = load_codes(args.codes)
    if k != model.k or codes.shape[1] != model.m:
        raise ValueError(f"codes (M={codes.shape[1]}, K={k}) do not match model "
                         f"(M={model.m}, K={model.k})")
    queries = read_vectors(args.queries, args.format)
    if queries.shape[0] == 0:
        queries = np.zeros((0, model.input_dim))
    results, timing = search(model, codes, queries, args.top_k, exact=args.exact)
    if args.out:
        with open(args.out, "w") as f:
            write_results_tsv(f, results)
        _write_manifest(_sidecar(args.out, ".manifest.json"), "search",
                        {"top_k": args.top_k, "exact": args.exact, "format": args.format},
                        {"model": args.model, "codes": args.codes, "queries": args.queries})
    else:
        write_results_tsv(sys.stdout, results)
    nq = max(1, len(results))
    print(f"{len(results)} queries: preprocess {1e3 * timing['preprocess_seconds'] / nq:.3f} ms/query, "
          f"scan {1e3 * timing['scan_seconds'] / nq:.3f} ms/query", file=sys.stderr)


def cmd_evaluate(args):
    ranked = read_results_tsv(args.results)
    q_labels = read_labels(args.query_labels, args.num_classes)
    db_labels = read_labels(args.db_labels, args.num_classes or q_labels.shape[1])
    missing = [q for q in range(q_labels.shape[0]) if q not in ranked]
    if missing:
        raise ValueError(f"results are missing query ids {missing}")
    r_cutoff = args.r_cutoff
    if r_cutoff is not None and r_cutoff > db_labels.shape[0]:
        log.warning("r-cutoff %d exceeds database size %d; clamping", r_cutoff, db_labels.shape[0])
        print(f"warning: r-cutoff clamped to database size {db_labels.shape[0]}", file=sys.stderr)
        r_cutoff = db_labels.shape[0]
    report = mean_average_precision([ranked[q] for q in range(q_labels.shape[0])],
                                    q_labels, db_labels, r_cutoff)
    text = report.to_json()
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
        if args.figures:
            from .plotting import plot_ap_histogram

            plot_ap_histogram(report, _sidecar(args.out, ".ap.png"))


def _parse_grid(text, flag):
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{flag}: expected comma-separated numbers, got {text!r}") from None
    if not values:
        raise UsageError(f"{flag} is empty")
    return values


def cmd_tune(args):
    gammas = _parse_grid(args.gamma_grid, "--gamma-grid")
    mus = _parse_grid(args.mu_grid, "--mu-grid")
    m = bits_to_m(args.bits, args.k)
    args.gamma, args.mu = gammas[0], mus[0]
    cfg = _train_config(args, m)
    ds = _load_dataset(args)
    result = validate_grid(ds, product_grid(gammas, mus), cfg, args.validation_fraction,
                           seed=args.seed, r_cutoff=args.r_cutoff)
    text = json.dumps(result.to_dict(), indent=2)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
        _write_manifest(_sidecar(args.out, ".manifest.json"), "tune",
                        _config_dict(cfg) | {"gamma_grid": gammas, "mu_grid": mus,
                                             "validation_fraction": args.validation_fraction},
                        {"vectors": args.vectors, "labels": args.labels})
        if args.figures:
            from .plotting import plot_grid

            plot_grid(result, _sidecar(args.out, ".grid.png"))


def _add_training_flags(p):
    p.add_argument("--vectors", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--num-classes", type=int, default=None)
    p.add_argument("--format", choices=["fvecs", "csv"], default=None,
                   help="vector file format (default: from extension)")
    p.add_argument("--bits", type=int, default=16, help="code length in bits")
    p.add_argument("--k", type=int, default=256, help="elements per dictionary")
    p.add_argument("--r", type=int, default=256, help="transformed dimension")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--kernel", type=int, default=None, metavar="H",
                   help="use the RBF representation with H anchors")
    p.add_argument("--outer-iters", type=int, default=30)
    p.add_argument("--rel-tol", type=float, default=1e-4)
    p.add_argument("--no-transform", action="store_true", help="keep P at its PCA initialization")
    p.add_argument("--unsupervised", action="store_true", help="drop the classification term")
    p.add_argument("--seed", type=int, default=0)


def build_parser():
    parser = argparse.ArgumentParser(prog="supquant", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="learn a model from labeled vectors")
    _add_training_flags(p)
    p.add_argument("--gamma", type=float, default=0.01)
    p.add_argument("--mu", type=float, default=0.1)
    p.add_argument("--out", required=True, help="model path; sidecar files share its stem")
    p.add_argument("--figures", action="store_true", help="also render the convergence plot")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="encode database vectors with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--vectors", required=True)
    p.add_argument("--format", choices=["fvecs", "csv"], default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("search", help="rank encoded database points for each query")
    p.add_argument("--model", required=True)
    p.add_argument("--codes", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--format", choices=["fvecs", "csv"], default=None)
    p.add_argument("--top-k", type=int, default=100)
    p.add_argument("--exact", action="store_true", help="report exact squared distances")
    p.add_argument("--out", default=None, help="TSV path (default: stdout)")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("evaluate", help="MAP of a results TSV")
    p.add_argument("--results", required=True)
    p.add_argument("--query-labels", required=True)
    p.add_argument("--db-labels", required=True)
    p.add_argument("--num-classes", type=int, default=None)
    p.add_argument("--r-cutoff", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--figures", action="store_true", help="also render an AP histogram")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("tune", help="choose gamma and mu by validation MAP")
    _add_training_flags(p)
    p.add_argument("--gamma-grid", default="1e-4,1e-2,1")
    p.add_argument("--mu-grid", default="0.1,1,10")
    p.add_argument("--validation-fraction", type=float, default=0.1)
    p.add_argument("--r-cutoff", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--figures", action="store_true", help="also render the grid heatmap")
    p.set_defaults(func=cmd_tune)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"supquant {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (SupquantError, ValueError, OSError, KeyError, IndexError) as exc:
        print(f"supquant {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
