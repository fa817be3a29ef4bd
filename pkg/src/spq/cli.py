"""``spq`` command-line interface.

Exit codes: 0 success, 1 usage/configuration error, 2 data/format error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from .config import RunConfig
from .errors import ConfigurationError, FormatError, ParameterError, SPQError, UsageError
from .evaluation import RelevanceOracle, evaluate, kmeans_pq_baseline
from .index import IndexFile, build_index, labels_to_bitmasks, search_many
from .trainer import init_state, load_checkpoint, save_checkpoint, train

log = logging.getLogger("spq")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def resolve_threads(flag: int | None) -> int:
    """``--threads`` beats ``SPQ_THREADS``; 0 means one per CPU."""
    n = flag
    if n is None:
        env = os.environ.get("SPQ_THREADS")
        n = int(env) if env else 1
    if n < 0:
        raise ConfigurationError("thread count must be >= 0")
    return n or (os.cpu_count() or 1)


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo(out: Path, name: str, args: argparse.Namespace) -> None:
    lines = [f"{k} = {v}" for k, v in sorted(vars(args).items()) if k != "func"]
    (out / f"{name}.echo.txt").write_text("\n".join(lines) + "\n")


def _descriptors(ds: data_mod.Dataset, checkpoint: str | None) -> np.ndarray:
    """Descriptors for a dataset: run the encoder if given a checkpoint."""
    if checkpoint:
        state = load_checkpoint(checkpoint)
        if state.encoder.passthrough:
            return state.encode(_flat_items(ds))
        if ds.images is None:
            raise FormatError("checkpoint has an image encoder but the data has no images")
        return state.encode(ds.images)
    return _flat_items(ds)


def _flat_items(ds: data_mod.Dataset) -> np.ndarray:
    if ds.items is not None:
        return np.asarray(ds.items)
    if ds.views is not None:
        return np.asarray(ds.views)[:, 0, :]
    raise FormatError("data holds images; pass --checkpoint to encode them")


def _labels(ds: data_mod.Dataset, path: str | None) -> np.ndarray | None:
    if path:
        return data_mod.load_labels(path)
    return ds.labels


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_train(seed=args.seed)
    if args.epochs is not None:
        cfg = cfg.with_train(epochs=args.epochs)
    cfg = cfg.with_paths(data=args.data, out=args.out, loss_log=args.loss_log)
    if "data" not in cfg.paths:
        raise UsageError("train needs --data or a data = ... config entry")
    out = Path(cfg.paths.get("out", "."))
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.txt").write_text(cfg.echo())

    ds = data_mod.load_dataset(cfg.paths["data"], cfg.paths.get("data_kind"))
    tc = cfg.train
    if tc.mode == "head-only-passthrough":
        if ds.views is None:
            raise FormatError("passthrough training needs descriptor view pairs (views.spqt)")
        if ds.views.shape[2] != tc.D:
            raise ConfigurationError(f"descriptor dim {ds.views.shape[2]} != D={tc.D}")
        init = ds.views[:, 0, :]
        shape = (tc.D,)
    else:
        if ds.images is None:
            raise FormatError("joint training needs images")
        init, shape = ds.images, ds.images.shape[1:]
    state = init_state(tc, shape, init_data=init)
    if tuple(cfg.augment.output_size) != tuple(shape[:2]) and tc.mode == "joint":
        raise ConfigurationError(f"output_size {cfg.augment.output_size} must match image size {shape[:2]}")
    loss_log = cfg.paths.get("loss_log") or str(out / "loss.csv")
    train(state, ds, aug=cfg.augment, log_path=loss_log)
    save_checkpoint(out / "model.spqm", state)
    print(f"trained {state.epoch} epochs, final loss {state.loss_history[-1]:.6f}; wrote {out / 'model.spqm'}")
    return EXIT_OK


def cmd_encode(args) -> int:
    out = _out_dir(args)
    _echo(out, "encode", args)
    state = load_checkpoint(args.checkpoint)
    ds = data_mod.load_dataset(args.gallery)
    desc = _descriptors(ds, args.checkpoint)
    index = build_index(state.codebooks, desc, _labels(ds, args.labels))
    path = Path(args.index) if args.index else out / "index.spqi"
    index.save(path)
    print(f"indexed {index.size} items ({index.M * (index.K.bit_length() - 1)} bits each) -> {path}")
    return EXIT_OK


def cmd_search(args) -> int:
    out = _out_dir(args)
    _echo(out, "search", args)
    index = IndexFile.load(args.index)
    queries = _descriptors(data_mod.load_dataset(args.queries), args.checkpoint)
    top_k = min(args.top_k, index.size) if index.size else args.top_k
    results = search_many(index, queries, top_k, resolve_threads(args.threads))
    path = Path(args.results) if args.results else out / "search.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query_id", "rank", "item_id", "distance"])
        for qi, hits in enumerate(results):
            for r, (item, dist) in enumerate(hits, 1):
                w.writerow([qi, r, item, repr(dist)])
    print(f"searched {len(results)} queries -> {path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    out = _out_dir(args)
    _echo(out, "evaluate", args)
    index = IndexFile.load(args.index)
    qds = data_mod.load_dataset(args.queries)
    queries = _descriptors(qds, args.checkpoint)
    qlabels = _labels(qds, args.query_labels)
    if qlabels is None:
        raise FormatError("query labels missing (labels.spqt or --query-labels)")
    if args.gallery_labels:
        oracle = RelevanceOracle.from_labels(qlabels, data_mod.load_labels(args.gallery_labels))
    elif index.labels is not None:
        oracle = RelevanceOracle(labels_to_bitmasks(qlabels), index.labels)
    else:
        raise FormatError("gallery labels missing (index label block or --gallery-labels)")
    k_list = [int(k) for k in args.k.split(",")] if args.k else [1000]
    report = evaluate(index, queries, oracle, args.R, k_list, args.ap_normalizer, resolve_threads(args.threads))
    (out / "metrics.txt").write_text(report.to_text())
    report.write_csv(out / "metrics.csv")
    report.write_pr_csv(out / "pr.csv")
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_baseline_pq(args) -> int:
    out = _out_dir(args)
    _echo(out, "baseline-pq", args)
    ds = data_mod.load_dataset(args.gallery)
    desc = _flat_items(ds)
    seed = args.seed if args.seed is not None else 0
    cb = kmeans_pq_baseline(desc, args.M, args.K, args.iters, seed)
    index = build_index(cb, desc, _labels(ds, args.labels))
    path = Path(args.index) if args.index else out / "baseline.spqi"
    index.save(path)
    print(f"k-means PQ baseline (M={args.M}, K={args.K}) indexed {index.size} items -> {path}")
    return EXIT_OK


def cmd_synth(args) -> int:
    out = _out_dir(args)
    _echo(out, "synth", args)
    seed = args.seed if args.seed is not None else 0
    if args.split:
        sizes = [int(s) for s in args.split.split(",")]
        per = -(-sum(sizes) // args.clusters)
        full = data_mod.gen_synthetic(args.clusters, args.dim, per, args.noise, seed)
        names = ["train", "query", "gallery"][: len(sizes)]
        if len(sizes) > 3:
            raise UsageError("--split takes at most three sizes (train,query,gallery)")
        for name, part in zip(names, data_mod.split(full, sizes, seed)):
            data_mod.save_dataset(out / name, part)
    else:
        data_mod.save_dataset(out, data_mod.gen_synthetic(args.clusters, args.dim, args.per_cluster, args.noise, seed))
    print(f"wrote synthetic data to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value run configuration file")
    common.add_argument("--seed", type=int, help="random seed (overrides config)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="worker threads, 0 = auto (env SPQ_THREADS)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="spq", description="Self-supervised product quantization toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", parents=[common], help="train encoder and codebooks")
    t.add_argument("--data", help="training data (CIFAR .bin file/dir or SPQT dataset dir)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--loss-log", help="CSV loss log path (default OUT/loss.csv)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("encode", parents=[common], help="encode a gallery into an SPQI index")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--gallery", required=True)
    e.add_argument("--labels", help="SPQT label tensor for the gallery")
    e.add_argument("--index", help="output index path (default OUT/index.spqi)")
    e.set_defaults(func=cmd_encode)

    s = sub.add_parser("search", parents=[common], help="ADC search, ranked CSV output")
    s.add_argument("--index", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--checkpoint", help="encode query images/descriptors with this model")
    s.add_argument("--top-k", type=int, default=10)
    s.add_argument("--results", help="output CSV path (default OUT/search.csv)")
    s.set_defaults(func=cmd_search)

    v = sub.add_parser("evaluate", parents=[common], help="mAP@R, P@k and PR curve")
    v.add_argument("--index", required=True)
    v.add_argument("--queries", required=True)
    v.add_argument("--checkpoint")
    v.add_argument("--query-labels")
    v.add_argument("--gallery-labels")
    v.add_argument("--R", type=int, default=1000)
    v.add_argument("--k", default="1000", help="comma-separated P@k cutoffs")
    v.add_argument("--ap-normalizer", default="min_relevant_r",
                   choices=["min_relevant_r", "relevant_retrieved", "total_relevant"])
    v.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("baseline-pq", parents=[common], help="k-means PQ codebooks + index")
    b.add_argument("--gallery", required=True)
    b.add_argument("--labels")
    b.add_argument("--M", type=int, default=4)
    b.add_argument("--K", type=int, default=16)
    b.add_argument("--iters", type=int, default=25)
    b.add_argument("--index", help="output index path (default OUT/baseline.spqi)")
    b.set_defaults(func=cmd_baseline_pq)

    y = sub.add_parser("synth", parents=[common], help="synthetic cluster descriptors")
    y.add_argument("--clusters", type=int, default=8)
    y.add_argument("--dim", type=int, default=64)
    y.add_argument("--per-cluster", type=int, default=250)
    y.add_argument("--noise", type=float, default=0.1)
    y.add_argument("--split", help="sizes train,query,gallery written to subdirectories")
    y.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError, ParameterError) as exc:
        print(f"spq {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SPQError, OSError, ValueError) as exc:
        print(f"spq {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
