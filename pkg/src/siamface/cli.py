"""``siamface`` command line: train, eval, register, serve, recognize, bench.

Exit codes: 0 success, 1 domain failure (no face / no match), 2 usage
error, 3 I/O or file-format error.
"""

import argparse
import json
import logging
import sys
import time

import numpy as np

from .errors import (CheckpointFormatError, DatasetError, PGMParseError, RegisterRejected,
                     StoreLoadError)

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


def _address(text):
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}")
    return host or "127.0.0.1", int(port)


def _percentiles(samples):
    arr = np.asarray(samples) * 1000.0
    return {"count": len(arr), "mean_ms": float(arr.mean()),
            "p50_ms": float(np.percentile(arr, 50)), "p90_ms": float(np.percentile(arr, 90)),
            "p99_ms": float(np.percentile(arr, 99))}


def _print_stats(stats):
    g, i = stats.genuine, stats.impostor
    print(f"genuine pairs : {g.count:6d}  mean {g.mean:.4f}  min {g.min:.4f}  max {g.max:.4f}")
    print(f"impostor pairs: {i.count:6d}  mean {i.mean:.4f}  min {i.min:.4f}  max {i.max:.4f}")
    print(f"accuracy at tau={stats.threshold:g}: {stats.accuracy:.4f} "
          f"(balanced {stats.balanced_accuracy:.4f})")
    print(f"best threshold {stats.best_threshold:.4f}: balanced accuracy "
          f"{stats.best_balanced_accuracy:.4f}")


def cmd_train(args):
    from .model import save_checkpoint
    from .training import TrainConfig, load_orl, train

    ds = load_orl(args.dataset, max_subjects=args.subjects)
    cfg = TrainConfig(epochs=args.epochs, pairs_per_epoch=args.pairs_per_epoch,
                      batch_size=args.batch_size, margin=args.margin, lr=args.lr,
                      momentum=args.momentum, seed=args.seed, split_fraction=args.split,
                      eval_threshold=args.tau)
    print(f"training on {len(ds)} images of {len(ds.subjects)} subjects for {cfg.epochs} epochs")
    net, report = train(ds, cfg, on_epoch=lambda e, l: print(f"epoch {e:3d}  loss {l:.6f}", flush=True))
    save_checkpoint(net, args.checkpoint)
    report.to_csv(args.report)
    print(f"final loss {report.final_loss:.6f} (best epoch {report.best_epoch}), "
          f"{report.seconds:.1f}s; checkpoint {args.checkpoint}, report {args.report}")
    _print_stats(report.evaluation)
    return EXIT_OK


def cmd_eval(args):
    from .model import load_checkpoint
    from .training import evaluate, load_orl, split, threshold_sweep

    net = load_checkpoint(args.checkpoint)
    ds = load_orl(args.dataset, max_subjects=args.subjects)
    train_set, test_set = split(ds, args.split, args.seed)
    stats = evaluate(net, test_set, args.tau, reference=train_set)
    _print_stats(stats)
    print("tau      predicted_same  accuracy  balanced")
    for tau, n_same, acc, bal in threshold_sweep(stats, args.sweep):
        print(f"{tau:7.3f}  {n_same:14d}  {acc:8.4f}  {bal:8.4f}")
    return EXIT_OK


def cmd_bench(args):
    from .model import FaceImage, SiameseNet, load_checkpoint
    from .store import FaceDb, IdentityRecord

    rng = np.random.default_rng(args.seed)
    net = load_checkpoint(args.checkpoint) if args.checkpoint else SiameseNet(seed=args.seed)
    embed_t = []
    for _ in range(args.count):
        img = FaceImage(rng.random((100, 100), dtype=np.float32))
        t0 = time.perf_counter()
        net.embed([img])
        embed_t.append(time.perf_counter() - t0)
    db = FaceDb(IdentityRecord(int(u), v) for u, v in
                zip(rng.integers(0, args.rows // 10 + 1, args.rows), rng.normal(size=(args.rows, 5))))
    query_t = []
    for q in rng.normal(size=(args.count, 5)):
        t0 = time.perf_counter()
        db.top_k(q, args.k)
        query_t.append(time.perf_counter() - t0)
    report = {"embed": _percentiles(embed_t),
              "query": dict(_percentiles(query_t), rows=args.rows, k=args.k)}
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_serve(args):
    from .service import ServerConfig, serve

    cfg = ServerConfig(host=args.host, port=args.port, k=args.k, embed_workers=args.workers,
                       detector_threshold=args.detector_threshold,
                       synthetic_embed_latency_ms=args.synthetic_latency_ms,
                       checkpoint_path=args.checkpoint, db_path=args.db,
                       activity_log=args.activity_log, batch_window_ms=args.batch_window_ms)
    if cfg.checkpoint_path is None and cfg.synthetic_embed_latency_ms is None:
        print("error: --checkpoint is required (or --synthetic-latency-ms for testing)",
              file=sys.stderr)
        return EXIT_USAGE
    try:
        serve(cfg)
    except OSError as exc:
        print(f"error: cannot start server on {cfg.host}:{cfg.port}: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def cmd_register(args):
    from .client import register_user

    try:
        ack = register_user(args.image, args.user_id, args.server, retries=args.retries)
    except RegisterRejected as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_DOMAIN
    print(json.dumps({"user_id": ack.user_id, "vector": ack.vector}))
    return EXIT_OK


def cmd_recognize(args):
    from .client import ClientConfig, FrameSource, run_capture_loop

    src = FrameSource.from_directory(args.frames)
    cfg = ClientConfig(server=args.server, motion_threshold=args.motion_threshold,
                       burst_size=args.n, retries=args.retries)

    def show(res):
        parts = [f"request_id:{res.request_id}"]
        for rank, m in enumerate(res.matches, 1):
            parts.append(f"user_id[{rank}]:{m.user_id} distance:{m.distance:.4f}")
        print("  ".join(parts), flush=True)

    out = run_capture_loop(src, cfg, on_result=show)
    print(f"{len(out.sent)} request(s) sent, {out.bytes_sent} bytes")
    hit = any(r.matches and r.matches[0].distance < args.tau for r in out.results)
    return EXIT_OK if hit else EXIT_DOMAIN


def cmd_synth(args):
    from .synthetic import write_orl_like_tree

    write_orl_like_tree(args.out, args.subjects, args.images, args.seed)
    print(f"wrote {args.subjects} x {args.images} images under {args.out}")
    return EXIT_OK


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="siamface", formatter_class=fmt,
                                     description="Siamese-CNN face verification system.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", formatter_class=fmt, help="train the network on an ORL-style tree")
    p.add_argument("dataset", help="directory with one sub-directory of PGM files per subject")
    p.add_argument("--epochs", type=int, default=100, help="training epochs")
    p.add_argument("--subjects", type=int, default=None, help="use only the first N subjects")
    p.add_argument("--pairs-per-epoch", type=int, default=360, help="pairs sampled per epoch")
    p.add_argument("--batch-size", type=int, default=16, help="pairs per optimiser step")
    p.add_argument("--margin", type=float, default=2.0, help="contrastive loss margin")
    p.add_argument("--lr", type=float, default=1e-4, help="SGD learning rate")
    p.add_argument("--momentum", type=float, default=0.9, help="SGD momentum")
    p.add_argument("--seed", type=int, default=0, help="seed for init, split and pair sampling")
    p.add_argument("--split", type=float, default=0.9, help="per-subject training fraction")
    p.add_argument("--tau", type=float, default=1.0, help="verification threshold for the report")
    p.add_argument("--checkpoint", default="siamese.ckpt", help="output checkpoint path")
    p.add_argument("--report", default="train_report.csv", help="output epoch,mean_loss CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", formatter_class=fmt, help="genuine/impostor statistics on the held-out split")
    p.add_argument("checkpoint", help="checkpoint written by 'train'")
    p.add_argument("dataset", help="ORL-style dataset directory")
    p.add_argument("--tau", type=float, default=1.0, help="verification threshold")
    p.add_argument("--subjects", type=int, default=None, help="use only the first N subjects")
    p.add_argument("--split", type=float, default=0.9, help="per-subject training fraction")
    p.add_argument("--seed", type=int, default=0, help="split seed (match the training run)")
    p.add_argument("--sweep", type=float, nargs="+", default=[0.25, 0.5, 1.0, 1.5, 2.0, 3.0],
                   help="thresholds for the sweep table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", formatter_class=fmt, help="embedding and top-k latency")
    p.add_argument("--checkpoint", default=None, help="checkpoint (random init when omitted)")
    p.add_argument("--count", type=int, default=100, help="samples per section")
    p.add_argument("--rows", type=int, default=10000, help="rows in the synthetic store")
    p.add_argument("--k", type=int, default=3, help="matches per query")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("serve", formatter_class=fmt, help="run the recognition server")
    p.add_argument("--host", default="127.0.0.1", help="listen address")
    p.add_argument("--port", type=int, default=7070, help="listen port")
    p.add_argument("--k", type=int, default=3, help="candidates per result")
    p.add_argument("--workers", type=int, default=4, help="embedding worker threads")
    p.add_argument("--checkpoint", default=None, help="model checkpoint")
    p.add_argument("--db", default="faces.csv", help="face vector table (CSV)")
    p.add_argument("--activity-log", default=None, help="append recognition results here (JSON lines)")
    p.add_argument("--detector-threshold", type=float, default=0.03,
                   help="pixel std above which a frame counts as a face")
    p.add_argument("--batch-window-ms", type=float, default=0.0,
                   help="pool embedding calls for this long (0 disables)")
    p.add_argument("--synthetic-latency-ms", type=float, default=None,
                   help="testing only: replace the CNN with a fixed-latency stub")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("register", formatter_class=fmt, help="enrol a face image")
    p.add_argument("image", help="binary PGM face image")
    p.add_argument("--user-id", type=int, required=True, help="identifier stored with the vector")
    p.add_argument("--server", type=_address, default=("127.0.0.1", 7070), help="server HOST:PORT")
    p.add_argument("--retries", type=int, default=3, help="connection retries")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("recognize", formatter_class=fmt, help="replay a frame directory through the motion gate")
    p.add_argument("frames", help="directory of PGM frames, replayed in name order")
    p.add_argument("--server", type=_address, default=("127.0.0.1", 7070), help="server HOST:PORT")
    p.add_argument("--n", type=int, default=5, help="frames per burst")
    p.add_argument("--motion-threshold", type=float, default=0.02, help="mean abs difference trigger")
    p.add_argument("--tau", type=float, default=1.0, help="exit 0 iff a top match is closer than this")
    p.add_argument("--retries", type=int, default=3, help="connection retries")
    p.set_defaults(func=cmd_recognize)

    p = sub.add_parser("synth", formatter_class=fmt, help="write a procedural ORL-format corpus")
    p.add_argument("out", help="output directory")
    p.add_argument("--subjects", type=int, default=40, help="number of subjects")
    p.add_argument("--images", type=int, default=10, help="images per subject")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (DatasetError, PGMParseError, CheckpointFormatError, StoreLoadError,
            FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConnectionError, TimeoutError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
