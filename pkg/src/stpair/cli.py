"""``stpair`` command line: synth, mine, train, eval-nn, eval-sim, bench, viz-rf.

Artifacts go to disk (written atomically); progress and diagnostics go to
stderr so stdout stays clean.  Exit status: 0 success, 1 runtime failure,
2 usage error.
"""

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from ._io import atomic_write_text
from .pair_miner import MinerConfig, bench_mining, dump_batches, mine_batch
from .trainer import TRAIN_RESAMPLE_ATTEMPTS, TrainConfig, load_checkpoint, train
from .video_store import load_dataset, materialize, sample_volume, synth_dataset

log = logging.getLogger("stpair")


class UsageError(Exception):
    pass


def _thread_limit():
    n = os.environ.get("STPAIR_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(n)))


def _miner_config(args, base=None):
    base = base or MinerConfig(max_resample_attempts=TRAIN_RESAMPLE_ATTEMPTS)
    kw = dict(
        batch_size=base.batch_size,
        pos_ratio=base.pos_ratio,
        volume_shape=base.volume_shape,
        transform_positives=base.transform_positives,
        transform_negatives=base.transform_negatives,
        max_resample_attempts=base.max_resample_attempts,
    )
    for flag, key in (
        ("batch_size", "batch_size"),
        ("pos_ratio", "pos_ratio"),
        ("volume_shape", "volume_shape"),
        ("max_attempts", "max_resample_attempts"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            kw[key] = value
    if getattr(args, "no_transform_positives", False):
        kw["transform_positives"] = False
    if getattr(args, "no_transform_negatives", False):
        kw["transform_negatives"] = False
    return MinerConfig(**kw)


def cmd_synth(args):
    ds = synth_dataset(
        args.out,
        num_classes=args.classes,
        videos_per_class=args.per_class,
        width=args.width,
        height=args.height,
        frames=args.frames,
        seed=args.seed,
    )
    log.info("wrote %d videos and manifest.jsonl to %s", len(ds), args.out)


def cmd_mine(args):
    ds = load_dataset(args.manifest).unlabeled()
    cfg = _miner_config(args)
    rng = np.random.default_rng(args.seed)
    batches = [mine_batch(ds, cfg, rng) for _ in range(args.batches)]
    dump_batches(args.out, batches)
    log.info("mined %d batches of %d pairs into %s", len(batches), cfg.batch_size, args.out)


def _train_config(args):
    raw = {}
    if args.config is not None:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        with open(path) as fh:
            raw = json.load(fh)
    manifest = args.manifest or raw.pop("manifest", None)
    out = args.out or raw.pop("out", None)
    raw.pop("manifest", None)
    raw.pop("out", None)
    if manifest is None:
        raise UsageError("train needs --manifest (or a 'manifest' entry in the config)")
    if out is None:
        raise UsageError("train needs --out (or an 'out' entry in the config)")
    for flag, key in (
        ("iterations", "iterations"),
        ("lr", "lr"),
        ("lam", "lam"),
        ("seed", "seed"),
        ("checkpoint_interval", "checkpoint_interval"),
        ("tower", "tower"),
    ):
        value = getattr(args, flag)
        if value is not None:
            raw[key] = value
    if args.no_wall_time:
        raw["record_wall_time"] = False
    cfg = TrainConfig.from_dict(raw)
    cfg.miner = _miner_config(args, cfg.miner)
    cfg.__post_init__()
    return manifest, out, cfg


def cmd_train(args):
    manifest, out, cfg = _train_config(args)
    ds = load_dataset(manifest)
    Path(out).mkdir(parents=True, exist_ok=True)
    atomic_write_text(Path(out) / "config.json", json.dumps(cfg.to_dict(), indent=2) + "\n")
    _, rows = train(ds, cfg, out_dir=out, resume=args.resume)
    tail = rows[-min(len(rows), 100):]
    if tail:
        log.info(
            "done: %d iterations, trailing accuracy %.3f",
            len(rows),
            float(np.mean([r["batch_accuracy"] for r in tail])),
        )


def _features(args):
    model, _ = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.manifest)
    rng = np.random.default_rng(args.seed)
    return model, ds, ev.video_features(model, ds, args.k, rng)


def cmd_eval_nn(args):
    _, ds, feats = _features(args)
    k = min(args.neighbors, len(feats) - 1)
    atomic_write_text(args.out, ev.retrieval_csv(feats, k, args.metric))
    if ds.has_labels:
        log.info("precision@1 = %.3f", ev.precision_at_1(feats, args.metric))


def cmd_eval_sim(args):
    if args.pairs == "mined":
        model, _ = load_checkpoint(args.checkpoint)
        ds = load_dataset(args.manifest)
        cfg = MinerConfig(volume_shape=model.tower.volume_shape, max_resample_attempts=TRAIN_RESAMPLE_ATTEMPTS)
        res = ev.mined_pair_protocol(model, ds, cfg, args.batches, np.random.default_rng([args.seed, 2]))
    else:
        model, ds, feats = _features(args)
        if not ds.has_labels:
            raise UsageError("eval-sim needs a labelled manifest")
        rng = np.random.default_rng([args.seed, 1])
        res = ev.similarity_protocol(model, feats, rng, args.val_fraction)
    atomic_write_text(args.out, ev.roc_csv(res["points"], res["auc"]))
    log.info(
        "threshold %.4f accuracy %.3f AUC %.3f", res["threshold"], res["accuracy"], res["auc"]
    )


def cmd_bench(args):
    ds = load_dataset(args.manifest).unlabeled()
    cfg = _miner_config(args)
    report = bench_mining(ds, cfg, args.iterations, np.random.default_rng(args.seed))
    report.write_csv(args.out)
    s = report.summary()
    log.info(
        "%.0f pairs/s (index only); %.3g s/pair index, %.3g s/pair materialize",
        s["pairs_per_second"],
        s["mean_index_time"],
        s["mean_materialize_time"],
    )


def cmd_viz_rf(args):
    model, _ = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.manifest)
    rng = np.random.default_rng(args.seed)
    ids = args.video_id or [v.id for v in ds.videos]
    chunks = []
    for vid in ids:
        index = sample_volume(ds.video(vid), model.tower.volume_shape, rng)
        res = ev.top_response_regions(model, materialize(ds, index), args.tau)
        if res.degenerate:
            log.warning("video %d: no positive pool responses, full-frame boxes", vid)
        chunks.append(ev.boxes_jsonl(vid, res))
    atomic_write_text(args.out, "".join(chunks))


def build_parser():
    p = argparse.ArgumentParser(prog="stpair", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def miner_flags(sp, shape_default=None):
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--pos-ratio", type=float)
        sp.add_argument("--volume-shape", type=int, nargs=3, metavar=("X0", "Y0", "T0"),
                        default=shape_default)
        sp.add_argument("--max-attempts", type=int)
        sp.add_argument("--no-transform-positives", action="store_true")
        sp.add_argument("--no-transform-negatives", action="store_true")

    sp = sub.add_parser("synth", help="write a synthetic labelled dataset")
    sp.add_argument("--classes", type=int, default=4)
    sp.add_argument("--per-class", type=int, default=8)
    sp.add_argument("--width", type=int, default=32)
    sp.add_argument("--height", type=int, default=32)
    sp.add_argument("--frames", type=int, default=16)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("mine", help="mine pair batches to JSON lines")
    sp.add_argument("--manifest", required=True)
    miner_flags(sp)
    sp.add_argument("--batches", type=int, default=1)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_mine)

    sp = sub.add_parser("train", help="unsupervised Siamese training")
    sp.add_argument("--config")
    sp.add_argument("--manifest")
    sp.add_argument("--out")
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--lam", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--checkpoint-interval", type=int)
    sp.add_argument("--tower", choices=["desk", "full"])
    sp.add_argument("--resume")
    sp.add_argument("--no-wall-time", action="store_true",
                    help="leave wall_ms empty so metrics are bitwise reproducible")
    miner_flags(sp)
    sp.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("eval-nn", cmd_eval_nn, "nearest-neighbour retrieval on pooled features"),
        ("eval-sim", cmd_eval_sim, "pair similarity classification and ROC"),
    ):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--manifest", required=True)
        sp.add_argument("--k", type=int, default=10, help="volumes per video")
        sp.add_argument("--out", required=True)
        sp.add_argument("--seed", type=int, default=0)
        sp.set_defaults(func=func)
        if name == "eval-nn":
            sp.add_argument("--neighbors", type=int, default=5)
            sp.add_argument("--metric", choices=["euclidean", "cosine"], default="euclidean")
        else:
            sp.add_argument("--val-fraction", type=float, default=0.5)
            sp.add_argument("--pairs", choices=["videos", "mined"], default="videos",
                            help="labelled video pairs (same class?) or freshly mined pairs (same video?)")
            sp.add_argument("--batches", type=int, default=200, help="mined batches for --pairs mined")

    sp = sub.add_parser("bench", help="time pair mining and materialization")
    sp.add_argument("--manifest", required=True)
    miner_flags(sp)
    sp.add_argument("--iterations", type=int, default=100)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("viz-rf", help="boxes around top last-pool responses")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--video-id", type=int, action="append")
    sp.add_argument("--tau", type=float, default=0.5)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_viz_rf)
    return p


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        with _thread_limit():
            args.func(args)
    except UsageError as exc:
        print(f"stpair {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report any failure as exit 1
        print(f"stpair {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())
