"""Acceptance suite: eight end-to-end checks at their stated tolerances.

Each test prints one ``[PASS]``/``[FAIL] criterion N: ...`` line (also
collected in the terminal summary).  Run with

    pytest tests/test_acceptance.py -v

or directly as ``python3 tests/test_acceptance.py``.
"""

import csv
import io
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from helpers import generic_model, layer_gradcheck, siamese_gradcheck
from stpair import evaluation as ev
from stpair import nn_core as nn
from stpair.cli import run as cli_run
from stpair.pair_miner import (
    MinerConfig,
    bench_mining,
    empirical_negative_purity,
    mine_batch,
    negative_purity_bound,
    transform_kind_counts,
)
from stpair.siamese import HeadConfig, SiameseModel, desk_tower, hinge_loss
from stpair.trainer import TRAIN_RESAMPLE_ATTEMPTS, TrainConfig, train
from stpair.transforms import ColorParams, Kind, TransformSpec, apply_color, apply_flip, apply_transform
from stpair.video_store import synth_dataset, volumes_overlap

DESK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.json"


# -- 1. gradient oracles --------------------------------------------------


def _layer_cases(r):
    """(name, forward, backward, tensors, points) for every nn_core op, float64."""
    cases = []
    for stride, padding in ((1, 1), (2, 0), ((1, 2, 1), (1, 0, 1))):
        t = {
            "x": r.standard_normal((2, 3, 5, 6, 6)),
            "w": r.standard_normal((4, 3, 3, 3, 3)),
            "b": r.standard_normal(4),
        }

        def fwd(t=t, s=stride, p=padding):
            return nn.conv3d_forward(t["x"], t["w"], t["b"], s, p)

        def bwd(g, t=t, s=stride, p=padding):
            gx, gw, gb = nn.conv3d_backward(g, t["x"], t["w"], s, p)
            return {"x": gx, "w": gw, "b": gb}

        cases.append((f"conv3d s={stride} p={padding}", fwd, bwd, t, 20))

    shape = (2, 2, 4, 4, 4)
    # values 0.01 apart: an eps=1e-3 nudge never changes a pooling winner
    pool = {"x": r.permutation(int(np.prod(shape))).reshape(shape) * 0.01}

    def pool_bwd(g):
        _, arg = nn.maxpool3d_forward(pool["x"], 2)
        return {"x": nn.maxpool3d_backward(g, arg, shape)}

    cases.append(("maxpool3d", lambda: nn.maxpool3d_forward(pool["x"], 2)[0], pool_bwd, pool, 40))

    fc = {"x": r.standard_normal((5, 7)), "w": r.standard_normal((3, 7)), "b": r.standard_normal(3)}

    def fc_bwd(g):
        gx, gw, gb = nn.fc_backward(g, fc["x"], fc["w"])
        return {"x": gx, "w": gw, "b": gb}

    cases.append(("fc", lambda: nn.fc_forward(fc["x"], fc["w"], fc["b"]), fc_bwd, fc, 20))

    mag = r.uniform(0.01, 1.0, (6, 9))
    relu = {"x": mag * r.choice([-1, 1], mag.shape)}  # |x| >= 0.01: no kink within eps
    cases.append(
        ("relu", lambda: nn.relu_forward(relu["x"]), lambda g: {"x": nn.relu_backward(g, relu["x"])}, relu, 30)
    )

    cat = {"a": r.standard_normal((4, 5)), "b": r.standard_normal((4, 3))}

    def cat_bwd(g):
        ga, gb = nn.concat_backward(g, 5)
        return {"a": ga, "b": gb}

    cases.append(("concat", lambda: nn.concat_forward(cat["a"], cat["b"]), cat_bwd, cat, 20))

    drop = {"x": r.standard_normal((8, 10))}

    def drop_fwd():
        return nn.dropout_forward(drop["x"], 0.5, np.random.default_rng(99), train=True)[0]

    def drop_bwd(g):
        _, mask = nn.dropout_forward(drop["x"], 0.5, np.random.default_rng(99), train=True)
        return {"x": nn.dropout_backward(g, mask)}

    cases.append(("dropout (fixed mask)", drop_fwd, drop_bwd, drop, 30))
    return cases


def test_criterion_1_gradient_oracles(acceptance):
    start = time.perf_counter()
    r = np.random.default_rng(2024)
    layer_worst, layer_points = {}, {}
    for name, fwd, bwd, tensors, points in _layer_cases(r):
        worst, n = layer_gradcheck(fwd, bwd, tensors, r, points=points, eps=1e-3)
        layer_worst[name] = max(worst.values())
        layer_points[name] = n

    # full hinge loss through the desk preset, dropout off
    model = generic_model(desk_tower(0.0), HeadConfig(64, 0.0), seed=7)
    x1 = r.random((4, 3, 8, 32, 32))
    x2 = r.random((4, 3, 8, 32, 32))
    e2e = siamese_gradcheck(model, x1, x2, np.array([1, 1, -1, -1]), r, points_per_tensor=2, eps=1e-6)
    elapsed = time.perf_counter() - start

    layers_ok = all(w < 1e-3 for w in layer_worst.values()) and min(layer_points.values()) >= 20
    e2e_ok = e2e.max() < 1e-2 and len(e2e) >= 20
    ok = layers_ok and e2e_ok and elapsed < 120
    worst_layer = max(layer_worst, key=layer_worst.get)
    acceptance(
        1,
        ok,
        f"layers max rel err {layer_worst[worst_layer]:.2e} ({worst_layer}; {min(layer_points.values())}+ points each, "
        f"< 1e-3), end-to-end desk max rel err {e2e.max():.2e} over {len(e2e)} points (< 1e-2), {elapsed:.1f}s (< 120s)",
    )
    assert ok


# -- 2. miner statistics --------------------------------------------------


def test_criterion_2_miner_statistics(desk_ds, acceptance):
    start = time.perf_counter()
    cfg = MinerConfig(10, 0.3, (32, 32, 8), max_resample_attempts=TRAIN_RESAMPLE_ATTEMPTS)
    view = desk_ds.unlabeled()
    r = np.random.default_rng(7)
    batches = [mine_batch(view, cfg, r) for _ in range(1000)]
    elapsed = time.perf_counter() - start

    pos_counts = [int(np.sum(b.labels == 1)) for b in batches]
    positives = [s for b in batches for s in b.samples if s.label == 1]
    negatives = [s for b in batches for s in b.samples if s.label == -1]
    pos_ok = sum(s.s1.video_id == s.s2.video_id and not volumes_overlap(s.s1, s.s2) for s in positives)
    neg_ok = sum(s.s1.video_id != s.s2.video_id for s in negatives)
    counts = transform_kind_counts(batches)
    total = sum(counts.values())
    freqs = {k.value: c / total for k, c in counts.items()}

    ok = (
        all(c == 3 for c in pos_counts)
        and pos_ok == len(positives)
        and neg_ok == len(negatives)
        and all(0.23 <= f <= 0.27 for f in freqs.values())
        and elapsed < 60
    )
    acceptance(
        2,
        ok,
        f"positives per batch {min(pos_counts)}..{max(pos_counts)} (== 3), valid positives {pos_ok}/{len(positives)}, "
        f"cross-video negatives {neg_ok}/{len(negatives)}, kind freqs "
        + ", ".join(f"{k}={v:.4f}" for k, v in freqs.items())
        + f" (in [0.23, 0.27]), {elapsed:.1f}s (< 60s)",
    )
    assert ok


# -- 3. purity bound ------------------------------------------------------


def test_criterion_3_purity_bound(tmp_path, acceptance):
    r = np.random.default_rng(33)
    cfg = MinerConfig(10, 0.3, (4, 4, 4))
    trials = math.ceil(10_000 / cfg.n_neg)
    violations, rows = 0, []
    for i in range(20):
        m = int(r.integers(2, 7))
        counts = [int(c) for c in r.integers(1, 9, m)]
        ds = synth_dataset(tmp_path / f"d{i}", m, counts, 12, 12, 8, seed=int(r.integers(2**31)))
        emp = empirical_negative_purity(ds, cfg, trials, r)
        bound = negative_purity_bound(counts)
        violations += emp > bound
        rows.append(bound - emp)
    ok = violations == 0
    acceptance(
        3,
        ok,
        f"{violations} violations over 20 datasets ({trials * cfg.n_neg} negatives each), "
        f"smallest margin bound - empirical = {min(rows):.4f}",
    )
    assert ok


# -- 4. hinge oracles -----------------------------------------------------


def test_criterion_4_hinge_oracles(acceptance):
    model = SiameseModel.init(desk_tower(), rng=np.random.default_rng(0))
    got = [
        hinge_loss(np.float32([1.0]), np.array([1]), model, lam=0.0),
        hinge_loss(np.float32([-1.0]), np.array([1]), model, lam=0.0, n_pos=1, n_neg=0),
        hinge_loss(np.zeros(10, np.float32), np.array([1] * 3 + [-1] * 7), model, lam=0.0, n_pos=3, n_neg=7),
    ]
    ok = [np.float32(g) for g in got] == [np.float32(0.0), np.float32(2.0), np.float32(2.0)]
    acceptance(4, ok, f"hinge values {[float(g) for g in got]} (expected [0.0, 2.0, 2.0] in float32)")
    assert ok


# -- 5. end-to-end learning -----------------------------------------------


@pytest.mark.slow
def test_criterion_5_end_to_end_learning(tmp_path, acceptance):
    start = time.perf_counter()
    ds = synth_dataset(tmp_path / "train", 4, 8, 32, 32, 16, seed=0)
    cfg = TrainConfig.from_json(DESK_CONFIG)
    model, rows = train(ds.unlabeled(), cfg)
    trailing = float(np.mean([row["batch_accuracy"] for row in rows[-200:]]))

    feats = ev.video_features(model, ds, k=10, rng=np.random.default_rng(1))
    p_at_1 = ev.precision_at_1(feats)

    # held-out videos from the same generator with a different seed; pairs are
    # mined from them exactly as in training (same video vs different videos)
    held = synth_dataset(tmp_path / "held", 4, 8, 32, 32, 16, seed=1000)
    mined = ev.mined_pair_protocol(model, held, cfg.miner, 200, np.random.default_rng(3))

    # reported, not asserted: same-class vs different-class video pairs
    held_feats = ev.video_features(model, held, k=10, rng=np.random.default_rng(2))
    by_class = ev.similarity_protocol(model, held_feats, np.random.default_rng(4))
    same = by_class["scores"][by_class["labels"] > 0].mean()
    cross = by_class["scores"][by_class["labels"] < 0].mean()
    elapsed = time.perf_counter() - start

    ok = len(rows) == 2000 and trailing >= 0.95 and p_at_1 >= 0.8 and mined["auc"] >= 0.9 and elapsed < 1800
    acceptance(
        5,
        ok,
        f"trailing accuracy (last 200 of {len(rows)}) {trailing:.4f} (>= 0.95), precision@1 {p_at_1:.4f} (>= 0.8), "
        f"held-out mined-pair AUC {mined['auc']:.4f} over {len(mined['scores'])} pairs (>= 0.9), {elapsed:.0f}s (< 1800s); "
        f"info: same-class video-pair AUC {by_class['auc']:.4f}, mean score same-class {same:.2f} vs "
        f"cross-class {cross:.2f}",
    )
    assert ok


# -- 6. determinism -------------------------------------------------------


def _tree(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def _without_wall(csv_text):
    rows = list(csv.DictReader(io.StringIO(csv_text)))
    for row in rows:
        row.pop("wall_ms")
    return rows


def test_criterion_6_determinism(tmp_path, acceptance):
    assert cli_run(["synth", "--out", str(tmp_path / "ds"), "--seed", "3"]) == 0
    manifest = str(tmp_path / "ds" / "manifest.jsonl")
    base = ["train", "--config", str(DESK_CONFIG), "--manifest", manifest, "--iterations", "40",
            "--checkpoint-interval", "20", "--seed", "11"]
    for name in ("a", "b"):
        assert cli_run(base + ["--out", str(tmp_path / name), "--no-wall-time"]) == 0
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    ckpts = [k for k in a if k.endswith(".ckpt")]
    identical = a == b and len(ckpts) >= 2 and "metrics.csv" in a

    # with wall-clock timing on, only the wall_ms column may differ
    assert cli_run(base + ["--out", str(tmp_path / "c")]) == 0
    c = _tree(tmp_path / "c")
    timed_ok = all(c[k] == a[k] for k in ckpts) and _without_wall(c["metrics.csv"].decode()) == _without_wall(
        a["metrics.csv"].decode()
    )
    ok = identical and timed_ok
    acceptance(
        6,
        ok,
        f"{len(a)} artifacts ({', '.join(sorted(a))}) bitwise identical across two runs: {identical}; "
        f"timed run matches apart from wall_ms: {timed_ok}",
    )
    assert ok


# -- 7. mining cost -------------------------------------------------------


@pytest.mark.slow
def test_criterion_7_mining_cost(tmp_path, acceptance):
    ds = synth_dataset(tmp_path / "big", 2, 2, 320, 240, 64, seed=5).unlabeled()
    shapes = {"small": (32, 32, 8), "large": (64, 64, 8)}
    per_round = {k: {"index": [], "mat": []} for k in shapes}
    for rnd in range(12):
        # alternate the order so drift in machine load hits both sizes alike
        order = ("small", "large") if rnd % 2 == 0 else ("large", "small")
        for name in order:
            rep = bench_mining(ds, MinerConfig(volume_shape=shapes[name]), 40, np.random.default_rng([rnd, 7]))
            assert len(rep.rows) == 40 * 10
            per_round[name]["index"].append(rep.mean_index_time)
            per_round[name]["mat"].append(rep.mean_materialize_time)
    med = {k: {m: float(np.median(v[m])) for m in v} for k, v in per_round.items()}
    index_change = abs(med["large"]["index"] / med["small"]["index"] - 1)
    mat_ratio = med["large"]["mat"] / med["small"]["mat"]
    ok = index_change < 0.10 and mat_ratio >= 2.0
    acceptance(
        7,
        ok,
        f"index time/pair {med['small']['index'] * 1e6:.1f}us -> {med['large']['index'] * 1e6:.1f}us "
        f"(change {index_change:.1%}, < 10%), materialize time/pair {med['small']['mat'] * 1e6:.1f}us -> "
        f"{med['large']['mat'] * 1e6:.1f}us (x{mat_ratio:.2f}, >= 2); "
        f"throughput {1 / med['small']['index']:.0f} / {1 / med['large']['index']:.0f} index pairs/s, "
        f"{1 / (med['small']['index'] + med['small']['mat']):.0f} / "
        f"{1 / (med['large']['index'] + med['large']['mat']):.0f} materialized pairs/s",
    )
    assert ok


# -- 8. transform algebra -------------------------------------------------


def _fuzzed_blocks(r, n):
    """Random small blocks; a third snapped to {0, 0.5, 1} to hit edges and greys."""
    for i in range(n):
        shape = (int(r.integers(1, 4)), int(r.integers(1, 5)), int(r.integers(1, 5)), 3)
        block = r.random(shape, dtype=np.float32)
        if i % 3 == 0:
            block = np.round(block * 2) / 2
        yield block.astype(np.float32)


def test_criterion_8_transform_algebra(acceptance):
    r = np.random.default_rng(8)
    n = 100_000
    involution = fixed_point = out_of_range = 0
    for block in _fuzzed_blocks(r, n):
        involution += not np.array_equal(apply_flip(apply_flip(block)), block)
        fixed_point += not np.array_equal(apply_color(block, ColorParams()), block)
        p = ColorParams(r.uniform(-0.0999, 0.0999), r.uniform(0.501, 1.999), r.uniform(0.701, 1.999))
        kind = Kind.COLOR_THEN_FLIP if r.random() < 0.5 else Kind.COLOR
        out = apply_transform(block, TransformSpec(kind, p))
        out_of_range += not (np.isfinite(out).all() and out.min() >= 0.0 and out.max() <= 1.0)
    ok = involution == fixed_point == out_of_range == 0
    acceptance(
        8,
        ok,
        f"{n} blocks: flip involution violations {involution}, identity-colour fixed-point violations "
        f"{fixed_point}, range violations {out_of_range}",
    )
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-p", "no:cacheprovider"]))
