"""Evaluation: pooled video features, retrieval, pair similarity, ROC,
and receptive-field boxes for the strongest last-pool responses."""

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from ._io import atomic_write_text
from .pair_miner import mine_batch
from .siamese import blocks_to_input, forward_pairs
from .trainer import batch_tensors
from .video_store import materialize, sample_volume

__all__ = [
    "VideoFeature",
    "RocPoint",
    "video_feature",
    "video_features",
    "nearest_neighbors",
    "precision_at_1",
    "retrieval_csv",
    "similarity_score",
    "classify",
    "best_threshold",
    "pair_accuracy",
    "roc_curve",
    "auc_by_ranking",
    "roc_csv",
    "similarity_protocol",
    "mined_pair_protocol",
    "ReceptiveField",
    "receptive_fields",
    "unit_box",
    "RegionResult",
    "top_response_regions",
    "boxes_jsonl",
]


@dataclass(frozen=True, eq=False)
class VideoFeature:
    video_id: int
    vector: np.ndarray
    num_volumes: int
    label: str | None = None


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    tpr: float
    fpr: float


def _tower_features(model, pixels, batch=32):
    out = []
    for i in range(0, len(pixels), batch):
        f, _ = model.tower_forward(blocks_to_input(pixels[i : i + batch]), train=False)
        out.append(f)
    return np.concatenate(out)


def video_feature(model, dataset, video_id, k=10, shape=None, rng=None):
    """Mean of the fc7-role features of ``k`` random volumes of one video."""
    shape = shape or model.tower.volume_shape
    rng = rng if rng is not None else np.random.default_rng(0)
    video = dataset.video(video_id)
    pixels = [
        materialize(dataset, sample_volume(video, shape, rng)).pixels for _ in range(k)
    ]
    feats = _tower_features(model, pixels)
    return VideoFeature(video_id, feats.mean(axis=0), k, video.label)


def video_features(model, dataset, k=10, rng=None):
    rng = rng if rng is not None else np.random.default_rng(0)
    return [video_feature(model, dataset, v.id, k, rng=rng) for v in dataset.videos]


def _distances(query, others, metric):
    if metric == "euclidean":
        return np.sqrt(np.sum((others - query) ** 2, axis=1, dtype=np.float64))
    if metric == "cosine":
        qn = np.linalg.norm(query)
        on = np.linalg.norm(others, axis=1)
        denom = np.where(on * qn > 0, on * qn, 1.0)
        return 1.0 - (others @ query) / denom
    raise ValueError(f"unknown metric {metric!r}")


def nearest_neighbors(features, query_id, k=1, metric="euclidean"):
    """``k`` closest videos to ``query_id`` as ``(video_id, distance)``,
    nearest first; equal distances are ordered by ascending id."""
    by_id = {f.video_id: f for f in features}
    if query_id not in by_id:
        raise KeyError(f"query video {query_id} not in feature set")
    if not 1 <= k < len(features):
        raise ValueError(f"k must be in [1, {len(features) - 1}], got {k}")
    others = [f for f in features if f.video_id != query_id]
    ids = np.array([f.video_id for f in others])
    dist = _distances(
        np.asarray(by_id[query_id].vector, np.float64),
        np.stack([np.asarray(f.vector, np.float64) for f in others]),
        metric,
    )
    order = np.lexsort((ids, dist))[:k]
    return [(int(ids[i]), float(dist[i])) for i in order]


def precision_at_1(features, metric="euclidean"):
    """Fraction of videos whose nearest neighbour carries the same label."""
    labels = {f.video_id: f.label for f in features}
    if any(v is None for v in labels.values()):
        raise ValueError("precision@1 needs labelled features")
    hits = [
        labels[nearest_neighbors(features, f.video_id, 1, metric)[0][0]] == f.label
        for f in features
    ]
    return float(np.mean(hits))


def retrieval_csv(features, k=5, metric="euclidean"):
    labels = {f.video_id: f.label for f in features}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["query_id", "rank", "neighbor_id", "distance", "neighbor_label"])
    for f in features:
        for rank, (nid, d) in enumerate(nearest_neighbors(features, f.video_id, k, metric), 1):
            w.writerow([f.video_id, rank, nid, repr(d), labels[nid] or ""])
    return buf.getvalue()


def similarity_score(model, f1, f2):
    """Head output for feature pairs, in inference mode."""
    t, _ = model.head_forward(np.atleast_2d(f1), np.atleast_2d(f2), train=False)
    return t if np.ndim(f1) > 1 else float(t[0])


def classify(score, threshold=0.0):
    """+1 when ``score > threshold`` strictly, else -1."""
    return np.where(np.asarray(score) > threshold, 1, -1)


def pair_accuracy(scores, labels, threshold):
    return float(np.mean(classify(scores, threshold) == np.asarray(labels)))


def best_threshold(scores, labels):
    """Threshold maximizing accuracy; candidates sit between sorted scores."""
    s = np.unique(np.asarray(scores, np.float64))
    candidates = np.concatenate([[s[0] - 1.0], (s[:-1] + s[1:]) / 2, [s[-1] + 1.0]])
    acc = [pair_accuracy(scores, labels, c) for c in candidates]
    i = int(np.argmax(acc))
    return float(candidates[i]), acc[i]


def roc_curve(scores, labels):
    """ROC swept over every distinct score (predict positive when
    ``score >= threshold``), from the strictest threshold down.

    Returns ``(points, auc)``; the first point is ``(inf, 0, 0)`` and the
    area is integrated with the trapezoidal rule.
    """
    scores = np.asarray(scores, np.float64)
    labels = np.asarray(labels)
    pos = labels > 0
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both positive and negative labels")
    points = [RocPoint(float("inf"), 0.0, 0.0)]
    for thr in np.unique(scores)[::-1]:
        pred = scores >= thr
        points.append(
            RocPoint(float(thr), float((pred & pos).sum() / n_pos), float((pred & ~pos).sum() / n_neg))
        )
    fpr = np.array([p.fpr for p in points])
    tpr = np.array([p.tpr for p in points])
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2))
    return points, auc


def auc_by_ranking(scores, labels):
    """Probability a random positive outscores a random negative (ties 1/2)."""
    scores = np.asarray(scores, np.float64)
    labels = np.asarray(labels)
    p, n = scores[labels > 0], scores[labels <= 0]
    wins = (p[:, None] > n[None, :]).sum() + 0.5 * (p[:, None] == n[None, :]).sum()
    return float(wins / (len(p) * len(n)))


def roc_csv(points, auc):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["threshold", "tpr", "fpr"])
    for p in points:
        w.writerow([repr(p.threshold), repr(p.tpr), repr(p.fpr)])
    w.writerow(["auc", repr(auc), ""])
    return buf.getvalue()


def _pair_scores(model, feats, idx):
    f1 = np.stack([feats[i].vector for i, _ in idx])
    f2 = np.stack([feats[j].vector for _, j in idx])
    labels = np.array([1 if feats[i].label == feats[j].label else -1 for i, j in idx])
    return similarity_score(model, f1, f2), labels


def similarity_protocol(model, feats, rng, val_fraction=0.5):
    """Score every pair of distinct videos, pick the threshold on a
    validation split and report accuracy and ROC on the rest."""
    pairs = [(i, j) for i in range(len(feats)) for j in range(i + 1, len(feats))]
    order = rng.permutation(len(pairs))
    n_val = int(round(val_fraction * len(pairs)))
    val = [pairs[k] for k in order[:n_val]]
    test = [pairs[k] for k in order[n_val:]]
    val_scores, val_labels = _pair_scores(model, feats, val)
    threshold, _ = best_threshold(val_scores, val_labels)
    scores, labels = _pair_scores(model, feats, test)
    points, auc = roc_curve(scores, labels)
    return {
        "threshold": threshold,
        "accuracy": pair_accuracy(scores, labels, threshold),
        "auc": auc,
        "points": points,
        "scores": scores,
        "labels": labels,
    }


def mined_pair_protocol(model, dataset, config, batches, rng):
    """Score pairs mined from ``dataset`` exactly as in training.

    Labels are the miner's own: +1 for two disjoint volumes of one video,
    -1 for volumes of two different videos, so no manifest labels are
    needed.  Accuracy uses the training decision rule (threshold 0).
    """
    view = dataset.unlabeled() if dataset.has_labels else dataset
    scores, labels = [], []
    for _ in range(batches):
        batch = mine_batch(view, config, rng)
        x1, x2, y = batch_tensors(view, batch)
        t, _ = forward_pairs(model, x1, x2)
        scores.append(t)
        labels.append(y)
    scores, labels = np.concatenate(scores), np.concatenate(labels)
    points, auc = roc_curve(scores, labels)
    return {
        "threshold": 0.0,
        "accuracy": pair_accuracy(scores, labels, 0.0),
        "auc": auc,
        "points": points,
        "scores": scores,
        "labels": labels,
    }


# -- receptive fields -----------------------------------------------------


@dataclass(frozen=True)
class ReceptiveField:
    """Per-axis ``(t, y, x)`` geometry of one layer's units in input space.

    Unit ``u`` covers input coordinates ``[u * jump + start, u * jump + start + size)``.
    """

    size: tuple
    jump: tuple
    start: tuple


def receptive_fields(tower):
    """Receptive field after every conv and every pool, composed analytically."""
    size, jump, start = [1, 1, 1], [1, 1, 1], [0, 0, 0]
    layers = []
    for blk in tower.conv:
        for k, s, p in ((blk.kernel, blk.stride, blk.padding), (blk.pool, blk.pool, (0, 0, 0))):
            for a in range(3):
                size[a] += (k[a] - 1) * jump[a]
                start[a] -= p[a] * jump[a]
                jump[a] *= s[a]
            layers.append(ReceptiveField(tuple(size), tuple(jump), tuple(start)))
    return layers


def unit_box(rf, unit, input_extent):
    """Clipped ``(lo, hi)`` half-open interval per axis for ``unit = (t, y, x)``."""
    box = []
    for a in range(3):
        lo = unit[a] * rf.jump[a] + rf.start[a]
        hi = lo + rf.size[a]
        box.append((max(lo, 0), min(hi, input_extent[a])))
    return tuple(box)


@dataclass
class RegionResult:
    boxes: list  # (frame, x_min, y_min, x_max, y_max), inclusive pixel coordinates
    heat: np.ndarray  # (T, H, W) receptive-field counts
    degenerate: bool = False


def top_response_regions(model, block, tau=0.5):
    """Boxes around the input region covered by the max-response unit of
    each last-pool channel.

    For every channel with a positive maximum, the receptive field of its
    arg-max unit (first in scan order on ties) is added to a heat count;
    the count is thresholded at ``tau * max`` and each frame gets the tight
    box of the surviving pixels.  When no channel responds the result is a
    full-frame box per frame with ``degenerate`` set.
    """
    pixels = block.pixels if hasattr(block, "pixels") else np.asarray(block)
    x = blocks_to_input([pixels])
    pooled, _ = model.conv_features(x)
    pooled = pooled[0]
    _, t_in, h_in, w_in = model.tower.input_shape
    extent = (t_in, h_in, w_in)
    rf = receptive_fields(model.tower)[-1]
    heat = np.zeros(extent, dtype=np.int64)
    for channel in pooled:
        if channel.max() <= 0:
            continue
        unit = np.unravel_index(int(np.argmax(channel)), channel.shape)
        (t0, t1), (y0, y1), (x0, x1) = unit_box(rf, unit, extent)
        heat[t0:t1, y0:y1, x0:x1] += 1
    if heat.max() == 0:
        boxes = [(f, 0, 0, w_in - 1, h_in - 1) for f in range(t_in)]
        return RegionResult(boxes, heat, degenerate=True)
    mask = heat >= tau * heat.max()
    boxes = []
    for f in range(t_in):
        ys, xs = np.nonzero(mask[f])
        if len(ys):
            boxes.append((f, int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())))
    return RegionResult(boxes, heat)


def boxes_jsonl(video_id, result):
    return "".join(
        json.dumps(
            {"video_id": video_id, "frame": f, "x_min": x0, "y_min": y0, "x_max": x1, "y_max": y1}
        )
        + "\n"
        for f, x0, y0, x1, y1 in result.boxes
    )


def write_text(path, text):
    atomic_write_text(path, text)
