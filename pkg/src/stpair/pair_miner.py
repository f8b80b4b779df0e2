"""Online mining of labelled volume pairs from unlabelled videos.

A batch of ``B`` pairs holds ``N_p = round(p B)`` positives (two disjoint
volumes of one video) followed by ``N_n = B - N_p`` negatives (volumes of
two different videos).  Mining only produces indices and transform specs;
pixels are read later, which keeps a pair's cost independent of its size.
"""

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from ._io import atomic_write_text
from .transforms import IDENTITY, Kind, TransformSpec, apply_transform, sample_transform
from .video_store import (
    VolumeIndex,
    admits_disjoint_pair,
    materialize,
    sample_volume,
    volumes_overlap,
)

__all__ = [
    "MiningError",
    "DatasetTooSmallError",
    "ResampleExhaustedError",
    "MinerConfig",
    "PairSample",
    "PairBatch",
    "positive_count",
    "mine_batch",
    "iter_pairs",
    "negative_purity_bound",
    "empirical_negative_purity",
    "BenchReport",
    "transform_kind_counts",
    "bench_mining",
    "dump_batches",
]


class MiningError(Exception):
    pass


class DatasetTooSmallError(MiningError):
    pass


class ResampleExhaustedError(MiningError):
    pass


def positive_count(batch_size, pos_ratio):
    """``round(p * B)`` with halves rounded up."""
    return int(math.floor(pos_ratio * batch_size + 0.5))


@dataclass(frozen=True)
class MinerConfig:
    batch_size: int = 10
    pos_ratio: float = 0.3
    volume_shape: tuple = (32, 32, 8)
    transform_positives: bool = True
    transform_negatives: bool = True
    max_resample_attempts: int = 100

    def __post_init__(self):
        object.__setattr__(self, "volume_shape", tuple(int(s) for s in self.volume_shape))
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if not 0.0 <= self.pos_ratio <= 1.0:
            raise ValueError(f"pos_ratio must be in [0, 1], got {self.pos_ratio}")
        n_pos = positive_count(self.batch_size, self.pos_ratio)
        if n_pos < 1 or self.batch_size - n_pos < 1:
            raise ValueError(
                f"batch_size={self.batch_size}, pos_ratio={self.pos_ratio} leaves "
                f"{n_pos} positives and {self.batch_size - n_pos} negatives; need >= 1 of each"
            )
        if self.max_resample_attempts < 1:
            raise ValueError("max_resample_attempts must be >= 1")
        if len(self.volume_shape) != 3 or min(self.volume_shape) < 1:
            raise ValueError(f"volume_shape must be three positive extents, got {self.volume_shape}")

    @property
    def n_pos(self):
        return positive_count(self.batch_size, self.pos_ratio)

    @property
    def n_neg(self):
        return self.batch_size - self.n_pos


@dataclass(frozen=True)
class PairSample:
    s1: VolumeIndex
    s2: VolumeIndex
    label: int
    transform: TransformSpec = IDENTITY

    def as_dict(self):
        return {
            "label": self.label,
            "s1": self.s1.as_dict(),
            "s2": self.s2.as_dict(),
            "transform": self.transform.as_dict(),
        }


@dataclass(frozen=True)
class PairBatch:
    samples: tuple
    n_pos: int
    n_neg: int

    @property
    def labels(self):
        return np.array([s.label for s in self.samples], dtype=np.int8)

    def __len__(self):
        return len(self.samples)


def _check_dataset(dataset, config):
    if len(dataset) < 2:
        raise DatasetTooSmallError(f"need at least 2 videos to mine negatives, got {len(dataset)}")


def _mine_positive(dataset, config, rng):
    n = len(dataset)
    video = dataset.video(int(rng.integers(1, n + 1)))
    if not admits_disjoint_pair(video, config.volume_shape):
        raise ResampleExhaustedError(
            f"video {video.id} ({video.width}x{video.height}x{video.frame_count}) "
            f"cannot hold two disjoint {config.volume_shape} volumes"
        )
    for _ in range(config.max_resample_attempts):
        s1 = sample_volume(video, config.volume_shape, rng)
        s2 = sample_volume(video, config.volume_shape, rng)
        if not volumes_overlap(s1, s2):
            spec = sample_transform(rng) if config.transform_positives else IDENTITY
            return PairSample(s1, s2, +1, spec)
    raise ResampleExhaustedError(
        f"no disjoint volume pair in video {video.id} after "
        f"{config.max_resample_attempts} attempts"
    )


def _mine_negative(dataset, config, rng):
    n = len(dataset)
    m = int(rng.integers(1, n + 1))
    k = int(rng.integers(1, n))
    k = k + 1 if k >= m else k
    s1 = sample_volume(dataset.video(m), config.volume_shape, rng)
    s2 = sample_volume(dataset.video(k), config.volume_shape, rng)
    spec = sample_transform(rng) if config.transform_negatives else IDENTITY
    return PairSample(s1, s2, -1, spec)


def iter_pairs(dataset, config, rng):
    """Yield one batch's pairs one at a time (positives first)."""
    _check_dataset(dataset, config)
    for _ in range(config.n_pos):
        yield _mine_positive(dataset, config, rng)
    for _ in range(config.n_neg):
        yield _mine_negative(dataset, config, rng)


def mine_batch(dataset, config, rng):
    samples = tuple(iter_pairs(dataset, config, rng))
    return PairBatch(samples, config.n_pos, config.n_neg)


def negative_purity_bound(class_counts):
    """Upper bound ``(max_k n_k / sum_k n_k)^2 * m`` on the chance that a
    random cross-video pair shares a class."""
    counts = list(class_counts)
    if not counts:
        raise ValueError("class_counts is empty")
    if min(counts) < 1:
        raise ValueError(f"class counts must be >= 1, got {counts}")
    return (max(counts) / sum(counts)) ** 2 * len(counts)


def empirical_negative_purity(dataset, config, trials, rng):
    """Fraction of mined negatives whose two videos carry the same label.

    Labels are read from ``dataset`` only to score the pairs; mining itself
    runs on the label-free view.
    """
    if not dataset.has_labels:
        raise ValueError("empirical purity needs a labelled dataset")
    labels = dataset.labels
    view = dataset.unlabeled()
    same = total = 0
    for _ in range(trials):
        batch = mine_batch(view, config, rng)
        for s in batch.samples:
            if s.label < 0:
                total += 1
                same += labels[s.s1.video_id - 1] == labels[s.s2.video_id - 1]
    return same / total


@dataclass
class BenchReport:
    """Per-pair timings from :func:`bench_mining`, in nanoseconds."""

    rows: list = field(default_factory=list)

    @property
    def index_times(self):
        return np.array([r[3] for r in self.rows], dtype=np.float64)

    @property
    def materialize_times(self):
        return np.array([r[4] for r in self.rows], dtype=np.float64)

    @property
    def mean_index_time(self):
        return float(self.index_times.mean()) * 1e-9

    @property
    def mean_materialize_time(self):
        return float(self.materialize_times.mean()) * 1e-9

    @property
    def pairs_per_second(self):
        return 1.0 / self.mean_index_time

    def summary(self):
        return {
            "pairs_per_second": self.pairs_per_second,
            "mean_index_time": self.mean_index_time,
            "mean_materialize_time": self.mean_materialize_time,
        }

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "pair_index", "label", "index_time_ns", "materialize_time_ns"])
        w.writerows(self.rows)
        return buf.getvalue()

    def write_csv(self, path):
        atomic_write_text(path, self.to_csv())


def bench_mining(dataset, config, iterations, rng, materialize_pixels=True):
    """Time index generation and pixel materialization separately per pair.

    Each iteration mines a whole batch first and then materializes it, as
    the training loop does; interleaving the two per pair would charge
    index generation for the cache traffic of the previous read.
    Materialization covers reading both volumes and applying the pair's
    transform.  ``pairs_per_second`` refers to index generation alone.
    """
    _check_dataset(dataset, config)
    report = BenchReport()
    clock = time.perf_counter_ns
    for it in range(iterations):
        pairs, index_ns = [], []
        for j in range(config.batch_size):
            mine = _mine_positive if j < config.n_pos else _mine_negative
            t0 = clock()
            pairs.append(mine(dataset, config, rng))
            index_ns.append(clock() - t0)
        for j, pair in enumerate(pairs):
            t0 = clock()
            if materialize_pixels:
                materialize(dataset, pair.s1)
                apply_transform(materialize(dataset, pair.s2), pair.transform)
            report.rows.append((it, j, pair.label, index_ns[j], clock() - t0))
    return report


def dump_batches(path, batches):
    """Write mined pairs as JSON lines, one :class:`PairSample` per line."""
    lines = [json.dumps(s.as_dict()) for b in batches for s in b.samples]
    atomic_write_text(path, "".join(line + "\n" for line in lines))


def transform_kind_counts(batches):
    counts = {k: 0 for k in Kind}
    for b in batches:
        for s in b.samples:
            counts[s.transform.kind] += 1
    return counts
