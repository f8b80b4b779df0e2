"""Unsupervised training loop, Adam, and the binary checkpoint format.

Every iteration draws its own random generator from ``(seed, iteration)``,
so a run resumed from a checkpoint replays exactly the batches and dropout
masks an uninterrupted run would have used.
"""

import csv
import io
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ._io import atomic_write_bytes, atomic_write_text
from .pair_miner import MinerConfig, mine_batch
from .siamese import (
    DEFAULT_LAMBDA,
    HeadConfig,
    SiameseModel,
    TowerConfig,
    blocks_to_input,
    forward_pairs,
    loss_terms,
    siamese_backward,
    tower_preset,
)
from .transforms import apply_transform
from .video_store import materialize

__all__ = [
    "TrainConfig",
    "AdamState",
    "adam_step",
    "TrainingDiverged",
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
    "batch_tensors",
    "batch_accuracy",
    "train",
    "METRICS_COLUMNS",
    "metrics_csv",
    "TRAIN_RESAMPLE_ATTEMPTS",
]

log = logging.getLogger(__name__)

METRICS_COLUMNS = (
    "iteration",
    "loss",
    "data_loss_pos",
    "data_loss_neg",
    "reg_term",
    "batch_accuracy",
    "wall_ms",
)


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# The desk fixture's videos are exactly one volume wide and tall, so a
# disjoint positive pair must split in time; that succeeds on only ~2.5% of
# draws and the library's cap of 100 would fail about one positive in twelve.
TRAIN_RESAMPLE_ATTEMPTS = 1000


def _default_miner(**overrides):
    kw = {"max_resample_attempts": TRAIN_RESAMPLE_ATTEMPTS}
    kw.update(overrides)
    return MinerConfig(**kw)


@dataclass
class TrainConfig:
    miner: MinerConfig = field(default_factory=_default_miner)
    lam: float = DEFAULT_LAMBDA
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    iterations: int = 100
    seed: int = 0
    checkpoint_interval: int = 0
    tower: TowerConfig = field(default_factory=lambda: tower_preset("desk"))
    head: HeadConfig = field(default_factory=HeadConfig)
    regularizer: str = "squared"
    record_wall_time: bool = True

    def __post_init__(self):
        if isinstance(self.miner, dict):
            self.miner = _default_miner(**self.miner)
        if isinstance(self.tower, str):
            self.tower = tower_preset(self.tower)
        elif isinstance(self.tower, dict):
            tower = dict(self.tower)
            preset = tower.pop("preset", None)
            self.tower = (
                tower_preset(preset, **tower) if preset else TowerConfig(**tower)
            )
        if isinstance(self.head, dict):
            self.head = HeadConfig(**self.head)
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.miner.volume_shape != self.tower.volume_shape:
            raise ValueError(
                f"miner volume_shape {self.miner.volume_shape} does not match the "
                f"tower input {self.tower.volume_shape}"
            )

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["miner"] = asdict(self.miner)
        d["miner"]["volume_shape"] = list(self.miner.volume_shape)
        d["tower"] = self.tower.as_dict()
        d["head"] = self.head.as_dict()
        return d


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls(
            {k: np.zeros_like(p) for k, p in params.items()},
            {k: np.zeros_like(p) for k, p in params.items()},
            0,
        )


def adam_step(params, grads, state, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place.  Returns ``(params, state)``."""
    if not state.m:
        state.m = {k: np.zeros_like(p) for k, p in params.items()}
        state.v = {k: np.zeros_like(p) for k, p in params.items()}
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ValueError(f"{k}: shape mismatch {p.shape} / {g.shape} / {state.m[k].shape}")
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
    return params, state


# -- checkpoints ----------------------------------------------------------

_CK_MAGIC = b"STCK"
_CK_VERSION = 1


def _arch_tensors(model):
    t = model.tower
    out = {
        "meta.input_shape": np.array(t.input_shape, np.float32),
        "meta.dropout": np.array([t.dropout, model.head.dropout], np.float32),
    }
    for i, b in enumerate(t.conv, 1):
        out[f"meta.conv{i}"] = np.array(b.stride + b.padding + b.pool, np.float32)
    return out


def checkpoint_bytes(model, state=None):
    """Serialize parameters, Adam moments and step to the STCK layout."""
    tensors = dict(_arch_tensors(model))
    tensors.update(model.params)
    if state is not None:
        for k in model.params:
            tensors[f"adam.m/{k}"] = state.m.get(k, np.zeros_like(model.params[k]))
            tensors[f"adam.v/{k}"] = state.v.get(k, np.zeros_like(model.params[k]))
        # float32 holds integers exactly up to 2**24
        tensors["adam.step"] = np.array(state.step, np.float32)
    buf = io.BytesIO()
    buf.write(_CK_MAGIC)
    buf.write(struct.pack("<II", _CK_VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def save_checkpoint(model, state, path):
    atomic_write_bytes(path, checkpoint_bytes(model, state))


def _read_tensors(data):
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("checkpoint is truncated or corrupt")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != _CK_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != _CK_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = bytes(take(n)).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(bytes(take(4 * size)), dtype="<f4").reshape(shape)
        tensors[name] = arr.astype(np.float32)
    if pos != len(view):
        raise CheckpointError("trailing bytes after last tensor")
    return tensors


def load_checkpoint(path):
    """Rebuild ``(model, AdamState)`` from a checkpoint file.

    The architecture is recovered from the ``meta.*`` tensors and the
    parameter shapes.
    """
    data = Path(path).read_bytes()
    tensors = _read_tensors(data)
    try:
        input_shape = tuple(int(v) for v in tensors["meta.input_shape"])
        tower_drop, head_drop = (float(v) for v in tensors["meta.dropout"])
        conv = []
        i = 1
        while f"meta.conv{i}" in tensors:
            meta = [int(v) for v in tensors[f"meta.conv{i}"]]
            w = tensors[f"tower.conv{i}.w"]
            conv.append(
                dict(
                    out_channels=w.shape[0],
                    kernel=w.shape[2:],
                    stride=meta[0:3],
                    padding=meta[3:6],
                    pool=meta[6:9],
                )
            )
            i += 1
        fc_names = sorted(
            {k.split(".")[1] for k in tensors if k.startswith("tower.fc")},
            key=lambda s: int(s[2:]),
        )
        fc = [tensors[f"tower.{n}.w"].shape[0] for n in fc_names]
        hidden = tensors["head.fc1.w"].shape[0]
    except (KeyError, ValueError, IndexError) as exc:
        raise CheckpointError(f"checkpoint lacks architecture data: {exc}") from exc
    tower = TowerConfig(input_shape, conv, fc, tower_drop)
    model = SiameseModel(tower, HeadConfig(hidden, head_drop))
    expected = SiameseModel.init(tower, model.head, np.random.default_rng(0)).params
    for k, ref in expected.items():
        if k not in tensors or tensors[k].shape != ref.shape:
            raise CheckpointError(f"parameter {k} missing or misshapen")
        model.params[k] = tensors[k].copy()
    state = AdamState()
    if "adam.step" in tensors:
        state.step = int(tensors["adam.step"].reshape(-1)[0])
        state.m = {k: tensors[f"adam.m/{k}"].copy() for k in expected}
        state.v = {k: tensors[f"adam.v/{k}"].copy() for k in expected}
    return model, state


# -- training -------------------------------------------------------------


def _iteration_rng(seed, iteration):
    return np.random.default_rng([seed, 1, iteration])


def batch_tensors(dataset, batch):
    """Materialize a mined batch into ``(x1, x2, y)`` network inputs."""
    first, second = [], []
    for s in batch.samples:
        first.append(materialize(dataset, s.s1).pixels)
        second.append(apply_transform(materialize(dataset, s.s2), s.transform).pixels)
    return blocks_to_input(first), blocks_to_input(second), batch.labels.astype(np.int64)


def batch_accuracy(t, y):
    """Mean of ``sign(t) == y``; a score of exactly 0 counts as wrong."""
    t = np.asarray(t)
    return float(np.mean(np.where(t > 0, 1, np.where(t < 0, -1, 0)) == y))


def metrics_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for r in rows:
        w.writerow(
            [
                r["iteration"],
                repr(r["loss"]),
                repr(r["data_loss_pos"]),
                repr(r["data_loss_neg"]),
                repr(r["reg_term"]),
                repr(r["batch_accuracy"]),
                "" if r["wall_ms"] is None else f"{r['wall_ms']:.3f}",
            ]
        )
    return buf.getvalue()


def train(dataset, config, out_dir=None, resume=None, callback=None):
    """Train a Siamese model on pairs mined from ``dataset``.

    Labels are stripped before mining.  With ``out_dir`` the metrics CSV,
    periodic checkpoints and ``final.ckpt`` are written there.  ``resume``
    may be a checkpoint path; training continues from its step counter.
    Returns ``(model, metrics_rows)``.
    """
    view = dataset.unlabeled()
    if resume is not None:
        model, state = load_checkpoint(resume)
    else:
        model = SiameseModel.init(
            config.tower, config.head, np.random.default_rng([config.seed, 0])
        )
        state = AdamState.zeros_like(model.params)
    out_dir = Path(out_dir) if out_dir is not None else None
    cfg = config.miner

    rows = []
    for it in range(state.step, config.iterations):
        start = time.perf_counter()
        rng = _iteration_rng(config.seed, it)
        batch = mine_batch(view, cfg, rng)
        x1, x2, y = batch_tensors(view, batch)
        t, cache = forward_pairs(model, x1, x2, train=True, rng=rng)
        terms = loss_terms(t, y, model, config.lam, batch.n_pos, batch.n_neg, config.regularizer)
        if not np.isfinite(terms.total):
            raise TrainingDiverged(
                f"non-finite loss at iteration {it}: {terms}; scores {t.tolist()}"
            )
        grads = siamese_backward(
            model, cache, t, y, config.lam, batch.n_pos, batch.n_neg, config.regularizer
        )
        adam_step(model.params, grads, state, config.lr, config.beta1, config.beta2, config.eps)
        wall = (time.perf_counter() - start) * 1000.0 if config.record_wall_time else None
        row = {
            "iteration": it,
            "loss": terms.total,
            "data_loss_pos": terms.pos,
            "data_loss_neg": terms.neg,
            "reg_term": terms.reg,
            "batch_accuracy": batch_accuracy(t, y),
            "wall_ms": wall,
        }
        rows.append(row)
        if callback is not None:
            callback(row)
        if it % 100 == 0:
            log.info("iter %d loss %.4f acc %.2f", it, terms.total, row["batch_accuracy"])
        if (
            out_dir is not None
            and config.checkpoint_interval
            and (it + 1) % config.checkpoint_interval == 0
        ):
            save_checkpoint(model, state, out_dir / f"step{it + 1:07d}.ckpt")

    if out_dir is not None:
        save_checkpoint(model, state, out_dir / "final.ckpt")
        atomic_write_text(out_dir / "metrics.csv", metrics_csv(rows))
    return model, rows
