"""Siamese 3-D conv network: a shared tower, a two-layer head, hinge loss.

Both members of every pair go through the same tower in a single batch,
so weight sharing is structural and tower gradients from the two branches
add up without bookkeeping.  The head sees ``concat(f1, f2)`` and emits a
raw scalar ``t`` which the class-balanced hinge loss compares to ``y``.
"""

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import nn_core as nn

__all__ = [
    "ConvBlock",
    "TowerConfig",
    "HeadConfig",
    "desk_tower",
    "full_tower",
    "tower_preset",
    "SiameseModel",
    "blocks_to_input",
    "LossTerms",
    "loss_terms",
    "hinge_loss",
    "hinge_grad",
    "regularizer",
    "forward_pairs",
    "siamese_backward",
    "loss_and_grads",
    "DEFAULT_LAMBDA",
]

DEFAULT_LAMBDA = 0.0005


@dataclass(frozen=True)
class ConvBlock:
    """conv -> relu -> max-pool; pooling stride equals the window."""

    out_channels: int
    kernel: tuple = (3, 3, 3)
    stride: tuple = (1, 1, 1)
    padding: tuple = (1, 1, 1)
    pool: tuple = (2, 2, 2)

    def __post_init__(self):
        for name in ("kernel", "stride", "padding", "pool"):
            v = getattr(self, name)
            object.__setattr__(self, name, tuple(int(a) for a in ((v,) * 3 if np.isscalar(v) else v)))


@dataclass(frozen=True)
class TowerConfig:
    input_shape: tuple = (3, 8, 32, 32)  # (C, T, H, W)
    conv: tuple = ()
    fc: tuple = (128, 128)
    dropout: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(
            self,
            "conv",
            tuple(b if isinstance(b, ConvBlock) else ConvBlock(**b) for b in self.conv),
        )
        object.__setattr__(self, "fc", tuple(int(d) for d in self.fc))
        if not self.fc or min(self.fc) < 1:
            raise ValueError("tower needs at least one fc layer with positive width")
        if self.flat_dim < 1:
            raise ValueError("tower shape algebra gives an empty feature map")

    @property
    def feature_dim(self):
        return self.fc[-1]

    @property
    def volume_shape(self):
        """Input extents in ``(x0, y0, t0)`` order, as used by the miner."""
        _, t, h, w = self.input_shape
        return (w, h, t)

    def feature_map_shapes(self):
        """``(C, T, H, W)`` after each conv block's pooling."""
        shapes = []
        c, *spatial = self.input_shape
        for blk in self.conv:
            spatial = nn.conv3d_output_shape(spatial, blk.kernel, blk.stride, blk.padding)
            spatial = nn.maxpool3d_output_shape(spatial, blk.pool)
            c = blk.out_channels
            shapes.append((c,) + tuple(spatial))
        return shapes

    @property
    def flat_dim(self):
        shape = self.feature_map_shapes()[-1] if self.conv else self.input_shape
        return int(np.prod(shape))

    def as_dict(self):
        return {
            "input_shape": list(self.input_shape),
            "conv": [
                {
                    "out_channels": b.out_channels,
                    "kernel": list(b.kernel),
                    "stride": list(b.stride),
                    "padding": list(b.padding),
                    "pool": list(b.pool),
                }
                for b in self.conv
            ],
            "fc": list(self.fc),
            "dropout": self.dropout,
        }


@dataclass(frozen=True)
class HeadConfig:
    hidden: int = 64
    dropout: float = 0.5

    def as_dict(self):
        return {"hidden": self.hidden, "dropout": self.dropout}


def desk_tower(dropout=0.5):
    """Four conv blocks (8/16/32/32 channels) on 3x8x32x32 input, 128-d features."""
    return TowerConfig(
        input_shape=(3, 8, 32, 32),
        conv=(
            ConvBlock(8, pool=(1, 2, 2)),
            ConvBlock(16),
            ConvBlock(32),
            ConvBlock(32),
        ),
        fc=(128, 128),
        dropout=dropout,
    )


def full_tower(dropout=0.5):
    """C3D-small-like tower: five conv blocks, two 2048-wide fc layers."""
    return TowerConfig(
        input_shape=(3, 16, 112, 112),
        conv=(
            ConvBlock(64, pool=(1, 2, 2)),
            ConvBlock(128),
            ConvBlock(256),
            ConvBlock(256),
            ConvBlock(256),
        ),
        fc=(2048, 2048),
        dropout=dropout,
    )


_PRESETS = {"desk": desk_tower, "full": full_tower}


def tower_preset(name, **kwargs):
    try:
        return _PRESETS[name](**kwargs)
    except KeyError:
        raise ValueError(f"unknown tower preset {name!r}; choose from {sorted(_PRESETS)}") from None


def blocks_to_input(pixels):
    """Stack ``(t0, y0, x0, 3)`` pixel blocks into a ``(N, 3, T, H, W)`` batch."""
    arr = np.stack([np.asarray(p) for p in pixels])
    return np.ascontiguousarray(arr.transpose(0, 4, 1, 2, 3))


def _uniform_init(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


@dataclass
class SiameseModel:
    tower: TowerConfig
    head: HeadConfig = field(default_factory=HeadConfig)
    params: dict = field(default_factory=dict)

    @classmethod
    def init(cls, tower, head=None, rng=None, dtype=np.float32):
        """Fan-in scaled uniform weights, zero biases."""
        head = head or HeadConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        params = {}
        c_in = tower.input_shape[0]
        for i, blk in enumerate(tower.conv, 1):
            shape = (blk.out_channels, c_in) + blk.kernel
            params[f"tower.conv{i}.w"] = _uniform_init(rng, shape, int(np.prod(shape[1:])), dtype)
            params[f"tower.conv{i}.b"] = np.zeros(blk.out_channels, dtype)
            c_in = blk.out_channels
        d_in = tower.flat_dim
        for name, d_out in zip(cls.fc_names(tower), tower.fc):
            params[f"tower.{name}.w"] = _uniform_init(rng, (d_out, d_in), d_in, dtype)
            params[f"tower.{name}.b"] = np.zeros(d_out, dtype)
            d_in = d_out
        d_in = 2 * tower.feature_dim
        params["head.fc1.w"] = _uniform_init(rng, (head.hidden, d_in), d_in, dtype)
        params["head.fc1.b"] = np.zeros(head.hidden, dtype)
        params["head.fc2.w"] = _uniform_init(rng, (1, head.hidden), head.hidden, dtype)
        params["head.fc2.b"] = np.zeros(1, dtype)
        return cls(tower, head, params)

    @staticmethod
    def fc_names(tower):
        # the last tower fc plays the fc7 role
        n = len(tower.fc)
        return [f"fc{7 - n + 1 + i}" for i in range(n)]

    @property
    def weight_names(self):
        return [k for k in self.params if k.endswith(".w")]

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def copy(self):
        return SiameseModel(self.tower, self.head, {k: v.copy() for k, v in self.params.items()})

    # -- tower -----------------------------------------------------------

    def conv_features(self, x, keep_cache=False):
        """Run the conv blocks; returns the last pooled map (the pool5 role)."""
        p = self.params
        h = np.asarray(x, dtype=self.dtype) - self.dtype.type(0.5)
        cache = []
        for i, blk in enumerate(self.tower.conv, 1):
            w, b = p[f"tower.conv{i}.w"], p[f"tower.conv{i}.b"]
            z, cols = nn.conv3d_forward(h, w, b, blk.stride, blk.padding, return_cols=True)
            a = nn.relu_forward(z)
            pooled, argmax = nn.maxpool3d_forward(a, blk.pool)
            if keep_cache:
                cache.append((h, cols, z, argmax))
            h = pooled
        return h, cache

    def tower_forward(self, x, train=False, rng=None):
        """Features ``(N, d_f)`` for a batch ``(N, C, T, H, W)``.

        Returns ``(features, cache)``; the cache feeds :meth:`tower_backward`.
        """
        x = np.asarray(x)
        if x.shape[1:] != self.tower.input_shape:
            raise nn.ShapeError(f"tower expects (N,) + {self.tower.input_shape}, got {x.shape}")
        pooled, conv_cache = self.conv_features(x, keep_cache=True)
        h = pooled.reshape(len(x), -1)
        fc_cache = []
        for name in self.fc_names(self.tower):
            w, b = self.params[f"tower.{name}.w"], self.params[f"tower.{name}.b"]
            z = nn.fc_forward(h, w, b)
            a = nn.relu_forward(z)
            out, mask = nn.dropout_forward(a, self.tower.dropout, rng, train)
            fc_cache.append((h, z, mask))
            h = out
        return h, (conv_cache, pooled.shape, fc_cache)

    def tower_backward(self, grad_f, cache):
        conv_cache, pooled_shape, fc_cache = cache
        grads = {}
        g = grad_f
        for name, (h, z, mask) in zip(
            reversed(self.fc_names(self.tower)), reversed(fc_cache)
        ):
            g = nn.relu_backward(nn.dropout_backward(g, mask), z)
            g, grads[f"tower.{name}.w"], grads[f"tower.{name}.b"] = nn.fc_backward(
                g, h, self.params[f"tower.{name}.w"]
            )
        g = g.reshape(pooled_shape)
        for i in range(len(self.tower.conv), 0, -1):
            blk = self.tower.conv[i - 1]
            h, cols, z, argmax = conv_cache[i - 1]
            g = nn.maxpool3d_backward(g, argmax, z.shape)
            g = nn.relu_backward(g, z)
            g, grads[f"tower.conv{i}.w"], grads[f"tower.conv{i}.b"] = nn.conv3d_backward(
                g,
                h,
                self.params[f"tower.conv{i}.w"],
                blk.stride,
                blk.padding,
                need_input_grad=i > 1,
                cols=cols,
            )
        return grads

    # -- head ------------------------------------------------------------

    def head_forward(self, f1, f2, train=False, rng=None):
        """Scalar scores ``t`` of shape ``(B,)``; no output nonlinearity."""
        d = self.tower.feature_dim
        if f1.shape[-1] != d or f2.shape[-1] != d:
            raise nn.ShapeError(f"head expects {d}-d features, got {f1.shape} and {f2.shape}")
        p = self.params
        x = nn.concat_forward(np.atleast_2d(f1), np.atleast_2d(f2))
        z = nn.fc_forward(x, p["head.fc1.w"], p["head.fc1.b"])
        a = nn.relu_forward(z)
        h, mask = nn.dropout_forward(a, self.head.dropout, rng, train)
        t = nn.fc_forward(h, p["head.fc2.w"], p["head.fc2.b"])[:, 0]
        return t, (x, z, h, mask)

    def head_backward(self, grad_t, cache):
        x, z, h, mask = cache
        p = self.params
        grads = {}
        g, grads["head.fc2.w"], grads["head.fc2.b"] = nn.fc_backward(
            grad_t[:, None], h, p["head.fc2.w"]
        )
        g = nn.relu_backward(nn.dropout_backward(g, mask), z)
        g, grads["head.fc1.w"], grads["head.fc1.b"] = nn.fc_backward(g, x, p["head.fc1.w"])
        g1, g2 = nn.concat_backward(g, self.tower.feature_dim)
        return grads, g1, g2


class LossTerms(NamedTuple):
    total: float
    pos: float
    neg: float
    reg: float


def _class_weights(y, n_pos, n_neg):
    # a class may be absent (single-pair batches), but a present class
    # needs a positive count to weight by
    if (n_pos < 1 and np.any(y > 0)) or (n_neg < 1 and np.any(y < 0)):
        raise ValueError(f"zero N_p or N_n for a class present in the batch ({n_pos}, {n_neg})")
    return np.where(y > 0, 1.0 / max(n_pos, 1), 1.0 / max(n_neg, 1))


def regularizer(model, kind="squared"):
    """Sum of squared weight entries (``"squared"``) or its square root
    (``"frobenius"``).  Biases are not regularized."""
    sq = sum(float(np.sum(np.square(model.params[k], dtype=np.float64))) for k in model.weight_names)
    if kind == "squared":
        return sq
    if kind == "frobenius":
        return float(np.sqrt(sq))
    raise ValueError(f"unknown regularizer {kind!r}")


def loss_terms(t, y, model, lam=DEFAULT_LAMBDA, n_pos=None, n_neg=None, reg="squared"):
    """Class-balanced hinge loss split into positive, negative and weight terms."""
    t = np.asarray(t, dtype=np.float64)
    y = np.asarray(y)
    if t.shape != y.shape or t.ndim != 1:
        raise ValueError(f"t and y must be 1-D of equal length, got {t.shape}, {y.shape}")
    n_pos = int(np.sum(y > 0)) if n_pos is None else n_pos
    n_neg = int(np.sum(y < 0)) if n_neg is None else n_neg
    if n_pos + n_neg != len(t):
        raise ValueError(f"N_p + N_n = {n_pos + n_neg} but batch has {len(t)} pairs")
    c = _class_weights(y, n_pos, n_neg)
    margin = c * np.maximum(0.0, 1.0 - t * y)
    pos = float(margin[y > 0].sum())
    neg = float(margin[y < 0].sum())
    r = lam * regularizer(model, reg) if lam else 0.0
    return LossTerms(pos + neg + r, pos, neg, r)


def hinge_loss(t, y, model, lam=DEFAULT_LAMBDA, n_pos=None, n_neg=None, reg="squared"):
    return loss_terms(t, y, model, lam, n_pos, n_neg, reg).total


def hinge_grad(t, y, n_pos, n_neg):
    """d(data loss)/dt; zero where the margin is met (including exactly)."""
    t = np.asarray(t)
    y = np.asarray(y)
    c = _class_weights(y, n_pos, n_neg)
    active = 1.0 - t * y > 0
    return (-c * y * active).astype(t.dtype)


def forward_pairs(model, x1, x2, train=False, rng=None):
    """Scores for pairs ``(x1[i], x2[i])``; both branches share one tower pass."""
    b = len(x1)
    f, tower_cache = model.tower_forward(np.concatenate([x1, x2]), train, rng)
    t, head_cache = model.head_forward(f[:b], f[b:], train, rng)
    return t, (tower_cache, head_cache)


def siamese_backward(model, cache, t, y, lam=DEFAULT_LAMBDA, n_pos=None, n_neg=None, reg="squared"):
    """Gradients of the hinge loss with respect to every parameter."""
    if cache is None:
        raise ValueError("backward needs the cache from a forward pass")
    tower_cache, head_cache = cache
    y = np.asarray(y)
    n_pos = int(np.sum(y > 0)) if n_pos is None else n_pos
    n_neg = int(np.sum(y < 0)) if n_neg is None else n_neg
    grad_t = hinge_grad(t, y, n_pos, n_neg)
    grads, g1, g2 = model.head_backward(grad_t, head_cache)
    grads.update(model.tower_backward(np.concatenate([g1, g2]), tower_cache))
    if lam:
        if reg == "squared":
            scale = 2.0 * lam
        else:
            norm = regularizer(model, "frobenius")
            scale = lam / norm if norm > 0 else 0.0
        for k in model.weight_names:
            grads[k] = grads[k] + model.dtype.type(scale) * model.params[k]
    return {k: grads[k] for k in model.params}


def loss_and_grads(model, x1, x2, y, lam=DEFAULT_LAMBDA, train=False, rng=None, reg="squared"):
    t, cache = forward_pairs(model, x1, x2, train, rng)
    terms = loss_terms(t, y, model, lam, reg=reg)
    return terms, siamese_backward(model, cache, t, y, lam, reg=reg), t
