"""Appearance transforms applied to the second member of a mined pair.

The set is {identity, colour, flip, colour-then-flip}.  Colour jitter works
in HSV: a shift on all three channels (hue wraps), then an exponent and a
scale on saturation and value only.  Flip mirrors every frame left-right.
The same parameters are used for every frame of a volume.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

__all__ = [
    "SHIFT_RANGE",
    "EXPONENT_RANGE",
    "SCALE_RANGE",
    "ColorParams",
    "Kind",
    "TransformSpec",
    "IDENTITY",
    "rgb_to_hsv",
    "hsv_to_rgb",
    "apply_color",
    "apply_flip",
    "sample_color_params",
    "sample_transform",
    "apply_transform",
]

SHIFT_RANGE = (-0.1, 0.1)
EXPONENT_RANGE = (0.5, 2.0)
SCALE_RANGE = (0.7, 2.0)


@dataclass(frozen=True)
class ColorParams:
    shift: float = 0.0
    exponent: float = 1.0
    scale: float = 1.0

    def __post_init__(self):
        for name, (lo, hi) in (
            ("shift", SHIFT_RANGE),
            ("exponent", EXPONENT_RANGE),
            ("scale", SCALE_RANGE),
        ):
            value = getattr(self, name)
            if not lo < value < hi:
                raise ValueError(f"{name}={value} outside ({lo}, {hi})")


class Kind(str, Enum):
    IDENTITY = "identity"
    COLOR = "color"
    FLIP = "flip"
    COLOR_THEN_FLIP = "color_then_flip"

    @property
    def has_color(self):
        return self in (Kind.COLOR, Kind.COLOR_THEN_FLIP)

    @property
    def has_flip(self):
        return self in (Kind.FLIP, Kind.COLOR_THEN_FLIP)


@dataclass(frozen=True)
class TransformSpec:
    kind: Kind = Kind.IDENTITY
    color: ColorParams | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.kind.has_color != (self.color is not None):
            raise ValueError(f"{self.kind.value} transform: color params present iff color is used")

    def as_dict(self):
        d = {"kind": self.kind.value}
        if self.color is not None:
            d["shift"] = self.color.shift
            d["exponent"] = self.color.exponent
            d["scale"] = self.color.scale
        return d

    @classmethod
    def from_dict(cls, d):
        kind = Kind(d["kind"])
        color = None
        if kind.has_color:
            color = ColorParams(d["shift"], d["exponent"], d["scale"])
        return cls(kind, color)


IDENTITY = TransformSpec()


def rgb_to_hsv(rgb):
    """Hexcone RGB -> HSV on the last axis; hue in [0, 1)."""
    rgb = np.clip(np.asarray(rgb), 0.0, 1.0)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    c = v - rgb.min(axis=-1)
    safe_c = np.where(c > 0, c, 1)
    s = np.where(v > 0, c / np.where(v > 0, v, 1), 0)

    h = np.where(
        v == r,
        ((g - b) / safe_c) % 6,
        np.where(v == g, (b - r) / safe_c + 2, (r - g) / safe_c + 4),
    )
    h = np.where(c > 0, h / 6.0, 0.0)
    h = np.where(h >= 1.0, h - 1.0, h)
    return np.stack([h, s, v], axis=-1).astype(rgb.dtype, copy=False)


def hsv_to_rgb(hsv):
    """Inverse of :func:`rgb_to_hsv`."""
    hsv = np.asarray(hsv)
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    h6 = (h % 1.0) * 6.0
    sector = np.floor(h6).astype(np.int64) % 6
    f = h6 - np.floor(h6)
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    r = np.choose(sector, [v, q, p, p, t, v])
    g = np.choose(sector, [t, v, v, q, p, p])
    b = np.choose(sector, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1).astype(hsv.dtype, copy=False)


def _as_pixels(block):
    return block.pixels if hasattr(block, "pixels") else np.asarray(block)


def _wrap(block, pixels):
    return block.with_pixels(pixels) if hasattr(block, "with_pixels") else pixels


def apply_color(block, params):
    """Shift, exponentiate and scale in HSV; every frame gets the same params.

    Accepts a :class:`VolumeBlock` or a raw ``(..., 3)`` RGB array and
    returns the same kind.
    """
    x = _as_pixels(block)
    if params.shift == 0.0 and params.exponent == 1.0 and params.scale == 1.0:
        return _wrap(block, x.copy())
    hsv = rgb_to_hsv(x)
    dt = x.dtype.type
    shift, exponent, scale = dt(params.shift), dt(params.exponent), dt(params.scale)
    h = (hsv[..., 0] + shift) % dt(1.0)
    sv = np.maximum(hsv[..., 1:] + shift, 0) ** exponent * scale
    out = np.empty_like(hsv)
    out[..., 0] = np.where(h >= 1, 0, h)
    out[..., 1:] = np.clip(sv, 0, 1)
    return _wrap(block, np.clip(hsv_to_rgb(out), 0, 1))


def apply_flip(block):
    """Mirror every frame along x (the width axis, second from last)."""
    x = _as_pixels(block)
    return _wrap(block, np.ascontiguousarray(x[..., ::-1, :]))


def sample_color_params(rng):
    return ColorParams(
        shift=float(rng.uniform(*SHIFT_RANGE)),
        exponent=float(rng.uniform(*EXPONENT_RANGE)),
        scale=float(rng.uniform(*SCALE_RANGE)),
    )


def sample_transform(rng):
    """Draw r1, r2 ~ N(0, 1); colour iff r1 > 0, flip iff r2 > 0."""
    use_color = rng.standard_normal() > 0
    use_flip = rng.standard_normal() > 0
    if use_color and use_flip:
        kind = Kind.COLOR_THEN_FLIP
    elif use_color:
        kind = Kind.COLOR
    elif use_flip:
        kind = Kind.FLIP
    else:
        kind = Kind.IDENTITY
    color = sample_color_params(rng) if use_color else None
    return TransformSpec(kind, color)


def apply_transform(block, spec):
    if spec.kind is Kind.IDENTITY:
        return _wrap(block, _as_pixels(block).copy())
    if spec.kind is Kind.COLOR:
        return apply_color(block, spec.color)
    if spec.kind is Kind.FLIP:
        return apply_flip(block)
    return apply_flip(apply_color(block, spec.color))
