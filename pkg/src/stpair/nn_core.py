"""Dense-tensor layers with explicit forward and backward passes.

Every op works on plain numpy arrays and preserves the input dtype, so the
same code runs in float32 for training and float64 when a tighter oracle
comparison is wanted.  Volumetric ops use the layout ``(N, C, T, H, W)``;
a 4-D ``(C, T, H, W)`` input is accepted and treated as a batch of one.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "conv3d_output_shape",
    "conv3d_forward",
    "conv3d_backward",
    "maxpool3d_output_shape",
    "maxpool3d_forward",
    "maxpool3d_backward",
    "fc_forward",
    "fc_backward",
    "relu_forward",
    "relu_backward",
    "concat_forward",
    "concat_backward",
    "dropout_forward",
    "dropout_backward",
    "finite_diff_grad",
]


class ShapeError(ValueError):
    """Raised when tensor shapes are inconsistent with a layer."""


def _triple(v):
    if np.isscalar(v):
        return (int(v),) * 3
    v = tuple(int(a) for a in v)
    if len(v) != 3:
        raise ShapeError(f"expected 3 values, got {v}")
    return v


def _as_batch(x):
    if x.ndim == 4:
        return x[None], True
    if x.ndim == 5:
        return x, False
    raise ShapeError(f"expected a 4-D or 5-D tensor, got shape {x.shape}")


def conv3d_output_shape(in_shape, kernel, stride=1, padding=0):
    """Output ``(T, H, W)`` for an input ``(T, H, W)``: floor((n + 2p - k) / s) + 1."""
    kernel, stride, padding = _triple(kernel), _triple(stride), _triple(padding)
    out = tuple(
        (n + 2 * p - k) // s + 1
        for n, k, s, p in zip(in_shape, kernel, stride, padding)
    )
    if any(o < 1 for o in out):
        raise ShapeError(
            f"kernel {kernel} does not fit input {tuple(in_shape)} "
            f"with padding {padding}"
        )
    return out


def _pad(x, padding):
    pt, ph, pw = padding
    if pt == ph == pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))


def _windows(xp, kernel, stride):
    # (N, C, To, Ho, Wo, kt, kh, kw) view, no copy
    st, sh, sw = stride
    win = sliding_window_view(xp, kernel, axis=(2, 3, 4))
    return win[:, :, ::st, ::sh, ::sw]


def _tap_slices(kernel, stride, out_shape):
    st, sh, sw = stride
    to, ho, wo = out_shape
    for a in range(kernel[0]):
        for c in range(kernel[1]):
            for d in range(kernel[2]):
                yield (a, c, d), (
                    slice(a, a + st * (to - 1) + 1, st),
                    slice(c, c + sh * (ho - 1) + 1, sh),
                    slice(d, d + sw * (wo - 1) + 1, sw),
                )


def _im2col(x, kernel, stride, padding, out_shape):
    """Unfold ``x`` into columns of shape ``(C * kt * kh * kw, N * To * Ho * Wo)``."""
    n, c = x.shape[:2]
    xc = _pad(x, padding).transpose(1, 0, 2, 3, 4)
    cols = np.empty((c,) + tuple(kernel) + (n,) + tuple(out_shape), dtype=x.dtype)
    for (a, b, d), (ts, hs, ws) in _tap_slices(kernel, stride, out_shape):
        cols[:, a, b, d] = xc[:, :, ts, hs, ws]
    return cols.reshape(c * int(np.prod(kernel)), -1)


def conv3d_forward(x, w, b, stride=1, padding=0, return_cols=False):
    """3-D cross-correlation.

    ``x`` is ``(N, C_in, T, H, W)`` (or unbatched), ``w`` is
    ``(C_out, C_in, kt, kh, kw)`` and ``b`` is ``(C_out,)``.  With
    ``return_cols`` the unfolded input is returned as well so the backward
    pass can skip rebuilding it.
    """
    x, squeeze = _as_batch(np.asarray(x))
    if w.ndim != 5 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"weights {w.shape} incompatible with input {x.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"bias {b.shape} does not match {w.shape[0]} filters")
    kernel, stride, padding = w.shape[2:], _triple(stride), _triple(padding)
    out_shape = conv3d_output_shape(x.shape[2:], kernel, stride, padding)
    cols = _im2col(x, kernel, stride, padding, out_shape)
    out = w.reshape(w.shape[0], -1) @ cols
    out += b[:, None]
    out = out.reshape((w.shape[0], x.shape[0]) + out_shape)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3, 4))
    if squeeze:
        out = out[0]
    return (out, cols) if return_cols else out


def conv3d_backward(
    grad_out, x, w, stride=1, padding=0, need_input_grad=True, cols=None
):
    """Gradients ``(grad_x, grad_w, grad_b)`` of :func:`conv3d_forward`.

    ``grad_x`` is ``None`` when ``need_input_grad`` is false.  ``cols`` may
    carry the unfolded input saved by the forward pass.
    """
    x, squeeze = _as_batch(np.asarray(x))
    grad_out, _ = _as_batch(np.asarray(grad_out))
    kernel, stride, padding = w.shape[2:], _triple(stride), _triple(padding)
    out_shape = conv3d_output_shape(x.shape[2:], kernel, stride, padding)
    expected = (x.shape[0], w.shape[0]) + out_shape
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out {grad_out.shape} != forward output {expected}")

    n, c_out = expected[:2]
    if cols is None:
        cols = _im2col(x, kernel, stride, padding, out_shape)
    g = np.ascontiguousarray(grad_out.transpose(1, 0, 2, 3, 4)).reshape(c_out, -1)
    grad_w = (g @ cols.T).reshape(w.shape)
    grad_b = g.sum(axis=1)
    if not need_input_grad:
        return None, grad_w, grad_b

    grad_cols = (w.reshape(c_out, -1).T @ g).reshape(
        (x.shape[1],) + tuple(kernel) + (n,) + out_shape
    )
    padded = tuple(s + 2 * p for s, p in zip(x.shape[2:], padding))
    grad_xc = np.zeros((x.shape[1], n) + padded, dtype=x.dtype)
    for (a, b, d), (ts, hs, ws) in _tap_slices(kernel, stride, out_shape):
        grad_xc[:, :, ts, hs, ws] += grad_cols[:, a, b, d]
    pt, ph, pw = padding
    grad_x = grad_xc[
        :,
        :,
        pt : pt + x.shape[2],
        ph : ph + x.shape[3],
        pw : pw + x.shape[4],
    ]
    grad_x = np.ascontiguousarray(grad_x.transpose(1, 0, 2, 3, 4))
    return (grad_x[0] if squeeze else grad_x), grad_w, grad_b


def maxpool3d_output_shape(in_shape, window, stride=None):
    window = _triple(window)
    stride = window if stride is None else _triple(stride)
    if any(k > n for k, n in zip(window, in_shape)):
        raise ShapeError(f"pool window {window} larger than input {tuple(in_shape)}")
    return tuple((n - k) // s + 1 for n, k, s in zip(in_shape, window, stride))


def maxpool3d_forward(x, window, stride=None):
    """Max over 3-D windows.

    Returns ``(out, argmax)`` where ``argmax`` holds, for every output
    element, the flat index into ``x`` of the winning input.  Ties go to
    the first element in (t, h, w) scan order.
    """
    x, squeeze = _as_batch(np.asarray(x))
    window = _triple(window)
    stride = window if stride is None else _triple(stride)
    out_shape = maxpool3d_output_shape(x.shape[2:], window, stride)

    win = _windows(x, window, stride)
    flat = win.reshape(win.shape[:5] + (-1,))
    local = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]

    # local window offset -> absolute flat index into x
    kt, kh, kw = np.unravel_index(local, window)
    n, c = x.shape[:2]
    to, ho, wo = out_shape
    ti = np.arange(to).reshape(1, 1, -1, 1, 1) * stride[0] + kt
    hi = np.arange(ho).reshape(1, 1, 1, -1, 1) * stride[1] + kh
    wi = np.arange(wo).reshape(1, 1, 1, 1, -1) * stride[2] + kw
    nc = np.arange(n * c).reshape(n, c, 1, 1, 1)
    argmax = np.ravel_multi_index(
        (nc, ti, hi, wi), (n * c,) + x.shape[2:]
    )
    if squeeze:
        return out[0], argmax[0]
    return out, argmax


def maxpool3d_backward(grad_out, argmax, input_shape):
    """Route ``grad_out`` to the positions recorded in ``argmax``."""
    grad_out = np.asarray(grad_out)
    if grad_out.shape != argmax.shape:
        raise ShapeError(f"grad_out {grad_out.shape} != argmax {argmax.shape}")
    size = int(np.prod(input_shape))
    grad = np.bincount(argmax.ravel(), weights=grad_out.ravel(), minlength=size)
    return grad.astype(grad_out.dtype).reshape(input_shape)


def fc_forward(x, w, b):
    """Affine map ``y = x W^T + b`` for ``x`` of shape ``(N, in)`` or ``(in,)``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"weights {w.shape} incompatible with input {x.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"bias {b.shape} does not match {w.shape[0]} outputs")
    return x @ w.T + b


def fc_backward(grad_out, x, w):
    x2 = np.atleast_2d(x)
    g2 = np.atleast_2d(grad_out)
    if g2.shape != (x2.shape[0], w.shape[0]):
        raise ShapeError(f"grad_out {grad_out.shape} incompatible with {w.shape}")
    grad_x = g2 @ w
    grad_w = g2.T @ x2
    grad_b = g2.sum(axis=0)
    return grad_x.reshape(x.shape), grad_w, grad_b


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    # subgradient 0 at x == 0
    return grad_out * (x > 0)


def concat_forward(a, b):
    """Stack two feature tensors along the last (feature) axis."""
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=-1)


def concat_backward(grad_out, split):
    if not 0 <= split <= grad_out.shape[-1]:
        raise ShapeError(f"split {split} outside feature axis {grad_out.shape[-1]}")
    return grad_out[..., :split], grad_out[..., split:]


def dropout_forward(x, rate, rng=None, train=True):
    """Inverted dropout.

    Returns ``(out, mask)``; ``mask`` is the multiplier applied to ``x``
    (0 for dropped units, ``1 / (1 - rate)`` for survivors), so the
    backward pass is ``grad * mask``.  In inference mode the mask is all
    ones and the op is the identity.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x, np.ones_like(x)
    if rng is None:
        raise ValueError("training-mode dropout needs a random generator")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


def dropout_backward(grad_out, mask):
    return grad_out * mask


def finite_diff_grad(f, x, eps=1e-3, indices=None):
    """Central-difference gradient of the scalar function ``f`` at ``x``.

    ``x`` is perturbed in place and restored.  With ``indices`` (an iterable
    of multi-indices) only those coordinates are evaluated and a 1-D array
    is returned; otherwise the full gradient with the shape of ``x``.
    """
    if indices is None:
        grad = np.zeros(x.shape, dtype=np.float64)
        coords = np.ndindex(x.shape)
    else:
        coords = [tuple(np.atleast_1d(i)) for i in indices]
        grad = np.zeros(len(coords), dtype=np.float64)
    for k, idx in enumerate(coords):
        orig = x[idx]
        hi = x.dtype.type(orig + eps)
        lo = x.dtype.type(orig - eps)
        x[idx] = hi
        fp = float(f(x))
        x[idx] = lo
        fm = float(f(x))
        x[idx] = orig
        # divide by the step actually representable in x's dtype
        val = (fp - fm) / (float(hi) - float(lo))
        if indices is None:
            grad[idx] = val
        else:
            grad[k] = val
    return grad
