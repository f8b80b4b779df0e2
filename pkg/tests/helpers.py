"""Shared oracles for the test suite."""

import numpy as np

from stpair.nn_core import finite_diff_grad


def rel_err(analytic, numeric, floor=1e-8):
    analytic = np.asarray(analytic, np.float64)
    numeric = np.asarray(numeric, np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def random_indices(shape, n, rng):
    """``n`` distinct multi-indices into ``shape`` (all of them if fewer exist)."""
    size = int(np.prod(shape))
    flat = rng.choice(size, size=min(n, size), replace=False)
    return [tuple(int(i) for i in np.unravel_index(f, shape)) for f in flat]


def layer_gradcheck(forward, backward, tensors, rng, points=20, eps=1e-3):
    """Compare ``backward`` against central differences of a random
    projection of ``forward``'s output.

    ``forward()`` reads the arrays in ``tensors`` (perturbed in place);
    ``backward(grad_out)`` returns a dict of analytic gradients keyed like
    ``tensors``.  The projection is summed in float64 so only the layer's
    own rounding enters the difference quotient.  Returns the worst relative
    error per tensor and the number of coordinates checked.
    """
    out = forward()
    r = rng.standard_normal(out.shape)
    analytic = backward(r.astype(out.dtype))

    def scalar(_):
        return float(np.sum(r * forward().astype(np.float64)))

    worst, checked = {}, 0
    for name, arr in tensors.items():
        idx = random_indices(arr.shape, points, rng)
        numeric = finite_diff_grad(scalar, arr, eps, idx)
        ana = np.array([analytic[name][i] for i in idx], np.float64)
        worst[name] = float(rel_err(ana, numeric).max())
        checked += len(idx)
    return worst, checked


def naive_conv3d(x, w, b, stride, padding):
    """Six-loop cross-correlation reference, float64 accumulation."""
    n, c, t, h, wd = x.shape
    o, _, kt, kh, kw = w.shape
    st, sh, sw = stride
    pt, ph, pw = padding
    xp = np.zeros((n, c, t + 2 * pt, h + 2 * ph, wd + 2 * pw))
    xp[:, :, pt : pt + t, ph : ph + h, pw : pw + wd] = x
    to = (t + 2 * pt - kt) // st + 1
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((n, o, to, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for a in range(to):
                for bb in range(ho):
                    for cc in range(wo):
                        win = xp[ni, :, a * st : a * st + kt, bb * sh : bb * sh + kh, cc * sw : cc * sw + kw]
                        out[ni, oi, a, bb, cc] = np.sum(win * w[oi]) + b[oi]
    return out


def naive_maxpool3d(x, window):
    n, c, t, h, w = x.shape
    kt, kh, kw = window
    out = np.zeros((n, c, t // kt, h // kh, w // kw), x.dtype)
    for idx in np.ndindex(out.shape):
        ni, ci, a, bb, cc = idx
        out[idx] = x[ni, ci, a * kt : (a + 1) * kt, bb * kh : (bb + 1) * kh, cc * kw : (cc + 1) * kw].max()
    return out


def generic_model(tower, head, seed, dtype=np.float64, bias_scale=0.1):
    """Initialized model with small random biases.

    Zero biases put units whose whole receptive field is zero exactly on
    the ReLU kink, where a central difference straddles two pieces.
    """
    from stpair.siamese import SiameseModel

    r = np.random.default_rng(seed)
    model = SiameseModel.init(tower, head, np.random.default_rng([seed, 1]), dtype=dtype)
    for k, p in model.params.items():
        if k.endswith(".b"):
            model.params[k] = r.uniform(-bias_scale, bias_scale, p.shape).astype(dtype)
    return model


def siamese_gradcheck(model, x1, x2, y, rng, points_per_tensor=2, eps=1e-6, lam=0.0005, reg="squared", dropout_seed=None):
    """Backprop vs. central differences of the full loss at random
    coordinates of every parameter tensor.  Returns relative errors.

    Where the true gradient is exactly zero (dead units) the quotient is
    pure rounding noise, about ulp(L) / (2 eps); the relative-error
    denominator is floored at 1000x that noise so such points compare
    absolutely instead of dividing noise by noise.
    """
    from stpair.siamese import forward_pairs, hinge_loss, loss_and_grads

    def run_rng():
        return None if dropout_seed is None else np.random.default_rng(dropout_seed)

    train = dropout_seed is not None
    terms, grads, _ = loss_and_grads(model, x1, x2, y, lam, train=train, rng=run_rng(), reg=reg)
    noise = np.finfo(model.dtype).eps * max(abs(terms.total), 1.0) / eps

    def loss(_):
        t, _c = forward_pairs(model, x1, x2, train=train, rng=run_rng())
        return hinge_loss(t, y, model, lam, reg=reg)

    errs = []
    for name, p in model.params.items():
        idx = random_indices(p.shape, points_per_tensor, rng)
        numeric = finite_diff_grad(loss, p, eps, idx)
        ana = [grads[name][i] for i in idx]
        errs.extend(rel_err(ana, numeric, floor=1e3 * noise))
    return np.array(errs)
