"""
Checking backprop against finite differences
=============================================

Perturb single weights of the desk-size network and compare the change in
the hinge loss with the analytic gradient.  Float64 keeps the difference
quotient clean; a dropout-free model keeps the loss deterministic.
"""

import numpy as np

from stpair.nn_core import finite_diff_grad
from stpair.siamese import HeadConfig, SiameseModel, desk_tower, forward_pairs, hinge_loss, loss_and_grads

rng = np.random.default_rng(0)
model = SiameseModel.init(desk_tower(dropout=0.0), HeadConfig(64, 0.0), rng, dtype=np.float64)
# small random biases move units off the ReLU kink at exactly zero
for name, p in model.params.items():
    if name.endswith(".b"):
        p[:] = rng.uniform(-0.1, 0.1, p.shape)

x1 = rng.random((4, 3, 8, 32, 32))
x2 = rng.random((4, 3, 8, 32, 32))
y = np.array([1, 1, -1, -1])

terms, grads, _ = loss_and_grads(model, x1, x2, y)
print(f"loss {terms.total:.6f} = positives {terms.pos:.4f} + negatives {terms.neg:.4f} + reg {terms.reg:.4f}")


def loss(_):
    t, _ = forward_pairs(model, x1, x2)
    return hinge_loss(t, y, model)


print(f"{'tensor':18s} {'index':>18s} {'backprop':>12s} {'numeric':>12s}")
for name, p in model.params.items():
    idx = tuple(int(rng.integers(0, s)) for s in p.shape)
    numeric = finite_diff_grad(loss, p, 1e-6, [idx])[0]
    print(f"{name:18s} {str(idx):>18s} {grads[name][idx]:12.4e} {numeric:12.4e}")
