"""Fenchel-Young loss with perturbed ranks, and the losses it competes with.

Run with ``python demos/fenchel_young.py``.  Fits a single score vector to
a target permutation by gradient descent under each ranking loss, then
shows that the FY gradient is exactly "soft ranks minus target" on the
shared Monte-Carlo draw.
"""
import numpy as np

from permssl import softrank
from permssl.permcore import hard_rank

target = np.array([3, 0, 4, 1, 2])
print("target ranks", target)

losses = {
    "fy": lambda th, step: softrank.fy_loss_and_grad(th, target, 0.5, 32, seed=step),
    "softrank-mse": lambda th, step: softrank.soft_rank_mse_loss_and_grad(th, target, 1.0),
    "mse-raw": lambda th, step: softrank.mse_raw_loss_and_grad(th, target),
}
for name, fn in losses.items():
    theta = np.zeros(5)
    for step in range(200):
        loss, g = fn(theta, step)
        theta -= 0.1 * g
    print(f"{name:13s} loss {loss:8.4f}  ranks {hard_rank(theta)}  scores {np.round(theta, 2)}")

theta = np.random.default_rng(0).normal(size=5)
_, g = softrank.fy_loss_and_grad(theta, target, 0.5, 32, seed=7)
soft = softrank.soft_rank_perturbed(theta, 0.5, 32, seed=7)
print("\nFY gradient == soft - target bit for bit:", np.array_equal(g, soft - target))

# at theta = 0 the perturbed ranks are exchangeable, so the gradient is centroid - y
_, g = softrank.fy_loss_and_grad(np.zeros(5), target, 0.5, 10 ** 5, seed=0)
print("gradient at 0 with M=1e5:", np.round(g, 3), "(expected", 2 - target, ")")
