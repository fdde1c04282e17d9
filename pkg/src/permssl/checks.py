"""Gradient and oracle checks shared by the ``gradcheck`` command and tests."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import softrank
from .network import CfnParams, cfn_backward, cfn_forward, init_cfn
from .oracles import (
    central_difference,
    isotonic_bruteforce,
    project_permutahedron_bruteforce,
    random_gapped,
    relative_error,
)
from .permcore import random_permutation


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name:<42} max_err={self.error:.3e} tol={self.tol:.0e} {status}"


def _gapped_blocks(rng, n):
    """Random input whose isotonic solve has well-separated pooled values."""
    while True:
        v = rng.normal(size=n)
        _, blocks = softrank.isotonic_regression_l2(v)
        if blocks.values.size == 1 or np.min(-np.diff(blocks.values)) > 1e-3:
            return v, blocks


def network_loss(kind: str, perms: np.ndarray, classes=None, eps: float = 0.5, samples: int = 16, seed: int = 0):
    """Summed per-example loss on a batch of scores, and its score gradient."""

    def fn(theta):
        theta = np.asarray(theta, dtype=np.float64)
        total, grads = 0.0, np.zeros_like(theta)
        for b in range(theta.shape[0]):
            if kind == "fy":
                l, g = softrank.fy_loss_and_grad(theta[b], perms[b], eps, samples, seed=(seed, b))
            elif kind == "softrank-mse":
                l, g = softrank.soft_rank_mse_loss_and_grad(theta[b], perms[b], eps)
            elif kind == "mse-raw":
                l, g = softrank.mse_raw_loss_and_grad(theta[b], perms[b])
            else:
                l, g = softrank.xe_fixed_loss_and_grad(theta[b], int(classes[b]))
            total += l
            grads[b] = g
        return total, grads

    return fn


def param_finite_differences(params: CfnParams, X: np.ndarray, loss_fn, h: float = 1e-6) -> np.ndarray:
    """Central differences of ``loss_fn(cfn_forward(params, X))`` over every
    parameter entry, evaluated in float64; flattened in checkpoint order."""
    p64 = params.astype(np.float64)
    X = np.asarray(X, dtype=np.float64)
    out = []
    for arr in p64.arrays():
        flat = arr.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss_fn(cfn_forward(p64, X)[0])[0]
            flat[i] = old - h
            down = loss_fn(cfn_forward(p64, X)[0])[0]
            flat[i] = old
            out.append((up - down) / (2 * h))
    return np.array(out)


def network_gradcheck(kind: str, dtype, seed: int = 0, eps: float | None = None) -> float:
    """Relative error of backprop against finite differences on a tiny CFN
    (d=6, n=3, encoder widths 4/4)."""
    rng = np.random.default_rng(seed)
    n, d = 3, 6
    out_dim = 5 if kind == "xe-fixed" else None
    params = init_cfn(n, d, (4, 4), 4, out_dim=out_dim, seed=seed, dtype=dtype)
    for a in params.arrays():
        a += rng.normal(scale=0.1, size=a.shape).astype(dtype)
    X = rng.normal(size=(2, n, d)).astype(dtype)
    perms = np.array([random_permutation(n, (seed, b)) for b in range(2)])
    if eps is None:
        eps = {"fy": 0.5, "softrank-mse": 1.0}.get(kind, 1.0)
    loss_fn = network_loss(kind, perms, classes=rng.integers(0, 5, size=2), eps=eps, seed=seed)
    theta, trace = cfn_forward(params, X)
    _, dtheta = loss_fn(theta)
    grads = np.concatenate([g.ravel() for g in cfn_backward(params, trace, dtheta)])
    return relative_error(grads, param_finite_differences(params, X, loss_fn))


def run_gradchecks(n: int = 6, eps: float = 0.1, fy_eps: float = 0.5, seed: int = 0, trials: int = 20) -> list[CheckResult]:
    if n < 2 or n > 10:
        raise ValueError(f"n must be in [2, 10] for the enumeration oracles, got {n}")
    if not eps > 0 or not fy_eps > 0:
        raise ValueError("epsilon must be > 0")
    rng = np.random.default_rng(seed)
    out = []

    err = max(np.max(np.abs(softrank.isotonic_regression_l2(v)[0] - isotonic_bruteforce(v)))
              for v in rng.normal(size=(trials, n)))
    out.append(CheckResult("isotonic vs enumeration", float(err), 1e-8))

    err = 0.0
    for _ in range(trials):
        theta = rng.normal(scale=eps * rng.uniform(0.1, 10.0), size=n)
        r, _ = softrank.soft_rank_reg(theta, eps)
        err = max(err, float(np.max(np.abs(r - project_permutahedron_bruteforce(theta / eps)))))
    out.append(CheckResult("soft_rank_reg vs projection oracle", err, 1e-6))

    err = 0.0
    for _ in range(trials):
        v, blocks = _gapped_blocks(rng, n)
        u = rng.normal(size=n)
        fd = central_difference(lambda x: softrank.isotonic_regression_l2(x)[0] @ u, v, 1e-6)
        err = max(err, relative_error(softrank.isotonic_vjp(blocks, u), fd, floor=1e-4))
    out.append(CheckResult("isotonic_vjp vs finite differences", err, 1e-5))

    err_vjp, err_mse = 0.0, 0.0
    for t in range(trials):
        theta = random_gapped(rng, n, 0.01, scale=eps * 2)
        u = rng.normal(size=n)
        _, ctx = softrank.soft_rank_reg(theta, eps)
        fd = central_difference(lambda x: softrank.soft_rank_reg(x, eps)[0] @ u, theta, 1e-5)
        err_vjp = max(err_vjp, relative_error(softrank.soft_rank_reg_vjp(ctx, u), fd, floor=1e-4))
        y = random_permutation(n, (seed, t))
        _, g = softrank.soft_rank_mse_loss_and_grad(theta, y, eps)
        fd = central_difference(lambda x: softrank.soft_rank_mse_loss_and_grad(x, y, eps)[0], theta, 1e-5)
        err_mse = max(err_mse, relative_error(g, fd, floor=1e-4))
    out.append(CheckResult("soft_rank_reg_vjp vs finite differences", err_vjp, 1e-5))
    out.append(CheckResult("soft-rank MSE grad vs finite differences", err_mse, 1e-5))

    err = 0.0
    for t in range(trials):
        theta = rng.normal(size=n)
        y = random_permutation(n, (seed, 100 + t))
        _, g = softrank.fy_loss_and_grad(theta, y, fy_eps, 32, seed=(seed, t))
        soft = softrank.soft_rank_perturbed(theta, fy_eps, 32, seed=(seed, t))
        err = max(err, float(np.max(np.abs(g - (soft - y)))))
    out.append(CheckResult("FY grad == soft rank - y (bit-exact)", err, 0.0))

    err = 0.0
    for _ in range(trials):
        logits = rng.normal(size=n)
        c = int(rng.integers(n))
        _, g = softrank.xe_fixed_loss_and_grad(logits, c)
        fd = central_difference(lambda x: softrank.xe_fixed_loss_and_grad(x, c)[0], logits, 1e-6)
        err = max(err, relative_error(g, fd))
    out.append(CheckResult("XE grad vs finite differences", err, 1e-6))

    for kind in ("fy", "softrank-mse", "xe-fixed"):
        out.append(CheckResult(f"network {kind} float64", network_gradcheck(kind, np.float64, seed), 1e-5))
        out.append(CheckResult(f"network {kind} float32", network_gradcheck(kind, np.float32, seed), 1e-3))
    return out
