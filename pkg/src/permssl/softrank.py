"""Differentiable ranking operators and the pretext losses built on them.

Two relaxations of :func:`permssl.permcore.hard_rank` are provided:

* ``soft_rank_reg``: Euclidean projection of ``theta / eps`` onto the
  permutahedron of ``(0, 1, ..., n-1)``, solved by sorting plus an L2
  isotonic regression (pool adjacent violators).  O(n log n) forward, exact
  vector-Jacobian product.
* ``soft_rank_perturbed``: Monte-Carlo average of hard ranks of
  ``theta + eps * Z`` with standard Gaussian ``Z``, paired with its
  Fenchel-Young loss whose gradient is ``soft_rank - y``.

Operator code runs in float64 throughout.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .permcore import check_permutation, hard_rank

NOISE_CHUNK = 4096


@dataclass(frozen=True)
class PavBlocks:
    """Contiguous blocks of an isotonic solve.

    ``starts[b]`` and ``sizes[b]`` locate block ``b``; ``values[b]`` is its
    pooled value.  Values decrease strictly from one block to the next.
    """

    starts: np.ndarray
    sizes: np.ndarray
    values: np.ndarray

    @property
    def n(self) -> int:
        return int(self.sizes.sum())


@dataclass(frozen=True)
class SoftRankContext:
    """What the backward pass of :func:`soft_rank_reg` needs."""

    blocks: PavBlocks
    order: np.ndarray  # indices sorting z descending
    eps: float


def _check_finite(v: np.ndarray, what: str) -> None:
    if np.isnan(v).any():
        raise ValueError(f"NaN in {what}")
    if not np.isfinite(v).all():
        raise ValueError(f"non-finite entry in {what}")


def _check_eps(eps: float) -> float:
    eps = float(eps)
    if not eps > 0:
        raise ValueError(f"epsilon must be > 0, got {eps}")
    return eps


def _check_theta(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 1 or theta.size < 2:
        raise ValueError(f"theta must be a vector of length >= 2, got shape {theta.shape}")
    _check_finite(theta, "theta")
    return theta


def isotonic_regression_l2(v) -> tuple[np.ndarray, PavBlocks]:
    """Solve ``min sum (u_i - v_i)^2`` s.t. ``u_1 >= u_2 >= ... >= u_n``.

    Single left-to-right pass of pool adjacent violators.  Adjacent blocks
    with equal means are merged, so pooled values are strictly decreasing.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a vector, got shape {v.shape}")
    _check_finite(v, "isotonic input")
    sums: list[float] = []
    counts: list[int] = []
    for x in v.tolist():
        s, c = x, 1
        # violation when the previous mean does not exceed the current one
        while sums and sums[-1] * c <= s * counts[-1]:
            s += sums.pop()
            c += counts.pop()
        sums.append(s)
        counts.append(c)
    sizes = np.array(counts, dtype=np.int64)
    values = np.array(sums, dtype=np.float64) / sizes
    starts = np.zeros_like(sizes)
    np.cumsum(sizes[:-1], out=starts[1:])
    return np.repeat(values, sizes), PavBlocks(starts, sizes, values)


def isotonic_vjp(blocks: PavBlocks, cotangent) -> np.ndarray:
    """Average the cotangent within each block (the solve's Jacobian is the
    symmetric block-averaging matrix)."""
    u = np.asarray(cotangent, dtype=np.float64)
    if u.ndim != 1 or u.size != blocks.n:
        raise ValueError(f"cotangent length {u.size} does not match blocks of length {blocks.n}")
    if u.size == 0:
        return u.copy()
    means = np.add.reduceat(u, blocks.starts) / blocks.sizes
    return np.repeat(means, blocks.sizes)


def soft_rank_reg(theta, eps: float = 0.1) -> tuple[np.ndarray, SoftRankContext]:
    """Regularized soft rank: projection of ``theta / eps`` onto the
    permutahedron of ``(0, ..., n-1)``.

    Returns the soft ranks and the context for :func:`soft_rank_reg_vjp`.
    """
    theta = _check_theta(theta)
    eps = _check_eps(eps)
    n = theta.size
    z = theta / eps
    order = np.argsort(-z, kind="stable")
    rho_desc = np.arange(n - 1, -1, -1, dtype=np.float64)
    sol, blocks = isotonic_regression_l2(z[order] - rho_desc)
    r = z.copy()
    r[order] -= sol
    return r, SoftRankContext(blocks, order, eps)


def soft_rank_reg_vjp(ctx: SoftRankContext, u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 1 or u.size != ctx.order.size:
        raise ValueError(f"cotangent length {u.size} does not match forward length {ctx.order.size}")
    out = u.copy()
    out[ctx.order] -= isotonic_vjp(ctx.blocks, u[ctx.order])
    return out / ctx.eps


def _seed_tuple(seed) -> tuple[int, ...]:
    if isinstance(seed, (int, np.integer)):
        return (int(seed),)
    return tuple(int(s) for s in seed)


def gaussian_noise(seed, samples: int, n: int) -> np.ndarray:
    """Standard Gaussian noise of shape ``(samples, n)``.

    Rows are generated in chunks of ``NOISE_CHUNK``; chunk ``c`` depends only
    on ``(seed, c)``, so any chunk can be regenerated independently.
    """
    base = _seed_tuple(seed)
    out = np.empty((samples, n), dtype=np.float64)
    for c, lo in enumerate(range(0, samples, NOISE_CHUNK)):
        hi = min(lo + NOISE_CHUNK, samples)
        out[lo:hi] = np.random.default_rng(base + (c,)).standard_normal((hi - lo, n))
    return out


def _perturbed(theta, eps, samples, seed) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    theta = _check_theta(theta)
    eps = _check_eps(eps)
    if samples < 1:
        raise ValueError(f"samples must be >= 1, got {samples}")
    perturbed = theta + eps * gaussian_noise(seed, samples, theta.size)
    ranks = hard_rank(perturbed)
    return theta, perturbed, ranks


def soft_rank_perturbed(theta, eps: float = 0.5, samples: int = 32, seed=0) -> np.ndarray:
    """Monte-Carlo estimate of ``E[hard_rank(theta + eps * Z)]``."""
    _, _, ranks = _perturbed(theta, eps, samples, seed)
    return ranks.mean(axis=0)


def _check_label(y, n: int) -> np.ndarray:
    y = check_permutation(y)
    if y.size != n:
        raise ValueError(f"label length {y.size} does not match scores of length {n}")
    return y


def fy_loss_and_grad(theta, y, eps: float = 0.5, samples: int = 32, seed=0) -> tuple[float, np.ndarray]:
    """Perturbed Fenchel-Young loss, up to a label-dependent constant.

    ``loss = mean_m <theta + eps Z_m, hard_rank(theta + eps Z_m)> - <theta, y>``
    and ``grad = soft_rank_perturbed(theta, eps, samples, seed) - y`` on the
    same noise draw.
    """
    theta, perturbed, ranks = _perturbed(theta, eps, samples, seed)
    y = _check_label(y, theta.size)
    soft = ranks.mean(axis=0)
    smoothed_max = float(np.mean(np.sum(perturbed * ranks, axis=1)))
    loss = smoothed_max - float(theta @ y)
    return loss, soft - y


def soft_rank_mse_loss_and_grad(theta, y, eps: float = 0.1) -> tuple[float, np.ndarray]:
    """``||soft_rank_reg(theta, eps) - y||^2 / 2`` and its exact gradient."""
    r, ctx = soft_rank_reg(theta, eps)
    y = _check_label(y, r.size)
    resid = r - y
    return 0.5 * float(resid @ resid), soft_rank_reg_vjp(ctx, resid)


def mse_raw_loss_and_grad(theta, y) -> tuple[float, np.ndarray]:
    """Squared error directly on the scores: ``||theta - y||^2 / 2``."""
    theta = _check_theta(theta)
    y = _check_label(y, theta.size)
    resid = theta - y
    return 0.5 * float(resid @ resid), resid


def xe_fixed_loss_and_grad(logits, class_index: int) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy over a fixed permutation set."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.size < 1:
        raise ValueError(f"logits must be a non-empty vector, got shape {logits.shape}")
    if not 0 <= class_index < logits.size:
        raise ValueError(f"class_index {class_index} out of range for {logits.size} classes")
    shifted = logits - logits.max()
    lse = np.log(np.exp(shifted).sum())
    probs = np.exp(shifted - lse)
    grad = probs.copy()
    grad[class_index] -= 1.0
    return float(lse - shifted[class_index]), grad
