"""Slow reference computations used to check the fast operators.

Nothing here shares code with :mod:`permssl.softrank`: the projection and
isotonic oracles enumerate every contiguous block structure and keep the
best feasible candidate, and gradients are checked by central differences.
"""
from __future__ import annotations

import itertools

import numpy as np


def compositions(n: int):
    """All ways to cut ``range(n)`` into contiguous blocks, as lists of (lo, hi)."""
    for cuts in itertools.product((False, True), repeat=n - 1):
        bounds = [0] + [i + 1 for i, c in enumerate(cuts) if c] + [n]
        yield list(zip(bounds[:-1], bounds[1:]))


def in_permutahedron(r, tol: float = 1e-9) -> bool:
    """Sorting characterization: the k largest entries sum to at most the
    k largest of ``(0..n-1)``, with equality for k = n."""
    r = np.asarray(r, dtype=np.float64)
    n = r.size
    top = np.cumsum(np.sort(r)[::-1])
    bound = np.cumsum(np.arange(n - 1, -1, -1, dtype=np.float64))
    return bool(np.all(top <= bound + tol) and abs(top[-1] - bound[-1]) <= tol)


def project_permutahedron_bruteforce(z) -> np.ndarray:
    """Euclidean projection of ``z`` onto the permutahedron of ``(0..n-1)``.

    The projection keeps the order of ``z`` and is constant-shift on blocks
    of consecutive sorted entries whose sums match the corresponding ranks.
    Enumerate all ``2**(n-1)`` block structures, keep feasible candidates,
    return the closest one.
    """
    z = np.asarray(z, dtype=np.float64)
    n = z.size
    order = np.argsort(-z, kind="stable")
    zs = z[order]
    rho = np.arange(n - 1, -1, -1, dtype=np.float64)
    best, best_d = None, np.inf
    for blocks in compositions(n):
        r = zs.copy()
        for lo, hi in blocks:
            r[lo:hi] -= np.mean(zs[lo:hi] - rho[lo:hi])
        if not in_permutahedron(r, tol=1e-9 * max(1.0, n * n)):
            continue
        d = float(np.sum((r - zs) ** 2))
        if d < best_d:
            best, best_d = r, d
    out = np.empty(n)
    out[order] = best
    return out


def isotonic_bruteforce(v) -> np.ndarray:
    """Nonincreasing L2 isotonic regression by enumerating block structures."""
    v = np.asarray(v, dtype=np.float64)
    best, best_d = None, np.inf
    for blocks in compositions(v.size):
        u = np.concatenate([np.full(hi - lo, v[lo:hi].mean()) for lo, hi in blocks])
        if np.any(np.diff(u) > 1e-12):
            continue
        d = float(np.sum((u - v) ** 2))
        if d < best_d:
            best, best_d = u, d
    return best


def central_difference(f, x, h: float) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by central differences."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def relative_error(a, b, floor: float = 1e-12) -> float:
    """``max|a - b| / max(max|b|, floor)``; the floor turns the check absolute
    where the reference gradient vanishes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), floor))


def random_gapped(rng: np.random.Generator, n: int, gap: float = 0.01, scale: float = 1.0) -> np.ndarray:
    """Random vector whose entries differ pairwise by at least ``gap``."""
    while True:
        x = rng.normal(scale=scale, size=n)
        if n < 2 or np.min(np.diff(np.sort(x))) >= gap:
            return x
