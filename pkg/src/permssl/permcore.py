"""Permutation and rank primitives used by the shuffling pretext task.

Conventions
-----------
``apply_permutation(items, p)[j] == items[p[j]]``.  When patches are shuffled
this way, the pretext label is ``p`` itself read as ranks: slot ``j`` of the
shuffled input holds the patch whose original index is ``p[j]``.  Sorting the
shuffled patches by ascending label therefore restores the original order.

Ranks are 0-based and ascending: the smallest score gets rank 0.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np


def _as_int_vector(p) -> np.ndarray:
    arr = np.asarray(p)
    if arr.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got shape {arr.shape}")
    return arr.astype(np.int64, copy=False)


def is_permutation(p) -> bool:
    arr = np.asarray(p)
    if arr.ndim != 1 or arr.size < 2:
        return False
    return bool(np.array_equal(np.sort(arr), np.arange(arr.size)))


def check_permutation(p) -> np.ndarray:
    """Return ``p`` as an int64 array, raising ``ValueError`` if it is not a
    permutation of ``0..n-1`` with ``n >= 2``."""
    arr = _as_int_vector(p)
    if not is_permutation(arr):
        raise ValueError(f"not a permutation of 0..n-1 (n >= 2): {arr.tolist()}")
    return arr


def identity(n: int) -> np.ndarray:
    return np.arange(n, dtype=np.int64)


def random_permutation(n: int, seed) -> np.ndarray:
    """Uniform random permutation of ``0..n-1`` (Fisher-Yates).

    ``seed`` may be an int or a sequence of ints; sequences are fed to
    :class:`numpy.random.SeedSequence` so callers can derive independent
    streams from e.g. ``(seed, epoch, example)``.
    """
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    rng = np.random.default_rng(seed)
    p = np.arange(n, dtype=np.int64)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        p[i], p[j] = p[j], p[i]
    return p


def apply_permutation(items: Sequence, p) -> list | np.ndarray:
    """``out[j] = items[p[j]]``.  Arrays are indexed along their first axis."""
    p = check_permutation(p)
    if len(items) != p.size:
        raise ValueError(f"length mismatch: {len(items)} items, permutation of {p.size}")
    if isinstance(items, np.ndarray):
        return items[p]
    return [items[k] for k in p]


def invert_permutation(p) -> np.ndarray:
    p = check_permutation(p)
    q = np.empty_like(p)
    q[p] = np.arange(p.size)
    return q


def hard_rank(theta) -> np.ndarray:
    """Ascending 0-based ranks of the last axis of ``theta``.

    Ties are broken by index (stable): the earlier entry gets the smaller rank.
    Accepts a single vector or a batch of shape ``(..., n)``.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape[-1] < 2:
        raise ValueError("need at least 2 scores")
    if np.isnan(theta).any():
        raise ValueError("NaN in scores")
    order = np.argsort(theta, axis=-1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.broadcast_to(np.arange(theta.shape[-1]), order.shape), axis=-1)
    return ranks


def partial_ranks_accuracy(pred, truth) -> float:
    """Fraction of positions where the predicted rank equals the true rank."""
    pred = _as_int_vector(pred)
    truth = _as_int_vector(truth)
    if pred.size != truth.size:
        raise ValueError(f"length mismatch: {pred.size} vs {truth.size}")
    return float(np.mean(pred == truth))


def hamming_distance(p, q) -> int:
    p = _as_int_vector(p)
    q = _as_int_vector(q)
    if p.size != q.size:
        raise ValueError(f"length mismatch: {p.size} vs {q.size}")
    return int(np.count_nonzero(p != q))


def max_hamming_set(n: int, L: int, pool: int = 1000, seed: int = 0) -> np.ndarray:
    """Greedy max-min Hamming set of ``L`` distinct permutations, shape ``(L, n)``.

    Starts from one random permutation; each step samples ``pool`` fresh
    candidates and keeps the one whose minimum Hamming distance to the chosen
    set is largest.  Candidates already in the set have distance 0 and are
    never picked while any unused candidate exists.  When ``L`` is a large
    fraction of ``n!`` the pool is the full set of unused permutations.
    """
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    if L < 1:
        raise ValueError(f"L must be >= 1, got {L}")
    if L > math.factorial(n):
        raise ValueError(f"L={L} exceeds n!={math.factorial(n)}")
    if pool < L:
        raise ValueError(f"pool={pool} must be >= L={L}")
    rng = np.random.default_rng(seed)
    chosen = np.empty((L, n), dtype=np.int64)
    chosen[0] = rng.permutation(n)
    # running min distance from each candidate to the chosen set is recomputed per step
    enumerate_all = math.factorial(n) <= 2 * pool
    if enumerate_all:
        from itertools import permutations

        universe = np.array(list(permutations(range(n))), dtype=np.int64)
    for k in range(1, L):
        if enumerate_all:
            cands = universe
        else:
            cands = np.argsort(rng.random((pool, n)), axis=1)
        dists = (cands[:, None, :] != chosen[None, :k, :]).sum(axis=2).min(axis=1)
        best = int(np.argmax(dists))
        if dists[best] == 0:
            raise RuntimeError("candidate pool produced no unused permutation")
        chosen[k] = cands[best]
    return chosen
