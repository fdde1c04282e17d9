import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from permssl.permcore import (
    apply_permutation,
    hamming_distance,
    hard_rank,
    identity,
    invert_permutation,
    is_permutation,
    max_hamming_set,
    partial_ranks_accuracy,
    random_permutation,
)

perms = st.integers(2, 9).flatmap(lambda n: st.permutations(list(range(n))))


def all_perms(n):
    return [np.array(p) for p in itertools.permutations(range(n))]


class TestRandomPermutation:
    def test_two_elements_has_both_outcomes(self):
        seen = {tuple(random_permutation(2, s)) for s in range(20)}
        assert seen == {(0, 1), (1, 0)}

    def test_deterministic(self):
        np.testing.assert_array_equal(random_permutation(4, 123), random_permutation(4, 123))

    def test_uniform_chi_squared(self):
        counts = {}
        for s in range(60_000):
            key = tuple(random_permutation(3, (5, s)))
            counts[key] = counts.get(key, 0) + 1
        assert len(counts) == 6
        observed = np.array(list(counts.values()))
        # each cell within 3 sigma of n/6
        sigma = math.sqrt(60_000 * (1 / 6) * (5 / 6))
        assert np.all(np.abs(observed - 10_000) < 3 * sigma)
        assert stats.chisquare(observed).pvalue > 1e-3

    def test_rejects_small_n(self):
        with pytest.raises(ValueError):
            random_permutation(1, 0)

    @given(st.integers(2, 30), st.integers(0, 2**32))
    def test_is_permutation(self, n, seed):
        assert is_permutation(random_permutation(n, seed))


class TestApplyInvert:
    def test_convention(self):
        assert apply_permutation(["A", "B", "C"], (2, 0, 1)) == ["C", "A", "B"]

    def test_identity(self):
        items = np.arange(5) * 1.5
        np.testing.assert_array_equal(apply_permutation(items, identity(5)), items)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            apply_permutation([1, 2, 3], (1, 0))

    @pytest.mark.parametrize("n", [2, 3, 4])
    def test_round_trip_exhaustive(self, n):
        x = [f"item{i}" for i in range(n)]
        for p in all_perms(n):
            assert apply_permutation(apply_permutation(x, p), invert_permutation(p)) == x

    def test_round_trip_random_n6(self):
        rng = np.random.default_rng(0)
        for s in range(50):
            x = rng.normal(size=6)
            p = random_permutation(6, s)
            np.testing.assert_array_equal(apply_permutation(apply_permutation(x, p), invert_permutation(p)), x)

    def test_invert_examples(self):
        np.testing.assert_array_equal(invert_permutation((0, 1, 2)), (0, 1, 2))
        np.testing.assert_array_equal(invert_permutation((2, 0, 1)), (1, 2, 0))
        np.testing.assert_array_equal(invert_permutation((1, 0)), (1, 0))

    @given(perms)
    def test_invert_composes_to_identity(self, p):
        p = np.array(p)
        q = invert_permutation(p)
        np.testing.assert_array_equal(q[p], identity(p.size))
        np.testing.assert_array_equal(invert_permutation(q), p)

    def test_invalid_permutation(self):
        with pytest.raises(ValueError):
            invert_permutation((0, 0, 1))


class TestHardRank:
    def test_identity_example(self):
        np.testing.assert_array_equal(hard_rank([0.1, 0.9, 2.2, 2.8]), [0, 1, 2, 3])

    def test_two(self):
        np.testing.assert_array_equal(hard_rank([5.0, -1.0]), [1, 0])

    def test_stable_ties(self):
        np.testing.assert_array_equal(hard_rank([1.0, 1.0, 0.0]), [1, 2, 0])

    def test_nan(self):
        with pytest.raises(ValueError):
            hard_rank([0.0, np.nan])

    def test_batch(self):
        np.testing.assert_array_equal(hard_rank([[3, 1, 2], [0, 5, 1]]), [[2, 0, 1], [0, 2, 1]])

    @given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=12))
    def test_counts_smaller(self, xs):
        r = hard_rank(xs)
        x = np.array(xs)
        for i in range(x.size):
            expected = np.sum(x < x[i]) + np.sum(x[:i] == x[i])
            assert r[i] == expected

    @pytest.mark.parametrize("n", [2, 3, 4, 5])
    def test_label_convention_exhaustive(self, n):
        values = np.sort(np.random.default_rng(n).normal(size=n))
        for p in all_perms(n):
            np.testing.assert_array_equal(hard_rank(apply_permutation(values, p)), p)


class TestMetrics:
    def test_partial_ranks_examples(self):
        assert partial_ranks_accuracy((0, 1, 2, 3), (0, 1, 3, 2)) == 0.5
        assert partial_ranks_accuracy((2, 0, 1), (2, 0, 1)) == 1.0
        assert partial_ranks_accuracy((1, 0), (0, 1)) == 0.0
        with pytest.raises(ValueError):
            partial_ranks_accuracy((0, 1), (0, 1, 2))

    def test_hamming_examples(self):
        assert hamming_distance(identity(4), identity(4)) == 0
        assert hamming_distance((0, 1, 2), (1, 0, 2)) == 2
        with pytest.raises(ValueError):
            hamming_distance((0, 1), (0, 1, 2))

    def test_hamming_symmetric_exhaustive(self):
        ps = all_perms(4)
        for p in ps:
            for q in ps:
                assert hamming_distance(p, q) == hamming_distance(q, p)

    @given(st.integers(2, 8).flatmap(lambda n: st.tuples(st.permutations(list(range(n))), st.permutations(list(range(n))))))
    def test_accuracy_is_one_minus_normalized_hamming(self, pq):
        p, q = pq
        acc = partial_ranks_accuracy(p, q)
        assert acc == partial_ranks_accuracy(q, p)
        assert acc == pytest.approx(1 - hamming_distance(p, q) / len(p))


class TestMaxHammingSet:
    def test_full_set_n3(self):
        s = max_hamming_set(3, 6, seed=0)
        assert {tuple(p) for p in s} == set(itertools.permutations(range(3)))

    def test_n2(self):
        s = max_hamming_set(2, 2, pool=2, seed=1)
        assert {tuple(p) for p in s} == {(0, 1), (1, 0)}

    def test_too_large(self):
        with pytest.raises(ValueError):
            max_hamming_set(3, 7)

    def test_deterministic_and_distinct(self):
        a = max_hamming_set(6, 100, seed=3)
        np.testing.assert_array_equal(a, max_hamming_set(6, 100, seed=3))
        assert len({tuple(p) for p in a}) == 100
        assert all(is_permutation(p) for p in a)

    def test_beats_random_sets(self):
        def min_pairwise(s):
            d = (s[:, None, :] != s[None, :, :]).sum(2)
            d[np.diag_indices(len(s))] = s.shape[1] + 1
            return d.min()

        greedy, random_sets = [], []
        for seed in range(10):
            greedy.append(min_pairwise(max_hamming_set(10, 100, seed=seed)))
            rng = np.random.default_rng(seed + 100)
            random_sets.append(min_pairwise(np.array([rng.permutation(10) for _ in range(100)])))
        assert np.median(greedy) >= np.median(random_sets)
