import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from phalanx.data import from_arrays
from phalanx.errors import UndefinedMetricError
from phalanx.metrics import (APR, RKL, TOP1, apr_block, block_average, hit_curve, metric_spec, per_block,
                             permutation_reference, pessimistic_order, rkl_block, top1_block)

from helpers import make_block


def brute_apr(labels, scores):
    """Precision at every positive, charging each tied group its worst placement."""
    labels, scores = np.asarray(labels), np.asarray(scores, dtype=float)
    total = 0.0
    for i in np.flatnonzero(labels):
        above = scores > scores[i]
        tied = scores == scores[i]
        tied_neg = np.sum(tied & (labels == 0))
        # Pessimistic: all tied negatives, then tied positives in some order;
        # the k-th tied positive sits after those.
        k = np.sum(tied & (labels == 1) & (np.arange(len(labels)) <= i))
        pos = above.sum() + tied_neg + k
        hits = np.sum(above & (labels == 1)) + k
        total += hits / pos
    return total / labels.sum()


block = st.integers(1, 40).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 1), min_size=n, max_size=n),
    st.lists(st.integers(0, 5), min_size=n, max_size=n),
))


class TestSpecs:
    def test_defaults(self):
        assert (APR.direction, APR.alpha) == ("maximize", 0.95)
        assert (RKL.direction, RKL.alpha) == ("minimize", 0.05)
        assert metric_spec("apr", 0.9).alpha == 0.9

    def test_better(self):
        assert APR.better(0.5, 0.4) and not APR.better(0.4, 0.4)
        assert RKL.better(3, 4)

    @pytest.mark.parametrize("name", ["auc", ""])
    def test_unknown(self, name):
        with pytest.raises(ValueError):
            metric_spec(name)


class TestBlockMetrics:
    def test_doc_example(self):
        assert apr_block([1, 0, 1, 0], [0.9, 0.8, 0.7, 0.6]) == pytest.approx(5 / 6)

    def test_ties_are_pessimistic(self):
        labels, scores = [1, 0, 0], [0.5, 0.5, 0.1]
        assert rkl_block(labels, scores) == 2
        assert top1_block(labels, scores) == 0
        assert apr_block(labels, scores) == pytest.approx(0.5)

    def test_all_tied_puts_positives_last(self):
        labels = [1, 0, 1, 0, 0]
        assert rkl_block(labels, [1.0] * 5) == 5
        assert apr_block(labels, [1.0] * 5) == pytest.approx((1 / 4 + 2 / 5) / 2)

    def test_top1_needs_every_top_tie_positive(self):
        assert top1_block([1, 1, 0], [0.9, 0.9, 0.2]) == 1

    def test_no_positive_raises(self):
        with pytest.raises(UndefinedMetricError):
            apr_block([0, 0], [0.1, 0.2])

    def test_order_is_descending(self):
        assert pessimistic_order([0, 1, 0], [0.1, 0.3, 0.2]).tolist() == [1, 2, 0]

    @settings(max_examples=200, deadline=None)
    @given(block)
    def test_apr_matches_brute_force(self, data):
        labels, scores = data
        assume(any(labels))
        assert apr_block(labels, scores) == pytest.approx(brute_apr(labels, scores))

    @settings(max_examples=200, deadline=None)
    @given(block)
    def test_ranges(self, data):
        labels, scores = data
        assume(any(labels))
        h, n = sum(labels), len(labels)
        assert 0 < apr_block(labels, scores) <= 1
        assert h <= rkl_block(labels, scores) <= n
        assert top1_block(labels, scores) in (0, 1)

    @settings(max_examples=100, deadline=None)
    @given(block)
    def test_perfect_ranking(self, data):
        labels, _ = data
        assume(any(labels))
        perfect = np.asarray(labels, dtype=float)
        assert apr_block(labels, perfect) == 1.0
        assert rkl_block(labels, perfect) == sum(labels)
        assert top1_block(labels, perfect) == 1

    @settings(max_examples=100, deadline=None)
    @given(block, st.floats(0.1, 10), st.floats(-5, 5))
    def test_invariant_to_increasing_transform(self, data, a, b):
        labels, scores = data
        assume(any(labels))
        s = np.asarray(scores, dtype=float)
        for f in (apr_block, rkl_block, top1_block):
            assert f(labels, a * s + b) == pytest.approx(f(labels, s))

    def test_promoting_a_positive_never_hurts(self):
        labels, scores = make_block(50, [5, 20, 40])
        better = scores.copy()
        better[39] = scores[10] + 0.5
        assert apr_block(labels, better) > apr_block(labels, scores)
        assert rkl_block(labels, better) < rkl_block(labels, scores)


class TestAcrossBlocks:
    def ds(self):
        return from_arrays(np.zeros((6, 1)), [1, 0, 0, 0, 1, 1], ["x", "x", "x", "y", "y", "y"])

    def test_per_block_and_average(self):
        ds = self.ds()
        s = np.array([0.9, 0.8, 0.1, 0.7, 0.6, 0.5])
        assert per_block(ds, s, APR).tolist() == pytest.approx([1.0, (1 / 2 + 2 / 3) / 2])
        assert per_block(ds, s, "RKL").tolist() == [1, 3]
        assert block_average(ds, s, TOP1) == 0.5

    def test_empty_block(self):
        ds = from_arrays(np.zeros((4, 1)), [1, 0, 0, 0], ["x", "x", "y", "y"], require_positives=False)
        s = np.arange(4.0)
        with pytest.raises(UndefinedMetricError, match="'y'"):
            per_block(ds, s, APR)
        vals = per_block(ds, s, APR, skip_empty=True)
        assert np.isnan(vals[1])
        assert block_average(ds, s, APR, skip_empty=True) == 0.5

    def test_shape_checked(self):
        with pytest.raises(ValueError):
            per_block(self.ds(), np.zeros(5), APR)


class TestHitCurve:
    def test_three_cases(self):
        c = hit_curve([0, 1, 1], [0.2, 0.9, 0.5])
        assert list(c.rows()) == [(1, 1), (2, 2), (3, 2)]
        assert (c.n, c.h) == (3, 2)

    def test_ties_put_negatives_first(self):
        assert hit_curve([1, 0], [0.5, 0.5]).hits.tolist() == [0, 1]


class TestPermutationReference:
    def ds(self, seed=0):
        rng = np.random.default_rng(seed)
        y = (rng.random(200) < 0.1).astype(int)
        y[::40] = 1
        return from_arrays(rng.normal(size=(200, 1)), y, np.repeat([f"b{i}" for i in range(5)], 40))

    def test_seeded(self):
        a = permutation_reference(self.ds(), APR, 100, seed=4)
        b = permutation_reference(self.ds(), APR, 100, seed=4)
        c = permutation_reference(self.ds(), APR, 100, seed=5)
        np.testing.assert_array_equal(a.samples, b.samples)
        assert not np.array_equal(a.samples, c.samples)

    def test_cut_and_median(self):
        ref = permutation_reference(self.ds(), RKL, 101, seed=0)
        xs = np.sort(ref.samples)
        assert ref.median == xs[50]
        assert ref.cut == xs[5]  # ceil(101 * 0.05) = 6th smallest

    def test_block_scheme_keeps_block_counts(self):
        # With one positive per block and identity order, APR of a replicate
        # is the mean of 1/position, so every sample lies in [1/40, 1].
        ds = from_arrays(np.zeros((80, 1)), np.tile([1] + [0] * 39, 2), np.repeat(["a", "b"], 40))
        ref = permutation_reference(ds, APR, 300, seed=1)
        assert ref.samples.min() >= 1 / 40 and ref.samples.max() <= 1

    def test_global_scheme_redraws_into_valid_replicates(self):
        ref = permutation_reference(self.ds(), RKL, 50, seed=0, scheme="global")
        assert np.all(ref.samples >= 1)

    def test_global_scheme_gives_up(self):
        ds = from_arrays(np.zeros((400, 1)), np.r_[1, np.zeros(199), 1, np.zeros(199)].astype(int),
                         np.repeat(["a", "b"], 200))
        # Two positives among 400 cases: both land in one block about half the time.
        ref = permutation_reference(ds, APR, 20, seed=0, scheme="global")
        assert ref.n_perm == 20
        tiny = from_arrays(np.zeros((40, 1)), np.r_[1, np.zeros(19), 1, np.zeros(19)].astype(int),
                           np.repeat([f"b{i}" for i in range(20)], 2), require_positives=False)
        with pytest.raises(UndefinedMetricError):
            permutation_reference(tiny, APR, 1, seed=0, scheme="global")

    def test_unknown_scheme(self):
        with pytest.raises(ValueError):
            permutation_reference(self.ds(), APR, 10, scheme="sideways")

    def test_quantile_bounds(self):
        ref = permutation_reference(self.ds(), APR, 10, seed=0)
        assert ref.quantile(0.0) == ref.samples.min()
        assert ref.quantile(1.0) == ref.samples.max()
        with pytest.raises(ValueError):
            ref.quantile(1.5)
