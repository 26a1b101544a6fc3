"""Tests for co-attention scoring, soft pair labels, and ranking losses."""

import math

import numpy as np
import pytest

from shotrank import autodiff as ad
from shotrank import coattention as co
from shotrank import rng as rngmod
from shotrank.errors import EmptyClass, TooFewShots


def identity_params(d):
    return co.CoAttentionParams(ad.Parameter("w", np.eye(d)))


class TestMemoryAndScores:
    def test_identity_projection_copies_trailer(self):
        params = identity_params(4)
        trailer = ad.constant(np.arange(8, dtype=np.float64).reshape(2, 4))
        np.testing.assert_array_equal(co.build_memory(params, trailer).value,
                                      trailer.value)

    def test_single_trailer_shot_memory(self):
        params = identity_params(3)
        memory = co.build_memory(params, ad.constant(np.ones((1, 3))))
        assert memory.value.shape == (1, 3)

    def test_memory_gradients_pass_finite_diff(self):
        rng = np.random.default_rng(0)
        params = co.init_coattention(5, 4, rng, np.float64)
        trailer = rng.standard_normal((3, 5))
        coeffs = rng.standard_normal((3, 4))

        def loss_fn():
            mem = co.build_memory(params, ad.constant(trailer))
            return ad.sum_all(ad.mul(mem, ad.constant(coeffs)))

        assert ad.finite_diff_check(loss_fn, params.parameters()).passed

    def test_self_match_gives_squared_norm(self):
        # orthogonal shots: the best memory match of each query is itself
        params = identity_params(4)
        feats = np.diag([1.0, 2.0, 3.0, 4.0])
        x = ad.constant(feats)
        att = co.co_attention_scores(params, x, co.build_memory(params, x))
        np.testing.assert_allclose(att.value[:, 0], (feats ** 2).sum(axis=1))

    def test_enumerated_maximum(self):
        # q = [1, 0] against memory rows {[0,1], [2,0], [1,1]}: max(0, 2, 1) = 2
        params = identity_params(2)
        memory = co.build_memory(params, ad.constant(
            np.array([[0.0, 1.0], [2.0, 0.0], [1.0, 1.0]])))
        att = co.co_attention_scores(params, ad.constant([[1.0, 0.0]]), memory)
        assert att.value[0, 0] == 2.0

    def test_duplicate_memory_row_changes_nothing(self):
        rng = np.random.default_rng(1)
        params = co.init_coattention(6, 6, rng, np.float64)
        movie = ad.constant(rng.standard_normal((5, 6)))
        trailer = rng.standard_normal((3, 6))
        base = co.co_attention_scores(
            params, movie, co.build_memory(params, ad.constant(trailer))).value
        dup = co.co_attention_scores(
            params, movie,
            co.build_memory(params, ad.constant(np.vstack([trailer, trailer[1]])))).value
        np.testing.assert_array_equal(base, dup)

    def test_trailer_permutation_invariance(self):
        rng = np.random.default_rng(2)
        params = co.init_coattention(6, 6, rng, np.float64)
        movie = ad.constant(rng.standard_normal((5, 6)))
        trailer = rng.standard_normal((4, 6))
        base = co.co_attention_scores(
            params, movie, co.build_memory(params, ad.constant(trailer))).value
        perm = co.co_attention_scores(
            params, movie, co.build_memory(params, ad.constant(trailer[[2, 0, 3, 1]]))).value
        np.testing.assert_array_equal(base, perm)

    def test_cosine_metric_bounded(self):
        rng = np.random.default_rng(3)
        params = co.init_coattention(6, 6, rng, np.float64)
        movie = ad.constant(rng.standard_normal((5, 6)))
        memory = co.build_memory(params, ad.constant(rng.standard_normal((4, 6))))
        att = co.co_attention_scores(params, movie, memory, metric="cosine")
        assert (np.abs(att.value) <= 1.0 + 1e-9).all()


class TestPairWeights:
    def test_equal_scores_give_zero_weight(self):
        assert co.pair_weights(1.3, 1.3, 1.5) == (0.0, 0)

    def test_closed_form_example(self):
        # lam (e^|2-1| - 1) = 1.5 (e - 1)
        w, sigma = co.pair_weights(2.0, 1.0, 1.5)
        assert w == pytest.approx(1.5 * (math.e - 1.0), rel=1e-12)
        assert sigma == 1

    def test_swap_flips_sign_keeps_weight(self):
        w_ij, s_ij = co.pair_weights(0.4, -1.1, 2.0)
        w_ji, s_ji = co.pair_weights(-1.1, 0.4, 2.0)
        assert w_ij == w_ji and s_ij == -s_ji == 1

    def test_weight_monotone_in_gap(self):
        rng = np.random.default_rng(4)
        gaps = np.sort(rng.uniform(0, 3, size=50))
        weights = [co.pair_weights(g, 0.0, 1.5)[0] for g in gaps]
        assert all(b >= a for a, b in zip(weights, weights[1:]))
        assert all(w >= 0 for w in weights)

    def test_scaling_preserves_sigma(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            a, b = rng.standard_normal(2)
            c = rng.uniform(0.1, 10)
            assert co.pair_weights(a, b, 1.5)[1] == co.pair_weights(c * a, c * b, 1.5)[1]


class TestCoattentionRankLoss:
    def _loss(self, scores, pairs):
        return float(co.coattention_rank_loss(
            ad.constant(np.asarray(scores, dtype=np.float64).reshape(-1, 1)),
            pairs).value[0, 0])

    def test_satisfied_margin_is_zero(self):
        pairs = [co.SoftLabelPair(0, 1, 2.0, 1)]
        assert self._loss([1.5, 0.0], pairs) == 0.0

    def test_direct_substitution(self):
        # sigma=+1, equal scores: term = w * max(0, 1 - 0) = 2
        pairs = [co.SoftLabelPair(0, 1, 2.0, 1)]
        assert self._loss([0.0, 0.0], pairs) == 2.0

    def test_all_zero_sigma_gives_zero(self):
        pairs = [co.SoftLabelPair(0, 1, 0.0, 0), co.SoftLabelPair(1, 2, 0.0, 0)]
        assert self._loss([5.0, -3.0, 1.0], pairs) == 0.0

    def test_nonnegative_and_convex_in_scores(self):
        rng = np.random.default_rng(6)
        for _ in range(30):
            n = int(rng.integers(3, 10))
            pairs = []
            for _ in range(12):
                i, j = rng.choice(n, size=2, replace=False)
                w, sigma = co.pair_weights(rng.standard_normal(), rng.standard_normal(), 1.5)
                pairs.append(co.SoftLabelPair(int(i), int(j), w, sigma))
            s1, s2 = rng.standard_normal((2, n))
            l1, l2 = self._loss(s1, pairs), self._loss(s2, pairs)
            lm = self._loss((s1 + s2) / 2, pairs)
            assert l1 >= 0 and l2 >= 0
            assert lm <= (l1 + l2) / 2 + 1e-9

    def test_gradient_passes_finite_diff(self):
        rng = np.random.default_rng(7)
        w = ad.Parameter("s", rng.standard_normal((6, 1)))
        pairs = [co.SoftLabelPair(0, 3, 1.5, 1), co.SoftLabelPair(2, 4, 0.7, -1),
                 co.SoftLabelPair(1, 5, 2.2, 1)]
        report = ad.finite_diff_check(lambda: co.coattention_rank_loss(w, pairs), [w])
        assert report.passed, report.per_param


class TestSupervisedRankLoss:
    def _loss(self, scores, pos, neg, **kw):
        return float(co.supervised_rank_loss(
            ad.constant(np.asarray(scores, dtype=np.float64).reshape(-1, 1)),
            pos, neg, **kw).value[0, 0])

    def test_met_margins_give_zero(self):
        assert self._loss([2.0, 2.0, 0.5, 0.9], [0, 1], [2, 3]) == 0.0

    def test_equal_scores_give_one_per_pair(self):
        assert self._loss([1.0, 1.0], [0], [1]) == 1.0

    def test_matches_brute_force_double_loop(self):
        rng = np.random.default_rng(8)
        for _ in range(25):
            n = int(rng.integers(4, 15))
            scores = rng.standard_normal(n)
            labels = np.zeros(n, dtype=int)
            labels[rng.choice(n, size=int(rng.integers(1, n)), replace=False)] = 1
            pos = [i for i in range(n) if labels[i] == 1]
            neg = [i for i in range(n) if labels[i] == 0]
            if not pos or not neg:
                continue
            oracle = 0.0
            for i in pos:
                for j in neg:
                    oracle += max(0.0, 1.0 - scores[i] + scores[j])
            assert self._loss(scores, pos, neg) == pytest.approx(oracle, abs=1e-6)

    def test_sampling_caps_pairs_per_positive(self):
        rng = rngmod.stream(0, "test")
        scores = ad.constant(np.zeros((50, 1)))
        loss = co.supervised_rank_loss(scores, [0], list(range(1, 50)),
                                       negatives_per_positive=20, rng=rng)
        assert float(loss.value[0, 0]) == 20.0  # 20 pairs, each with margin 1

    def test_empty_class_raises(self):
        scores = ad.constant(np.zeros((3, 1)))
        with pytest.raises(EmptyClass):
            co.supervised_rank_loss(scores, [], [1, 2])
        with pytest.raises(EmptyClass):
            co.supervised_rank_loss(scores, [0], [0, 1])


class TestSamplePairs:
    def test_two_shots_give_the_only_pair(self):
        pairs = co.sample_pairs(2, np.array([0.5, 1.5]), 1, 1.5,
                                rngmod.stream(0, "p"))
        assert {pairs[0].i, pairs[0].j} == {0, 1}

    def test_fixed_seed_reproduces(self):
        att = np.arange(8, dtype=np.float64)
        a = co.sample_pairs(8, att, 30, 1.5, rngmod.stream(3, "p"))
        b = co.sample_pairs(8, att, 30, 1.5, rngmod.stream(3, "p"))
        assert a == b

    def test_no_self_pairs(self):
        pairs = co.sample_pairs(5, np.zeros(5), 500, 1.5, rngmod.stream(1, "p"))
        assert all(p.i != p.j for p in pairs)

    def test_offset_shifts_indices(self):
        pairs = co.sample_pairs(3, np.zeros(3), 50, 1.5, rngmod.stream(2, "p"),
                                offset=10)
        assert all(10 <= p.i < 13 and 10 <= p.j < 13 for p in pairs)

    def test_marginals_uniform_by_chi_square(self):
        # chi-square statistic of the combined index counts vs uniform,
        # accepted within 3 sigma of its own mean
        n, draws = 10, 100_000
        pairs = co.sample_pairs(n, np.zeros(n), draws, 1.5, rngmod.stream(4, "p"))
        counts = np.zeros(n)
        for p in pairs:
            counts[p.i] += 1
            counts[p.j] += 1
        expected = 2 * draws / n
        stat = float(((counts - expected) ** 2 / expected).sum())
        dof = n - 1
        assert stat <= dof + 3 * math.sqrt(2 * dof), (stat, counts)

    def test_too_few_shots(self):
        with pytest.raises(TooFewShots):
            co.sample_pairs(1, np.zeros(1), 1, 1.5, rngmod.stream(0, "p"))
