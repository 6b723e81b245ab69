import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from arpm.core_math import softmax
from arpm.losses import (Banks, _top_k_excluding_self, UncertaintyLossKind, alpha_power, alpha_power_surface, nrc_loss,
                         nrc_neighbors, nrc_objective, reweighted_ce, simplex_grid,
                         smoothed_targets, two_class_gradient, uncertainty_loss, update_banks)

from oracles import central_diff, reciprocal_affinity_bruteforce, rel_err


def random_probs(seed, b=5, k=4):
    return softmax(np.random.default_rng(seed).standard_normal((b, k)) * 2)


class TestReweightedCE:
    def test_matches_explicit_sum(self):
        rng = np.random.default_rng(0)
        logits = rng.standard_normal((4, 3))
        p = softmax(logits)
        y = np.array([0, 2, 1, 2])
        w = np.array([0.5, 2.0, 0.0, 1.5])
        loss, _ = reweighted_ce(p, y, w, smoothing=0.1, logits=logits)
        expected = 0.0
        for i in range(4):
            for c in range(3):
                a = 0.9 if c == y[i] else 0.05
                expected -= w[i] * a * np.log(p[i, c])
        assert loss == pytest.approx(expected / 4, rel=1e-12)

    def test_gradient_wrt_logits(self):
        rng = np.random.default_rng(1)
        z = rng.standard_normal((5, 4))
        y = rng.integers(0, 4, 5)
        w = rng.uniform(0, 2, 5)
        _, g = reweighted_ce(softmax(z), y, w, 0.1, logits=z)
        numeric = central_diff(lambda: reweighted_ce(softmax(z), y, w, 0.1, logits=z)[0], z)
        assert rel_err(g, numeric) < 1e-8

    def test_unit_weights_equal_unweighted(self):
        p = random_probs(2)
        y = np.array([0, 1, 2, 3, 0])
        assert reweighted_ce(p, y, np.ones(5))[0] == reweighted_ce(p, y)[0]

    def test_zero_weight_rows_have_no_gradient(self):
        p = random_probs(3)
        _, g = reweighted_ce(p, np.zeros(5, int), np.array([1.0, 0, 1, 0, 1]))
        np.testing.assert_array_equal(g[[1, 3]], 0.0)

    def test_smoothed_targets_sum_to_one(self):
        a = smoothed_targets(np.array([0, 3]), 4, 0.1)
        np.testing.assert_allclose(a.sum(axis=1), 1.0)
        assert a[0, 0] == pytest.approx(0.9) and a[0, 1] == pytest.approx(0.1 / 3)

    @pytest.mark.parametrize("kw", [dict(weights=-np.ones(5)), dict(smoothing=1.0)])
    def test_invalid_arguments(self, kw):
        with pytest.raises(ValueError):
            reweighted_ce(random_probs(4), np.zeros(5, int), **kw)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            reweighted_ce(random_probs(4), np.full(5, 4))


class TestAlphaPower:
    @pytest.mark.parametrize("alpha", [2, 4, 6, 8])
    def test_extremals(self, alpha):
        k = 5
        assert alpha_power(np.eye(k), alpha) == pytest.approx(np.ones(k), abs=1e-12)
        assert alpha_power(np.full(k, 1 / k), alpha) == pytest.approx(k ** (1 - alpha), abs=1e-12)

    @settings(max_examples=50)
    @given(arrays(np.float64, (3, 4), elements=st.floats(-8, 8)), st.sampled_from([2.0, 4.0, 6.0, 8.0]))
    def test_bounded_between_uniform_and_one_hot(self, z, alpha):
        h = alpha_power(softmax(z), alpha)
        assert np.all(h <= 1 + 1e-12)
        assert np.all(h >= 4 ** (1 - alpha) - 1e-12)

    @pytest.mark.parametrize("kind", ["alpha_power:2", "alpha_power:6", "square", "tsallis:3",
                                      "entropy"])
    def test_gradients_wrt_probs(self, kind):
        p = random_probs(5)
        _, g = uncertainty_loss(p, kind)
        numeric = central_diff(lambda: uncertainty_loss(p, kind)[0], p)
        assert rel_err(g, numeric) < 1e-6

    def test_square_is_alpha_two(self):
        p = random_probs(6)
        assert uncertainty_loss(p, "square")[0] == uncertainty_loss(p, "alpha_power:2")[0]

    def test_tsallis_matches_its_definition(self):
        p = random_probs(7)
        expected = np.mean((1 - np.sum(p ** 3, axis=1)) / 2)
        assert uncertainty_loss(p, "tsallis:3")[0] == pytest.approx(expected)

    def test_kind_validation(self):
        with pytest.raises(ValueError):
            UncertaintyLossKind("alpha_power", 1.0)
        with pytest.raises(ValueError):
            UncertaintyLossKind("hinge")
        assert UncertaintyLossKind.parse("alpha_power:4").alpha == 4.0

    def test_one_hot_minimises_the_power_loss(self):
        k = 4
        loss_hot, _ = uncertainty_loss(np.eye(k), UncertaintyLossKind("alpha_power", 6))
        loss_rand, _ = uncertainty_loss(random_probs(8, k=k), UncertaintyLossKind("alpha_power", 6))
        assert loss_hot == pytest.approx(-1.0) and loss_rand > loss_hot


class TestBanks:
    def test_last_write_wins_with_warning(self):
        banks = Banks.empty(4, 2, 3)
        with pytest.warns(UserWarning, match="duplicate"):
            update_banks(banks, [1, 1], np.array([[1.0, 0], [0, 1.0]]), np.eye(3)[:2])
        np.testing.assert_array_equal(banks.Z[1], [0, 1.0])
        np.testing.assert_array_equal(banks.S[1], [0, 1.0, 0])

    def test_index_out_of_range(self):
        with pytest.raises(IndexError):
            update_banks(Banks.empty(3, 2, 2), [3], np.ones((1, 2)), np.ones((1, 2)))

    def test_uninitialised_banks(self):
        with pytest.raises(RuntimeError, match="uninitialized"):
            nrc_neighbors(Banks.empty(5, 2, 2), [0], 2, 2)


class TestNRC:
    @pytest.mark.parametrize("seed", range(5))
    def test_affinities_match_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        Z = rng.standard_normal((30, 5))
        banks = Banks(Z, softmax(rng.standard_normal((30, 3))))
        query = rng.choice(30, 8, replace=False)
        nbrs, aff = nrc_neighbors(banks, query, K=4, M=3)
        oracle = reciprocal_affinity_bruteforce(Z, query, 4, 3)
        for r, j in enumerate(query):
            assert j not in nbrs[r]
            for c, jp in enumerate(nbrs[r]):
                assert oracle[(j, jp)] == aff[r, c]
        assert set(oracle) == {(j, jp) for r, j in enumerate(query) for jp in nbrs[r]}

    def test_mutual_pair_gets_full_affinity(self):
        Z = np.array([[1.0, 0.0], [0.99, 0.1], [-1.0, 0.0], [-0.99, -0.1]])
        _, aff = nrc_neighbors(Banks(Z, np.full((4, 2), 0.5)), [0], K=1, M=1)
        assert aff[0, 0] == 1.0

    def test_one_sided_pair_gets_tenth(self):
        # 0's nearest is 1, but 1's nearest is 2
        Z = np.array([[1.0, 0.0], [0.8, 0.6], [0.7, 0.72], [-1.0, 0.0]])
        nbrs, aff = nrc_neighbors(Banks(Z, np.full((4, 2), 0.5)), [0], K=1, M=1)
        assert nbrs[0, 0] == 1 and aff[0, 0] == 0.1

    def test_objective_gradient(self):
        rng = np.random.default_rng(9)
        p = random_probs(10, b=3, k=4)
        s = softmax(rng.standard_normal((3, 2, 4)))
        aff = np.array([[1.0, 0.1], [0.1, 0.1], [1.0, 1.0]])
        _, g = nrc_objective(p, s, aff)
        numeric = central_diff(lambda: nrc_objective(p, s, aff)[0], p)
        assert rel_err(g, numeric) < 1e-9

    def test_loss_is_batch_normalised(self):
        rng = np.random.default_rng(11)
        banks = Banks(rng.standard_normal((20, 3)), softmax(rng.standard_normal((20, 2))))
        p = softmax(rng.standard_normal((4, 2)))
        idx = np.arange(4)
        one, _ = nrc_loss(banks, idx, p)
        twice, _ = nrc_loss(banks, np.concatenate([idx, idx]), np.concatenate([p, p]))
        assert one == pytest.approx(twice)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.int64, (6, 9), elements=st.integers(-3, 3)), st.integers(1, 8))
    def test_top_k_matches_stable_sort_with_ties(self, sim, k):
        sim = sim.astype(float)
        self_idx = np.arange(6)
        ref = sim.copy()
        ref[np.arange(6), self_idx] = -np.inf
        expected = np.argsort(-ref, axis=1, kind="stable")[:, :k]
        np.testing.assert_array_equal(_top_k_excluding_self(sim, self_idx, k), expected)

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            nrc_neighbors(Banks(np.eye(3), np.eye(3)), [0], K=3, M=1)


class TestPlotData:
    def test_simplex_grid_size_and_membership(self):
        pts = simplex_grid(10)
        assert len(pts) == 66
        np.testing.assert_allclose(pts.sum(axis=1), 1.0)
        assert np.all(pts >= 0)

    def test_surface_gradient_is_self_normalised(self):
        _, g = alpha_power_surface(simplex_grid(20), 4)
        assert g.max() == pytest.approx(1.0)

    def test_power_gradient_is_flatter_near_the_boundary_for_larger_alpha(self):
        p = np.linspace(0.51, 0.6, 10)
        assert np.all(two_class_gradient(p, 8) < two_class_gradient(p, 2))

    def test_entropy_curve(self):
        p = np.array([0.7])
        ref = np.log(0.99 / 0.01)
        assert two_class_gradient(p)[0] == pytest.approx(np.log(0.7 / 0.3) / ref, rel=1e-12)
