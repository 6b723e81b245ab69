import math

import cvxpy as cp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from arpm.nets import Discriminator
from arpm.reweight import (WeightVector, class_weight_summary, learn_weights, read_weight_report,
                           solve_grouped, solve_weights, strided_groups, train_dual_discriminator,
                           write_weight_report)

from oracles import pgd_weights


def feasible(w, rho, tol=1e-8):
    m = len(w)
    return (np.all(w >= -tol) and abs(w.sum() - m) <= tol * m
            and np.sum((w - 1) ** 2) <= rho * m * (1 + tol))


def socp(d, rho):
    m = len(d)
    w = cp.Variable(m)
    prob = cp.Problem(cp.Minimize(d @ w), [w >= 0, cp.sum(w) == m, cp.sum_squares(w - 1) <= rho * m])
    prob.solve(solver=cp.CLARABEL)
    return w.value, prob.value


class TestSolveWeights:
    def test_two_point_vertex(self):
        np.testing.assert_allclose(solve_weights([0.0, 1.0], rho=5.0).w, [2.0, 0.0], atol=1e-12)

    def test_constant_scores_give_uniform_weights(self):
        np.testing.assert_array_equal(solve_weights(np.full(7, 3.2)).w, np.ones(7))

    def test_interior_closed_form(self):
        # small rho keeps every weight positive
        d = np.random.default_rng(0).uniform(-1, 1, 40)
        rho = 0.05
        dc = d - d.mean()
        expected = 1 - math.sqrt(rho * 40) * dc / np.linalg.norm(dc)
        assert np.all(expected > 0)
        np.testing.assert_allclose(solve_weights(d, rho).w, expected, atol=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_agrees_with_conic_solver(self, seed):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(5, 60))
        rho = float(rng.choice([1.0, 5.0, 9.0]))
        d = rng.standard_normal(m) * rng.uniform(0.1, 10)
        w = solve_weights(d, rho).w
        _, val = socp(d, rho)
        assert feasible(w, rho)
        assert d @ w <= val + 1e-6 * m * np.ptp(d)

    def test_agrees_with_projected_gradient(self):
        rng = np.random.default_rng(42)
        for _ in range(20):
            m = int(rng.integers(2, 30))
            rho = float(rng.choice([1.0, 5.0, 9.0]))
            d = rng.standard_normal(m)
            w = solve_weights(d, rho).w
            ref = pgd_weights(d, rho)
            assert d @ w <= d @ ref + 1e-6 * m * np.ptp(d)

    def test_zero_set_is_a_prefix_of_the_largest_scores(self):
        d = np.random.default_rng(3).standard_normal(50)
        w = solve_weights(d, 5.0).w
        zero = w == 0
        assert zero.any()
        assert d[zero].min() >= d[~zero].max()

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.integers(2, 40), elements=st.floats(-1e3, 1e3)),
           st.sampled_from([0.5, 1.0, 5.0, 9.0]))
    def test_always_feasible(self, d, rho):
        w = solve_weights(d, rho)
        assert feasible(w.w, rho, tol=1e-7)
        w.check()

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.integers(2, 30), elements=st.floats(-10, 10)),
           st.floats(0.1, 100), st.floats(-50, 50))
    def test_invariant_to_positive_affine_maps(self, d, a, b):
        np.testing.assert_allclose(solve_weights(a * d + b).w, solve_weights(d).w, atol=1e-7)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.integers(2, 30), elements=st.floats(-10, 10)))
    def test_order_reversing(self, d):
        w = solve_weights(d).w
        order = np.argsort(d, kind="stable")
        assert np.all(np.diff(w[order]) <= 1e-9)

    @pytest.mark.parametrize("bad", [[1.0], [0.0, np.nan]])
    def test_invalid_scores(self, bad):
        with pytest.raises(ValueError):
            solve_weights(bad)

    def test_weight_vector_check(self):
        with pytest.raises(ValueError, match="negative"):
            WeightVector(np.array([-0.1, 2.1]), 5.0).check()
        with pytest.raises(ValueError, match="sum"):
            WeightVector(np.array([1.0, 2.0]), 5.0).check()
        with pytest.raises(ValueError, match="deviation"):
            WeightVector(np.array([0.0, 0.0, 3.0]), 1.0).check()


class TestGrouping:
    def test_small_sets_are_one_group(self):
        assert len(strided_groups(100, 20_000)) == 1

    def test_strided_groups_partition(self):
        groups = strided_groups(47, 10)
        assert len(groups) == 4
        np.testing.assert_array_equal(groups[1][:3], [1, 5, 9])
        np.testing.assert_array_equal(np.sort(np.concatenate(groups)), np.arange(47))

    def test_each_group_sums_to_its_size(self):
        d = np.random.default_rng(0).standard_normal(95)
        w = solve_grouped(d, 5.0, group_threshold=20).w
        for g in strided_groups(95, 20):
            assert w[g].sum() == pytest.approx(len(g))


def two_cluster_features(seed=0, n=120):
    rng = np.random.default_rng(seed)
    near = rng.standard_normal((n, 4)) * 0.3
    far = rng.standard_normal((n, 4)) * 0.3 + 4.0
    src = np.concatenate([near, far])
    tgt = rng.standard_normal((n, 4)) * 0.3
    return src, tgt


class TestCritic:
    def test_dual_estimate_grows_and_separates_clusters(self):
        src, tgt = two_cluster_features()
        disc = Discriminator(4, hidden=(64, 64), rng=1)
        rep = train_dual_discriminator(disc, src, tgt, steps=300, rng=2)
        assert rep.wasserstein_estimate > 0
        assert rep.source_scores[120:].mean() > rep.source_scores[:120].mean()

    def test_round_downweights_the_far_cluster(self):
        src, tgt = two_cluster_features(3)
        disc = Discriminator(4, hidden=(64, 64), rng=4)
        res = learn_weights(disc, src, tgt, rho=5.0, steps=300, rng=5)
        res.weights.check()
        assert res.weights.w[:120].mean() > 1.5 * res.weights.w[120:].mean()

    def test_subsampling_keeps_previous_weights_elsewhere(self):
        src, tgt = two_cluster_features(6, n=30)
        prev = np.full(60, 1.0)
        disc = Discriminator(4, hidden=(16, 16), rng=7)
        res = learn_weights(disc, src, tgt, steps=5, subsample_threshold=20, subsample_size=20,
                            rng=8, prev_weights=prev)
        assert len(res.active) == 20
        inactive = np.setdiff1d(np.arange(60), res.active)
        np.testing.assert_array_equal(res.weights.w[inactive], 1.0)
        assert res.weights.w[res.active].sum() == pytest.approx(20)

    def test_same_seed_same_weights(self):
        src, tgt = two_cluster_features(9, n=20)
        runs = [learn_weights(Discriminator(4, hidden=(16, 16), rng=1), src, tgt, steps=20, rng=2)
                for _ in range(2)]
        np.testing.assert_array_equal(runs[0].weights.w, runs[1].weights.w)

    def test_rejects_empty_input(self):
        with pytest.raises(ValueError):
            train_dual_discriminator(Discriminator(2, hidden=(4,), rng=0), np.zeros((0, 2)),
                                     np.ones((3, 2)), steps=1)


class TestReports:
    def test_class_summary(self):
        rows = class_weight_summary(np.array([0, 0, 1, 2]), np.array([1.0, 3.0, 0.5, 0.0]))
        assert rows == [(0, 2, 2.0), (1, 1, 0.5), (2, 1, 0.0)]

    def test_csv_round_trip(self, tmp_path):
        path = tmp_path / "w.csv"
        w = np.array([0.1, 1.7, 1.2])
        write_weight_report(path, ["a", "b", "c"], [0, 1, 1], [0.3, -0.2, np.nan], w)
        rep = read_weight_report(path)
        assert rep["sample_id"] == ["a", "b", "c"]
        np.testing.assert_array_equal(rep["weight"], w)
        assert np.isnan(rep["discriminator_score"][2])
        assert path.read_text().splitlines()[0] == "sample_id,class_label,discriminator_score,weight"
