import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from c2fnet.bo import (AcquisitionConfig, BOBudget, direct_maximize, gp_fit, gp_posterior,
                       latin_hypercube, optimize_thresholds, se_kernel, ucb_score)
from c2fnet.cascade import NEVER_EXIT, EvalTable, evaluate_objective


def synthetic_table(n=400, T=3, seed=0):
    """Confidences rise with level; coarse levels are wrong more often when unsure."""
    rng = np.random.default_rng(seed)
    truth = rng.integers(0, 10, n)
    conf = np.sort(rng.uniform(0.1, 1.0, (n, T)), axis=1)
    wrong = rng.random((n, T)) > conf * np.linspace(0.8, 1.0, T)
    pred = np.where(wrong, (truth[:, None] + 1) % 10, truth[:, None])
    costs = np.cumsum(np.linspace(1.0, 3.0, T))
    return EvalTable(pred, conf, truth, costs)


class TestGP:
    def test_single_point_interpolation(self):
        m = gp_fit([[0.3]], [2.5], noise_var=1e-10)
        mu, sd = gp_posterior(m, [0.3])
        assert abs(mu - 2.5) <= 1e-8
        assert sd ** 2 < 1e-8

    def test_prior_reversion_far_away(self):
        m = gp_fit([[0.0]], [1.0], lengthscale=0.01, signal_var=2.0, prior_mean=0.5, noise_var=1e-10)
        mu, sd = m.posterior([1.0])
        assert abs(mu - 0.5) <= 1e-6 * 2.0
        assert abs(sd ** 2 - 2.0) <= 1e-6

    def test_two_points_closed_form(self):
        ls, noise = 0.3, 1e-10
        m = gp_fit([[0.0], [1.0]], [0.0, 1.0], lengthscale=ls, signal_var=1.0, prior_mean=0.0,
                   noise_var=noise)
        k01 = math.exp(-1.0 / (2 * 0.09))
        K = np.array([[1 + noise, k01], [k01, 1 + noise]])
        ks = np.array([math.exp(-0.25 / (2 * 0.09))] * 2)
        mean = ks @ np.linalg.solve(K, [0.0, 1.0])
        var = 1.0 - ks @ np.linalg.solve(K, ks)
        mu, sd = m.posterior([0.5])
        assert abs(mu - mean) <= 1e-10
        assert abs(sd ** 2 - var) <= 1e-10

    def test_noisy_point_shrinks_toward_prior(self):
        m = gp_fit([[0.5]], [3.0], signal_var=1.0, prior_mean=1.0, noise_var=0.1)
        mu, _ = m.posterior([0.5])
        assert 1.0 < mu < 3.0

    def test_interpolates_many_points(self):
        rng = np.random.default_rng(0)
        X = rng.random((30, 2))
        y = np.sin(5 * X[:, 0]) + X[:, 1]
        m = gp_fit(X, y, noise_var=1e-10)
        mu, _ = m.posterior(X)
        assert np.abs(mu - y).max() <= 1e-8

    def test_variance_nonnegative_on_probe_grid(self):
        rng = np.random.default_rng(1)
        X = rng.random((25, 1))
        m = gp_fit(X, np.cos(7 * X[:, 0]), noise_var=0.0)
        _, sd = m.posterior(np.linspace(0, 1, 1000)[:, None])
        assert (sd >= 0).all() and np.isfinite(sd).all()

    def test_zero_noise_variance_at_training_points(self):
        X = np.array([[0.1], [0.5], [0.9]])
        m = gp_fit(X, [1.0, -1.0, 0.5], noise_var=0.0)
        _, sd = m.posterior(X)
        assert (sd ** 2 <= 1e-8).all()

    def test_duplicate_inputs_recover_with_jitter(self):
        m = gp_fit([[0.2], [0.2]], [1.0, 1.0], noise_var=0.0)
        assert np.isfinite(m.weights).all()

    def test_constant_observations_use_unit_signal(self):
        m = gp_fit([[0.2], [0.7]], [4.0, 4.0])
        assert m.signal_var == 1.0 and m.prior_mean == 4.0

    def test_refine_picks_best_likelihood(self):
        X = np.linspace(0, 1, 12)[:, None]
        y = np.sin(12 * X[:, 0])
        m = gp_fit(X, y, refine=True)
        others = [gp_fit(X, y, ls) for ls in (0.1, 0.2, 0.4)]
        assert m.log_marginal_likelihood() == max(o.log_marginal_likelihood() for o in others)

    @given(st.integers(0, 1000), st.floats(-0.3, 0.3))
    @settings(max_examples=50, deadline=None)
    def test_kernel_symmetric_and_stationary(self, seed, shift):
        rng = np.random.default_rng(seed)
        a, b = rng.uniform(0.3, 0.7, (2, 1, 2))
        k = se_kernel(a, b, 0.2, 1.5)[0, 0]
        assert k == pytest.approx(se_kernel(b, a, 0.2, 1.5)[0, 0], rel=1e-14)
        assert k == pytest.approx(se_kernel(a + shift, b + shift, 0.2, 1.5)[0, 0], rel=1e-9, abs=1e-300)


class TestUCB:
    @pytest.fixture
    def model(self):
        return gp_fit([[0.1], [0.6]], [0.0, 1.0], noise_var=0.0)

    def test_zero_beta_is_the_mean(self, model):
        for g in (0.0, 0.33, 0.9):
            assert ucb_score(model, [g], AcquisitionConfig(0.0)) == model.posterior([g])[0]

    def test_training_point_score_is_observation(self, model):
        for beta in (0.5, 4.0, 100.0):
            assert ucb_score(model, [0.6], AcquisitionConfig(beta)) == pytest.approx(1.0, abs=1e-6)

    def test_larger_std_scores_higher(self):
        m = gp_fit([[0.5]], [0.0], signal_var=1.0, prior_mean=0.0, noise_var=1e-10)
        # observation equals the prior mean, so the posterior mean is 0 everywhere
        a, b = [0.95], [0.6]
        assert m.posterior(a)[1] > m.posterior(b)[1]
        cfg = AcquisitionConfig(4.0)
        assert ucb_score(m, a, cfg) > ucb_score(m, b, cfg)

    def test_log_growth_schedule(self):
        cfg = AcquisitionConfig(schedule="log_growth")
        assert cfg.beta(0) == pytest.approx(2 * math.log(math.pi ** 2 / 6))
        assert cfg.beta(9) == pytest.approx(2 * math.log(100 * math.pi ** 2 / 6))

    def test_negative_beta_rejected(self):
        with pytest.raises(ValueError):
            AcquisitionConfig(-1.0)


class TestDirect:
    def test_identity_reaches_boundary(self):
        r = direct_maximize(lambda x: float(x[0]), 1, budget=50)
        assert abs(r.x[0] - 1.0) <= 1e-2

    def test_centered_quadratic(self):
        r = direct_maximize(lambda x: -(x[0] - 0.5) ** 2, 1, budget=100)
        assert abs(r.x[0] - 0.5) <= 1e-3

    def test_shifted_quadratic_2d(self):
        r = direct_maximize(lambda x: -(x[0] - 0.2) ** 2 - (x[1] - 0.7) ** 2, 2, budget=200)
        assert abs(r.x[0] - 0.2) <= 2e-2 and abs(r.x[1] - 0.7) <= 2e-2

    @pytest.mark.parametrize("dim,budget", [(1, 37), (2, 200), (3, 150)])
    def test_in_bounds_and_within_budget(self, dim, budget):
        seen = []

        def f(x):
            seen.append(np.array(x))
            return -float(np.sum((np.asarray(x) - 0.31) ** 2))

        r = direct_maximize(f, dim, budget=budget)
        pts = np.array(seen)
        assert len(seen) == r.evaluations <= budget
        assert (pts >= 0).all() and (pts <= 1).all()

    def test_deterministic_sequence(self):
        def run():
            seq = []
            direct_maximize(lambda x: seq.append(tuple(x)) or math.sin(9 * x[0]) * x[1], 2, budget=80)
            return seq

        assert run() == run()


@pytest.fixture(scope="module")
def table():
    return synthetic_table()


class TestOptimizeThresholds:
    def test_lambda_zero_sends_everything_to_level_one(self, table):
        r = optimize_thresholds(table, 0.0, budget=BOBudget(max_iterations=30))
        assert r.objective == table.costs[0] / table.costs[-1]
        assert evaluate_objective(table, r.gamma, 0.0).exit_histogram[0] == len(table)

    def test_lambda_one_never_worse_than_finest(self, table):
        r = optimize_thresholds(table, 1.0, budget=BOBudget(max_iterations=40))
        assert r.objective <= 1.0

    def test_returns_best_of_history(self, table):
        r = optimize_thresholds(table, 0.6, budget=BOBudget(max_iterations=25), seed=3)
        assert r.objective == min(h.objective for h in r.history)
        for h in r.history:
            again = evaluate_objective(table, h.gamma, 0.6)
            assert again.objective == h.objective
            np.testing.assert_array_equal(again.exit_histogram, h.exit_histogram)

    def test_budget_and_init_design(self, table):
        b = BOBudget(init_random_evals=7, max_iterations=20, window=100)
        r = optimize_thresholds(table, 0.5, budget=b)
        assert len(r.history) == 20
        assert [h.source for h in r.history[:7]] == ["init"] * 7

    def test_grid_oracle_eleven_points(self, table):
        grid = np.linspace(0, 1, 11)
        best = min(evaluate_objective(table, [a, b], 0.5).objective for a in grid for b in grid)
        budget = BOBudget(max_iterations=60, window=60)
        hits = sum(optimize_thresholds(table, 0.5, budget=budget, seed=s).objective <= best + 0.01
                   for s in range(10))
        assert hits >= 9

    def test_shared_threshold_matches_dense_grid(self, table):
        grid = np.linspace(0, 1, 101)
        for lam in (0.25, 0.5, 0.75):
            best = min(evaluate_objective(table, [g, g], lam).objective for g in grid)
            r = optimize_thresholds(table, lam, shared=True,
                                    budget=BOBudget(max_iterations=60, window=60))
            assert r.gamma[0] == r.gamma[1]
            assert r.objective <= best + 0.01

    def test_two_level_shared_equals_multi(self):
        t = synthetic_table(T=2)
        a = optimize_thresholds(t, 0.5, shared=True, seed=4)
        b = optimize_thresholds(t, 0.5, shared=False, seed=4)
        np.testing.assert_array_equal(a.gamma, b.gamma)
        assert a.objective == b.objective

    def test_single_level_returns_empty(self):
        t = EvalTable(np.zeros((3, 1), int), np.ones((3, 1)), np.zeros(3, int), np.array([1.0]))
        r = optimize_thresholds(t, 0.5)
        # finest level is always right, so absolute error (0) is used; energy is 1
        assert r.gamma.size == 0 and r.objective == 0.5

    def test_warm_start_is_evaluated(self, table):
        g = np.array([0.8, 0.6])
        r = optimize_thresholds(table, 0.5, budget=BOBudget(max_iterations=10), warm_start=[g])
        warm = [h for h in r.history if h.source == "warm"]
        assert len(warm) == 1
        np.testing.assert_array_equal(warm[0].gamma, g)
        assert r.objective <= evaluate_objective(table, g, 0.5).objective

    def test_never_exit_sentinel_not_proposed(self, table):
        r = optimize_thresholds(table, 0.5, budget=BOBudget(max_iterations=15))
        assert all((h.gamma <= 1.0).all() for h in r.history)
        assert NEVER_EXIT > 1.0

    def test_latin_hypercube_strata(self):
        pts = latin_hypercube(8, 3, np.random.default_rng(0))
        for d in range(3):
            np.testing.assert_array_equal(np.sort(np.floor(pts[:, d] * 8)), np.arange(8))

    def test_budget_validation(self):
        with pytest.raises(ValueError):
            BOBudget(init_random_evals=0)
        with pytest.raises(ValueError):
            BOBudget(init_random_evals=10, max_iterations=5)
