import logging
import math

import numpy as np
import pytest

from dsmrf.diffusion_core import ExactScore, GaussianTarget
from dsmrf.errors import InvalidArgumentError, NumericError
from dsmrf.gaussian_stats import Activation
from dsmrf.sampler import (STATIONARY_T, BackwardRunConfig, FitParams, ScoreTable, default_table_grid,
                           fit_score_table, integrate_backward, memorization_rate)
from dsmrf.seeding import rng_for

RELU = Activation('relu_shifted')


class ZeroScore:

    def evaluate(self, t, x):
        return np.zeros_like(x)


class BlowUpScore:
    """Sends every point with a positive first coordinate to infinity."""

    def evaluate(self, t, x):
        return np.where(x[:1] > 0, 1e8, 0.0) * np.ones_like(x)


class TestBackwardRunConfig:

    @pytest.mark.parametrize('kwargs', [dict(t_stop=0.2), dict(delta=1.0), dict(steps=0),
                                        dict(init='uniform'), dict(block_size=0)])
    def test_rejects(self, kwargs):
        with pytest.raises(InvalidArgumentError):
            BackwardRunConfig(**kwargs)


class TestIntegrateBackward:

    def test_one_step_zero_score(self):
        d, count, seed = 3, 7, 11
        cfg = BackwardRunConfig(t_start=0.1, t_stop=0.05, steps=1, n_traj=count, init='stationary')
        run = integrate_backward(ZeroScore(), cfg, np.ones((d, 2)), np.random.default_rng(seed))

        rng = np.random.default_rng(seed)
        block = rng_for(int(rng.integers(0, 2 ** 63)), 'traj', 0)
        y0 = block.standard_normal((d, count))
        noise = block.standard_normal((d, count))
        dt = 0.1 - 0.05
        np.testing.assert_allclose(run.finals, y0 * (1 + dt) + math.sqrt(2 * dt) * noise, rtol=1e-12)
        assert run.n_diverged == 0

    def test_seeded_runs_repeat(self):
        cfg = BackwardRunConfig(steps=5, n_traj=250, block_size=100)
        X = np.random.default_rng(3).standard_normal((4, 6))
        a = integrate_backward(ZeroScore(), cfg, X, rng_for(5, 0))
        b = integrate_backward(ZeroScore(), cfg, X, rng_for(5, 0))
        np.testing.assert_array_equal(a.finals, b.finals)

    def test_divergence_is_flagged(self):
        cfg = BackwardRunConfig(t_start=0.1, t_stop=0.05, steps=1, n_traj=200, init='stationary')
        X = np.random.default_rng(0).standard_normal((3, 4))
        run = integrate_backward(BlowUpScore(), cfg, X, np.random.default_rng(1))
        assert 0 < run.n_diverged < 200
        report = memorization_rate(run.finals, X, 0.5, diverged=run.diverged)
        assert report.n_valid == 200 - run.n_diverged
        assert report.n_diverged == run.n_diverged

    def test_everything_diverges(self):
        X = np.random.default_rng(0).standard_normal((2, 3))
        with pytest.raises(NumericError):
            memorization_rate(np.zeros((2, 10)), X, 0.5, diverged=np.ones(10, dtype=bool))

    def test_exact_score_recovers_covariance(self):
        d = 3
        target = GaussianTarget(d, d)
        cfg = BackwardRunConfig(t_start=STATIONARY_T, t_stop=1e-3, steps=500, n_traj=2000,
                                init='stationary')
        run = integrate_backward(ExactScore(target), cfg, target.sample(5, rng_for(0, 1)), rng_for(0, 2))
        np.testing.assert_allclose(np.cov(run.finals), np.eye(d), atol=0.15)

    def test_uncovered_table_warns(self, caplog):
        X = np.random.default_rng(0).standard_normal((2, 4))
        table = fit_score_table(X, [0.01], FitParams(p=8, act=RELU, lam=1e-2, m=1), rng_for(0))
        cfg = BackwardRunConfig(t_start=0.1, t_stop=1e-3, steps=2, n_traj=3)
        with caplog.at_level(logging.WARNING, logger='dsmrf.sampler'):
            integrate_backward(table, cfg, X, rng_for(1))
        assert 'does not cover' in caplog.text


class TestScoreTable:

    def test_default_grid(self):
        grid = default_table_grid(1e-5, 0.1)
        assert grid.size == 40
        assert grid[0] == pytest.approx(0.1)
        assert grid[-1] == pytest.approx(1e-5)
        np.testing.assert_array_equal(default_table_grid(1e-5, 0.1, 1), [0.1])

    def test_nearest_on_log_scale(self):
        table = ScoreTable(grid=[1.0, 0.1, 0.01], models=[None] * 3)
        assert table.nearest(0.3) == 1
        assert table.nearest(0.5) == 0
        assert table.nearest(1e-6) == 2

    def test_rejects_bad_grid(self):
        with pytest.raises(InvalidArgumentError):
            ScoreTable(grid=[0.01, 0.1], models=[None, None])
        with pytest.raises(InvalidArgumentError):
            ScoreTable(grid=[0.1, 0.01], models=[None])

    def test_fit_is_deterministic(self):
        X = np.random.default_rng(0).standard_normal((3, 5))
        params = FitParams(p=12, act=RELU, lam=1e-2, m=2)
        grid = default_table_grid(1e-3, 0.1, 4)
        a = fit_score_table(X, grid, params, rng_for(9))
        b = fit_score_table(X, grid, params, rng_for(9))
        for ma, mb in zip(a.models, b.models):
            np.testing.assert_array_equal(ma.A, mb.A)

    def test_single_point_table(self):
        X = np.random.default_rng(0).standard_normal((3, 5))
        table = fit_score_table(X, default_table_grid(1e-3, 0.1, 1), FitParams(p=6, act=RELU, lam=1e-2, m=1),
                                rng_for(0))
        x = np.ones((3, 2))
        np.testing.assert_array_equal(table.evaluate(1e-4, x), table.models[0].score(x))


class TestMemorizationRate:

    def test_training_points_are_memorized(self, rng):
        X = rng.standard_normal((5, 8))
        assert memorization_rate(X, X, 1 / 3).rate == 1.0

    def test_midpoint_is_not_memorized(self):
        X = np.array([[0.0, 2.0]])
        report = memorization_rate(np.array([[1.0]]), X, 0.99)
        assert report.rate == 0.0
        assert report.std_error == 0.0

    def test_monotone_in_delta(self, rng):
        X = rng.standard_normal((4, 10))
        finals = rng.standard_normal((4, 300))
        rates = [memorization_rate(finals, X, delta).rate for delta in (0.1, 0.3, 0.5, 0.9)]
        assert rates == sorted(rates)

    def test_invariances(self, rng):
        X = rng.standard_normal((4, 10))
        finals = X[:, rng.integers(0, 10, 200)] + 0.3 * rng.standard_normal((4, 200))
        base = memorization_rate(finals, X, 1 / 3)
        Q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
        rotated = memorization_rate(Q @ finals, Q @ X, 1 / 3)
        shuffled = memorization_rate(finals, X[:, rng.permutation(10)], 1 / 3)
        np.testing.assert_array_equal(rotated.retrieved, base.retrieved)
        assert shuffled.rate == base.rate

    def test_argument_checks(self, rng):
        with pytest.raises(InvalidArgumentError):
            memorization_rate(np.zeros((2, 3)), np.zeros((2, 1)), 0.5)
        with pytest.raises(InvalidArgumentError):
            memorization_rate(np.zeros((3, 3)), np.ones((2, 4)), 0.5)
        with pytest.raises(InvalidArgumentError):
            memorization_rate(np.zeros((2, 3)), np.ones((2, 4)), 0.0)


@pytest.mark.slow
class TestMemorizationRegimes:
    """Retrieval at d = 100, psi_p = 10, neighbourhood start at t = 0.1."""

    def run_cell(self, psi_n, m, seed=0, steps=200, lam=1e-3):
        d = 100
        X = GaussianTarget(d, d).sample(round(psi_n * d), rng_for(seed, 'data'))
        cfg = BackwardRunConfig(n_traj=1000, steps=steps)
        table = fit_score_table(X, default_table_grid(cfg.t_stop, cfg.t_start),
                                FitParams(p=10 * d, act=RELU, lam=lam, m=m), rng_for(seed, 'fit'))
        run = integrate_backward(table, cfg, X, rng_for(seed, 'traj'))
        return memorization_rate(run.finals, X, cfg.delta, run.diverged)

    def test_phase_behaviour(self):
        small = self.run_cell(psi_n=3, m=50)
        large = self.run_cell(psi_n=15, m=50)
        single = self.run_cell(psi_n=3, m=1)
        assert small.rate > 0.5
        assert large.rate < 0.02
        err = math.hypot(small.std_error, single.std_error)
        assert single.rate < small.rate - 2 * err

    def test_step_refinement(self):
        coarse = self.run_cell(psi_n=3, m=50)
        fine = self.run_cell(psi_n=3, m=50, steps=400)
        err = math.hypot(coarse.std_error, fine.std_error)
        assert abs(coarse.rate - fine.rate) < 0.02 + 2 * err

    def test_exact_score_does_not_memorize(self):
        d = 100
        target = GaussianTarget(d, d)
        X = target.sample(300, rng_for(0, 'data'))
        cfg = BackwardRunConfig(t_start=STATIONARY_T, n_traj=1000, init='stationary')
        run = integrate_backward(ExactScore(target), cfg, X, rng_for(0, 'traj'))
        assert memorization_rate(run.finals, X, cfg.delta, run.diverged).rate < 0.02

    def test_heavy_ridge_does_not_memorize(self):
        report = self.run_cell(psi_n=3, m=50, lam=1e8)
        assert report.rate < 0.01
