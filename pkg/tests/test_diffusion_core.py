import math

import numpy as np
import pytest
from scipy.special import softmax

from dsmrf.diffusion_core import (EmpiricalScore, ExactScore, GaussianTarget, empirical_score,
                                  exact_score, sample_forward, schedule_at)
from dsmrf.errors import InvalidArgumentError, SingularCovarianceError


class TestSchedule:

    def test_origin(self):
        s = schedule_at(0.0)
        assert s.a == 1.0
        assert s.h == 0.0

    def test_ln2(self):
        s = schedule_at(math.log(2.0))
        assert s.a == pytest.approx(0.5, abs=1e-15)
        assert s.h == pytest.approx(0.75, abs=1e-15)

    def test_stationary(self):
        s = schedule_at(math.inf)
        assert (s.a, s.h) == (0.0, 1.0)
        assert s.is_stationary

    def test_small_t_keeps_precision(self):
        s = schedule_at(1e-12)
        assert s.h == pytest.approx(2e-12, rel=1e-10)

    @pytest.mark.parametrize('t', np.geomspace(1e-6, 30, 17))
    def test_a2_plus_h_is_one(self, t):
        s = schedule_at(t)
        assert s.a ** 2 + s.h == pytest.approx(1.0, abs=1e-15)

    @pytest.mark.parametrize('t', [-1e-3, float('nan'), -math.inf])
    def test_rejects_bad_time(self, t):
        with pytest.raises(InvalidArgumentError):
            schedule_at(t)


class TestGaussianTarget:

    def test_rejects_bad_dimensions(self):
        with pytest.raises(InvalidArgumentError):
            GaussianTarget(d=4, D=0)
        with pytest.raises(InvalidArgumentError):
            GaussianTarget(d=4, D=5)

    def test_samples_live_on_subspace(self, rng):
        X = GaussianTarget(d=6, D=2).sample(50, rng)
        assert X.shape == (6, 50)
        assert np.all(X[2:] == 0.0)

    def test_marginal_covariance(self, rng):
        target = GaussianTarget(d=4, D=2)
        sched = schedule_at(0.3)
        x = target.sample_marginal(sched, 200_000, rng)
        expected = np.array([1.0, 1.0, sched.h, sched.h])
        np.testing.assert_allclose(np.var(x, axis=1), expected, rtol=0.02)

    def test_mean_trace_inverse(self):
        target = GaussianTarget(d=10, D=2)
        sched = schedule_at(math.log(2.0))
        assert target.mean_trace_inverse(sched) == pytest.approx(0.2 + 0.8 / 0.75)


class TestExactScore:

    def test_full_rank_is_minus_x(self, rng):
        target = GaussianTarget(d=5, D=5)
        x = rng.standard_normal(5)
        for t in (0.0, 0.1, 3.0, math.inf):
            np.testing.assert_array_equal(exact_score(target, schedule_at(t), x), -x)

    def test_diagonal_inverse(self):
        target = GaussianTarget(d=2, D=1)
        sched = schedule_at(-0.5 * math.log(0.5))  # h = 0.5
        np.testing.assert_allclose(exact_score(target, sched, np.array([2.0, 2.0])), [-2.0, -4.0])

    def test_origin(self):
        target = GaussianTarget(d=3, D=1)
        np.testing.assert_array_equal(exact_score(target, schedule_at(0.2), np.zeros(3)), 0.0)

    def test_singular_at_t0(self):
        with pytest.raises(SingularCovarianceError):
            exact_score(GaussianTarget(d=2, D=1), schedule_at(0.0), np.ones(2))

    def test_batch_matches_columns(self, rng):
        target = GaussianTarget(d=4, D=2)
        sched = schedule_at(0.7)
        x = rng.standard_normal((4, 3))
        batch = exact_score(target, sched, x)
        for j in range(3):
            np.testing.assert_array_equal(batch[:, j], exact_score(target, sched, x[:, j]))

    def test_score_field_wrapper(self, rng):
        target = GaussianTarget(d=4, D=2)
        x = rng.standard_normal((4, 7))
        np.testing.assert_array_equal(ExactScore(target).evaluate(0.5, x),
                                      exact_score(target, schedule_at(0.5), x))


class TestEmpiricalScore:

    def test_symmetric_pair(self):
        X = np.array([[1.0, -1.0]])
        for t in (0.01, 0.5, 4.0):
            assert empirical_score(schedule_at(t), X, np.zeros(1))[0] == pytest.approx(0.0, abs=1e-15)

    def test_vanishes_at_isolated_center(self):
        X = np.array([[0.0, 10.0, -10.0], [0.0, 3.0, 7.0]])
        sched = schedule_at(1e-3)
        s = empirical_score(sched, X, sched.a * X[:, 1])
        np.testing.assert_allclose(s, 0.0, atol=1e-12)

    def test_single_sample_is_gaussian_score(self, rng):
        X = rng.standard_normal((3, 1))
        sched = schedule_at(0.4)
        x = rng.standard_normal(3)
        np.testing.assert_allclose(empirical_score(sched, X, x), -(x - sched.a * X[:, 0]) / sched.h)

    @pytest.mark.parametrize('t', [1e-5, 5e-11])
    def test_no_underflow_far_away(self, rng, t):
        X = rng.standard_normal((5, 20))
        sched = schedule_at(t)
        s = empirical_score(sched, X, np.full(5, 1e3 / math.sqrt(5)))
        assert np.all(np.isfinite(s))

    def test_column_order_does_not_matter(self, rng):
        X = rng.standard_normal((4, 30))
        x = rng.standard_normal((4, 6))
        sched = schedule_at(0.2)
        np.testing.assert_allclose(empirical_score(sched, X[:, rng.permutation(30)], x),
                                   empirical_score(sched, X, x), rtol=0, atol=1e-12)

    @pytest.mark.slow
    def test_matches_exact_score_for_many_samples(self, rng):
        target = GaussianTarget(d=1, D=1)
        X = target.sample(100_000, rng)
        sched = schedule_at(0.5)
        x = np.linspace(-2.0, 2.0, 20)[None, :]

        # self-normalised standard error of the responsibility-weighted mean
        logits = -(x[0][:, None] - sched.a * X[0][None, :]) ** 2 / (2.0 * sched.h)
        resp = softmax(logits, axis=1)
        mean = resp @ X[0]
        spread = np.sqrt(np.sum(resp ** 2 * (X[0][None, :] - mean[:, None]) ** 2, axis=1))
        sigma = sched.a / sched.h * spread

        gap = np.abs(empirical_score(sched, X, x) - exact_score(target, sched, x))[0]
        assert np.all(gap < 5 * sigma)

    def test_errors(self):
        with pytest.raises(SingularCovarianceError):
            empirical_score(schedule_at(0.0), np.ones((2, 3)), np.zeros(2))
        with pytest.raises(InvalidArgumentError):
            empirical_score(schedule_at(0.1), np.empty((2, 0)), np.zeros(2))

    def test_score_field_wrapper(self, rng):
        X = rng.standard_normal((3, 4))
        x = rng.standard_normal((3, 2))
        np.testing.assert_array_equal(EmpiricalScore(X).evaluate(0.3, x),
                                      empirical_score(schedule_at(0.3), X, x))


class TestSampleForward:

    def test_t0_returns_input(self, rng):
        target = GaussianTarget(d=3, D=3)
        x0 = rng.standard_normal(3)
        y, z = sample_forward(target, schedule_at(0.0), x0, rng)
        np.testing.assert_array_equal(y, x0)
        assert z.shape == (3,)

    def test_stationary_returns_noise(self, rng):
        target = GaussianTarget(d=3, D=3)
        y, z = sample_forward(target, schedule_at(math.inf), rng.standard_normal(3), rng)
        np.testing.assert_array_equal(y, z)

    def test_mean(self, rng):
        target = GaussianTarget(d=2, D=2)
        sched = schedule_at(0.5)
        x0 = np.array([1.5, -2.0])
        n = 100_000
        y, _ = sample_forward(target, sched, np.repeat(x0[:, None], n, axis=1), rng)
        err = math.sqrt(sched.h / n)
        assert np.all(np.abs(y.mean(axis=1) - sched.a * x0) < 4 * err)
