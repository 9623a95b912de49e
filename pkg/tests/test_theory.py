import math

import numpy as np
import pytest

from dsmrf import theory
from dsmrf.errors import InvalidArgumentError, SingularCovarianceError, SolverFailure
from dsmrf.gaussian_stats import Activation
from dsmrf.theory import (LearningCurvePoint, SystemParams, errors_m1, errors_minf, kl_bound,
                          solve_system_m1, solve_system_minf, sweep)

RELU = Activation('relu_shifted')
SOLVERS = {'minf': solve_system_minf, 'm1': solve_system_m1}
ERRORS = {'minf': errors_minf, 'm1': errors_m1}


def random_params(rng, count, psi_D):
    draws = []
    for _ in range(count):
        t = math.exp(rng.uniform(math.log(0.05), math.log(2.0)))
        psi_n, psi_p = rng.uniform(0.5, 20.0, size=2)
        lam = 10.0 ** rng.uniform(-2.0, 0.0)
        draws.append(SystemParams.build(RELU, t, psi_n, psi_p, psi_D, lam))
    return draws


class TestSystemParams:

    def test_rejects_t0(self):
        with pytest.raises(SingularCovarianceError):
            SystemParams.build(RELU, 0.0, 1.0, 1.0)

    @pytest.mark.parametrize('kwargs', [dict(psi_n=0.0), dict(psi_p=-1.0), dict(lam=0.0), dict(psi_D=1.5)])
    def test_rejects_bad_ratios(self, kwargs):
        args = dict(t=0.1, psi_n=2.0, psi_p=2.0, psi_D=1.0, lam=1e-3)
        args.update(kwargs)
        with pytest.raises(InvalidArgumentError):
            SystemParams.build(RELU, **args)


class TestFixedPoint:
    """Residuals and implicit derivatives of the subspace systems."""

    @pytest.mark.parametrize('regime', ['minf', 'm1'])
    @pytest.mark.parametrize('psi_D', [0.2, 1.0])
    def test_derivatives_match_finite_differences(self, regime, psi_D):
        rng = np.random.default_rng(42)
        solve = SOLVERS[regime]
        for p in random_params(rng, 12, psi_D):
            z = -p.lam
            sol = solve(p, 0.0, z)
            assert sol.residual_norm < 1e-11
            assert sol.zeta[0] > 0

            eq = 1e-5
            plus, minus = solve(p, eq, z, warm=sol), solve(p, -eq, z, warm=sol)
            ez = 1e-4 * abs(z)
            up, down = solve(p, 0.0, z + ez, warm=sol), solve(p, 0.0, z - ez, warm=sol)
            for part in ('par', 'perp'):
                k = f'K_{part}'
                fd_q = (getattr(plus, k) - getattr(minus, k)) / (2 * eq)
                fd_z = (getattr(up, k) - getattr(down, k)) / (2 * ez)
                assert getattr(sol, f'dK_dq_{part}') == pytest.approx(fd_q, rel=1e-5, abs=1e-7)
                assert getattr(sol, f'dK_dz_{part}') == pytest.approx(fd_z, rel=1e-5, abs=1e-7)

    def test_perp_vanishes_on_full_rank_data(self):
        p = SystemParams.build(RELU, 0.1, 4.0, 8.0, 1.0, 1e-2)
        for regime in ('minf', 'm1'):
            sol = SOLVERS[regime](p, 0.0, -p.lam)
            assert sol.K_perp == 0.0
            assert sol.dK_dz_perp == 0.0

    def test_deep_resolvent(self):
        p = SystemParams.build(RELU, 0.5, 4.0, 8.0, 0.2, 1e6)
        sol = solve_system_minf(p, 0.0, -1e6)
        assert sol.zeta[0] == pytest.approx(1.0 / (p.coeffs.s2 + 1e6), rel=1e-3)
        assert abs(sol.K_par) < 1e-4
        assert abs(sol.K_perp) < 1e-4

    def test_m1_deep_resolvent(self):
        p = SystemParams.build(RELU, 0.5, 4.0, 8.0, 0.2, 1e6)
        sol = solve_system_m1(p, 0.0, -1e6)
        assert abs(sol.e1_par) < 1e-4
        assert abs(sol.e1_perp) < 1e-4

    def test_rejects_nonnegative_z(self):
        p = SystemParams.build(RELU, 0.5, 4.0, 8.0)
        with pytest.raises(InvalidArgumentError):
            solve_system_minf(p, 0.0, 0.0)

    def test_isotropic_needs_full_rank(self):
        p = SystemParams.build(RELU, 0.5, 4.0, 8.0, 0.5)
        with pytest.raises(InvalidArgumentError):
            errors_minf(p, system='isotropic')


class TestReduction:
    """psi_D = 1: the subspace systems reproduce the four-equation systems."""

    @pytest.mark.parametrize('regime', ['minf', 'm1'])
    def test_same_errors(self, regime):
        rng = np.random.default_rng(7)
        evaluate = ERRORS[regime]
        for p in random_params(rng, 20, 1.0):
            full = evaluate(p)
            small = evaluate(p, system='isotropic')
            assert full.eps_test_total == pytest.approx(small.eps_test_total, abs=1e-9)
            assert full.eps_train == pytest.approx(small.eps_train, abs=1e-9)
            assert full.eps_test_perp == 0.0


class TestLimits:

    @pytest.mark.parametrize('psi_n,psi_p', [(2.0, 8.0), (20.0, 16.0), (5.0, 0.5)])
    def test_stationary_test_equals_train(self, psi_n, psi_p):
        p = SystemParams.build(RELU, math.inf, psi_n, psi_p, 1.0, 1e-3)
        point = errors_minf(p)
        assert abs(point.eps_test_total - point.eps_train) < 1e-8

    @pytest.mark.parametrize('regime', ['minf', 'm1'])
    @pytest.mark.parametrize('psi_D', [0.2, 1.0])
    @pytest.mark.parametrize('t', [0.05, 1.0])
    def test_large_ridge(self, regime, psi_D, t):
        p = SystemParams.build(RELU, t, 4.0, 8.0, psi_D, 1e8)
        point = ERRORS[regime](p)
        expected = psi_D + (1 - psi_D) / p.sched.h
        assert point.eps_test_total == pytest.approx(expected, abs=1e-6)
        assert point.eps_train == pytest.approx(1.0, abs=1e-6)


class TestShape:

    def test_minf_test_error_rises_past_interpolation(self):
        low = errors_minf(SystemParams.build(RELU, 0.01, 20.0, 5.0, 1.0, 1e-3))
        high = errors_minf(SystemParams.build(RELU, 0.01, 20.0, 80.0, 1.0, 1e-3))
        assert high.eps_test_total / low.eps_test_total > 5

    def test_m1_double_descent_peak(self):
        grid = np.geomspace(1.0, 1000.0, 60)
        points = sweep(RELU, [0.01], grid, [64.0], [1e-3], regimes=('m1',))
        assert all(p.ok for p in points)
        peak = grid[int(np.argmax([p.eps_test_total for p in points]))]
        assert peak == grid[int(np.argmin(np.abs(np.log(grid / 64.0))))]


class TestSweep:

    def test_singleton_matches_direct_call(self):
        (point,) = sweep(RELU, [0.2], [8.0], [4.0], [1e-2], regimes=('minf',))
        direct = errors_minf(SystemParams.build(RELU, 0.2, 4.0, 8.0, 1.0, 1e-2))
        assert point.eps_test_total == direct.eps_test_total
        assert point.eps_train == direct.eps_train

    def test_ordering(self):
        points = sweep(RELU, [0.1, 1.0], [2.0, 8.0], [4.0], [1e-2])
        keys = [(p.regime, p.psi_p, p.t) for p in points]
        assert keys == [(r, pp, t) for r in ('minf', 'm1') for pp in (2.0, 8.0) for t in (0.1, 1.0)]

    def test_reversed_grid(self):
        ts = list(np.geomspace(0.01, 3.0, 12))
        forward = sweep(RELU, ts, [16.0], [20.0], [1e-3], psi_D=0.5)
        backward = sweep(RELU, ts[::-1], [16.0], [20.0], [1e-3], psi_D=0.5)
        back = {(p.regime, p.t): p for p in backward}
        for p in forward:
            q = back[(p.regime, p.t)]
            assert p.eps_test_total == pytest.approx(q.eps_test_total, abs=1e-9)
            assert p.eps_train == pytest.approx(q.eps_train, abs=1e-9)

    def test_worker_count_does_not_change_output(self):
        args = (RELU, [0.05, 0.5], [2.0, 16.0], [4.0], [1e-2])
        serial = sweep(*args, workers=1)
        parallel = sweep(*args, workers=2)
        assert [(p.eps_test_total, p.eps_train) for p in serial] == \
               [(p.eps_test_total, p.eps_train) for p in parallel]

    def test_progress_callback(self):
        seen = []
        sweep(RELU, [0.1, 0.2, 0.4], [2.0], [4.0], [1e-2], progress=seen.append)
        assert seen == [3, 3]

    def test_failures_are_recorded(self, monkeypatch):
        def boom(p, warm=None):
            raise SolverFailure('no root', {'lambda': 1e-3})

        monkeypatch.setitem(theory._EVALUATORS, 'minf', boom)
        points = sweep(RELU, [0.1, 0.2], [2.0], [4.0], [1e-2], regimes=('minf',))
        assert [p.status for p in points] == ['solver_failure'] * 2
        assert all(math.isnan(p.eps_test_total) for p in points)
        assert 'no root' in points[0].message

    @pytest.mark.parametrize('grid', [[], [0.1, 0.3, 0.2]])
    def test_rejects_bad_t_grid(self, grid):
        with pytest.raises(InvalidArgumentError):
            sweep(RELU, grid, [2.0], [4.0], [1e-2])

    def test_rejects_unknown_regime(self):
        with pytest.raises(InvalidArgumentError):
            sweep(RELU, [0.1], [2.0], [4.0], [1e-2], regimes=('m2',))


def constant_curve(ts, value):
    return [LearningCurvePoint(t=t, psi_n=1.0, psi_p=1.0, psi_D=1.0, regime='minf', lam=1e-3,
                               eps_test_par=value, eps_test_perp=0.0, eps_train=value) for t in ts]


class TestKlBound:

    def test_rectangle(self):
        assert kl_bound(constant_curve(np.linspace(0.1, 1.1, 7), 0.3), d=100) == pytest.approx(15.0)

    def test_single_point(self):
        with pytest.raises(InvalidArgumentError):
            kl_bound(constant_curve([0.5], 1.0), d=10)

    def test_unsorted(self):
        with pytest.raises(InvalidArgumentError):
            kl_bound(constant_curve([0.5, 0.2, 0.9], 1.0), d=10)

    def test_refinement(self):
        coarse = sweep(RELU, np.geomspace(0.01, 2.0, 21), [8.0], [4.0], [1e-3], regimes=('minf',))
        fine = sweep(RELU, np.geomspace(0.01, 2.0, 41), [8.0], [4.0], [1e-3], regimes=('minf',))
        assert kl_bound(coarse, 100) == pytest.approx(kl_bound(fine, 100), rel=0.01)
