"""
Asymptotic learning curves of the random-features DSM estimator.

The errors are assembled from a trace functional K(q, z) that solves a small
algebraic fixed-point system in zeta (5 unknowns for m=inf, 6 for m=1).
Systems are solved by damped Newton with analytic Jacobians, reached by
continuation in the ridge strength from large lambda, where the physical
root is the contractive fixed point. dK/dq and dK/dz come from implicit
differentiation at the converged root.

Variables that carry a 1/(a mu) factor are solved in rescaled form
(xi = zeta / (a mu)) so that the stationary schedule a = 0 is exact.
"""
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.integrate import trapezoid
from scipy.linalg import LinAlgError, lu_factor, lu_solve, solve

from dsmrf.diffusion_core import schedule_at
from dsmrf.errors import (DsmrfError, InvalidArgumentError, NumericError,
                          SingularCovarianceError, SolverFailure)
from dsmrf.gaussian_stats import DEFAULT_NODES, DEFAULT_ORDER, theory_coefficients

logger = logging.getLogger(__name__)

REGIMES = ('minf', 'm1')

NEWTON_TOL = 1e-12
ACCEPT_TOL = 1e-11
MAX_NEWTON_ITER = 200
MAX_HALVINGS = 30
LAMBDA0 = 1e3
FIXED_POINT_SWEEPS = 500
INITIAL_LOG_STEP = math.log(10.0) / 4
MAX_LOG_STEP = math.log(10.0) / 2
MIN_LOG_STEP = 1e-4


@dataclass(frozen=True)
class SystemParams:
    psi_n: float
    psi_p: float
    psi_D: float
    lam: float
    coeffs: object
    sched: object

    def __post_init__(self):
        if not (self.psi_n > 0 and self.psi_p > 0):
            raise InvalidArgumentError(f'psi_n and psi_p must be positive, got {self.psi_n}, {self.psi_p}')
        if not 0 < self.psi_D <= 1:
            raise InvalidArgumentError(f'psi_D must lie in (0, 1], got {self.psi_D}')
        if not self.lam > 0:
            raise InvalidArgumentError(f'lambda must be positive, got {self.lam}')
        if self.sched.h <= 0:
            raise SingularCovarianceError('theory needs t > 0 (h_t = 0 at t = 0)')
        c = self.coeffs
        if not all(math.isfinite(v) for v in (c.mu1t, c.v2, c.v02, c.s2)):
            raise NumericError(f'non-finite coefficients at t={self.sched.t}')
        if c.mu1t <= 0:
            raise InvalidArgumentError('the activation has mu1 = 0; the K-functionals are undefined')

    @classmethod
    def build(cls, act, t, psi_n, psi_p, psi_D=1.0, lam=1e-3,
              order=DEFAULT_ORDER, nodes=DEFAULT_NODES):
        sched = schedule_at(t)
        coeffs = theory_coefficients(act, sched, psi_D, order, nodes)
        return cls(psi_n=float(psi_n), psi_p=float(psi_p), psi_D=float(psi_D), lam=float(lam),
                   coeffs=coeffs, sched=sched)


@dataclass
class FixedPointSolution:
    system: str
    zeta: np.ndarray
    q: float
    z: float
    residual_norm: float
    K_par: float
    K_perp: float
    dK_dq_par: float
    dK_dq_perp: float
    dK_dz_par: float
    dK_dz_perp: float
    e1_par: Optional[float] = None
    e1_perp: Optional[float] = None
    # unknowns as solved (rescaled), used for warm starts
    state: np.ndarray = field(default=None, repr=False)


@dataclass
class LearningCurvePoint:
    t: float
    psi_n: float
    psi_p: float
    psi_D: float
    regime: str
    lam: float
    eps_test_par: float
    eps_test_perp: float
    eps_train: float
    residual: float = float('nan')
    status: str = 'ok'
    message: str = ''

    @property
    def eps_test_total(self):
        return self.eps_test_par + self.eps_test_perp

    @property
    def ok(self):
        return self.status == 'ok'

    @classmethod
    def failed(cls, regime, t, psi_n, psi_p, psi_D, lam, status, message):
        nan = float('nan')
        return cls(t=t, psi_n=psi_n, psi_p=psi_p, psi_D=psi_D, regime=regime, lam=lam,
                   eps_test_par=nan, eps_test_perp=nan, eps_train=nan,
                   status=status, message=message)


class _System:
    """Residuals, Jacobian and K-functionals of one fixed-point system."""
    name = ''

    def __init__(self, params):
        c = params.coeffs
        self.P = params.psi_p
        self.N = params.psi_n
        self.D = params.psi_D
        self.a = params.sched.a
        self.h = params.sched.h
        self.r = math.sqrt(self.h)
        self.mu = c.mu1t
        self.mu2 = c.mu1t ** 2
        self.g = (self.a * c.mu1t) ** 2
        self.v2 = c.v2
        self.v02 = c.v02
        self.s2 = c.s2

    def start(self, z):
        raise NotImplementedError

    def sweep(self, x, q, z):
        raise NotImplementedError

    def residuals(self, x, q, z):
        raise NotImplementedError

    def jacobian(self, x, q, z):
        raise NotImplementedError

    def partials(self, x, q, z):
        """(dR/dq, dR/dz) at fixed zeta."""
        raise NotImplementedError

    def kernels(self, x, q):
        """K_par, K_perp, their zeta-gradients and explicit q-derivatives."""
        raise NotImplementedError

    def e1(self, x):
        return None, None

    def report(self, x):
        return x.copy()


class SubspaceMinf(_System):
    """m = inf; unknowns (zeta1, zeta2, zeta3, zeta4, xi) with zeta5 = a mu xi."""
    name = 'subspace_minf'

    def start(self, z):
        return np.array([1.0 / (self.s2 - z), 0.0, 0.0, 0.0, 0.0])

    def sweep(self, x, q, z):
        z1, z2, z3, z4, xi = x
        P, N, D, g = self.P, self.N, self.D, self.g
        c = self.h * self.mu2 + q
        cp = self.h * (self.mu2 + q)
        z2 = 1.0 / (1.0 + P * cp * z1)
        den = 1.0 + P * c * z1 + P * g * z1 * z4
        z3 = 1.0 / den
        xi = -P * z1 / den
        z4 = 1.0 / (1.0 + (P / N) * self.v02 * z1 - (D / N) * g * xi)
        z1 = 1.0 / (self.s2 - z + (1 - D) * cp * z2 + D * c * z3 + D * g * z3 * z4 + self.v02 * z4)
        return np.array([z1, z2, z3, z4, xi])

    def residuals(self, x, q, z):
        z1, z2, z3, z4, xi = x
        P, N, D, g, v02 = self.P, self.N, self.D, self.g, self.v02
        c = self.h * self.mu2 + q
        cp = self.h * (self.mu2 + q)
        return np.array([
            z1 * (self.s2 - z + (1 - D) * cp * z2 + D * c * z3 + D * g * z3 * z4 + v02 * z4) - 1.0,
            z2 * (1.0 + P * cp * z1) - 1.0,
            z3 * (1.0 + P * c * z1) + P * g * z1 * z3 * z4 - 1.0,
            xi * (1.0 + P * c * z1) + P * z1 * (1.0 + g * z4 * xi),
            z4 * (1.0 + (P / N) * v02 * z1 - (D / N) * g * xi) - 1.0,
        ])

    def jacobian(self, x, q, z):
        z1, z2, z3, z4, xi = x
        P, N, D, g, v02 = self.P, self.N, self.D, self.g, self.v02
        c = self.h * self.mu2 + q
        cp = self.h * (self.mu2 + q)
        b1 = self.s2 - z + (1 - D) * cp * z2 + D * c * z3 + D * g * z3 * z4 + v02 * z4
        return np.array([
            [b1, z1 * (1 - D) * cp, z1 * D * (c + g * z4), z1 * (D * g * z3 + v02), 0.0],
            [z2 * P * cp, 1.0 + P * cp * z1, 0.0, 0.0, 0.0],
            [z3 * P * c + P * g * z3 * z4, 0.0, 1.0 + P * c * z1 + P * g * z1 * z4, P * g * z1 * z3, 0.0],
            [xi * P * c + P * (1.0 + g * z4 * xi), 0.0, 0.0, P * z1 * g * xi, 1.0 + P * c * z1 + P * g * z1 * z4],
            [z4 * (P / N) * v02, 0.0, 0.0, 1.0 + (P / N) * v02 * z1 - (D / N) * g * xi, -z4 * (D / N) * g],
        ])

    def partials(self, x, q, z):
        z1, z2, z3, z4, xi = x
        P, D, h = self.P, self.D, self.h
        dq = np.array([z1 * ((1 - D) * h * z2 + D * z3), z2 * P * h * z1, z3 * P * z1, xi * P * z1, 0.0])
        dz = np.array([-z1, 0.0, 0.0, 0.0, 0.0])
        return dq, dz

    def kernels(self, x, q):
        z1, z2, z3, z4, xi = x
        P, D = self.P, self.D
        # (1 - zeta2) / (h (mu^2 + q)) = psi_p zeta1 zeta2 on the solution manifold
        k_par = -D * xi
        k_perp = (1 - D) * P * z1 * z2
        grad_par = np.array([0.0, 0.0, 0.0, 0.0, -D])
        grad_perp = np.array([(1 - D) * P * z2, (1 - D) * P * z1, 0.0, 0.0, 0.0])
        return k_par, k_perp, grad_par, grad_perp, 0.0, 0.0

    def report(self, x):
        out = x.copy()
        out[4] = self.a * self.mu * x[4]
        return out


class SubspaceM1(_System):
    """m = 1; unknowns (zeta1, xi, zeta3, zeta4, zeta5, zeta6) with zeta2 = a mu xi."""
    name = 'subspace_m1'

    def start(self, z):
        return np.array([-1.0 / z, 0.0, 0.0, 1.0, 0.0, 0.0])

    def sweep(self, x, q, z):
        z1, xi, z3, z4, z5, z6 = x
        P, N, D, h, mu, mu2 = self.P, self.N, self.D, self.h, self.mu, self.mu2
        den = 1.0 + q * P * z1 + mu2 * P * z1 * z4
        xi = -P * z1 / den
        z3 = 1.0 / den
        denh = 1.0 + q * h * P * z1 + mu2 * P * h * z1 * z4
        z5 = -mu * P * self.r * z1 / denh
        z6 = 1.0 / denh
        z4 = N / (N + P * self.v2 * z1 - (1 - D) * mu * self.r * z5 - D * mu2 * xi)
        qp = q + mu2 * z4
        z1 = 1.0 / (-z + (1 - D) * qp * h * z6 + D * qp * z3 + self.v2 * z4)
        return np.array([z1, xi, z3, z4, z5, z6])

    def residuals(self, x, q, z):
        z1, xi, z3, z4, z5, z6 = x
        P, N, D, h, r, mu, mu2, v2 = self.P, self.N, self.D, self.h, self.r, self.mu, self.mu2, self.v2
        qp = q + mu2 * z4
        return np.array([
            z1 * (-z + (1 - D) * qp * h * z6 + D * qp * z3 + v2 * z4) - 1.0,
            xi * (1.0 + q * P * z1) + mu2 * P * z1 * xi * z4 + P * z1,
            z5 * (1.0 + q * h * P * z1) + mu * P * r * z1 * (1.0 + mu * r * z4 * z5),
            z3 * (1.0 + q * P * z1) + mu2 * P * z1 * z3 * z4 - 1.0,
            z4 * (N + P * v2 * z1 - (1 - D) * mu * r * z5 - D * mu2 * xi) - N,
            z6 * (1.0 + q * h * P * z1) + mu2 * P * h * z1 * z6 * z4 - 1.0,
        ])

    def jacobian(self, x, q, z):
        z1, xi, z3, z4, z5, z6 = x
        P, N, D, h, r, mu, mu2, v2 = self.P, self.N, self.D, self.h, self.r, self.mu, self.mu2, self.v2
        qp = q + mu2 * z4
        b1 = -z + (1 - D) * qp * h * z6 + D * qp * z3 + v2 * z4
        den = 1.0 + q * P * z1 + mu2 * P * z1 * z4
        denh = 1.0 + q * h * P * z1 + mu2 * P * h * z1 * z4
        return np.array([
            [b1, 0.0, z1 * D * qp, z1 * ((1 - D) * mu2 * h * z6 + D * mu2 * z3 + v2), 0.0, z1 * (1 - D) * qp * h],
            [xi * q * P + mu2 * P * xi * z4 + P, den, 0.0, mu2 * P * z1 * xi, 0.0, 0.0],
            [z5 * q * h * P + mu * P * r * (1.0 + mu * r * z4 * z5), 0.0, 0.0, mu2 * P * h * z1 * z5, denh, 0.0],
            [z3 * q * P + mu2 * P * z3 * z4, 0.0, den, mu2 * P * z1 * z3, 0.0, 0.0],
            [z4 * P * v2, -z4 * D * mu2, 0.0, N + P * v2 * z1 - (1 - D) * mu * r * z5 - D * mu2 * xi,
             -z4 * (1 - D) * mu * r, 0.0],
            [z6 * q * h * P + mu2 * P * h * z6 * z4, 0.0, 0.0, mu2 * P * h * z1 * z6, 0.0, denh],
        ])

    def partials(self, x, q, z):
        z1, xi, z3, z4, z5, z6 = x
        P, D, h = self.P, self.D, self.h
        dq = np.array([z1 * ((1 - D) * h * z6 + D * z3), xi * P * z1, z5 * h * P * z1,
                       z3 * P * z1, 0.0, z6 * h * P * z1])
        dz = np.array([-z1, 0.0, 0.0, 0.0, 0.0, 0.0])
        return dq, dz

    def kernels(self, x, q):
        z1, xi, z3, z4, z5, z6 = x
        D, h, r, mu, mu2 = self.D, self.h, self.r, self.mu, self.mu2
        k_par = D * (1.0 - z4 - mu2 * h * z4 * z4 * xi)
        k_perp = (1 - D) * (1.0 - z4 * z6 + q * r * z4 * z5 / mu)
        grad_par = np.array([0.0, -D * mu2 * h * z4 * z4, 0.0, -D * (1.0 + 2.0 * mu2 * h * z4 * xi), 0.0, 0.0])
        grad_perp = np.array([0.0, 0.0, 0.0, (1 - D) * (-z6 + q * r * z5 / mu),
                              (1 - D) * q * r * z4 / mu, -(1 - D) * z4])
        return k_par, k_perp, grad_par, grad_perp, 0.0, (1 - D) * r * z4 * z5 / mu

    def e1(self, x):
        z1, xi, z3, z4, z5, z6 = x
        return -self.D * self.r * self.mu * z4 * xi, -(1 - self.D) * z4 * z5

    def report(self, x):
        out = x.copy()
        out[1] = self.a * self.mu * x[1]
        return out


class IsotropicMinf(_System):
    """m = inf at psi_D = 1, four unknowns (zeta1, zeta2, xi, zeta4), zeta3 = a mu xi."""
    name = 'isotropic_minf'

    def start(self, z):
        return np.array([1.0 / (self.s2 - z), 0.0, 0.0, 0.0])

    def sweep(self, x, q, z):
        z1, z2, xi, z4 = x
        P, N, g, v02 = self.P, self.N, self.g, self.v02
        c = self.h * self.mu2 + q
        den = 1.0 + P * c * z1 + g * P * z1 * z2
        z4 = 1.0 / den
        xi = -P * z1 / den
        z2 = N / (N + v02 * P * z1 - g * xi)
        z1 = 1.0 / (self.s2 - z + g * z2 * z4 + v02 * z2 + c * z4)
        return np.array([z1, z2, xi, z4])

    def residuals(self, x, q, z):
        z1, z2, xi, z4 = x
        P, N, g, v02 = self.P, self.N, self.g, self.v02
        c = self.h * self.mu2 + q
        return np.array([
            z2 * (N + v02 * P * z1 - g * xi) - N,
            g * P * z1 * z2 * z4 + (1.0 + c * P * z1) * z4 - 1.0,
            z1 * (self.s2 - z + g * z2 * z4 + v02 * z2 + c * z4) - 1.0,
            xi * (1.0 + P * c * z1) + (1.0 + g * z2 * xi) * P * z1,
        ])

    def jacobian(self, x, q, z):
        z1, z2, xi, z4 = x
        P, N, g, v02 = self.P, self.N, self.g, self.v02
        c = self.h * self.mu2 + q
        b = self.s2 - z + g * z2 * z4 + v02 * z2 + c * z4
        return np.array([
            [z2 * v02 * P, N + v02 * P * z1 - g * xi, -g * z2, 0.0],
            [g * P * z2 * z4 + c * P * z4, g * P * z1 * z4, 0.0, g * P * z1 * z2 + 1.0 + c * P * z1],
            [b, z1 * (g * z4 + v02), 0.0, z1 * (g * z2 + c)],
            [xi * P * c + (1.0 + g * z2 * xi) * P, g * xi * P * z1, 1.0 + P * c * z1 + g * z2 * P * z1, 0.0],
        ])

    def partials(self, x, q, z):
        z1, z2, xi, z4 = x
        P = self.P
        return (np.array([0.0, P * z1 * z4, z1 * z4, xi * P * z1]),
                np.array([0.0, 0.0, -z1, 0.0]))

    def kernels(self, x, q):
        return -x[2], 0.0, np.array([0.0, 0.0, -1.0, 0.0]), np.zeros(4), 0.0, 0.0

    def report(self, x):
        out = x.copy()
        out[2] = self.a * self.mu * x[2]
        return out


class IsotropicM1(_System):
    """m = 1 at psi_D = 1, four unknowns (zeta1, xi, zeta3, zeta4), zeta2 = a mu xi."""
    name = 'isotropic_m1'

    def start(self, z):
        return np.array([-1.0 / z, 0.0, 0.0, 1.0])

    def sweep(self, x, q, z):
        z1, xi, z3, z4 = x
        P, N, mu2, v2 = self.P, self.N, self.mu2, self.v2
        den = 1.0 + q * P * z1 + mu2 * P * z1 * z4
        xi = -P * z1 / den
        z3 = 1.0 / den
        z4 = N / (N + P * v2 * z1 - mu2 * xi)
        z1 = 1.0 / (-z + (q + mu2 * z4) * z3 + v2 * z4)
        return np.array([z1, xi, z3, z4])

    def residuals(self, x, q, z):
        z1, xi, z3, z4 = x
        P, N, mu2, v2 = self.P, self.N, self.mu2, self.v2
        return np.array([
            z1 * (-z + (q + mu2 * z4) * z3 + v2 * z4) - 1.0,
            xi * (1.0 + q * P * z1) + mu2 * P * z1 * xi * z4 + P * z1,
            z3 * (1.0 + q * P * z1) + mu2 * P * z1 * z3 * z4 - 1.0,
            z4 * (N + P * v2 * z1 - mu2 * xi) - N,
        ])

    def jacobian(self, x, q, z):
        z1, xi, z3, z4 = x
        P, N, mu2, v2 = self.P, self.N, self.mu2, self.v2
        b = -z + (q + mu2 * z4) * z3 + v2 * z4
        den = 1.0 + q * P * z1 + mu2 * P * z1 * z4
        return np.array([
            [b, 0.0, z1 * (q + mu2 * z4), z1 * (mu2 * z3 + v2)],
            [xi * q * P + mu2 * P * xi * z4 + P, den, 0.0, mu2 * P * z1 * xi],
            [z3 * q * P + mu2 * P * z3 * z4, 0.0, den, mu2 * P * z1 * z3],
            [z4 * P * v2, -z4 * mu2, 0.0, N + P * v2 * z1 - mu2 * xi],
        ])

    def partials(self, x, q, z):
        z1, xi, z3, z4 = x
        P = self.P
        return (np.array([z1 * z3, xi * P * z1, z3 * P * z1, 0.0]),
                np.array([-z1, 0.0, 0.0, 0.0]))

    def kernels(self, x, q):
        z1, xi, z3, z4 = x
        mu2h = self.mu2 * self.h
        k = 1.0 - z4 - mu2h * z4 * z4 * xi
        grad = np.array([0.0, -mu2h * z4 * z4, 0.0, -1.0 - 2.0 * mu2h * z4 * xi])
        return k, 0.0, grad, np.zeros(4), 0.0, 0.0

    def e1(self, x):
        return -self.r * self.mu * x[3] * x[1], 0.0

    def report(self, x):
        out = x.copy()
        out[1] = self.a * self.mu * x[1]
        return out


_SYSTEMS = {
    ('minf', 'subspace'): SubspaceMinf,
    ('m1', 'subspace'): SubspaceM1,
    ('minf', 'isotropic'): IsotropicMinf,
    ('m1', 'isotropic'): IsotropicM1,
}


def _make_system(regime, params, system):
    try:
        cls = _SYSTEMS[(regime, system)]
    except KeyError:
        raise InvalidArgumentError(f"unknown system '{system}' for regime '{regime}'") from None
    if system == 'isotropic' and params.psi_D != 1.0:
        raise InvalidArgumentError('the isotropic systems require psi_D = 1')
    return cls(params)


def _max_abs(r):
    return float(np.max(np.abs(r)))


def _newton(system, x0, q, z):
    """Damped Newton from x0; returns (x, residual, iterations)."""
    x = np.array(x0, dtype=float)
    r = system.residuals(x, q, z)
    norm = _max_abs(r)
    for it in range(MAX_NEWTON_ITER):
        if norm < NEWTON_TOL:
            return x, norm, it
        try:
            step = solve(system.jacobian(x, q, z), -r)
        except (LinAlgError, ValueError) as exc:
            raise SolverFailure(f'singular Jacobian: {exc}', {'iterations': it, 'residual': norm}) from None
        if not np.all(np.isfinite(step)):
            raise SolverFailure('non-finite Newton step', {'iterations': it, 'residual': norm})

        damping = 1.0
        for _ in range(MAX_HALVINGS):
            trial = x + damping * step
            r_trial = system.residuals(trial, q, z)
            norm_trial = _max_abs(r_trial)
            if np.isfinite(norm_trial) and norm_trial < norm:
                break
            damping *= 0.5
        else:
            if norm < ACCEPT_TOL:
                return x, norm, it
            raise SolverFailure('line search stalled', {'iterations': it, 'residual': norm})
        x, r, norm = trial, r_trial, norm_trial

    if norm < ACCEPT_TOL:
        return x, norm, MAX_NEWTON_ITER
    raise SolverFailure('Newton did not converge', {'iterations': MAX_NEWTON_ITER, 'residual': norm})


def _fixed_point(system, q, z):
    x = system.start(z)
    for _ in range(FIXED_POINT_SWEEPS):
        x_new = system.sweep(x, q, z)
        if not np.all(np.isfinite(x_new)):
            raise SolverFailure('fixed-point iteration diverged', {'lambda': -z})
        done = _max_abs(x_new - x) < 1e-14
        x = x_new
        if done:
            break
    return x


def _homotopy(system, q, z):
    """Follow the physical branch from large lambda down to lambda = -z."""
    target = -z
    lam = max(LAMBDA0, target, 10.0 * (system.P + system.N))
    x = _fixed_point(system, q, -lam)
    x, _, _ = _newton(system, x, q, -lam)

    log_step = INITIAL_LOG_STEP
    steps = 0
    while lam > target:
        nxt = max(lam * math.exp(-log_step), target)
        try:
            x_try, _, _ = _newton(system, x, q, -nxt)
            if x_try[0] <= 0:
                raise SolverFailure('left the physical branch', {'lambda': nxt})
        except SolverFailure as exc:
            log_step *= 0.5
            logger.debug('%s: homotopy step to lambda=%g failed (%s); step now %g',
                         system.name, nxt, exc, log_step)
            if log_step < MIN_LOG_STEP:
                raise SolverFailure('homotopy in lambda stalled',
                                    {'lambda': lam, 'target': target, 'steps': steps}) from None
            continue
        x, lam = x_try, nxt
        steps += 1
        log_step = min(1.5 * log_step, MAX_LOG_STEP)
    logger.debug('%s: homotopy reached lambda=%g in %d steps', system.name, target, steps)
    return x


def _finish(system, x, q, z):
    r = system.residuals(x, q, z)
    residual = _max_abs(r)
    if not residual < ACCEPT_TOL:
        raise SolverFailure('residual above tolerance', {'residual': residual})
    if x[0] <= 0:
        raise SolverFailure('converged to a root with zeta1 <= 0', {'zeta1': float(x[0])})

    lu = lu_factor(system.jacobian(x, q, z))
    dq, dz = system.partials(x, q, z)
    dx_dq = lu_solve(lu, -dq)
    dx_dz = lu_solve(lu, -dz)
    k_par, k_perp, grad_par, grad_perp, kq_par, kq_perp = system.kernels(x, q)
    e1_par, e1_perp = system.e1(x)
    return FixedPointSolution(
        system=system.name, zeta=system.report(x), q=q, z=z, residual_norm=residual,
        K_par=float(k_par), K_perp=float(k_perp),
        dK_dq_par=float(grad_par @ dx_dq + kq_par), dK_dq_perp=float(grad_perp @ dx_dq + kq_perp),
        dK_dz_par=float(grad_par @ dx_dz), dK_dz_perp=float(grad_perp @ dx_dz),
        e1_par=e1_par, e1_perp=e1_perp, state=x.copy())


def _solve(system, q, z, warm=None):
    q, z = float(q), float(z)
    if not z < 0:
        raise InvalidArgumentError(f'the resolvent is evaluated at z < 0, got z={z}')
    if warm is not None and warm.state is not None and warm.system == system.name:
        try:
            x, _, _ = _newton(system, warm.state, q, z)
            if x[0] > 0:
                return _finish(system, x, q, z)
        except SolverFailure as exc:
            logger.debug('%s: warm start failed (%s), falling back to homotopy', system.name, exc)
    x = _homotopy(system, q, z)
    return _finish(system, x, q, z)


def solve_system_minf(p, q, z, warm=None, system='subspace'):
    """Solve the m=inf system at (q, z)."""
    return _solve(_make_system('minf', p, system), q, z, warm)


def solve_system_m1(p, q, z, warm=None, system='subspace'):
    """Solve the m=1 system at (q, z); the solution also carries e1_par, e1_perp."""
    return _solve(_make_system('m1', p, system), q, z, warm)


def _baseline(p):
    e0_perp = (1.0 - p.psi_D) / p.sched.h if p.psi_D < 1 else 0.0
    return p.psi_D, e0_perp


def _point(p, regime, par, perp, train, residual):
    return LearningCurvePoint(t=p.sched.t, psi_n=p.psi_n, psi_p=p.psi_p, psi_D=p.psi_D,
                              regime=regime, lam=p.lam, eps_test_par=par, eps_test_perp=perp,
                              eps_train=train, residual=residual)


def _errors_minf(p, warm=None, system='subspace'):
    sol = solve_system_minf(p, 0.0, -p.lam, warm, system)
    mu2, v2, h, lam = p.coeffs.mu1t ** 2, p.coeffs.v2, p.sched.h, p.lam
    e0_par, e0_perp = _baseline(p)

    def test(e0, k, kq, kz):
        return e0 - 2.0 * mu2 * k - mu2 * mu2 * kq + mu2 * v2 * kz

    par = test(e0_par, sol.K_par, sol.dK_dq_par, sol.dK_dz_par)
    perp = test(e0_perp, sol.K_perp, sol.dK_dq_perp, sol.dK_dz_perp)
    train = (1.0 - mu2 * h * (sol.K_par + sol.K_perp)
             - mu2 * lam * h * (sol.dK_dz_par + sol.dK_dz_perp))
    return _point(p, 'minf', par, perp, train, sol.residual_norm), sol


def _errors_m1(p, warm=None, system='subspace'):
    sol = solve_system_m1(p, 0.0, -p.lam, warm, system)
    mu, v2, h, lam = p.coeffs.mu1t, p.coeffs.v2, p.sched.h, p.lam
    r = math.sqrt(h)
    e0_par, e0_perp = _baseline(p)

    def test(e0, e1, kq, kz):
        return e0 - (2.0 * mu / r) * e1 - (mu * mu / h) * kq + (v2 / h) * kz

    par = test(e0_par, sol.e1_par, sol.dK_dq_par, sol.dK_dz_par)
    perp = test(e0_perp, sol.e1_perp, sol.dK_dq_perp, sol.dK_dz_perp)
    train = 1.0 - (sol.K_par + sol.K_perp) - lam * (sol.dK_dz_par + sol.dK_dz_perp)
    return _point(p, 'm1', par, perp, train, sol.residual_norm), sol


def errors_minf(p, warm=None, system='subspace'):
    """Asymptotic test/train errors for m = inf (infinitely many noise draws per sample)."""
    return _errors_minf(p, warm, system)[0]


def errors_m1(p, warm=None, system='subspace'):
    """Asymptotic test/train errors for m = 1 (one noise draw per sample)."""
    return _errors_m1(p, warm, system)[0]


_EVALUATORS = {'minf': _errors_minf, 'm1': _errors_m1}


def _check_grid(name, values, monotone=False):
    values = [float(v) for v in values]
    if not values:
        raise InvalidArgumentError(f'{name} grid is empty')
    if monotone and len(values) > 1:
        diffs = np.diff(values)
        if not (np.all(diffs > 0) or np.all(diffs < 0)):
            raise InvalidArgumentError(f'{name} grid must be strictly monotone')
    return values


@dataclass(frozen=True)
class _Curve:
    """One continuation chain: a fixed (regime, lambda, psi_n, psi_p) along the t grid."""
    act: object
    regime: str
    lam: float
    psi_n: float
    psi_p: float
    psi_D: float
    t_grid: tuple
    order: int
    nodes: int


def _solve_curve(curve):
    points = []
    warm = None
    evaluate = _EVALUATORS[curve.regime]
    for t in curve.t_grid:
        try:
            params = SystemParams.build(curve.act, t, curve.psi_n, curve.psi_p, curve.psi_D,
                                        curve.lam, curve.order, curve.nodes)
            point, warm = evaluate(params, warm)
        except SolverFailure as exc:
            logger.warning('%s solve failed at t=%g, psi_n=%g, psi_p=%g: %s',
                           curve.regime, t, curve.psi_n, curve.psi_p, exc)
            points.append(LearningCurvePoint.failed(curve.regime, t, curve.psi_n, curve.psi_p,
                                                    curve.psi_D, curve.lam, 'solver_failure', str(exc)))
            warm = None
        except DsmrfError as exc:
            points.append(LearningCurvePoint.failed(curve.regime, t, curve.psi_n, curve.psi_p,
                                                    curve.psi_D, curve.lam, 'numeric_error', str(exc)))
            warm = None
        else:
            points.append(point)
    return points


def sweep(act, t_grid, psi_p_grid, psi_n_grid, lam_grid, regimes=REGIMES, psi_D=1.0,
          workers=1, order=DEFAULT_ORDER, nodes=DEFAULT_NODES, progress=None):
    """
    Learning curves over t x psi_p x psi_n x lambda x regime.

    Points come back ordered by regime, lambda, psi_n, psi_p, then t in the
    order given. Each (regime, lambda, psi_n, psi_p) curve is solved by one
    worker with continuation along t, so the output does not depend on the
    worker count. Failed points are returned with a non-ok status.
    """
    t_grid = tuple(_check_grid('t', t_grid, monotone=True))
    psi_p_grid = _check_grid('psi_p', psi_p_grid)
    psi_n_grid = _check_grid('psi_n', psi_n_grid)
    lam_grid = _check_grid('lambda', lam_grid)
    if not regimes:
        raise InvalidArgumentError('no regime requested')
    for regime in regimes:
        if regime not in REGIMES:
            raise InvalidArgumentError(f"unknown regime '{regime}'; expected one of {', '.join(REGIMES)}")

    curves = [_Curve(act, regime, lam, psi_n, psi_p, float(psi_D), t_grid, order, nodes)
              for regime in regimes
              for lam in lam_grid
              for psi_n in psi_n_grid
              for psi_p in psi_p_grid]
    logger.info('sweeping %d curves of %d points on %d worker(s)', len(curves), len(t_grid), workers)

    if workers <= 1 or len(curves) == 1:
        results = map(_solve_curve, curves)
        return _collect(results, progress)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return _collect(pool.map(_solve_curve, curves), progress)


def _collect(results, progress):
    points = []
    for chunk in results:
        points.extend(chunk)
        if progress is not None:
            progress(len(chunk))
    return points


def kl_bound(curve, d):
    """(d/2) * integral of eps_test_total over the t grid of `curve` (trapezoidal)."""
    if len(curve) < 2:
        raise InvalidArgumentError('the KL bound needs at least two time points')
    ts = np.array([p.t for p in curve], dtype=float)
    values = np.array([p.eps_test_total for p in curve], dtype=float)
    if not np.all(np.isfinite(ts)) or ts[0] <= 0:
        raise InvalidArgumentError('the KL bound needs finite times t > 0')
    if not np.all(np.diff(ts) > 0):
        raise InvalidArgumentError('the t grid must be sorted increasingly')
    if not np.all(np.isfinite(values)):
        raise InvalidArgumentError('the curve contains failed points')
    return 0.5 * d * float(trapezoid(values, ts))
