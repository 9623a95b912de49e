"""
Ornstein-Uhlenbeck schedules, exact and empirical scores, forward sampling.

Vectors are numpy arrays of shape (d,); batches of points are stored as
columns, shape (d, N). Every score function accepts either.
"""
import logging
import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import softmax

from dsmrf.errors import InvalidArgumentError, SingularCovarianceError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Schedule:
    """OU coefficients at time t: a = e^{-t}, h = 1 - e^{-2t}."""
    t: float
    a: float
    h: float

    @property
    def is_stationary(self):
        return math.isinf(self.t)


def schedule_at(t):
    """Schedule at time `t`; `math.inf` gives the stationary limit (a=0, h=1)."""
    t = float(t)
    if math.isnan(t) or t < 0:
        raise InvalidArgumentError(f'time must be >= 0, got {t}')
    if math.isinf(t):
        return Schedule(t=math.inf, a=0.0, h=1.0)
    # -expm1 keeps h accurate for t down to 1e-300
    return Schedule(t=t, a=math.exp(-t), h=-math.expm1(-2.0 * t))


@dataclass(frozen=True)
class GaussianTarget:
    """N(0, C) with C the projector onto the first D of d coordinates."""
    d: int
    D: int

    def __post_init__(self):
        if self.d < 1:
            raise InvalidArgumentError(f'dimension d must be positive, got {self.d}')
        if not 1 <= self.D <= self.d:
            raise InvalidArgumentError(f'subspace dimension D must be in [1, {self.d}], got {self.D}')

    @property
    def psi_D(self):
        return self.D / self.d

    def parallel_mask(self):
        mask = np.zeros(self.d, dtype=bool)
        mask[:self.D] = True
        return mask

    def sigma_diag(self, sched):
        """Diagonal of Sigma_t = a^2 C + h I."""
        diag = np.full(self.d, sched.h)
        diag[:self.D] = 1.0
        return diag

    def mean_trace_inverse(self, sched):
        """(1/d) tr Sigma_t^{-1} = psi_D + (1 - psi_D)/h."""
        if self.D < self.d and sched.h == 0:
            raise SingularCovarianceError('Sigma_t is singular off the subspace at h=0')
        perp = (1.0 - self.psi_D) / sched.h if self.D < self.d else 0.0
        return self.psi_D + perp

    def sample(self, n, rng):
        """n data points x ~ N(0, C), as columns."""
        X = np.zeros((self.d, n))
        X[:self.D] = rng.standard_normal((self.D, n))
        return X

    def sample_marginal(self, sched, n, rng):
        """n points from P_t = N(0, Sigma_t), as columns."""
        return np.sqrt(self.sigma_diag(sched))[:, None] * rng.standard_normal((self.d, n))


class ScoreField(Protocol):
    """Anything that maps (t, x) to a score vector of the same shape as x."""

    def evaluate(self, t, x): ...


def _check_points(x, d=None):
    x = np.asarray(x, dtype=float)
    if x.ndim not in (1, 2):
        raise InvalidArgumentError(f'points must be a vector or a (d, N) matrix, got shape {x.shape}')
    if d is not None and x.shape[0] != d:
        raise InvalidArgumentError(f'expected leading dimension {d}, got {x.shape[0]}')
    return x


def exact_score(target, sched, x):
    """-Sigma_t^{-1} x, applied componentwise."""
    x = _check_points(x, target.d)
    if target.D < target.d and sched.h == 0:
        raise SingularCovarianceError('exact score is undefined off the subspace at h=0')
    # a^2 + h = 1, so the subspace block of Sigma_t is exactly the identity
    inv = np.ones(target.d)
    if target.D < target.d:
        inv[target.D:] = 1.0 / sched.h
    if x.ndim == 2:
        inv = inv[:, None]
    return -inv * x


def empirical_score(sched, X, x):
    """
    Score of the Gaussian mixture (1/n) sum_i N(a x_i, h I).

    Responsibilities r_i = softmax(-|x - a x_i|^2 / (2h)) are evaluated in
    log space, so tiny h and large |x| do not underflow.
    """
    if sched.h <= 0:
        raise SingularCovarianceError('empirical score needs h > 0')
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] == 0:
        raise InvalidArgumentError('dataset must be a non-empty (d, n) matrix')
    x = _check_points(x, X.shape[0])
    single = x.ndim == 1
    pts = x[:, None] if single else x

    centers = sched.a * X
    if X.shape[1] == 1:
        mean = np.broadcast_to(centers, pts.shape)
    else:
        logits = -cdist(pts.T, centers.T, 'sqeuclidean') / (2.0 * sched.h)
        resp = softmax(logits, axis=1)
        mean = centers @ resp.T
    score = -(pts - mean) / sched.h
    return score[:, 0] if single else score


def sample_forward(target, sched, x0, rng):
    """y = a x0 + sqrt(h) z with z ~ N(0, I); returns (y, z)."""
    x0 = _check_points(x0, target.d)
    z = rng.standard_normal(x0.shape)
    y = sched.a * x0 + math.sqrt(sched.h) * z
    return y, z


class ExactScore:
    """ScoreField backed by exact_score."""

    def __init__(self, target):
        self.target = target

    def evaluate(self, t, x):
        return exact_score(self.target, schedule_at(t), x)


class EmpiricalScore:
    """ScoreField backed by empirical_score over a fixed dataset."""

    def __init__(self, X):
        self.X = np.asarray(X, dtype=float)

    def evaluate(self, t, x):
        return empirical_score(schedule_at(t), self.X, x)
