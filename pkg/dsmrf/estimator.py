"""
Finite-size Monte Carlo for the random-features score model

    s_A(x) = (A / sqrt(p)) rho(W x / sqrt(d)),

fitted in closed form to the regularised DSM loss

    L(A) = 1/(d n m) sum_ij |sqrt(h) s_A(y_ij) + z_ij|^2 + h lambda/(d p) |A|_F^2.
"""
import logging
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, eigh, eigvalsh

from dsmrf.diffusion_core import empirical_score, exact_score
from dsmrf.errors import InvalidArgumentError, NumericError, StateError
from dsmrf.gaussian_stats import compute_stats

logger = logging.getLogger(__name__)

DEFAULT_M_INF = 100
DEFAULT_N_TEST = 2000
# columns of F built per block when accumulating U and V
CHUNK_COLUMNS = 8192


class ErrorEstimate(NamedTuple):
    value: float
    std_error: float
    n_samples: int

    @classmethod
    def from_samples(cls, samples):
        samples = np.asarray(samples, dtype=float)
        n = samples.size
        std = float(np.std(samples, ddof=1)) / math.sqrt(n) if n > 1 else 0.0
        return cls(float(np.mean(samples)), std, n)


class TestErrorEstimate(NamedTuple):
    par: ErrorEstimate
    perp: ErrorEstimate
    total: ErrorEstimate


class BiasVariance(NamedTuple):
    M: ErrorEstimate
    V: ErrorEstimate
    # train error re-estimated on independent fresh noise (m = inf)
    train: ErrorEstimate


class GepCheck(NamedTuple):
    empirical: float
    surrogate: float

    @property
    def gap(self):
        return abs(self.empirical - self.surrogate) / self.empirical


@dataclass
class TrainingBatch:
    X: np.ndarray
    Z: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        d, n = self.X.shape
        if self.Z.ndim != 3 or self.Z.shape[:2] != (d, n) or self.Y.shape != self.Z.shape:
            raise InvalidArgumentError(
                f'inconsistent batch shapes X{self.X.shape}, Z{self.Z.shape}, Y{self.Y.shape}')

    @classmethod
    def draw(cls, X, sched, m, rng):
        """y_ij = a x_i + sqrt(h) z_ij with m fresh noise draws per data point."""
        X = np.asarray(X, dtype=float)
        if m < 1:
            raise InvalidArgumentError(f'need at least one noise draw per sample, got m={m}')
        Z = rng.standard_normal((X.shape[0], X.shape[1], m))
        Y = sched.a * X[:, :, None] + math.sqrt(sched.h) * Z
        return cls(X=X, Z=Z, Y=Y)

    @property
    def d(self):
        return self.X.shape[0]

    @property
    def n(self):
        return self.X.shape[1]

    @property
    def m(self):
        return self.Z.shape[2]

    def flat(self):
        """(Y, Z) as (d, n m) matrices; column i*m + j holds draw j of sample i."""
        shape = (self.d, self.n * self.m)
        return self.Y.reshape(shape), self.Z.reshape(shape)


class RandomFeaturesScore:
    """Two-layer score with frozen first layer W (p x d) and learned readout A (d x p)."""

    def __init__(self, W, act, sched, lam):
        self.W = np.asarray(W, dtype=float)
        self.act = act
        self.sched = sched
        self.lam = float(lam)
        self.A = None
        self.condition = None

    @classmethod
    def draw(cls, d, p, act, sched, lam, rng):
        return cls(rng.standard_normal((p, d)), act, sched, lam)

    def __repr__(self):
        state = 'fitted' if self.fitted else 'unfitted'
        return f'<RandomFeaturesScore p={self.p} d={self.d} t={self.sched.t:g} {state}>'

    @property
    def p(self):
        return self.W.shape[0]

    @property
    def d(self):
        return self.W.shape[1]

    @property
    def fitted(self):
        return self.A is not None

    def features(self, x):
        return self.act(self.W @ x / math.sqrt(self.d))

    def score(self, x):
        if not self.fitted:
            raise StateError('model has not been fitted')
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.d:
            raise InvalidArgumentError(f'expected points of dimension {self.d}, got {x.shape[0]}')
        return (self.A @ self.features(x)) / math.sqrt(self.p)

    def evaluate(self, t, x):
        return self.score(x)


def _moments(model, batch):
    """U = F F^T/(nm) and V = F Z^T/(nm), built over column blocks of F."""
    if batch.d != model.d:
        raise InvalidArgumentError(f'batch dimension {batch.d} does not match model dimension {model.d}')
    Y, Z = batch.flat()
    total = Y.shape[1]
    U = np.zeros((model.p, model.p))
    V = np.zeros((model.p, model.d))
    for start in range(0, total, CHUNK_COLUMNS):
        F = model.features(Y[:, start:start + CHUNK_COLUMNS])
        U += F @ F.T
        V += F @ Z[:, start:start + CHUNK_COLUMNS].T
    return U / total, V / total


def fit_ridge(model, batch):
    """
    Closed-form minimiser of the regularised DSM loss:
    A / sqrt(p) = -(1/sqrt(h)) V^T (U + lambda I)^{-1}.
    """
    if model.sched.h <= 0:
        raise InvalidArgumentError('cannot fit at h = 0: the 1/sqrt(h) factor diverges')
    U, V = _moments(model, batch)
    M = U + model.lam * np.eye(model.p)
    try:
        solved = cho_solve(cho_factor(M, lower=True), V)
        model.condition = None
    except LinAlgError:
        w, Q = eigh(M)
        condition = float(w[-1] / w[0]) if w[0] > 0 else math.inf
        model.condition = condition
        if not w[0] > 0:
            raise NumericError(f'U + lambda I is not positive definite (condition {condition:.3g})',
                               condition=condition) from None
        logger.warning('Cholesky failed at t=%g, lambda=%g; eigendecomposition fallback (condition %.3g)',
                       model.sched.t, model.lam, condition)
        solved = Q @ ((Q.T @ V) / w[:, None])
    model.A = -(math.sqrt(model.p) / math.sqrt(model.sched.h)) * solved.T
    return model


def _check_fit(model, batch):
    if not model.fitted:
        raise StateError('model has not been fitted')
    if batch.d != model.d:
        raise InvalidArgumentError(f'batch dimension {batch.d} does not match model dimension {model.d}')


def _train_terms(model, batch):
    """|sqrt(h) s_A(y_ij) + z_ij|^2 / d for every training column."""
    _check_fit(model, batch)
    Y, Z = batch.flat()
    terms = np.empty(Y.shape[1])
    root_h = math.sqrt(model.sched.h)
    for start in range(0, Y.shape[1], CHUNK_COLUMNS):
        block = slice(start, start + CHUNK_COLUMNS)
        resid = root_h * model.score(Y[:, block]) + Z[:, block]
        terms[block] = np.sum(resid * resid, axis=0) / model.d
    return terms


def train_error(model, batch):
    """(1/(d n m)) sum_ij |sqrt(h) s_A(y_ij) + z_ij|^2."""
    return float(np.mean(_train_terms(model, batch)))


def train_error_estimate(model, batch):
    """train_error together with the spread of its per-column terms."""
    return ErrorEstimate.from_samples(_train_terms(model, batch))


def loss(model, batch):
    """Regularised objective at the model's current A."""
    penalty = model.sched.h * model.lam / (model.d * model.p) * float(np.sum(model.A ** 2))
    return train_error(model, batch) + penalty


def gradient_residual(model, batch):
    """|dL/dB|_F / |(2 sqrt(h)/d) V^T|_F with B = A/sqrt(p); zero at the exact minimiser."""
    _check_fit(model, batch)
    U, V = _moments(model, batch)
    h, d = model.sched.h, model.d
    B = model.A / math.sqrt(model.p)
    driving = (2.0 * math.sqrt(h) / d) * V.T
    grad = (2.0 * h / d) * (B @ U + model.lam * B) + driving
    return float(np.linalg.norm(grad) / np.linalg.norm(driving))


def mc_test_error(model, target, n_test=DEFAULT_N_TEST, rng=None, sched=None):
    """
    (1/d) E |Pi_alpha (s(x) - grad log P_t(x))|^2 over fresh x ~ N(0, Sigma_t),
    for the subspace (par) and its complement (perp).

    `model` is any score field with evaluate(t, x); `sched` defaults to the
    model's own schedule.
    """
    sched = sched if sched is not None else model.sched
    if rng is None:
        raise InvalidArgumentError('mc_test_error needs an explicit rng')
    if n_test < 2:
        raise InvalidArgumentError(f'need at least two test points, got {n_test}')
    par = np.empty(n_test)
    perp = np.empty(n_test)
    block = max(1, CHUNK_COLUMNS // 4)
    for start in range(0, n_test, block):
        count = min(block, n_test - start)
        x = target.sample_marginal(sched, count, rng)
        diff = model.evaluate(sched.t, x) - exact_score(target, sched, x)
        sq = diff * diff
        par[start:start + count] = sq[:target.D].sum(axis=0) / target.d
        perp[start:start + count] = sq[target.D:].sum(axis=0) / target.d
    return TestErrorEstimate(par=ErrorEstimate.from_samples(par),
                             perp=ErrorEstimate.from_samples(perp),
                             total=ErrorEstimate.from_samples(par + perp))


def bias_variance_split(model, batch, n_z, rng):
    """
    Monte Carlo estimates of

        M_t = (1/d) E |s_A(y) - s^e(t, y)|^2
        V_t = (1/d) E |sqrt(h) s^e(t, y) + z|^2

    over y = a x_i + sqrt(h) z with n_z fresh z per training point, where s^e
    is the empirical optimal score of the training set. The train error at
    m = inf is estimated on an independent set of draws; it should equal
    V_t + h M_t.
    """
    _check_fit(model, batch)
    sched = model.sched
    if sched.h <= 0:
        raise InvalidArgumentError('bias-variance split needs h > 0')
    if n_z < 1:
        raise InvalidArgumentError(f'n_z must be positive, got {n_z}')
    d, n = batch.X.shape
    root_h = math.sqrt(sched.h)

    def draws():
        z = rng.standard_normal((d, n * n_z))
        y = sched.a * np.repeat(batch.X, n_z, axis=1) + root_h * z
        return y, z

    y, z = draws()
    s_emp = empirical_score(sched, batch.X, y)
    bias = model.score(y) - s_emp
    irreducible = root_h * s_emp + z
    M = ErrorEstimate.from_samples(np.sum(bias * bias, axis=0) / d)
    V = ErrorEstimate.from_samples(np.sum(irreducible * irreducible, axis=0) / d)

    y, z = draws()
    resid = root_h * model.score(y) + z
    train = ErrorEstimate.from_samples(np.sum(resid * resid, axis=0) / d)
    return BiasVariance(M=M, V=V, train=train)


def _mean_resolvent_trace(F, lam):
    p, n = F.shape
    eig = eigvalsh(F @ F.T / n)
    return float(np.mean(1.0 / (eig + lam)))


def gep_resolvent_check(d, n, p, act, sched, lam, rng):
    """
    (1/p) tr[(F F^T/n + lambda I)^{-1}] for F = rho(W X/sqrt(d)) and for its
    Gaussian equivalent mu0 11^T + mu1 W X/sqrt(d) + v Omega.
    """
    if min(d, n, p) < 1:
        raise InvalidArgumentError(f'dimensions must be positive, got d={d}, n={n}, p={p}')
    if not lam > 0:
        raise InvalidArgumentError(f'lambda must be positive, got {lam}')
    stats = compute_stats(act)
    W = rng.standard_normal((p, d))
    # the forward marginal of N(0, I) data is N(0, I) at every t
    X = sched.a * rng.standard_normal((d, n)) + math.sqrt(sched.h) * rng.standard_normal((d, n))
    pre = W @ X / math.sqrt(d)
    F = act(pre)
    omega = rng.standard_normal((p, n))
    F_hat = stats.mu0 + stats.mu1 * pre + math.sqrt(stats.v2) * omega
    return GepCheck(empirical=_mean_resolvent_trace(F, lam),
                    surrogate=_mean_resolvent_trace(F_hat, lam))
