"""
Gaussian moments of the activation catalogue and the scalar coefficients
that enter the fixed-point systems.

All expectations are taken against g ~ N(0, 1). Smooth activations are
integrated with Gauss-Hermite; activations with a kink are integrated with
the real line split at the kink (Gauss-Legendre on each truncated piece),
because Gauss-Hermite converges only algebraically across a kink.
"""
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.polynomial.hermite import hermgauss
from numpy.polynomial.legendre import leggauss
from scipy.special import expit, gammaln

from dsmrf.errors import InvalidArgumentError, NumericError

logger = logging.getLogger(__name__)

ACTIVATION_KINDS = ('relu_shifted', 'tanh_scaled', 'sigmoid_shifted')
INTERNAL_KINDS = ('linear',)

DEFAULT_ORDER = 40
DEFAULT_NODES = 200
MIN_NODES = 64
TRUNCATION_TOL = 1e-8
MU0_TOL = 1e-8
# phi(16) * 16^41 / sqrt(40!) is below 1e-30
TAIL_CUTOFF = 16.0

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class Activation:
    kind: str

    def __post_init__(self):
        if self.kind not in ACTIVATION_KINDS + INTERNAL_KINDS:
            raise InvalidArgumentError(
                f"unknown activation '{self.kind}'; expected one of {', '.join(ACTIVATION_KINDS)}")

    def evaluate(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == 'relu_shifted':
            return np.maximum(x, 0.0) - _INV_SQRT_2PI
        if self.kind == 'tanh_scaled':
            return 0.93 * np.tanh(x)
        if self.kind == 'sigmoid_shifted':
            return 2.8 * expit(x) - 1.4
        return x.copy()

    __call__ = evaluate

    @property
    def breakpoints(self):
        """Points where the activation is not smooth."""
        return (0.0,) if self.kind == 'relu_shifted' else ()

    def dual_kernel(self, gamma, kappa):
        """Closed form of E[rho(k u) rho(k v)] under correlation gamma, or None."""
        if self.kind == 'relu_shifted':
            gamma = min(1.0, max(-1.0, gamma))
            arccos = (math.sqrt(1.0 - gamma * gamma) + gamma * (math.pi - math.acos(gamma))) / (2.0 * math.pi)
            return kappa * kappa * arccos - kappa / math.pi + 1.0 / (2.0 * math.pi)
        if self.kind == 'linear':
            return kappa * kappa * gamma
        return None


def get_activation(name, allow_internal=False):
    kinds = ACTIVATION_KINDS + (INTERNAL_KINDS if allow_internal else ())
    if name not in kinds:
        raise InvalidArgumentError(f"unknown activation '{name}'; expected one of {', '.join(kinds)}")
    return Activation(name)


@dataclass(frozen=True, eq=False)
class GaussQuadrature:
    """Nodes and weights with sum(w * f(nodes)) ~ E[f(g)], g ~ N(0, 1)."""
    nodes: np.ndarray
    weights: np.ndarray

    def expect(self, values):
        return float(np.dot(self.weights, values))


def gauss_hermite(n):
    if n < 1:
        raise InvalidArgumentError(f'need at least one node, got {n}')
    x, w = hermgauss(n)
    # physicists' rule -> standard normal
    return GaussQuadrature(nodes=math.sqrt(2.0) * x, weights=w / math.sqrt(math.pi))


@lru_cache(maxsize=8)
def _legendre(n):
    x, w = leggauss(n)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def split_legendre(n, breakpoints, cutoff=TAIL_CUTOFF):
    """Gauss-Legendre with n nodes on each piece of [-cutoff, cutoff] cut at `breakpoints`."""
    cuts = sorted(b for b in breakpoints if -cutoff < b < cutoff)
    edges = [-cutoff] + cuts + [cutoff]
    x, w = _legendre(n)
    nodes, weights = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        half = 0.5 * (hi - lo)
        g = lo + half * (x + 1.0)
        nodes.append(g)
        weights.append(half * w * _INV_SQRT_2PI * np.exp(-0.5 * g * g))
    return GaussQuadrature(nodes=np.concatenate(nodes), weights=np.concatenate(weights))


def _rule_for(act, kappa, nodes):
    if act.breakpoints:
        return split_legendre(nodes, [b / kappa for b in act.breakpoints])
    return gauss_hermite(nodes)


def _normalized_hermite(g, order):
    """Rows He_k(g)/sqrt(k!) for k = 0..order, by the three-term recurrence."""
    table = np.empty((order + 1, g.size))
    table[0] = 1.0
    if order >= 1:
        table[1] = g
    for k in range(1, order):
        table[k + 1] = (g * table[k] - math.sqrt(k) * table[k - 1]) / math.sqrt(k + 1)
    return table


@dataclass(frozen=True, eq=False)
class ActivationStats:
    act: Activation
    kappa: float
    mu0: float
    mu1: float
    norm2: float
    v2: float
    # a_k = E[rho(kappa g) He_k(g)] / k!
    hermite: np.ndarray
    order: int
    nodes: int
    truncated: bool
    # b_k = a_k sqrt(k!), so that c(gamma) = sum b_k^2 gamma^k
    normalized: np.ndarray = field(repr=False)

    @property
    def parseval_residual(self):
        return abs(self.norm2 - float(np.sum(self.normalized ** 2))) / self.norm2


@lru_cache(maxsize=512)
def compute_stats(act, kappa=1.0, order=DEFAULT_ORDER, nodes=DEFAULT_NODES):
    """Moments of rho(kappa g) and its Hermite coefficients up to `order`."""
    kappa = float(kappa)
    if not kappa > 0:
        raise InvalidArgumentError(f'input scale kappa must be positive, got {kappa}')
    if order < 2:
        raise InvalidArgumentError(f'Hermite order must be >= 2, got {order}')
    if nodes < MIN_NODES:
        raise InvalidArgumentError(f'need at least {MIN_NODES} quadrature nodes, got {nodes}')

    rule = _rule_for(act, kappa, nodes)
    g = rule.nodes
    vals = act(kappa * g)
    mu0 = rule.expect(vals)
    mu1 = rule.expect(vals * g)
    norm2 = rule.expect(vals * vals)
    v2 = max(norm2 - mu0 * mu0 - mu1 * mu1, 0.0)

    normalized = _normalized_hermite(g, order) @ (rule.weights * vals)
    hermite = normalized * np.exp(-0.5 * gammaln(np.arange(order + 1) + 1.0))
    normalized.setflags(write=False)
    hermite.setflags(write=False)

    truncated = normalized[-1] ** 2 / norm2 > TRUNCATION_TOL
    if truncated:
        logger.debug('Hermite series of %s at kappa=%g is truncated at order %d',
                     act.kind, kappa, order)
    return ActivationStats(act=act, kappa=kappa, mu0=mu0, mu1=mu1, norm2=norm2, v2=v2,
                           hermite=hermite, order=order, nodes=nodes, truncated=bool(truncated),
                           normalized=normalized)


def _check_gamma(gamma):
    gamma = float(gamma)
    if not -1.0 <= gamma <= 1.0:
        raise InvalidArgumentError(f'correlation must lie in [-1, 1], got {gamma}')
    return gamma


def c_gamma(stats, gamma):
    """
    c(gamma, kappa) = E[rho(kappa u) rho(kappa v)] for standard normals with
    correlation gamma, via the Mehler series sum_k a_k^2 k! gamma^k.

    When the series is truncated (the shifted ReLU at the default order) and
    the activation has a closed-form dual kernel, the closed form is used.
    """
    gamma = _check_gamma(gamma)
    if stats.truncated:
        closed = stats.act.dual_kernel(gamma, stats.kappa)
        if closed is not None:
            return closed
    return float(np.polynomial.polynomial.polyval(gamma, stats.normalized ** 2))


def c_gamma_quadrature(act, gamma, kappa=1.0, nodes=DEFAULT_NODES):
    """
    Two-dimensional quadrature of E[rho(kappa u) rho(kappa v)], kept as an
    oracle for c_gamma. v = gamma u + sqrt(1 - gamma^2) w; the inner rule over
    w is split where kappa v crosses a kink of the activation.
    """
    gamma = _check_gamma(gamma)
    outer = _rule_for(act, kappa, nodes)
    scale = math.sqrt(max(1.0 - gamma * gamma, 0.0))
    outer_vals = act(kappa * outer.nodes)
    if scale == 0.0:
        return outer.expect(outer_vals * act(kappa * gamma * outer.nodes))

    if not act.breakpoints:
        inner = gauss_hermite(nodes)
        v = gamma * outer.nodes[:, None] + scale * inner.nodes[None, :]
        inner_means = act(kappa * v) @ inner.weights
        return outer.expect(outer_vals * inner_means)

    inner_means = np.empty(outer.nodes.size)
    for i, u in enumerate(outer.nodes):
        kinks = [(b / kappa - gamma * u) / scale for b in act.breakpoints]
        inner = split_legendre(nodes, kinks)
        inner_means[i] = inner.expect(act(kappa * (gamma * u + scale * inner.nodes)))
    return outer.expect(outer_vals * inner_means)


@dataclass(frozen=True)
class TheoryCoefficients:
    psi_D: float
    sigma0_sq: float
    sigma_t_sq: float
    gamma: float
    mu1t: float
    v2: float
    v02: float
    s2: float
    norm2: float
    truncated: bool

    @property
    def sigma_t(self):
        return math.sqrt(self.sigma_t_sq)


def check_centered(act, order=DEFAULT_ORDER, nodes=DEFAULT_NODES):
    """Reject activations whose mean under N(0, 1) is not zero."""
    stats = compute_stats(act, 1.0, order, nodes)
    if abs(stats.mu0) > MU0_TOL:
        raise InvalidArgumentError(f'activation {act.kind} has mu0={stats.mu0:.3g}; only centered activations are supported')
    return stats


def theory_coefficients(act, sched, psi_D, order=DEFAULT_ORDER, nodes=DEFAULT_NODES):
    """Scalar coefficients of the fixed-point systems at schedule `sched`."""
    psi_D = float(psi_D)
    if not 0.0 < psi_D <= 1.0:
        raise InvalidArgumentError(f'psi_D must lie in (0, 1], got {psi_D}')
    check_centered(act, order, nodes)

    a2 = sched.a ** 2
    sigma_t_sq = a2 * psi_D + sched.h
    sigma_t = math.sqrt(sigma_t_sq)
    gamma = a2 * psi_D / sigma_t_sq

    stats = compute_stats(act, sigma_t, order, nodes)
    c = c_gamma(stats, gamma)
    mu1t = stats.mu1 / sigma_t
    v2 = stats.norm2 - stats.mu1 ** 2
    v02 = c - a2 * psi_D * mu1t ** 2
    s2 = stats.norm2 - c - sched.h * mu1t ** 2

    floor = -1e-10 * max(stats.norm2, 1.0)
    for name, value in (('v^2', v2), ('v0^2', v02), ('s^2', s2)):
        if value < floor:
            raise NumericError(f'{name}={value:.3g} is negative at t={sched.t}, psi_D={psi_D}')
    return TheoryCoefficients(psi_D=psi_D, sigma0_sq=psi_D, sigma_t_sq=sigma_t_sq, gamma=gamma,
                              mu1t=mu1t, v2=max(v2, 0.0), v02=max(v02, 0.0), s2=max(s2, 0.0),
                              norm2=stats.norm2, truncated=stats.truncated)
