"""
Run configuration files: flat `key = value` text.

    # ReLU learning curves over training time
    activation = relu_shifted
    psi_n = 20
    psi_p = 0.5, 2, 16, 64
    lambda = 1e-3
    t = logspace:1e-3,10,50

Grids accept `logspace:a,b,n`, `linspace:a,b,n`, comma lists and scalars.
"""
import math
from dataclasses import dataclass, fields, replace

import numpy as np

from dsmrf.errors import ConfigError
from dsmrf.estimator import DEFAULT_M_INF, DEFAULT_N_TEST
from dsmrf.gaussian_stats import ACTIVATION_KINDS, INTERNAL_KINDS, MIN_NODES
from dsmrf.sampler import INIT_MODES, STATIONARY_T
from dsmrf.theory import REGIMES

MASK64 = (1 << 64) - 1


def parse_grid(text):
    """Tuple of floats from a grid expression."""
    text = text.strip()
    if not text:
        raise ValueError('empty grid')
    for prefix, builder in (('logspace:', np.geomspace), ('linspace:', np.linspace)):
        if text.startswith(prefix):
            parts = [p.strip() for p in text[len(prefix):].split(',')]
            if len(parts) != 3:
                raise ValueError(f'{prefix} expects start,stop,count')
            start, stop, count = float(parts[0]), float(parts[1]), int(parts[2])
            if count < 1:
                raise ValueError('grid count must be positive')
            if prefix == 'logspace:' and not (start > 0 and stop > 0):
                raise ValueError('logspace bounds must be positive')
            return tuple(float(v) for v in builder(start, stop, count))
    return tuple(float(p) for p in text.split(','))


def _int_grid(text):
    values = parse_grid(text)
    if any(v != int(v) for v in values):
        raise ValueError('expected integers')
    return tuple(int(v) for v in values)


def _words(text):
    words = tuple(w.strip() for w in text.split(',') if w.strip())
    if not words:
        raise ValueError('empty list')
    return words


def _bool(text):
    lowered = text.strip().lower()
    if lowered in ('1', 'true', 'yes', 'on'):
        return True
    if lowered in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError(f'expected a boolean, got {text!r}')


def _fraction(text):
    if '/' in text:
        num, den = text.split('/', 1)
        return float(num) / float(den)
    return float(text)


# config key -> (attribute, parser)
_KEYS = {
    'activation': ('activation', _words),
    'psi_D': ('psi_D', parse_grid),
    't': ('t', parse_grid),
    'psi_p': ('psi_p', parse_grid),
    'psi_n': ('psi_n', parse_grid),
    'lambda': ('lam', parse_grid),
    'regimes': ('regimes', _words),
    'm': ('m', _int_grid),
    'm_inf': ('m_inf', int),
    'd': ('d', _int_grid),
    'seeds': ('seeds', int),
    'seed': ('seed', int),
    'n_test': ('n_test', int),
    'join_theory': ('join_theory', _bool),
    'n_traj': ('n_traj', int),
    'delta': ('delta', _fraction),
    't_start': ('t_start', float),
    't_stop': ('t_stop', float),
    'steps': ('steps', int),
    'table_size': ('table_size', int),
    'init': ('init', str),
    'block_size': ('block_size', int),
    'gep_n_ratio': ('gep_n_ratio', float),
    'gep_p_ratio': ('gep_p_ratio', float),
    'kappa': ('kappa', parse_grid),
    'order': ('order', int),
    'nodes': ('nodes', int),
    'workers': ('workers', int),
}


@dataclass(frozen=True)
class RunConfig:
    activation: tuple = ('relu_shifted',)
    psi_D: tuple = (1.0,)
    t: tuple = (0.01,)
    psi_p: tuple = (16.0,)
    psi_n: tuple = (20.0,)
    lam: tuple = (1e-3,)
    regimes: tuple = REGIMES
    m: tuple = (1,)
    m_inf: int = DEFAULT_M_INF
    d: tuple = (100,)
    seeds: int = 1
    seed: int = 0
    n_test: int = DEFAULT_N_TEST
    join_theory: bool = True
    n_traj: int = 5000
    delta: float = 1.0 / 3.0
    t_start: float = None
    t_stop: float = 1e-5
    steps: int = 200
    table_size: int = 40
    init: str = 'neighborhood'
    block_size: int = 100
    gep_n_ratio: float = 2.0
    gep_p_ratio: float = 1.5
    kappa: tuple = (1.0,)
    order: int = 40
    nodes: int = 200
    workers: int = 1
    text: str = ''

    @classmethod
    def from_text(cls, text):
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ConfigError(f'line {lineno}: expected "key = value", got {raw.strip()!r}')
            key, value = (part.strip() for part in line.split('=', 1))
            if key not in _KEYS:
                raise ConfigError(f"line {lineno}: unknown key '{key}'")
            attr, parser = _KEYS[key]
            if attr in values:
                raise ConfigError(f"line {lineno}: duplicate key '{key}'")
            try:
                values[attr] = parser(value)
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for '{key}': {exc}") from None
        return cls(text=text, **values)

    @classmethod
    def from_file(cls, path):
        try:
            with open(path, encoding='utf-8') as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f'cannot read config {path}: {exc}') from None
        return cls.from_text(text)

    def override(self, seed=None, workers=None):
        changes = {}
        if seed is not None:
            changes['seed'] = seed
        if workers is not None:
            changes['workers'] = workers
        return replace(self, **changes) if changes else self

    @property
    def start_time(self):
        if self.t_start is not None:
            return self.t_start
        return STATIONARY_T if self.init == 'stationary' else 0.1

    def check(self, memory_budget_mb=None):
        """Validate ranges; raises ConfigError."""
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple) and not value:
                raise ConfigError(f'{f.name} grid is empty')
        for name in ('psi_p', 'psi_n', 'lam', 'kappa'):
            if any(not (v > 0 and math.isfinite(v)) for v in getattr(self, name)):
                raise ConfigError(f'{name} values must be positive and finite')
        if any(not 0 < v <= 1 for v in self.psi_D):
            raise ConfigError('psi_D values must lie in (0, 1]')
        if any(math.isnan(v) or v <= 0 for v in self.t):
            raise ConfigError('t values must be positive')
        if any(v < 1 for v in self.m) or any(v < 1 for v in self.d):
            raise ConfigError('m and d values must be positive integers')
        known = ACTIVATION_KINDS + INTERNAL_KINDS
        for name in self.activation:
            if name not in known:
                raise ConfigError(f"unknown activation '{name}'")
        for regime in self.regimes:
            if regime not in REGIMES:
                raise ConfigError(f"unknown regime '{regime}'")
        if self.init not in INIT_MODES:
            raise ConfigError(f"unknown init '{self.init}'")
        if not 0 <= self.seed <= MASK64:
            raise ConfigError('seed must be an unsigned 64-bit integer')
        if not 0 < self.delta < 1:
            raise ConfigError('delta must lie in (0, 1)')
        if not 0 < self.t_stop < self.start_time:
            raise ConfigError('need 0 < t_stop < t_start')
        if min(self.seeds, self.n_test, self.n_traj, self.steps, self.table_size,
               self.block_size, self.workers, self.m_inf) < 1:
            raise ConfigError('counts (seeds, n_test, n_traj, steps, table_size, block_size, workers, m_inf) must be positive')
        if self.n_test < 2:
            raise ConfigError('n_test must be at least 2')
        if self.order < 2 or self.nodes < MIN_NODES:
            raise ConfigError(f"need order >= 2 and nodes >= {MIN_NODES}")
        if memory_budget_mb is not None and self.peak_bytes() > memory_budget_mb * 2 ** 20:
            raise ConfigError(f'largest grid point needs ~{self.peak_bytes() / 2 ** 20:.0f} MiB, '
                              f'above the {memory_budget_mb} MiB budget')
        return self

    def peak_bytes(self):
        """Rough float64 footprint of the largest Monte Carlo point (W, U, Y, Z)."""
        d = max(self.d)
        n = max(1, round(max(self.psi_n) * d))
        p = max(1, round(max(self.psi_p) * d))
        return 8 * (p * p + p * d + 2 * d * n * max(self.m))
