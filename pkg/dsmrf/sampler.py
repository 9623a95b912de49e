"""
Reverse-time generation with per-time learned scores, and the
nearest-neighbour memorization metric.

The backward SDE  -dY = (Y + 2 s(t, Y)) dt + sqrt(2) dB  is integrated with
Euler-Maruyama on a geometric grid from t_start down to t_stop.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from dsmrf.diffusion_core import schedule_at
from dsmrf.errors import DsmrfError, InvalidArgumentError, NumericError
from dsmrf.estimator import RandomFeaturesScore, TrainingBatch, fit_ridge
from dsmrf.seeding import rng_for

logger = logging.getLogger(__name__)

DEFAULT_TABLE_SIZE = 40
DIVERGENCE_NORM = 1e6
INIT_MODES = ('stationary', 'neighborhood')
# start time of the stationary protocol
STATIONARY_T = 10.0


def default_table_grid(t_stop, t_start, size=DEFAULT_TABLE_SIZE):
    """`size` log-spaced times from t_start down to t_stop."""
    if size < 1:
        raise InvalidArgumentError(f'table size must be positive, got {size}')
    if size == 1:
        return np.array([float(t_start)])
    return np.geomspace(t_start, t_stop, size)


@dataclass(frozen=True)
class FitParams:
    p: int
    act: object
    lam: float
    m: int


@dataclass
class ScoreTable:
    """One fitted model per grid time, grid strictly decreasing."""
    grid: np.ndarray
    models: list

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        if self.grid.ndim != 1 or self.grid.size == 0:
            raise InvalidArgumentError('score table needs a non-empty 1-d time grid')
        if np.any(np.diff(self.grid) >= 0):
            raise InvalidArgumentError('score table grid must be strictly decreasing')
        if len(self.models) != self.grid.size:
            raise InvalidArgumentError('one model per grid time is required')
        self._log_grid = np.log(self.grid)

    def nearest(self, t):
        """Index of the grid time closest to t on a log scale."""
        return int(np.argmin(np.abs(self._log_grid - math.log(t))))

    def evaluate(self, t, x):
        return self.models[self.nearest(t)].score(x)


def fit_score_table(X, grid, params, rng):
    """Fit an independent random-features model (fresh W and noise) at every grid time."""
    X = np.asarray(X, dtype=float)
    grid = np.asarray(grid, dtype=float)
    d = X.shape[0]
    models = []
    for t in grid:
        sched = schedule_at(t)
        try:
            model = RandomFeaturesScore.draw(d, params.p, params.act, sched, params.lam, rng)
            batch = TrainingBatch.draw(X, sched, params.m, rng)
            models.append(fit_ridge(model, batch))
        except DsmrfError as exc:
            raise type(exc)(f'fit failed at t={t:g}: {exc}') from exc
    logger.info('fitted score table: %d times, p=%d, m=%d, lambda=%g',
                grid.size, params.p, params.m, params.lam)
    return ScoreTable(grid=grid, models=models)


@dataclass(frozen=True)
class BackwardRunConfig:
    t_start: float = 0.1
    t_stop: float = 1e-5
    steps: int = 200
    n_traj: int = 5000
    delta: float = 1.0 / 3.0
    init: str = 'neighborhood'
    block_size: int = 100

    def __post_init__(self):
        if not 0 < self.t_stop < self.t_start:
            raise InvalidArgumentError(f'need 0 < t_stop < t_start, got {self.t_stop}, {self.t_start}')
        if not 0 < self.delta < 1:
            raise InvalidArgumentError(f'delta must lie in (0, 1), got {self.delta}')
        if self.steps < 1 or self.n_traj < 1 or self.block_size < 1:
            raise InvalidArgumentError('steps, n_traj and block_size must be positive')
        if self.init not in INIT_MODES:
            raise InvalidArgumentError(f"unknown init '{self.init}'; expected one of {', '.join(INIT_MODES)}")


@dataclass
class BackwardRun:
    finals: np.ndarray
    diverged: np.ndarray

    @property
    def n_diverged(self):
        return int(np.count_nonzero(self.diverged))


def time_grid(cfg):
    return np.geomspace(cfg.t_start, cfg.t_stop, cfg.steps + 1)


def _initial_points(cfg, X, count, rng):
    d, n = X.shape
    if cfg.init == 'stationary':
        return rng.standard_normal((d, count))
    sched = schedule_at(cfg.t_start)
    picks = rng.integers(0, n, size=count)
    return sched.a * X[:, picks] + math.sqrt(sched.h) * rng.standard_normal((d, count))


def _integrate_block(table, taus, Y, rng):
    diverged = np.zeros(Y.shape[1], dtype=bool)
    for k in range(taus.size - 1):
        dt = taus[k] - taus[k + 1]
        active = ~diverged
        if not active.any():
            break
        y = Y[:, active]
        noise = rng.standard_normal(y.shape)
        y = y + (y + 2.0 * table.evaluate(taus[k], y)) * dt + math.sqrt(2.0 * dt) * noise
        Y[:, active] = y
        norms = np.linalg.norm(y, axis=0)
        blown = ~np.isfinite(norms) | (norms > DIVERGENCE_NORM)
        if blown.any():
            idx = np.flatnonzero(active)[blown]
            diverged[idx] = True
    return Y, diverged


def integrate_backward(table, cfg, X, rng):
    """
    Run cfg.n_traj reverse trajectories and return their end points.

    Trajectories are processed in blocks of cfg.block_size; each block draws
    from its own stream derived from one draw of `rng`, so results do not
    depend on how blocks are scheduled.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] == 0:
        raise InvalidArgumentError('training set must be a non-empty (d, n) matrix')
    grid = getattr(table, 'grid', None)
    if grid is not None and (grid.max() < cfg.t_start * (1 - 1e-9) or grid.min() > cfg.t_stop * (1 + 1e-9)):
        logger.warning('score table [%g, %g] does not cover [%g, %g]; nearest models are used',
                       grid.min(), grid.max(), cfg.t_stop, cfg.t_start)

    taus = time_grid(cfg)
    base = int(rng.integers(0, 2 ** 63))
    d = X.shape[0]
    finals = np.empty((d, cfg.n_traj))
    diverged = np.zeros(cfg.n_traj, dtype=bool)
    for block, start in enumerate(range(0, cfg.n_traj, cfg.block_size)):
        count = min(cfg.block_size, cfg.n_traj - start)
        block_rng = rng_for(base, 'traj', block)
        Y = _initial_points(cfg, X, count, block_rng)
        Y, blown = _integrate_block(table, taus, Y, block_rng)
        finals[:, start:start + count] = Y
        diverged[start:start + count] = blown

    run = BackwardRun(finals=finals, diverged=diverged)
    if run.n_diverged:
        logger.warning('%d of %d trajectories diverged and are excluded', run.n_diverged, cfg.n_traj)
    return run


@dataclass
class MemorizationReport:
    rate: float
    std_error: float
    n_valid: int
    n_diverged: int
    delta: float
    nn1_index: np.ndarray = field(repr=False)
    nn1_dist: np.ndarray = field(repr=False)
    nn2_dist: np.ndarray = field(repr=False)
    retrieved: np.ndarray = field(repr=False)


def memorization_rate(finals, X, delta, diverged=None):
    """
    Fraction of end points whose nearest training sample is closer than
    delta times the second nearest (strict inequality).
    """
    finals = np.asarray(finals, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] < 2:
        raise InvalidArgumentError('memorization needs at least two training samples')
    if finals.ndim != 2 or finals.shape[0] != X.shape[0]:
        raise InvalidArgumentError(f'finals must be a ({X.shape[0]}, N) matrix, got {finals.shape}')
    if not 0 < delta < 1:
        raise InvalidArgumentError(f'delta must lie in (0, 1), got {delta}')
    if diverged is None:
        diverged = np.zeros(finals.shape[1], dtype=bool)
    valid = finals[:, ~diverged]

    dist = cdist(valid.T, X.T)
    nn1_index = np.argmin(dist, axis=1)
    two = np.partition(dist, 1, axis=1)[:, :2]
    nn1, nn2 = two[:, 0], two[:, 1]
    retrieved = nn1 < delta * nn2

    n_valid = int(retrieved.size)
    if n_valid == 0:
        raise NumericError('every trajectory diverged; no memorization rate available')
    rate = float(np.mean(retrieved))
    return MemorizationReport(rate=rate, std_error=math.sqrt(rate * (1.0 - rate) / n_valid),
                              n_valid=n_valid, n_diverged=int(np.count_nonzero(diverged)),
                              delta=float(delta), nn1_index=nn1_index, nn1_dist=nn1, nn2_dist=nn2,
                              retrieved=retrieved)
