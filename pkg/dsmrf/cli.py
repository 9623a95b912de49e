"""
Command-line surface: one blueprint command per experiment.

Every command reads an optional run config, computes its grid (in parallel
when --workers > 1), streams rows to a CSV in grid order and records the run
in the ledger. Exit codes: 0 ok, 1 config error, 2 some rows failed, 3 fatal.
"""
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import click
import numpy as np
from flask import Blueprint, current_app
from sqlalchemy.exc import SQLAlchemyError
from tqdm import tqdm

from dsmrf import db
from dsmrf.diffusion_core import GaussianTarget, schedule_at
from dsmrf.errors import ConfigError, DsmrfError, InvalidArgumentError
from dsmrf.estimator import (RandomFeaturesScore, TrainingBatch, fit_ridge, gep_resolvent_check,
                             mc_test_error, train_error_estimate)
from dsmrf.gaussian_stats import compute_stats, get_activation
from dsmrf.models import CurvePoint, MemorizationCell, Run
from dsmrf.results import (NAN, CsvSink, GepRow, KlRow, MemorizationRow, ResultRow, StatsRow,
                           write_csv)
from dsmrf.run_config import RunConfig
from dsmrf.sampler import (BackwardRunConfig, FitParams, default_table_grid, fit_score_table,
                           integrate_backward, memorization_rate)
from dsmrf.seeding import rng_for
from dsmrf.svg import PlotSpec, write_svg
from dsmrf.theory import SystemParams, errors_m1, errors_minf, kl_bound, sweep

logger = logging.getLogger(__name__)

main = Blueprint('main', __name__, cli_group=None)

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL, EXIT_FATAL = 0, 1, 2, 3


def run_options(func):
    """Flags shared by every command."""
    options = [
        click.option('--config', 'config_path', type=click.Path(dir_okay=False),
                     help='Run config file (key = value lines).'),
        click.option('--out', 'out_path', type=click.Path(dir_okay=False),
                     help='CSV output path (default: <command>.csv).'),
        click.option('--seed', type=int, help='Global seed, overrides the config.'),
        click.option('--workers', type=int, envvar='DSMRF_WORKERS',
                     help='Worker processes (falls back to DSMRF_WORKERS, then the config).'),
        click.option('--svg', is_flag=True, help='Also write SVG plots next to the CSV.'),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def load_config(config_path, seed=None, workers=None):
    cfg = RunConfig.from_file(config_path) if config_path else RunConfig()
    return cfg.override(seed=seed, workers=workers).check(current_app.config['MEMORY_BUDGET_MB'])


def _single(cfg, name):
    values = getattr(cfg, name)
    if len(values) != 1:
        raise ConfigError(f"this command takes a single '{name}' value, got {len(values)}")
    return values[0]


def _model_activation(cfg):
    name = _single(cfg, 'activation')
    try:
        return get_activation(name)
    except InvalidArgumentError as e:
        raise ConfigError(str(e)) from None


def _progress(total, desc):
    # disable=None turns the bar off when stderr is not a terminal
    return tqdm(total=total, desc=desc, unit='pt', file=sys.stderr, disable=None, leave=False)


def _map(func, tasks, workers):
    """Results of func over tasks, in task order."""
    if workers <= 1 or len(tasks) <= 1:
        yield from map(func, tasks)
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(func, tasks)


class Ledger:
    """Records one CLI invocation in the run database; never fails the command."""

    def __init__(self, command, cfg, out_path):
        self.run = None
        if not current_app.config['LEDGER_ENABLED']:
            return
        try:
            self.run = Run(command=command, config_text=cfg.text, seed=str(cfg.seed),
                           workers=cfg.workers, out_path=str(out_path))
            db.session.add(self.run)
            db.session.commit()
        except SQLAlchemyError as e:
            db.session.rollback()
            logger.warning('run ledger unavailable: %s', e)
            self.run = None

    def add_curve_point(self, row):
        if self.run is None:
            return
        db.session.add(CurvePoint(
            run=self.run, regime=row.regime, t=row.t, psi_n=row.psi_n, psi_p=row.psi_p,
            psi_D=row.psi_D, lam=row.lam, m=row.m, d=row.d,
            eps_test_total=_finite_or_none(row.eps_test_total),
            eps_train=_finite_or_none(row.eps_train),
            status=row.status, message=row.message or None))

    def add_memorization_cell(self, row):
        if self.run is None:
            return
        db.session.add(MemorizationCell(
            run=self.run, psi_n=row.psi_n, psi_p=row.psi_p, m=row.m,
            rate=_finite_or_none(row.rate), std_err=_finite_or_none(row.std_err),
            n_diverged=row.n_diverged, status=row.status))

    def finish(self, status, n_rows=0, n_failed=0):
        if self.run is None:
            return
        try:
            self.run.status = status
            self.run.n_rows = n_rows
            self.run.n_failed = n_failed
            db.session.commit()
        except SQLAlchemyError as e:
            db.session.rollback()
            logger.warning('could not finalise run %s in the ledger: %s', self.run.id, e)


def _finite_or_none(value):
    return value if value is not None and math.isfinite(value) else None


def execute(command, config_path, out_path, seed, workers, body):
    """
    Shared driver: load and check the config, run `body(cfg, out, ledger)`
    and map its outcome to an exit code. `body` returns (rows written, rows failed).
    """
    ctx = click.get_current_context()
    out = Path(out_path or f'{command}.csv')
    try:
        cfg = load_config(config_path, seed, workers)
    except ConfigError as e:
        logger.error('config error: %s', e)
        click.echo(f'Error: {e}', err=True)
        ctx.exit(EXIT_CONFIG)

    ledger = Ledger(command, cfg, out)
    try:
        n_rows, n_failed = body(cfg, out, ledger)
    except ConfigError as e:
        ledger.finish('failed')
        click.echo(f'Error: {e}', err=True)
        ctx.exit(EXIT_CONFIG)
    except Exception:
        logger.exception('%s failed', command)
        ledger.finish('failed')
        ctx.exit(EXIT_FATAL)

    ledger.finish('partial' if n_failed else 'ok', n_rows, n_failed)
    click.echo(f'wrote {n_rows} rows to {out}' + (f' ({n_failed} failed)' if n_failed else ''))
    ctx.exit(EXIT_PARTIAL if n_failed else EXIT_OK)


def _plot(path, rows, spec):
    try:
        write_svg(path, rows, spec)
    except InvalidArgumentError as e:
        logger.warning('skipping %s: %s', path, e)
        return
    click.echo(f'wrote {path}')


# --- theory / phase diagram -------------------------------------------------

def _theory_rows(cfg, t_grid, sink, ledger, desc):
    act = _model_activation(cfg)
    n_curves = len(cfg.regimes) * len(cfg.lam) * len(cfg.psi_n) * len(cfg.psi_p)
    rows, n_failed = [], 0
    with _progress(n_curves * len(t_grid) * len(cfg.psi_D), desc) as bar:
        for psi_D in cfg.psi_D:
            try:
                points = sweep(act, t_grid, cfg.psi_p, cfg.psi_n, cfg.lam, regimes=cfg.regimes,
                               psi_D=psi_D, workers=cfg.workers, order=cfg.order, nodes=cfg.nodes,
                               progress=bar.update)
            except InvalidArgumentError as e:
                raise ConfigError(str(e)) from None
            for point in points:
                row = ResultRow.from_point(point)
                sink.write(row)
                ledger.add_curve_point(row)
                rows.append(row)
                n_failed += not row.ok
    return rows, n_failed


def _kl_rows(rows, d):
    curves = {}
    for row in rows:
        key = (row.regime, row.psi_D, row.lam, row.psi_n, row.psi_p)
        curves.setdefault(key, []).append(row)
    out = []
    for (regime, psi_D, lam, psi_n, psi_p), curve in curves.items():
        curve = sorted(curve, key=lambda r: r.t)
        try:
            value = kl_bound(curve, d)
        except InvalidArgumentError as e:
            logger.info('no KL bound for %s psi_n=%g psi_p=%g: %s', regime, psi_n, psi_p, e)
            continue
        logger.info('KL bound %s psi_n=%g psi_p=%g lambda=%g: %.6g', regime, psi_n, psi_p, lam, value)
        out.append(KlRow(regime=regime, psi_n=psi_n, psi_p=psi_p, psi_D=psi_D, lam=lam,
                         t_min=curve[0].t, t_max=curve[-1].t, kl_bound=value))
    return out


@main.cli.command('theory')
@run_options
def cmd_theory(config_path, out_path, seed, workers, svg):
    """Asymptotic learning curves over the t x psi_p x psi_n x lambda grid."""

    def body(cfg, out, ledger):
        with open(out, 'w', newline='', encoding='utf-8') as fh:
            sink = CsvSink(fh, ResultRow)
            rows, n_failed = _theory_rows(cfg, cfg.t, sink, ledger, 'theory')
        if len(cfg.t) >= 2:
            kl = _kl_rows(rows, cfg.d[0])
            if kl:
                kl_path = out.with_suffix('.kl.csv')
                write_csv(kl_path, kl, KlRow)
                click.echo(f'wrote {len(kl)} KL bounds to {kl_path}')
        if svg:
            spec = PlotSpec(x='t', y=('eps_test_total', 'eps_train'), series=('regime', 'psi_p'),
                            title='learning curves')
            _plot(out.with_suffix('.svg'), [r for r in rows if r.ok], spec)
        return len(rows), n_failed

    execute('theory', config_path, out_path, seed, workers, body)


@main.cli.command('phase-diagram')
@run_options
def cmd_phase_diagram(config_path, out_path, seed, workers, svg):
    """Test error over the (psi_n, psi_p) plane at one fixed t."""

    def body(cfg, out, ledger):
        t = _single(cfg, 't')
        with open(out, 'w', newline='', encoding='utf-8') as fh:
            sink = CsvSink(fh, ResultRow)
            rows, n_failed = _theory_rows(cfg, (t,), sink, ledger, 'phase-diagram')
        if svg:
            lam, psi_D = cfg.lam[0], cfg.psi_D[0]
            for regime in cfg.regimes:
                cells = [r for r in rows
                         if r.regime == f'theory_{regime}' and r.lam == lam and r.psi_D == psi_D]
                spec = PlotSpec(x='psi_p', y=('eps_test_total',), series=('psi_n',), kind='heatmap',
                                title=f'test error, {regime}, t={t:g}')
                _plot(out.with_name(f'{out.stem}_{regime}.svg'), cells, spec)
        return len(rows), n_failed

    execute('phase-diagram', config_path, out_path, seed, workers, body)


# --- Monte Carlo ------------------------------------------------------------

@dataclass(frozen=True)
class MonteCarloTask:
    index: int
    replicate: int
    seed: int
    act: object
    t: float
    psi_n: float
    psi_p: float
    psi_D: float
    lam: float
    m: int
    d: int
    n_test: int


def run_monte_carlo(task):
    """One finite-size fit and its error estimates, as a ResultRow."""
    d = task.d
    n, p = max(2, round(task.psi_n * d)), max(1, round(task.psi_p * d))
    row = dict(regime='mc', t=task.t, psi_n=task.psi_n, psi_p=task.psi_p, psi_D=task.psi_D,
               lam=task.lam, m=task.m, d=d, seed=task.replicate)
    try:
        rng = rng_for(task.seed, task.index, task.replicate)
        target = GaussianTarget(d, max(1, round(task.psi_D * d)))
        sched = schedule_at(task.t)
        X = target.sample(n, rng)
        model = RandomFeaturesScore.draw(d, p, task.act, sched, task.lam, rng)
        batch = TrainingBatch.draw(X, sched, task.m, rng)
        fit_ridge(model, batch)
        test = mc_test_error(model, target, task.n_test, rng)
        train = train_error_estimate(model, batch)
    except DsmrfError as e:
        return ResultRow(eps_test_par=NAN, eps_test_perp=NAN, eps_test_total=NAN, eps_train=NAN,
                         status='numeric_error', message=str(e), **row)
    return ResultRow(eps_test_par=test.par.value, eps_test_perp=test.perp.value,
                     eps_test_total=test.total.value, eps_train=train.value,
                     std_err_test=test.total.std_error, std_err_train=train.std_error, **row)


class TheoryJoin:
    """Matching asymptotic values for m = 1 and m >= m_inf rows, cached per point."""

    def __init__(self, act, cfg):
        self.act = act
        self.cfg = cfg
        self.cache = {}

    def regime_for(self, m):
        if m == 1:
            return 'm1'
        if m >= self.cfg.m_inf:
            return 'minf'
        return None

    def lookup(self, task):
        regime = self.regime_for(task.m)
        if regime is None:
            return None
        key = (regime, task.t, task.psi_n, task.psi_p, task.psi_D, task.lam)
        if key not in self.cache:
            try:
                params = SystemParams.build(self.act, task.t, task.psi_n, task.psi_p, task.psi_D,
                                            task.lam, self.cfg.order, self.cfg.nodes)
                evaluate = errors_m1 if regime == 'm1' else errors_minf
                self.cache[key] = evaluate(params)
            except DsmrfError as e:
                logger.warning('no theory value for %s at t=%g psi_n=%g psi_p=%g: %s',
                               regime, task.t, task.psi_n, task.psi_p, e)
                self.cache[key] = None
        return self.cache[key]

    def apply(self, row, task):
        point = self.lookup(task)
        if point is not None and point.ok:
            row.theory_eps_test_total = point.eps_test_total
            row.theory_eps_train = point.eps_train
        return row


def monte_carlo_tasks(cfg, act):
    """Grid points in output order: psi_D, lambda, psi_n, psi_p, m, d, t, then replicate."""
    tasks = []
    index = 0
    for psi_D in cfg.psi_D:
        for lam in cfg.lam:
            for psi_n in cfg.psi_n:
                for psi_p in cfg.psi_p:
                    for m in cfg.m:
                        for d in cfg.d:
                            for t in cfg.t:
                                for replicate in range(cfg.seeds):
                                    tasks.append(MonteCarloTask(
                                        index=index, replicate=replicate, seed=cfg.seed, act=act,
                                        t=t, psi_n=psi_n, psi_p=psi_p, psi_D=psi_D, lam=lam,
                                        m=m, d=d, n_test=cfg.n_test))
                                index += 1
    return tasks


@main.cli.command('montecarlo')
@run_options
def cmd_montecarlo(config_path, out_path, seed, workers, svg):
    """Finite-size fits with Monte Carlo error estimates, joined with theory."""

    def body(cfg, out, ledger):
        act = _model_activation(cfg)
        tasks = monte_carlo_tasks(cfg, act)
        join = TheoryJoin(act, cfg) if cfg.join_theory else None
        rows, n_failed = [], 0
        with open(out, 'w', newline='', encoding='utf-8') as fh, _progress(len(tasks), 'montecarlo') as bar:
            sink = CsvSink(fh, ResultRow)
            for task, row in zip(tasks, _map(run_monte_carlo, tasks, cfg.workers)):
                if join is not None:
                    join.apply(row, task)
                sink.write(row)
                ledger.add_curve_point(row)
                rows.append(row)
                n_failed += not row.ok
                bar.update(1)
        if svg:
            spec = PlotSpec(x='t', y=('eps_test_total', 'theory_eps_test_total'),
                            series=('m', 'psi_n', 'seed'), title='Monte Carlo vs theory')
            _plot(out.with_suffix('.svg'), [r for r in rows if r.ok], spec)
        return len(rows), n_failed

    execute('montecarlo', config_path, out_path, seed, workers, body)


# --- memorization -----------------------------------------------------------

@dataclass(frozen=True)
class MemorizationTask:
    index: int
    seed: int
    act: object
    psi_n: float
    psi_p: float
    m: int
    d: int
    lam: float
    table_size: int
    sampler: BackwardRunConfig


def run_memorization(task):
    """Fit a score table on fresh Gaussian data, sample backwards and score retrieval."""
    cfg = task.sampler
    d = task.d
    n, p = max(2, round(task.psi_n * d)), max(1, round(task.psi_p * d))
    row = dict(psi_n=task.psi_n, psi_p=task.psi_p, m=task.m, d=d, n=n, p=p, lam=task.lam,
               delta=cfg.delta, n_traj=cfg.n_traj)
    try:
        rng = rng_for(task.seed, task.index)
        X = GaussianTarget(d, d).sample(n, rng)
        grid = default_table_grid(cfg.t_stop, cfg.t_start, task.table_size)
        table = fit_score_table(X, grid, FitParams(p=p, act=task.act, lam=task.lam, m=task.m), rng)
        run = integrate_backward(table, cfg, X, rng)
        report = memorization_rate(run.finals, X, cfg.delta, run.diverged)
    except DsmrfError as e:
        return MemorizationRow(rate=NAN, std_err=NAN, n_valid=0, n_diverged=0,
                               status='numeric_error', message=str(e), **row)
    return MemorizationRow(rate=report.rate, std_err=report.std_error, n_valid=report.n_valid,
                           n_diverged=report.n_diverged, **row)


def memorization_tasks(cfg, act):
    """Cells in output order: d, lambda, psi_n, psi_p, m."""
    sampler = BackwardRunConfig(t_start=cfg.start_time, t_stop=cfg.t_stop, steps=cfg.steps,
                                n_traj=cfg.n_traj, delta=cfg.delta, init=cfg.init,
                                block_size=cfg.block_size)
    cells = [(d, lam, psi_n, psi_p, m)
             for d in cfg.d for lam in cfg.lam for psi_n in cfg.psi_n for psi_p in cfg.psi_p
             for m in cfg.m]
    return [MemorizationTask(index=i, seed=cfg.seed, act=act, psi_n=psi_n, psi_p=psi_p, m=m, d=d,
                             lam=lam, table_size=cfg.table_size, sampler=sampler)
            for i, (d, lam, psi_n, psi_p, m) in enumerate(cells)]


@main.cli.command('memorize')
@run_options
def cmd_memorize(config_path, out_path, seed, workers, svg):
    """Memorization rate of generated samples over the (psi_n, psi_p, m) grid."""

    def body(cfg, out, ledger):
        act = _model_activation(cfg)
        try:
            tasks = memorization_tasks(cfg, act)
        except InvalidArgumentError as e:
            raise ConfigError(str(e)) from None
        rows, n_failed = [], 0
        with open(out, 'w', newline='', encoding='utf-8') as fh, _progress(len(tasks), 'memorize') as bar:
            sink = CsvSink(fh, MemorizationRow)
            for row in _map(run_memorization, tasks, cfg.workers):
                sink.write(row)
                ledger.add_memorization_cell(row)
                rows.append(row)
                n_failed += not row.ok
                bar.update(1)
        if svg:
            spec = PlotSpec(x='psi_n', y=('rate',), series=('psi_p', 'm'), log_y=False,
                            title='memorization rate')
            _plot(out.with_suffix('.svg'), [r for r in rows if r.ok], spec)
        return len(rows), n_failed

    execute('memorize', config_path, out_path, seed, workers, body)


# --- Gaussian equivalence and activation statistics -------------------------

@dataclass(frozen=True)
class GepTask:
    index: int
    replicate: int
    seed: int
    act: object
    d: int
    n: int
    p: int
    t: float
    lam: float


def run_gep(task):
    rng = rng_for(task.seed, task.index, task.replicate)
    return gep_resolvent_check(task.d, task.n, task.p, task.act, schedule_at(task.t), task.lam, rng)


@main.cli.command('gep-check')
@run_options
def cmd_gep_check(config_path, out_path, seed, workers, svg):
    """Empirical vs Gaussian-equivalent resolvent traces over a d grid."""

    def body(cfg, out, ledger):
        lam, t = cfg.lam[0], cfg.t[0]
        points = []
        for name in cfg.activation:
            act = get_activation(name, allow_internal=True)
            for d in cfg.d:
                n = max(1, round(cfg.gep_n_ratio * d))
                p = max(1, round(cfg.gep_p_ratio * d))
                points.append((act, d, n, p))
        tasks = [GepTask(index=i, replicate=r, seed=cfg.seed, act=act, d=d, n=n, p=p, t=t, lam=lam)
                 for i, (act, d, n, p) in enumerate(points) for r in range(cfg.seeds)]
        checks = iter(_map(run_gep, tasks, cfg.workers))

        rows = []
        with _progress(len(tasks), 'gep-check') as bar:
            for act, d, n, p in points:
                batch = [next(checks) for _ in range(cfg.seeds)]
                bar.update(len(batch))
                gaps = np.array([c.gap for c in batch])
                gap_err = float(np.std(gaps, ddof=1) / math.sqrt(gaps.size)) if gaps.size > 1 else NAN
                rows.append(GepRow(activation=act.kind, d=d, n=n, p=p, lam=lam, n_seeds=cfg.seeds,
                                   empirical=float(np.mean([c.empirical for c in batch])),
                                   surrogate=float(np.mean([c.surrogate for c in batch])),
                                   gap=float(gaps.mean()), gap_std_err=gap_err))
        write_csv(out, rows, GepRow)
        if svg:
            spec = PlotSpec(x='d', y=('gap',), series=('activation',), title='Gaussian equivalence gap')
            _plot(out.with_suffix('.svg'), rows, spec)
        return len(rows), 0

    execute('gep-check', config_path, out_path, seed, workers, body)


@main.cli.command('stats')
@run_options
def cmd_stats(config_path, out_path, seed, workers, svg):
    """Gaussian moments and Hermite diagnostics of each activation."""

    def body(cfg, out, ledger):
        rows = []
        for name in cfg.activation:
            act = get_activation(name, allow_internal=True)
            for kappa in cfg.kappa:
                s = compute_stats(act, kappa, cfg.order, cfg.nodes)
                if s.truncated:
                    logger.warning('%s at kappa=%g: Hermite series truncated at order %d '
                                   '(Parseval residual %.2e)', name, kappa, s.order, s.parseval_residual)
                rows.append(StatsRow(activation=name, kappa=kappa, order=s.order, nodes=s.nodes,
                                     mu0=s.mu0, mu1=s.mu1, norm2=s.norm2, v2=s.v2,
                                     parseval_residual=s.parseval_residual, truncated=s.truncated))
        write_csv(out, rows, StatsRow)
        return len(rows), 0

    execute('stats', config_path, out_path, seed, workers, body)
