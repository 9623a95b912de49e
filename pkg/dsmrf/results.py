"""
Flat CSV records written by the CLI.

Every record type has a fixed header (its dataclass field order). Floats are
written with repr(), the shortest text that parses back to the same double,
so a row read back with `from_csv` equals the row that was written.
"""
import csv
import math
import typing
from dataclasses import astuple, dataclass, fields

import numpy as np

NAN = float('nan')


def format_value(value):
    if value is None:
        return ''
    if isinstance(value, (bool, np.bool_)):
        return 'true' if value else 'false'
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def _parse(text, annotation):
    optional = False
    if typing.get_origin(annotation) is typing.Union:
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        annotation, optional = args[0], True
    if text == '' and optional:
        return None
    if annotation is float:
        return float(text)
    if annotation is int:
        return int(text)
    if annotation is bool:
        return text == 'true'
    return text


class CsvRecord:
    """Mixin giving a dataclass a fixed CSV header and a lossless reader."""

    @classmethod
    def header(cls):
        return [f.name for f in fields(cls)]

    def to_csv(self):
        return [format_value(v) for v in astuple(self)]

    @classmethod
    def from_csv(cls, row):
        hints = typing.get_type_hints(cls)
        if len(row) != len(fields(cls)):
            raise ValueError(f'expected {len(fields(cls))} columns, got {len(row)}')
        return cls(*(_parse(text, hints[f.name]) for text, f in zip(row, fields(cls))))

    def same_as(self, other):
        """Field-wise equality that treats NaN as equal to NaN."""
        for a, b in zip(astuple(self), astuple(other)):
            if isinstance(a, float) and isinstance(b, float) and math.isnan(a) and math.isnan(b):
                continue
            if a != b:
                return False
        return True


@dataclass
class ResultRow(CsvRecord):
    regime: str
    t: float
    psi_n: float
    psi_p: float
    psi_D: float
    # lambda is a keyword; the header column is still 'lambda'
    lam: float
    m: typing.Optional[int]
    d: typing.Optional[int]
    seed: typing.Optional[int]
    eps_test_par: float
    eps_test_perp: float
    eps_test_total: float
    eps_train: float
    std_err_test: float = NAN
    std_err_train: float = NAN
    theory_eps_test_total: float = NAN
    theory_eps_train: float = NAN
    solver_residual: float = NAN
    status: str = 'ok'
    message: str = ''

    @classmethod
    def header(cls):
        return ['lambda' if name == 'lam' else name for name in super().header()]

    @classmethod
    def from_point(cls, point):
        """Row for a theory LearningCurvePoint."""
        return cls(regime=f'theory_{point.regime}', t=point.t, psi_n=point.psi_n, psi_p=point.psi_p,
                   psi_D=point.psi_D, lam=point.lam, m=None, d=None, seed=None,
                   eps_test_par=point.eps_test_par, eps_test_perp=point.eps_test_perp,
                   eps_test_total=point.eps_test_total, eps_train=point.eps_train,
                   solver_residual=point.residual, status=point.status, message=point.message)

    @property
    def ok(self):
        return self.status == 'ok'


@dataclass
class MemorizationRow(CsvRecord):
    psi_n: float
    psi_p: float
    m: int
    d: int
    n: int
    p: int
    lam: float
    delta: float
    n_traj: int
    rate: float
    std_err: float
    n_valid: int
    n_diverged: int
    status: str = 'ok'
    message: str = ''

    @classmethod
    def header(cls):
        return ['lambda' if name == 'lam' else name for name in super().header()]

    @property
    def ok(self):
        return self.status == 'ok'


@dataclass
class GepRow(CsvRecord):
    activation: str
    d: int
    n: int
    p: int
    lam: float
    n_seeds: int
    empirical: float
    surrogate: float
    gap: float
    gap_std_err: float

    @classmethod
    def header(cls):
        return ['lambda' if name == 'lam' else name for name in super().header()]


@dataclass
class StatsRow(CsvRecord):
    """
    One activation's Gaussian moments.

    `truncated` means the Hermite series had not converged at `order`; c(gamma)
    then uses the closed form (arc-cosine for ReLU), so `parseval_residual`
    stays of order 1e-3 for ReLU and does not measure an error in c(gamma).
    """
    activation: str
    kappa: float
    order: int
    nodes: int
    mu0: float
    mu1: float
    norm2: float
    v2: float
    parseval_residual: float
    truncated: bool


@dataclass
class KlRow(CsvRecord):
    regime: str
    psi_n: float
    psi_p: float
    psi_D: float
    lam: float
    t_min: float
    t_max: float
    kl_bound: float

    @classmethod
    def header(cls):
        return ['lambda' if name == 'lam' else name for name in super().header()]


class CsvSink:
    """Writes the header, then rows as they arrive, flushing each one."""

    def __init__(self, stream, record_cls):
        self.stream = stream
        self.writer = csv.writer(stream, lineterminator='\n')
        self.writer.writerow(record_cls.header())
        self.count = 0

    def write(self, row):
        self.writer.writerow(row.to_csv())
        self.stream.flush()
        self.count += 1


def write_csv(path, rows, record_cls):
    with open(path, 'w', newline='', encoding='utf-8') as fh:
        sink = CsvSink(fh, record_cls)
        for row in rows:
            sink.write(row)
    return sink.count


def read_csv(path, record_cls):
    with open(path, newline='', encoding='utf-8') as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != record_cls.header():
            raise ValueError(f'unexpected header in {path}: {header}')
        return [record_cls.from_csv(row) for row in reader]
