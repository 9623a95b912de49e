import io
import math

import pytest

from dsmrf.results import (CsvSink, GepRow, KlRow, MemorizationRow, ResultRow, StatsRow, format_value,
                           read_csv, write_csv)
from dsmrf.theory import LearningCurvePoint

RESULT_HEADER = ['regime', 't', 'psi_n', 'psi_p', 'psi_D', 'lambda', 'm', 'd', 'seed', 'eps_test_par',
                 'eps_test_perp', 'eps_test_total', 'eps_train', 'std_err_test', 'std_err_train',
                 'theory_eps_test_total', 'theory_eps_train', 'solver_residual', 'status', 'message']


def mc_row(**kwargs):
    values = dict(regime='mc', t=0.1, psi_n=2.0, psi_p=4.0, psi_D=1.0, lam=1e-3, m=1, d=100, seed=0,
                  eps_test_par=0.1 + 0.2, eps_test_perp=0.0, eps_test_total=0.30000000000000004,
                  eps_train=1 / 3, std_err_test=1e-4, std_err_train=2e-5)
    values.update(kwargs)
    return ResultRow(**values)


class TestHeaders:

    def test_result_header(self):
        assert ResultRow.header() == RESULT_HEADER

    def test_memorization_header(self):
        assert MemorizationRow.header() == ['psi_n', 'psi_p', 'm', 'd', 'n', 'p', 'lambda', 'delta',
                                            'n_traj', 'rate', 'std_err', 'n_valid', 'n_diverged',
                                            'status', 'message']

    def test_small_headers(self):
        assert GepRow.header()[:6] == ['activation', 'd', 'n', 'p', 'lambda', 'n_seeds']
        assert StatsRow.header()[-2:] == ['parseval_residual', 'truncated']
        assert 'kl_bound' in KlRow.header()


class TestFormatting:

    @pytest.mark.parametrize('value,text', [
        (None, ''), (True, 'true'), (3, '3'), (0.1, '0.1'), (1 / 3, '0.3333333333333333'),
        (float('nan'), 'nan'), (float('inf'), 'inf'),
    ])
    def test_format_value(self, value, text):
        assert format_value(value) == text

    def test_theory_row_has_empty_finite_size_columns(self):
        point = LearningCurvePoint(t=0.5, psi_n=2.0, psi_p=4.0, psi_D=1.0, regime='m1', lam=1e-3,
                                   eps_test_par=0.25, eps_test_perp=0.0, eps_train=0.5)
        cells = dict(zip(RESULT_HEADER, ResultRow.from_point(point).to_csv()))
        assert cells['regime'] == 'theory_m1'
        assert cells['m'] == cells['d'] == cells['seed'] == ''
        assert cells['std_err_test'] == 'nan'


class TestReadBack:

    def test_rows_read_back_exactly(self, tmp_path):
        rows = [mc_row(), mc_row(seed=1, eps_train=float('nan'), status='numeric_error',
                                 message='U + lambda I is not positive definite, condition inf')]
        path = tmp_path / 'mc.csv'
        assert write_csv(path, rows, ResultRow) == 2
        back = read_csv(path, ResultRow)
        assert all(a.same_as(b) for a, b in zip(rows, back))
        assert back[0].eps_test_total == 0.30000000000000004
        assert math.isnan(back[1].eps_train)

    def test_wrong_header(self, tmp_path):
        path = tmp_path / 'stats.csv'
        write_csv(path, [], StatsRow)
        with pytest.raises(ValueError):
            read_csv(path, ResultRow)

    def test_sink_writes_header_first(self):
        buf = io.StringIO()
        sink = CsvSink(buf, ResultRow)
        sink.write(mc_row())
        lines = buf.getvalue().splitlines()
        assert lines[0] == ','.join(RESULT_HEADER)
        assert lines[1].startswith('mc,0.1,2.0,4.0,1.0,0.001,1,100,0,')
        assert sink.count == 1
