"""
Deterministic SVG line plots and heatmaps.

Output is a pure function of the rows and the PlotSpec: no timestamps, fixed
number formatting, series in order of first appearance. The plot area
carries its pixel box and (transformed) data ranges as data-* attributes so
coordinates can be mapped back to values.
"""
import math
from dataclasses import dataclass
from xml.sax.saxutils import escape, quoteattr

from dsmrf.errors import InvalidArgumentError

PALETTE = ('#1f77b4', '#d62728', '#2ca02c', '#ff7f0e', '#9467bd',
           '#8c564b', '#e377c2', '#7f7f7f', '#bcbd22', '#17becf')
# low -> high
HEAT_STOPS = ((68, 1, 84), (59, 82, 139), (33, 145, 140), (94, 201, 98), (253, 231, 37))


@dataclass(frozen=True)
class PlotSpec:
    """
    Line plots draw one polyline per (series key, y field). Heatmaps place
    `x` on the horizontal axis, `series[0]` on the vertical axis and colour
    cells by `y[0]`.
    """
    x: str
    y: tuple
    series: tuple = ()
    kind: str = 'line'
    log_x: bool = True
    log_y: bool = True
    title: str = ''
    width: int = 720
    height: int = 460

    def __post_init__(self):
        if self.kind not in ('line', 'heatmap'):
            raise InvalidArgumentError(f"unknown plot kind '{self.kind}'")
        if isinstance(self.y, str):
            object.__setattr__(self, 'y', (self.y,))


def _get(row, name):
    if isinstance(row, dict):
        return row[name]
    return getattr(row, name)


def _num(value):
    return f'{value:.3f}'


class _Axis:
    def __init__(self, values, log, lo_px, hi_px):
        self.log = log
        tv = [self.transform(v) for v in values]
        lo, hi = min(tv), max(tv)
        if hi == lo:
            lo, hi = lo - 0.5, hi + 0.5
        self.lo, self.hi = lo, hi
        self.lo_px, self.hi_px = lo_px, hi_px

    def transform(self, v):
        return math.log10(v) if self.log else v

    def pixel(self, v):
        frac = (self.transform(v) - self.lo) / (self.hi - self.lo)
        return self.lo_px + frac * (self.hi_px - self.lo_px)

    def ticks(self):
        if self.log:
            first, last = math.ceil(self.lo - 1e-9), math.floor(self.hi + 1e-9)
            return [(10.0 ** k, f'1e{k}') for k in range(first, last + 1)]
        step = (self.hi - self.lo) / 4
        return [(self.lo + i * step, f'{self.lo + i * step:.3g}') for i in range(5)]


def _usable(value, log):
    return value is not None and math.isfinite(value) and (value > 0 or not log)


def _frame(spec, left, right, top, bottom, xa, ya):
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{spec.width}" height="{spec.height}" '
        f'viewBox="0 0 {spec.width} {spec.height}">',
        f'<rect x="0" y="0" width="{spec.width}" height="{spec.height}" fill="#ffffff"/>',
    ]
    if spec.title:
        out.append(f'<text x="{_num(spec.width / 2)}" y="22" text-anchor="middle" '
                   f'font-size="15">{escape(spec.title)}</text>')
    out.append(
        f'<g class="plot-area" data-left="{_num(left)}" data-right="{_num(right)}" '
        f'data-top="{_num(top)}" data-bottom="{_num(bottom)}" '
        f'data-x-range="{xa.lo!r} {xa.hi!r}" data-y-range="{ya.lo!r} {ya.hi!r}" '
        f'data-log-x="{str(xa.log).lower()}" data-log-y="{str(ya.log).lower()}">')
    out.append(f'<line x1="{_num(left)}" y1="{_num(bottom)}" x2="{_num(right)}" y2="{_num(bottom)}" stroke="#000"/>')
    out.append(f'<line x1="{_num(left)}" y1="{_num(bottom)}" x2="{_num(left)}" y2="{_num(top)}" stroke="#000"/>')
    for value, label in xa.ticks():
        px = xa.pixel(value)
        out.append(f'<line x1="{_num(px)}" y1="{_num(bottom)}" x2="{_num(px)}" y2="{_num(bottom + 5)}" stroke="#000"/>')
        out.append(f'<text x="{_num(px)}" y="{_num(bottom + 18)}" text-anchor="middle" font-size="11">{label}</text>')
    for value, label in ya.ticks():
        py = ya.pixel(value)
        out.append(f'<line x1="{_num(left - 5)}" y1="{_num(py)}" x2="{_num(left)}" y2="{_num(py)}" stroke="#000"/>')
        out.append(f'<text x="{_num(left - 8)}" y="{_num(py + 4)}" text-anchor="end" font-size="11">{label}</text>')
    out.append(f'<text x="{_num((left + right) / 2)}" y="{_num(spec.height - 8)}" text-anchor="middle" '
               f'font-size="13">{escape(spec.x)}</text>')
    return out


def _line_plot(rows, spec):
    left, right, top, bottom = 70.0, spec.width - 190.0, 40.0, spec.height - 50.0
    series = {}
    for row in rows:
        x = _get(row, spec.x)
        if not _usable(x, spec.log_x):
            continue
        key = tuple(_get(row, s) for s in spec.series)
        for yname in spec.y:
            y = _get(row, yname)
            if _usable(y, spec.log_y):
                series.setdefault((key, yname), []).append((x, y))
    if not series:
        raise InvalidArgumentError('no plottable points in the selection')

    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    xa = _Axis(xs, spec.log_x, left, right)
    ya = _Axis(ys, spec.log_y, bottom, top)
    out = _frame(spec, left, right, top, bottom, xa, ya)

    for i, ((key, yname), pts) in enumerate(series.items()):
        pts = sorted(pts)
        color = PALETTE[i % len(PALETTE)]
        label = ' '.join([yname] + [f'{s}={format(v)}' for s, v in zip(spec.series, key)])
        coords = ' '.join(f'{_num(xa.pixel(x))},{_num(ya.pixel(y))}' for x, y in pts)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                   f'data-series={quoteattr(label)} points="{coords}"/>')
        ly = top + 14 * i
        out.append(f'<text x="{_num(right + 12)}" y="{_num(ly + 4)}" font-size="11" fill="{color}">'
                   f'{escape(label)}</text>')
    out.append('</g>')
    out.append('</svg>')
    return '\n'.join(out) + '\n'


def _heat_color(frac):
    frac = min(1.0, max(0.0, frac))
    pos = frac * (len(HEAT_STOPS) - 1)
    i = min(int(pos), len(HEAT_STOPS) - 2)
    w = pos - i
    rgb = [round(a + (b - a) * w) for a, b in zip(HEAT_STOPS[i], HEAT_STOPS[i + 1])]
    return '#{:02x}{:02x}{:02x}'.format(*rgb)


def _edges(centers, axis):
    """Cell boundaries halfway between neighbouring centres (in transformed space)."""
    tv = [axis.transform(c) for c in centers]
    if len(tv) == 1:
        return [tv[0] - 0.5, tv[0] + 0.5]
    mids = [(a + b) / 2 for a, b in zip(tv[:-1], tv[1:])]
    return [tv[0] - (mids[0] - tv[0])] + mids + [tv[-1] + (tv[-1] - mids[-1])]


def _heatmap(rows, spec):
    left, right, top, bottom = 70.0, spec.width - 110.0, 40.0, spec.height - 50.0
    value_name = spec.y[0]
    cells = {}
    for row in rows:
        x, y = _get(row, spec.x), _get(row, spec.series[0] if spec.series else 'psi_p')
        if _usable(x, spec.log_x) and _usable(y, spec.log_y):
            cells[(x, y)] = _get(row, value_name)
    if not cells:
        raise InvalidArgumentError('no plottable cells in the selection')

    xs = sorted({x for x, _ in cells})
    ys = sorted({y for _, y in cells})
    probe_x = _Axis(xs, spec.log_x, left, right)
    probe_y = _Axis(ys, spec.log_y, bottom, top)
    x_edges = _edges(xs, probe_x)
    y_edges = _edges(ys, probe_y)
    inv = (lambda v: 10.0 ** v) if spec.log_x else (lambda v: v)
    inv_y = (lambda v: 10.0 ** v) if spec.log_y else (lambda v: v)
    xa = _Axis([inv(x_edges[0]), inv(x_edges[-1])], spec.log_x, left, right)
    ya = _Axis([inv_y(y_edges[0]), inv_y(y_edges[-1])], spec.log_y, bottom, top)

    finite = [v for v in cells.values() if v is not None and math.isfinite(v) and v > 0]
    lo = math.log10(min(finite)) if finite else 0.0
    hi = math.log10(max(finite)) if finite else 1.0
    span = hi - lo if hi > lo else 1.0

    out = _frame(spec, left, right, top, bottom, xa, ya)
    for (x, y), value in sorted(cells.items()):
        i, j = xs.index(x), ys.index(y)
        x0, x1 = xa.pixel(inv(x_edges[i])), xa.pixel(inv(x_edges[i + 1]))
        y0, y1 = ya.pixel(inv_y(y_edges[j + 1])), ya.pixel(inv_y(y_edges[j]))
        if value is not None and math.isfinite(value) and value > 0:
            fill = _heat_color((math.log10(value) - lo) / span)
        else:
            fill = '#bbbbbb'
        out.append(f'<rect x="{_num(x0)}" y="{_num(y0)}" width="{_num(x1 - x0)}" height="{_num(y1 - y0)}" '
                   f'fill="{fill}" data-value="{format(value)}"/>')

    # psi_p = psi_n diagonal
    lo_d = max(inv(x_edges[0]), inv_y(y_edges[0]))
    hi_d = min(inv(x_edges[-1]), inv_y(y_edges[-1]))
    if lo_d < hi_d:
        out.append(f'<line class="diagonal" x1="{_num(xa.pixel(lo_d))}" y1="{_num(ya.pixel(lo_d))}" '
                   f'x2="{_num(xa.pixel(hi_d))}" y2="{_num(ya.pixel(hi_d))}" stroke="#ffffff" '
                   f'stroke-dasharray="6,4" stroke-width="1.5"/>')
    for k in range(5):
        frac = k / 4
        ly = bottom - frac * (bottom - top)
        out.append(f'<rect x="{_num(right + 20)}" y="{_num(ly - 10)}" width="16" height="10" fill="{_heat_color(frac)}"/>')
        out.append(f'<text x="{_num(right + 42)}" y="{_num(ly - 1)}" font-size="11">{10 ** (lo + frac * span):.3g}</text>')
    out.append('</g>')
    out.append('</svg>')
    return '\n'.join(out) + '\n'


def emit_svg(rows, spec):
    """SVG document (a string) rendering `rows` according to `spec`."""
    rows = list(rows)
    if not rows:
        raise InvalidArgumentError('cannot plot an empty selection')
    if spec.kind == 'heatmap':
        return _heatmap(rows, spec)
    return _line_plot(rows, spec)


def write_svg(path, rows, spec):
    text = emit_svg(rows, spec)
    with open(path, 'w', encoding='utf-8', newline='\n') as fh:
        fh.write(text)
    return path
