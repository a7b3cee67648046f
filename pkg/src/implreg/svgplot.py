"""Self-contained SVG charts from run CSVs.

Two styles:

- ``loss-vs-entry``: |free entry| against loss on a descending log
  axis, one polyline per input CSV, with markers colored by iteration
  so the time course stays visible.
- ``sweep``: reconstruction error and estimated rank against the
  observation count, median lines with interquartile bands, built from
  the aggregate rows of a sweep CSV.

Output is plain SVG 1.1 with no external assets.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Sequence

__all__ = ["SchemaError", "emit_plot"]

_WIDTH = 640
_HEIGHT = 420
_MARGIN_L, _MARGIN_R, _MARGIN_T, _MARGIN_B = 64, 20, 34, 48

_SERIES_COLORS = ["#1f6fb2", "#c94f2a", "#3d8c4f", "#7b4fa6", "#b08a1e", "#3a3a3a"]

# five-stop ramp from deep blue to warm yellow for iteration encoding
_RAMP = [(68, 1, 84), (59, 82, 139), (33, 145, 140), (94, 201, 98), (253, 231, 37)]


class SchemaError(ValueError):
    """An input CSV lacks a column the requested style needs."""


def _ramp_color(f: float) -> str:
    f = min(max(f, 0.0), 1.0)
    pos = f * (len(_RAMP) - 1)
    i = min(int(pos), len(_RAMP) - 2)
    w = pos - i
    rgb = [round(a + (b - a) * w) for a, b in zip(_RAMP[i], _RAMP[i + 1])]
    return f"#{rgb[0]:02x}{rgb[1]:02x}{rgb[2]:02x}"


def _read_rows(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _require(rows: list[dict[str, str]], cols: Sequence[str], path) -> None:
    have = set(rows[0].keys()) if rows else set()
    if rows:
        for c in cols:
            if c not in have:
                raise SchemaError(f"missing column '{c}' in {path}")


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


class _Canvas:
    def __init__(self, width=_WIDTH, height=_HEIGHT):
        self.width = width
        self.height = height
        self.parts: list[str] = []

    def line(self, x1, y1, x2, y2, color="#444", width=1.0):
        self.parts.append(
            f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" '
            f'stroke="{color}" stroke-width="{width}"/>'
        )

    def polyline(self, pts, color, width=1.4, opacity=1.0):
        coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
        self.parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="{width}" '
            f'stroke-opacity="{opacity}" points="{coords}"/>'
        )

    def polygon(self, pts, color, opacity=0.18):
        coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
        self.parts.append(f'<polygon fill="{color}" fill-opacity="{opacity}" stroke="none" points="{coords}"/>')

    def circle(self, x, y, r, color):
        self.parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{r:.2f}" fill="{color}"/>')

    def text(self, x, y, s, size=11, anchor="start", color="#222", rotate=None):
        extra = f' transform="rotate({rotate} {x:.2f} {y:.2f})"' if rotate is not None else ""
        self.parts.append(
            f'<text x="{x:.2f}" y="{y:.2f}" font-size="{size}" font-family="sans-serif" '
            f'text-anchor="{anchor}" fill="{color}"{extra}>{_esc(s)}</text>'
        )

    def render(self) -> str:
        body = "\n".join(self.parts)
        return (
            f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
            f'width="{self.width}" height="{self.height}" '
            f'viewBox="0 0 {self.width} {self.height}">\n'
            f'<rect width="{self.width}" height="{self.height}" fill="white"/>\n'
            f"{body}\n</svg>\n"
        )


class _Axes:
    """Maps data coordinates onto one plot panel."""

    def __init__(self, x0, y0, x1, y1, xlim, ylim, xlog=False, ylog=False, xflip=False):
        self.x0, self.y0, self.x1, self.y1 = x0, y0, x1, y1
        self.xlog, self.ylog, self.xflip = xlog, ylog, xflip
        self.xa, self.xb = self._pad(*xlim, xlog)
        self.ya, self.yb = self._pad(*ylim, ylog)

    @staticmethod
    def _pad(lo, hi, log):
        if log:
            lo, hi = math.log10(lo), math.log10(hi)
        if lo == hi:
            lo, hi = lo - 1.0, hi + 1.0
        span = hi - lo
        return lo - 0.04 * span, hi + 0.04 * span

    def x(self, v) -> float:
        t = (math.log10(v) if self.xlog else v)
        f = (t - self.xa) / (self.xb - self.xa)
        if self.xflip:
            f = 1.0 - f
        return self.x0 + f * (self.x1 - self.x0)

    def y(self, v) -> float:
        t = (math.log10(v) if self.ylog else v)
        f = (t - self.ya) / (self.yb - self.ya)
        return self.y1 - f * (self.y1 - self.y0)

    def frame(self, canvas: _Canvas, xlabel: str, ylabel: str):
        canvas.line(self.x0, self.y1, self.x1, self.y1)
        canvas.line(self.x0, self.y0, self.x0, self.y1)
        canvas.text((self.x0 + self.x1) / 2, self.y1 + 34, xlabel, anchor="middle")
        canvas.text(self.x0 - 44, (self.y0 + self.y1) / 2, ylabel, anchor="middle", rotate=-90)

    def xticks_log(self, canvas: _Canvas):
        for k in range(math.ceil(self.xa), math.floor(self.xb) + 1):
            px = self.x(10.0**k)
            canvas.line(px, self.y1, px, self.y1 + 4)
            canvas.text(px, self.y1 + 16, f"1e{k}", anchor="middle", size=10)

    def xticks_linear(self, canvas: _Canvas, n=6):
        for i in range(n):
            v = self.xa + (self.xb - self.xa) * i / (n - 1)
            px = self.x(v)
            canvas.line(px, self.y1, px, self.y1 + 4)
            canvas.text(px, self.y1 + 16, f"{v:g}" if abs(v) < 1e4 else f"{v:.1e}", anchor="middle", size=10)

    def yticks(self, canvas: _Canvas, n=6):
        if self.ylog:
            for k in range(math.ceil(self.ya), math.floor(self.yb) + 1):
                py = self.y(10.0**k)
                canvas.line(self.x0 - 4, py, self.x0, py)
                canvas.text(self.x0 - 7, py + 4, f"1e{k}", anchor="end", size=10)
        else:
            for i in range(n):
                v = self.ya + (self.yb - self.ya) * i / (n - 1)
                py = self.y(v)
                canvas.line(self.x0 - 4, py, self.x0, py)
                canvas.text(self.x0 - 7, py + 4, f"{v:.3g}", anchor="end", size=10)


def _decimate(seq, cap):
    if len(seq) <= cap:
        return list(seq)
    step = len(seq) / cap
    return [seq[min(int(i * step), len(seq) - 1)] for i in range(cap)] + [seq[-1]]


def _plot_loss_vs_entry(csv_paths, out_path, title):
    canvas = _Canvas()
    runs = []
    for p in csv_paths:
        rows = _read_rows(p)
        _require(rows, ["iter", "loss", "w11"], p)
        pts = [(float(r["loss"]), abs(float(r["w11"])), float(r["iter"])) for r in rows]
        pts = [pt for pt in pts if pt[0] > 0]
        runs.append((Path(p).stem, pts))

    all_pts = [pt for _, pts in runs for pt in pts]
    if all_pts:
        xlim = (min(p[0] for p in all_pts), max(p[0] for p in all_pts))
        ylim = (0.0, max(p[1] for p in all_pts))
    else:
        xlim, ylim = (1e-4, 1.0), (0.0, 1.0)
    ax = _Axes(_MARGIN_L, _MARGIN_T, _WIDTH - _MARGIN_R, _HEIGHT - _MARGIN_B, xlim, ylim, xlog=True, xflip=True)
    ax.frame(canvas, "loss (log, descending)", "|unobserved entry|")
    ax.xticks_log(canvas)
    ax.yticks(canvas)
    if title:
        canvas.text(_WIDTH / 2, 20, title, anchor="middle", size=13)

    for k, (label, pts) in enumerate(runs):
        color = _SERIES_COLORS[k % len(_SERIES_COLORS)]
        if pts:
            path_pts = _decimate([(ax.x(lo), ax.y(w)) for lo, w, _ in pts], 1500)
            canvas.polyline(path_pts, color)
            max_it = max(pt[2] for pt in pts) or 1.0
            for lo, w, it in _decimate(pts, 120):
                canvas.circle(ax.x(lo), ax.y(w), 2.0, _ramp_color(it / max_it))
        canvas.text(_WIDTH - _MARGIN_R - 6, _MARGIN_T + 14 + 14 * k, label, anchor="end", color=color, size=10)

    Path(out_path).write_text(canvas.render())


def _series_key(row):
    return (row.get("method", ""), row.get("init_std", ""))


def _plot_sweep(csv_paths, out_path, title):
    rows = []
    for p in csv_paths:
        rs = _read_rows(p)
        _require(rs, ["row", "method", "n_obs", "init_std", "recon_error", "est_rank"], p)
        rows.extend(rs)
    agg = [r for r in rows if r["row"] == "median_iqr"]

    canvas = _Canvas(width=_WIDTH + 320, height=_HEIGHT)
    mid = canvas.width // 2
    panels = []
    for (x0, x1, field, qlo, qhi, ylabel, ylog) in (
        (_MARGIN_L, mid - 24, "recon_error", "recon_error_q25", "recon_error_q75", "reconstruction error", True),
        (mid + _MARGIN_L, canvas.width - _MARGIN_R, "est_rank", "est_rank_q25", "est_rank_q75", "estimated rank", False),
    ):
        vals = [float(r[field]) for r in agg if r[field] != ""]
        his = [float(r[qhi]) for r in agg if r.get(qhi, "") != ""]
        los = [float(r[qlo]) for r in agg if r.get(qlo, "") != ""]
        xs = [float(r["n_obs"]) for r in agg]
        if not xs:
            xs, vals = [0.0, 1.0], [1.0]
        ylo = min(los + vals) if vals else 0.1
        yhi = max(his + vals) if vals else 1.0
        if ylog:
            ylo = max(ylo, 1e-8)
            yhi = max(yhi, ylo * 10)
        ax = _Axes(x0, _MARGIN_T, x1, _HEIGHT - _MARGIN_B, (min(xs), max(xs)), (ylo, yhi), ylog=ylog)
        ax.frame(canvas, "observations", ylabel)
        ax.xticks_linear(canvas)
        ax.yticks(canvas)
        panels.append((ax, field, qlo, qhi, ylog))

    series = sorted({_series_key(r) for r in agg})
    for k, key in enumerate(series):
        color = _SERIES_COLORS[k % len(_SERIES_COLORS)]
        srows = sorted((r for r in agg if _series_key(r) == key), key=lambda r: float(r["n_obs"]))
        for ax, field, qlo, qhi, ylog in panels:
            pts = [(float(r["n_obs"]), float(r[field])) for r in srows if r[field] != ""]
            band = [
                (float(r["n_obs"]), float(r[qlo]), float(r[qhi]))
                for r in srows
                if r.get(qlo, "") != "" and r.get(qhi, "") != ""
            ]
            floor = 1e-8 if ylog else -math.inf
            if band:
                upper = [(ax.x(x), ax.y(max(hi, floor) if ylog else hi)) for x, _, hi in band]
                lower = [(ax.x(x), ax.y(max(lo, floor) if ylog else lo)) for x, lo, _ in reversed(band)]
                canvas.polygon(upper + lower, color)
            if pts:
                canvas.polyline([(ax.x(x), ax.y(max(v, floor) if ylog else v)) for x, v in pts], color, width=1.6)
                for x, v in pts:
                    canvas.circle(ax.x(x), ax.y(max(v, floor) if ylog else v), 2.4, color)
        label = " ".join(s for s in key if s)
        canvas.text(mid - 30, _MARGIN_T + 14 + 14 * k, label or "series", anchor="end", color=color, size=10)
    if title:
        canvas.text(canvas.width / 2, 20, title, anchor="middle", size=13)
    Path(out_path).write_text(canvas.render())


def emit_plot(csv_paths: Sequence[str | Path], style: str, out_path: str | Path, title: str | None = None) -> Path:
    """Render the named style from one or more CSVs to ``out_path``.

    Raises :class:`SchemaError` if an input lacks a required column.
    An empty trajectory still yields a valid SVG with axes.
    """
    if style == "loss-vs-entry":
        _plot_loss_vs_entry([str(p) for p in csv_paths], out_path, title)
    elif style == "sweep":
        _plot_sweep([str(p) for p in csv_paths], out_path, title)
    else:
        raise ValueError(f"unknown plot style {style!r}")
    return Path(out_path)
