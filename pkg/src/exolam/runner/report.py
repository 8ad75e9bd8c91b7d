"""Figure-level trend tables and small SVG line plots.

Each figure id maps to a function that turns the run rows of a store into
tidy records ``(series, x, metric, mean, stderr, n)``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from html import escape

import numpy as np

from ..evaluation import mean_stderr
from .store import fmt

FIGURES = ("fig2c", "fig3r", "fig4a", "fig4b", "fig5b")
P_GRID = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
ALPHA_GRID = (0.0, 0.25, 0.5, 1.0)
SIGMA_GRID = (0.0, 0.25, 0.5, 1.0)
AUX_VARIANTS = ("xexo", "action", "q")
TIDY_COLUMNS = ["figure", "series", "x", "metric", "mean", "stderr", "n"]


class MissingData(LookupError):
    def __init__(self, figure: str, missing):
        self.missing = list(missing)
        pairs = ", ".join(f"({a}={v})" for a, v in self.missing) or "(no rows)"
        super().__init__(f"{figure}: missing sweep coverage {pairs}")


@dataclass
class Point:
    series: str
    x: float | str
    metric: str
    mean: float
    stderr: float
    n: int


def _ok(rows, **match):
    out = []
    for r in rows:
        if r.get("status") != "ok":
            continue
        if all(_eq(r.get(k), v) for k, v in match.items()):
            out.append(r)
    return out


def _eq(a, b):
    if isinstance(b, float) or isinstance(a, float):
        return a is not None and b is not None and math.isclose(float(a), float(b), abs_tol=1e-12)
    return a == b


def _stat(rows, metric):
    vals = [r[metric] for r in sorted(rows, key=lambda r: int(r["seed"])) if r.get(metric) is not None]
    if not vals:
        return None
    m, se = mean_stderr(vals)
    return m, se, len(vals)


def _require(figure, rows, axis, values, **match):
    missing = [(axis, v) for v in values if not _ok(rows, **{axis: v}, **match)]
    if missing:
        raise MissingData(figure, missing)


def fig2c(rows):
    base = _ok(rows, kind="linear", variant="baseline", alpha=0.5)
    _require("fig2c", base, "p_switch", P_GRID)
    pts = []
    for metric in ("action_nmse", "var_xi_prime"):
        for p in P_GRID:
            m, se, n = _stat(_ok(base, p_switch=p), metric)
            pts.append(Point(metric, p, metric, m, se, n))
    return pts


def fig3r(rows):
    base = _ok(rows, kind="linear", variant="baseline")
    pts = []
    for p in (0.1, 0.3):
        _require("fig3r", base, "alpha", ALPHA_GRID, p_switch=p)
        for a in ALPHA_GRID:
            m, se, n = _stat(_ok(base, p_switch=p, alpha=a), "action_nmse")
            pts.append(Point(f"p_switch={p}", a, "action_nmse", m, se, n))
    return pts


def _delta(aux_rows, base_rows, metric):
    a, b = _stat(aux_rows, metric), _stat(base_rows, metric)
    if a is None or b is None:
        return None
    return a[0] - b[0], math.sqrt(a[1] ** 2 + b[1] ** 2), min(a[2], b[2])


def fig4a(rows):
    """NMSE(aux) - NMSE(baseline) at each swept (p_switch, alpha) point;
    the error is the pooled standard error sqrt(se_aux^2 + se_base^2)."""
    lin = _ok(rows, kind="linear")
    points = sorted({(r["p_switch"], r["alpha"]) for r in lin if r["variant"] in AUX_VARIANTS})
    if not points:
        raise MissingData("fig4a", [("variant", v) for v in AUX_VARIANTS])
    missing = []
    pts = []
    for p, a in points:
        base = _ok(lin, variant="baseline", p_switch=p, alpha=a)
        if not base:
            missing.append(("baseline", f"p_switch={p},alpha={a}"))
            continue
        for v in AUX_VARIANTS:
            aux = _ok(lin, variant=v, p_switch=p, alpha=a)
            if not aux:
                missing.append((v, f"p_switch={p},alpha={a}"))
                continue
            d, se, n = _delta(aux, base, "action_nmse")
            pts.append(Point(v, f"p={p},a={a}", "delta_action_nmse", d, se, n))
    if missing:
        raise MissingData("fig4a", missing)
    return pts


def fig4b(rows):
    lin = _ok(rows, kind="linear", p_switch=0.3, alpha=0.5)
    pts = []
    missing = []
    for v in ("baseline", "action", "q"):
        st = _stat(_ok(lin, variant=v), "var_xi_pair")
        if st is None:
            if v != "q":
                missing.append(("variant", v))
            continue
        pts.append(Point("var_xi_pair", v, "var_xi_pair", *st))
    if missing:
        raise MissingData("fig4b", missing)
    return pts


def fig5b(rows):
    grid = _ok(rows, kind="grid")
    sigmas = sorted({r["sigma"] for r in grid})
    if not sigmas:
        raise MissingData("fig5b", [("sigma", s) for s in SIGMA_GRID])
    missing = [(f"{v}/sigma", s) for v in ("vanilla", "xexo", "robust") for s in sigmas
               if not _ok(grid, variant=v, sigma=s)]
    if missing:
        raise MissingData("fig5b", missing)
    pts = []
    for metric in ("consistency_loss", "exo_region_mse", "recon_mse"):
        for v in ("vanilla", "xexo", "robust"):
            for s in sigmas:
                st = _stat(_ok(grid, variant=v, sigma=s), metric)
                pts.append(Point(f"{v}:{metric}", s, metric, *st))
    return pts


BUILDERS = {"fig2c": fig2c, "fig3r": fig3r, "fig4a": fig4a, "fig4b": fig4b, "fig5b": fig5b}


def build(figure: str, rows) -> list[Point]:
    if figure not in BUILDERS:
        raise KeyError(f"unknown figure {figure!r}; choose from {', '.join(FIGURES)}")
    if not rows:
        raise MissingData(figure, [])
    return BUILDERS[figure](rows)


def tidy_csv(figure: str, points: list[Point]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TIDY_COLUMNS)
    for p in points:
        w.writerow([figure, p.series, fmt(p.x), p.metric, fmt(p.mean), fmt(p.stderr), p.n])
    return buf.getvalue()


# ---------------------------------------------------------------- SVG

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf",
           "#7f7f7f", "#bcbd22")


def svg_plot(points: list[Point], title: str, width: int = 640, height: int = 400) -> str:
    """Line plot with error bars, one line per series, one panel per metric."""
    metrics = list(dict.fromkeys(p.metric for p in points))
    panel_h = (height - 40) / max(len(metrics), 1)
    xs_all = list(dict.fromkeys(p.x for p in points))
    numeric = all(isinstance(x, (int, float)) for x in xs_all)
    if numeric:
        lo, hi = min(xs_all), max(xs_all)
        xpos = {x: (x - lo) / (hi - lo) if hi > lo else 0.5 for x in xs_all}
    else:
        xpos = {x: (i + 0.5) / len(xs_all) for i, x in enumerate(xs_all)}
    left, right = 70, width - 150
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'font-family="sans-serif" font-size="11">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>']
    for k, metric in enumerate(metrics):
        top = 30 + k * panel_h
        bottom = top + panel_h - 30
        pm = [p for p in points if p.metric == metric]
        ys = [v for p in pm for v in (p.mean - p.stderr, p.mean + p.stderr)]
        ylo, yhi = min(ys + [0.0]), max(ys + [0.0])
        if yhi - ylo < 1e-12:
            yhi = ylo + 1.0

        def X(x):
            return left + xpos[x] * (right - left)

        def Y(y):
            return bottom - (y - ylo) / (yhi - ylo) * (bottom - top)

        parts.append(f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>')
        parts.append(f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>')
        if ylo < 0 < yhi:
            parts.append(f'<line x1="{left}" y1="{Y(0):.1f}" x2="{right}" y2="{Y(0):.1f}" '
                         f'stroke="#999" stroke-dasharray="3,3"/>')
        for v in (ylo, yhi):
            parts.append(f'<text x="{left - 4}" y="{Y(v) + 4:.1f}" text-anchor="end">{v:.3g}</text>')
        for x in xs_all:
            label = f"{x:g}" if isinstance(x, (int, float)) else str(x)
            parts.append(f'<text x="{X(x):.1f}" y="{bottom + 14}" text-anchor="middle">{escape(label)}</text>')
        parts.append(f'<text x="{left - 55}" y="{(top + bottom) / 2:.1f}" '
                     f'transform="rotate(-90 {left - 55} {(top + bottom) / 2:.1f})" '
                     f'text-anchor="middle">{escape(metric)}</text>')
        for j, series in enumerate(dict.fromkeys(p.series for p in pm)):
            color = _COLORS[j % len(_COLORS)]
            sp = [p for p in pm if p.series == series]
            path = " ".join(f"{X(p.x):.1f},{Y(p.mean):.1f}" for p in sp)
            parts.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>')
            for p in sp:
                x = X(p.x)
                parts.append(f'<line x1="{x:.1f}" y1="{Y(p.mean - p.stderr):.1f}" x2="{x:.1f}" '
                             f'y2="{Y(p.mean + p.stderr):.1f}" stroke="{color}"/>')
                parts.append(f'<circle cx="{x:.1f}" cy="{Y(p.mean):.1f}" r="2.5" fill="{color}"/>')
            ly = top + 12 * j
            parts.append(f'<rect x="{right + 10}" y="{ly}" width="10" height="3" fill="{color}"/>')
            parts.append(f'<text x="{right + 24}" y="{ly + 5}">{escape(series)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def series(points: list[Point], name: str) -> list[float]:
    """Means of one series in x order (helper for trend checks)."""
    return [p.mean for p in points if p.series == name]


def spearman(x, y) -> float:
    from scipy.stats import spearmanr
    r = spearmanr(np.asarray(x, dtype=float), np.asarray(y, dtype=float)).statistic
    return float(r)
