"""Static SVG line charts for experiment reports.

Hand-rolled on purpose: the charts are simple (a handful of series over at
most a dozen x positions), the output must be deterministic byte-for-byte,
and a plotting dependency would dwarf the rest of the package. Only the
sweep presets have a natural chart; the verify preset is tabular.
"""

from __future__ import annotations

import math

__all__ = ["render_line_chart", "render_report"]

WIDTH, HEIGHT = 640, 420
MARGIN_LEFT, MARGIN_RIGHT, MARGIN_TOP, MARGIN_BOTTOM = 78, 24, 46, 58
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
TICKS = 5


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def _axis_points(lo: float, hi: float) -> list:
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    return [lo + (hi - lo) * i / (TICKS - 1) for i in range(TICKS)]


def render_line_chart(series, title: str, xlabel: str, ylabel: str, logx: bool = False, logy: bool = False) -> str:
    """Render labeled (xs, ys) series to one self-contained SVG document.

    ``series`` is a sequence of (label, xs, ys) with equal-length positive
    xs/ys when the corresponding axis is logarithmic.
    """
    if not series:
        raise ValueError("nothing to plot: empty series list")

    def tx(v: float) -> float:
        if logx:
            if v <= 0:
                raise ValueError(f"log x-axis needs positive values, got {v}")
            return math.log10(v)
        return float(v)

    def ty(v: float) -> float:
        if logy:
            if v <= 0:
                raise ValueError(f"log y-axis needs positive values, got {v}")
            return math.log10(v)
        return float(v)

    xs_all = [tx(x) for _, xs, _ in series for x in xs]
    ys_all = [ty(y) for _, _, ys in series for y in ys]
    if not xs_all:
        raise ValueError("nothing to plot: series have no points")
    x_lo, x_hi = min(xs_all), max(xs_all)
    y_lo, y_hi = min(ys_all), max(ys_all)
    if x_lo == x_hi:
        x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
    if y_lo == y_hi:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    y_pad = 0.06 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - y_pad, y_hi + y_pad

    plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM

    def px(v: float) -> float:
        return MARGIN_LEFT + plot_w * (v - x_lo) / (x_hi - x_lo)

    def py(v: float) -> float:
        return MARGIN_TOP + plot_h * (1 - (v - y_lo) / (y_hi - y_lo))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="24" text-anchor="middle" font-size="15">{title}</text>',
    ]

    axis_y = MARGIN_TOP + plot_h
    parts.append(
        f'<line x1="{MARGIN_LEFT}" y1="{axis_y}" x2="{MARGIN_LEFT + plot_w}" y2="{axis_y}" stroke="black"/>'
    )
    parts.append(
        f'<line x1="{MARGIN_LEFT}" y1="{MARGIN_TOP}" x2="{MARGIN_LEFT}" y2="{axis_y}" stroke="black"/>'
    )
    for t in _axis_points(x_lo, x_hi):
        x = px(t)
        label = _fmt(10**t) if logx else _fmt(t)
        parts.append(f'<line x1="{x:.1f}" y1="{axis_y}" x2="{x:.1f}" y2="{axis_y + 5}" stroke="black"/>')
        parts.append(f'<text x="{x:.1f}" y="{axis_y + 20}" text-anchor="middle">{label}</text>')
    for t in _axis_points(y_lo, y_hi):
        y = py(t)
        label = _fmt(10**t) if logy else _fmt(t)
        parts.append(f'<line x1="{MARGIN_LEFT - 5}" y1="{y:.1f}" x2="{MARGIN_LEFT}" y2="{y:.1f}" stroke="black"/>')
        parts.append(f'<text x="{MARGIN_LEFT - 9}" y="{y + 4:.1f}" text-anchor="end">{label}</text>')
    parts.append(
        f'<text x="{MARGIN_LEFT + plot_w / 2:.1f}" y="{HEIGHT - 14}" text-anchor="middle">{xlabel}</text>'
    )
    parts.append(
        f'<text x="20" y="{MARGIN_TOP + plot_h / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 20 {MARGIN_TOP + plot_h / 2:.1f})">{ylabel}</text>'
    )

    for idx, (label, xs, ys) in enumerate(series):
        color = PALETTE[idx % len(PALETTE)]
        pts = " ".join(f"{px(tx(x)):.2f},{py(ty(y)):.2f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.8"/>')
        for x, y in zip(xs, ys):
            parts.append(f'<circle cx="{px(tx(x)):.2f}" cy="{py(ty(y)):.2f}" r="3" fill="{color}"/>')
        ly = MARGIN_TOP + 8 + 17 * idx
        lx = MARGIN_LEFT + plot_w - 150
        parts.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 22}" y2="{ly}" stroke="{color}" stroke-width="1.8"/>')
        parts.append(f'<text x="{lx + 28}" y="{ly + 4}">{label}</text>')

    parts.append("</svg>")
    return "\n".join(parts) + "\n"


_CHART_METRICS = {
    "contrastive-sweep": (
        ("clean_sim", "clean similar"),
        ("adv_sim", "adv similar"),
        ("clean_dis", "clean dissimilar"),
        ("adv_dis", "adv dissimilar"),
    ),
    "gamma-sweep": (("gamma1", "gamma1"), ("gamma2", "gamma2")),
    "supervised-sweep": (("clean", "clean"), ("adv", "adversarial"), ("gap", "gap")),
    "downstream-sweep": (("l_clean", "clean"), ("l_adv", "adversarial"), ("gap", "gap")),
}

_CHART_STYLE = {
    "contrastive-sweep": ("contrastive loss vs purification", "features per node m", "loss", False),
    "gamma-sweep": ("leakage statistics vs purification", "features per node m", "mean |B| block average", True),
    "supervised-sweep": ("supervised robustness vs purification", "features per node m", "square loss", False),
    "downstream-sweep": ("downstream robustness vs purification", "features per node m", "square loss", False),
}


def render_report(report) -> str:
    """Chart an ExperimentReport; the verify preset has nothing to chart."""
    preset = report.config.preset
    metrics = _CHART_METRICS.get(preset)
    if metrics is None:
        raise ValueError(f"no chart defined for preset {preset!r}")
    by_metric = {}
    for row in report.rows:
        if row.m is not None:
            by_metric.setdefault(row.metric, []).append((row.m, row.mean))
    series = []
    for metric, label in metrics:
        points = sorted(by_metric.get(metric, []))
        if points:
            series.append((label, [p[0] for p in points], [p[1] for p in points]))
    title, xlabel, ylabel, loglog = _CHART_STYLE[preset]
    return render_line_chart(series, title, xlabel, ylabel, logx=loglog, logy=loglog)
