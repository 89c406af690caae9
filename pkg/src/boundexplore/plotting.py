"""Percentile-band figures: a matplotlib PNG and a standalone gnuplot script."""

from __future__ import annotations

import io
from math import sqrt

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

GOLDEN = (sqrt(5.0) - 1.0) / 2.0

STYLE = {
    "axes.labelsize": 10,
    "axes.titlesize": 10,
    "font.size": 10,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.4,
    "savefig.dpi": 150,
}

COLORS = ("#1b6ca8", "#d1495b", "#2e8b57", "#edae49", "#66459b", "#555555")


def figure_size(width_in: float = 5.5, ratio: float = GOLDEN) -> tuple[float, float]:
    return width_in, width_in * ratio


def _by_variant(rows):
    series = {}
    for episode, variant, p05, p50, p95 in rows:
        series.setdefault(variant, []).append((episode, p05, p50, p95))
    return series


def render_png(rows, ylabel: str = "evaluation return", title: str | None = None) -> bytes:
    """PNG bytes: median line with a shaded 5-95 percentile band per variant."""
    buf = io.BytesIO()
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figure_size())
        for k, (variant, pts) in enumerate(_by_variant(rows).items()):
            pts.sort()
            ep = [p[0] for p in pts]
            color = COLORS[k % len(COLORS)]
            ax.fill_between(ep, [p[1] for p in pts], [p[3] for p in pts], color=color, alpha=0.2, lw=0)
            ax.plot(ep, [p[2] for p in pts], color=color, label=variant)
        ax.set_xlabel("episode")
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        ax.legend(loc="best")
        fig.tight_layout()
        fig.savefig(buf, format="png")
        plt.close(fig)
    return buf.getvalue()


def gnuplot_script(csv_name: str, variants, ylabel: str = "evaluation return", output: str = "plot.svg") -> str:
    lines = [
        "# percentile bands: run with `gnuplot plot.gp`",
        "set datafile separator ','",
        "set key bottom right",
        "set xlabel 'episode'",
        f"set ylabel '{ylabel}'",
        "set style fill transparent solid 0.2 noborder",
        "set terminal svg size 800,500",
        f"set output '{output}'",
    ]
    parts = []
    for k, variant in enumerate(variants):
        color = COLORS[k % len(COLORS)]
        sel = f"(strcol(2) eq '{variant}' ? $1 : NaN)"
        parts.append(f"'{csv_name}' skip 1 using {sel}:3:5 with filledcurves lc rgb '{color}' notitle")
        parts.append(f"'{csv_name}' skip 1 using {sel}:4 with lines lw 2 lc rgb '{color}' title '{variant}'")
    lines.append("plot " + ", \\\n     ".join(parts))
    return "\n".join(lines) + "\n"
