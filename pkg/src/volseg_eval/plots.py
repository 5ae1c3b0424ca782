"""Boxplot rendering for the report outputs.

Two renderers with different jobs:

* `boxplot_svg` writes a dependency-free SVG whose box/whisker geometry is
  an exact affine image of the summary statistics, so plotted coordinates
  can be recomputed and checked. Outliers are listed in the CSV outputs but
  deliberately not drawn.
* `save_boxplot_figure` renders conventional matplotlib figures (PNG) from
  raw per-case values for the human-facing report directory.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from .stats import SubgroupSummary

SVG_WIDTH = 640
SVG_HEIGHT = 420
MARGIN_LEFT = 70.0
MARGIN_RIGHT = 20.0
MARGIN_TOP = 40.0
MARGIN_BOTTOM = 60.0
BOX_FRACTION = 0.5  # box width as a fraction of the per-group slot

_AXIS_STYLE = 'stroke="#333333" stroke-width="1"'
_BOX_STYLE = 'fill="#7fb3d5" stroke="#1f4e79" stroke-width="1.5"'
_MEDIAN_STYLE = 'stroke="#1f4e79" stroke-width="2.5"'
_WHISKER_STYLE = 'stroke="#1f4e79" stroke-width="1.5"'


def _fmt(v: float) -> str:
    return f"{v:.3f}"


@dataclass(frozen=True)
class ValueAxis:
    """Affine map from data values to SVG y pixels (y grows downward)."""

    vmin: float
    vmax: float
    top: float = MARGIN_TOP
    height: float = SVG_HEIGHT - MARGIN_TOP - MARGIN_BOTTOM

    def y(self, value: float) -> float:
        span = self.vmax - self.vmin
        if span == 0:
            return self.top + self.height / 2
        return self.top + (self.vmax - value) / span * self.height


def axis_for(summaries: Sequence[SubgroupSummary]) -> ValueAxis:
    """Value axis covering every whisker with 5% padding on both sides."""
    lo = min(s.whisker_lo for s in summaries)
    hi = max(s.whisker_hi for s in summaries)
    pad = 0.05 * (hi - lo) if hi > lo else 0.5
    return ValueAxis(vmin=lo - pad, vmax=hi + pad)


def group_center_x(index: int, n_groups: int) -> float:
    plot_width = SVG_WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    slot = plot_width / n_groups
    return MARGIN_LEFT + slot * (index + 0.5)


def boxplot_svg(summaries: Sequence[SubgroupSummary], title: str, value_label: str) -> str:
    """Render one box per summary: median line, quartile box, 1.5 IQR whiskers.

    Outliers are omitted from the drawing (they remain available in the
    CSV); whiskers end at the summary's whisker bounds.
    """
    if not summaries:
        raise ValueError("no summaries to plot")
    axis = axis_for(summaries)
    n = len(summaries)
    plot_width = SVG_WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    slot = plot_width / n
    box_half = slot * BOX_FRACTION / 2
    bottom = MARGIN_TOP + axis.height

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" '
        f'viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}" font-family="Helvetica,Arial,sans-serif">',
        f'<rect width="{SVG_WIDTH}" height="{SVG_HEIGHT}" fill="white"/>',
        f'<text x="{_fmt(SVG_WIDTH / 2)}" y="22" text-anchor="middle" font-size="15">{_escape(title)}</text>',
        f'<line x1="{_fmt(MARGIN_LEFT)}" y1="{_fmt(MARGIN_TOP)}" x2="{_fmt(MARGIN_LEFT)}" y2="{_fmt(bottom)}" {_AXIS_STYLE}/>',
        f'<line x1="{_fmt(MARGIN_LEFT)}" y1="{_fmt(bottom)}" x2="{_fmt(SVG_WIDTH - MARGIN_RIGHT)}" y2="{_fmt(bottom)}" {_AXIS_STYLE}/>',
        f'<text x="16" y="{_fmt(MARGIN_TOP + axis.height / 2)}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 16 {_fmt(MARGIN_TOP + axis.height / 2)})">{_escape(value_label)}</text>',
    ]

    for i in range(5):  # y tick labels
        value = axis.vmin + (axis.vmax - axis.vmin) * i / 4
        y = axis.y(value)
        parts.append(
            f'<line x1="{_fmt(MARGIN_LEFT - 4)}" y1="{_fmt(y)}" x2="{_fmt(MARGIN_LEFT)}" y2="{_fmt(y)}" {_AXIS_STYLE}/>'
        )
        parts.append(
            f'<text x="{_fmt(MARGIN_LEFT - 8)}" y="{_fmt(y + 4)}" text-anchor="end" font-size="11">{value:.3g}</text>'
        )

    for i, s in enumerate(summaries):
        cx = group_center_x(i, n)
        x0, x1 = cx - box_half, cx + box_half
        y_q1, y_q3 = axis.y(s.q1), axis.y(s.q3)
        y_med = axis.y(s.median)
        y_lo, y_hi = axis.y(s.whisker_lo), axis.y(s.whisker_hi)
        parts += [
            f'<line x1="{_fmt(cx)}" y1="{_fmt(y_hi)}" x2="{_fmt(cx)}" y2="{_fmt(y_q3)}" {_WHISKER_STYLE}/>',
            f'<line x1="{_fmt(cx)}" y1="{_fmt(y_q1)}" x2="{_fmt(cx)}" y2="{_fmt(y_lo)}" {_WHISKER_STYLE}/>',
            f'<line x1="{_fmt(cx - box_half / 2)}" y1="{_fmt(y_hi)}" x2="{_fmt(cx + box_half / 2)}" y2="{_fmt(y_hi)}" {_WHISKER_STYLE}/>',
            f'<line x1="{_fmt(cx - box_half / 2)}" y1="{_fmt(y_lo)}" x2="{_fmt(cx + box_half / 2)}" y2="{_fmt(y_lo)}" {_WHISKER_STYLE}/>',
            f'<rect x="{_fmt(x0)}" y="{_fmt(y_q3)}" width="{_fmt(x1 - x0)}" height="{_fmt(y_q1 - y_q3)}" {_BOX_STYLE}/>',
            f'<line x1="{_fmt(x0)}" y1="{_fmt(y_med)}" x2="{_fmt(x1)}" y2="{_fmt(y_med)}" {_MEDIAN_STYLE}/>',
            f'<text x="{_fmt(cx)}" y="{_fmt(bottom + 18)}" text-anchor="middle" font-size="12">{_escape(s.group)}</text>',
            f'<text x="{_fmt(cx)}" y="{_fmt(bottom + 34)}" text-anchor="middle" font-size="10">n={s.n}</text>',
        ]
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _escape(text: str) -> str:
    return (
        str(text)
        .replace("&", "&amp;")
        .replace("<", "&lt;")
        .replace(">", "&gt;")
        .replace('"', "&quot;")
    )


def write_boxplot_svg(path, summaries: Sequence[SubgroupSummary], title: str, value_label: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(boxplot_svg(summaries, title, value_label))


# ---------------------------------------------------------------------------
# matplotlib report figures
# ---------------------------------------------------------------------------


def save_boxplot_figure(
    path,
    values_by_group: Mapping[str, Sequence[float]],
    title: str,
    value_label: str,
) -> None:
    """Write a PNG boxplot of raw values per group, outliers hidden.

    Uses the Agg backend; output bytes depend only on the input data, which
    keeps report directories diffable across runs.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    groups = [g for g, v in values_by_group.items() if len(v) > 0]
    data = [list(values_by_group[g]) for g in groups]
    if not groups:
        raise ValueError("no defined values to plot")

    fig, ax = plt.subplots(figsize=(max(4.0, 1.6 * len(groups)), 4.2), dpi=110)
    ax.boxplot(data, tick_labels=groups, showfliers=False, whis=1.5)
    ax.set_title(title)
    ax.set_ylabel(value_label)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": "volseg-eval"})
    plt.close(fig)
