"""Analysis artifacts: mixing-weight strips, sweep heatmaps, ratio curves,
and summary tables, written as self-contained SVG next to the CSV dumps.

Rendering rules shared by every emitter here:

* numeric text inside graphics uses 6 significant digits (`fmt6`), so a value
  shown in an SVG can be parsed back and compared against the full-precision
  CSV value it came from;
* output is deterministic: no timestamps, no generated ids, and element order
  is a pure function of the input;
* files are written atomically.
"""

from __future__ import annotations

from typing import Mapping, Sequence

from . import bench as B
from . import model as M
from . import soup as S
from .ioutil import atomic_write_text, fmt6

DOMINANT_COLOR = "#57bb72"    # first base holds more than half the share
RECESSIVE_COLOR = "#e06c5a"   # half or less, ties included
DOMINANT_BAR = "#1e6f38"
RECESSIVE_BAR = "#8f2d1d"
FAILED_COLOR = "#bdbdbd"
HEAT_LOW = (240, 247, 241)
HEAT_HIGH = (46, 139, 87)
CURVE_COLOR = "#2e8b57"
BASE1_COLOR = "#1f6fb2"
BASE2_COLOR = "#d0472f"
GRID_STROKE = "#555555"
TEXT_COLOR = "#111111"


def _esc(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _num(x: float) -> str:
    """Coordinate formatting for SVG attributes."""
    return f"{float(x):.2f}"


def _svg(width: float, height: float, parts: Sequence[str]) -> str:
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_num(width)}" '
        f'height="{_num(height)}" viewBox="0 0 {_num(width)} {_num(height)}" '
        f'font-family="monospace">'
    )
    return "\n".join([head, *parts, "</svg>"]) + "\n"


def _rect(x, y, w, h, fill: str, stroke: str = GRID_STROKE) -> str:
    return (
        f'<rect x="{_num(x)}" y="{_num(y)}" width="{_num(w)}" height="{_num(h)}" '
        f'fill="{fill}" stroke="{stroke}" stroke-width="1"/>'
    )


def _text(x, y, s: str, anchor: str = "middle", size: int = 11, fill: str = TEXT_COLOR) -> str:
    return (
        f'<text x="{_num(x)}" y="{_num(y)}" text-anchor="{anchor}" '
        f'font-size="{size}" fill="{fill}">{_esc(s)}</text>'
    )


def _line(x1, y1, x2, y2, stroke: str, width: float = 2.0) -> str:
    return (
        f'<line x1="{_num(x1)}" y1="{_num(y1)}" x2="{_num(x2)}" y2="{_num(y2)}" '
        f'stroke="{stroke}" stroke-width="{_num(width)}"/>'
    )


def _ramp_color(t: float) -> str:
    channels = [round(lo + (hi - lo) * t) for lo, hi in zip(HEAT_LOW, HEAT_HIGH)]
    return "#{:02x}{:02x}{:02x}".format(*channels)


# ---------------------------------------------------------------------------
# mixing-weight dump and strip


def dump_alpha(alpha_set: S.AlphaSet, path: str) -> None:
    """One CSV row per unit; the loader restores the set exactly."""
    S.save_alpha_csv(alpha_set, path)


def alpha_strip_svg(alpha_sets: Mapping[str, S.AlphaSet], kind: str, path: str) -> None:
    """Dominance strip for one unit kind: runs as rows, layers as columns.

    A cell is green when the first base model holds strictly more than half
    the share and red otherwise. The printed number is alpha1 at 6 significant
    digits, and the small bar along the cell bottom shows the same share
    clipped to the unit interval.
    """
    if kind not in M.UNIT_KINDS:
        raise ValueError(f"unknown unit kind {kind!r}")
    if not alpha_sets:
        raise ValueError("no alpha sets to render")
    names = list(alpha_sets)
    layouts = {name: frozenset(alpha_sets[name].raw) for name in names}
    reference = layouts[names[0]]
    for name in names[1:]:
        if layouts[name] != reference:
            raise ValueError(f"mixed configs: run {name!r} has a different unit layout")
    columns = sorted(
        {unit.layer for unit in reference if unit.kind == kind},
        key=lambda layer: -1 if layer is None else layer,
    )
    if not columns:
        raise ValueError(f"no units of kind {kind!r} in the alpha sets")

    cell_w, cell_h = 86.0, 34.0
    left, top = 150.0, 40.0
    width = left + cell_w * len(columns) + 20.0
    height = top + cell_h * len(names) + 16.0
    parts = [_text(12, 24, kind, anchor="start", size=13)]
    for c, layer in enumerate(columns):
        label = "global" if layer is None else str(layer)
        parts.append(_text(left + cell_w * (c + 0.5), top - 10, label))
    for r, name in enumerate(names):
        y = top + cell_h * r
        parts.append(_text(left - 10, y + cell_h / 2 + 4, name, anchor="end"))
        pairs = alpha_sets[name].pairs()
        for c, layer in enumerate(columns):
            unit = M.SoupUnitId(kind=kind, layer=layer)
            alpha1 = pairs[unit][0]
            dominant = alpha1 > 0.5
            x = left + cell_w * c
            parts.append(_rect(x, y, cell_w, cell_h, DOMINANT_COLOR if dominant else RECESSIVE_COLOR))
            share = min(max(alpha1, 0.0), 1.0)
            if share > 0.0:
                parts.append(
                    _rect(x, y + cell_h - 5, cell_w * share, 5,
                          DOMINANT_BAR if dominant else RECESSIVE_BAR, stroke="none")
                )
            parts.append(_text(x + cell_w / 2, y + cell_h / 2 + 4, fmt6(alpha1)))
    atomic_write_text(path, _svg(width, height, parts))


# ---------------------------------------------------------------------------
# sweep heatmap


def grid_heatmap_svg(records: Sequence[B.SweepRecord], eval_set: str, path: str) -> None:
    """Exact-match heatmap over the epochs and learning-rate axes.

    Cell color ramps linearly from the grid minimum to the grid maximum; a
    constant grid sits at the midpoint of the ramp. Grid points without a
    usable value are drawn gray and labeled "failed". Records must have been
    filtered down to one per (epochs, lr) cell beforehand.
    """
    grid_records = [r for r in records if r.epochs is not None and r.learning_rate is not None]
    if not grid_records:
        raise ValueError("no grid records to render")
    values: dict[tuple[int, float], float] = {}
    for record in grid_records:
        cell = (record.epochs, record.learning_rate)
        if record.failed or eval_set not in record.metrics:
            values.setdefault(cell, None)
            continue
        if values.get(cell) is not None:
            raise ValueError(
                f"conflicting records for heatmap cell epochs={cell[0]}, lr={cell[1]!r};"
                " filter the records first"
            )
        values[cell] = record.metrics[eval_set].exact_match
    epochs_axis = sorted({e for e, _ in values})
    lr_axis = sorted({lr for _, lr in values})
    present = [v for v in values.values() if v is not None]
    if not present:
        raise ValueError("every heatmap cell failed")
    vmin, vmax = min(present), max(present)
    span = vmax - vmin

    cell_w, cell_h = 86.0, 34.0
    left, top = 90.0, 56.0
    width = left + cell_w * len(lr_axis) + 20.0
    height = top + cell_h * len(epochs_axis) + 46.0
    parts = [
        _text(12, 22, f"exact match on {eval_set}", anchor="start", size=13),
        _text(left - 56, top + cell_h * len(epochs_axis) / 2, "epochs", anchor="middle", size=11),
    ]
    for c, lr in enumerate(lr_axis):
        parts.append(_text(left + cell_w * (c + 0.5), top - 10, fmt6(lr)))
    for r, epochs in enumerate(epochs_axis):
        y = top + cell_h * r
        parts.append(_text(left - 12, y + cell_h / 2 + 4, str(epochs), anchor="end"))
        for c, lr in enumerate(lr_axis):
            x = left + cell_w * c
            value = values.get((epochs, lr))
            if value is None:
                parts.append(_rect(x, y, cell_w, cell_h, FAILED_COLOR))
                parts.append(_text(x + cell_w / 2, y + cell_h / 2 + 4, "failed"))
            else:
                t = 0.5 if span == 0.0 else (value - vmin) / span
                parts.append(_rect(x, y, cell_w, cell_h, _ramp_color(t)))
                parts.append(_text(x + cell_w / 2, y + cell_h / 2 + 4, fmt6(value)))
    legend_y = top + cell_h * len(epochs_axis) + 26
    parts.append(_rect(left, legend_y - 12, 14, 14, _ramp_color(0.0)))
    parts.append(_text(left + 22, legend_y, f"min {fmt6(vmin)}", anchor="start"))
    parts.append(_rect(left + 130, legend_y - 12, 14, 14, _ramp_color(1.0)))
    parts.append(_text(left + 152, legend_y, f"max {fmt6(vmax)}", anchor="start"))
    atomic_write_text(path, _svg(width, height, parts))


# ---------------------------------------------------------------------------
# fixed-ratio curve


def _vanilla_points(records: Sequence[B.SweepRecord], eval_set: str) -> dict[float, float]:
    points: dict[float, float] = {}
    for record in records:
        if not record.train_spec.startswith("vanilla@"):
            continue
        if eval_set not in record.metrics:
            raise ValueError(f"record {record.train_spec} has no metrics for {eval_set!r}")
        points[float(record.train_spec.split("@", 1)[1])] = record.metrics[eval_set].exact_match
    return points


def vanilla_curve_svg(records: Sequence[B.SweepRecord], eval_set: str, path: str) -> None:
    """Exact match against mixing ratio for a fixed-ratio sweep.

    The two base models appear as horizontal reference lines, blue for the
    first base (ratio 1) and red for the second (ratio 0); interior ratios
    are drawn as a green curve with the value printed at each point.
    """
    points = _vanilla_points(records, eval_set)
    if 0.0 not in points or 1.0 not in points:
        raise ValueError("fixed-ratio records must include both bases (ratio 0 and 1)")
    base2_value = points[0.0]
    base1_value = points[1.0]
    interior = sorted(alpha for alpha in points if 0.0 < alpha < 1.0)

    all_values = [points[a] for a in points]
    vmin, vmax = min(all_values), max(all_values)
    if vmin == vmax:
        vmin -= 0.5
        vmax += 0.5

    left, top = 70.0, 40.0
    plot_w, plot_h = 520.0, 240.0
    width = left + plot_w + 110.0
    height = top + plot_h + 50.0

    def sx(alpha: float) -> float:
        return left + plot_w * alpha

    def sy(value: float) -> float:
        return top + plot_h * (1.0 - (value - vmin) / (vmax - vmin))

    parts = [
        _text(12, 22, f"exact match on {eval_set}", anchor="start", size=13),
        _rect(left, top, plot_w, plot_h, "none"),
        _line(left, sy(base2_value), left + plot_w, sy(base2_value), BASE2_COLOR),
        _line(left, sy(base1_value), left + plot_w, sy(base1_value), BASE1_COLOR),
        _text(left + plot_w + 8, sy(base2_value) + 4, fmt6(base2_value), anchor="start", fill=BASE2_COLOR),
        _text(left + plot_w + 8, sy(base1_value) + 4, fmt6(base1_value), anchor="start", fill=BASE1_COLOR),
    ]
    if interior:
        coords = " ".join(f"{_num(sx(a))},{_num(sy(points[a]))}" for a in interior)
        parts.append(
            f'<polyline points="{coords}" fill="none" stroke="{CURVE_COLOR}" stroke-width="2"/>'
        )
        for alpha in interior:
            parts.append(
                f'<circle cx="{_num(sx(alpha))}" cy="{_num(sy(points[alpha]))}" r="4" '
                f'fill="{CURVE_COLOR}"/>'
            )
            parts.append(_text(sx(alpha), sy(points[alpha]) - 8, fmt6(points[alpha]), size=10))
    for alpha in [0.0, *interior, 1.0]:
        parts.append(_text(sx(alpha), top + plot_h + 18, f"{alpha:.2f}", size=10))
    parts.append(_text(left + plot_w / 2, top + plot_h + 38, "ratio toward the first base", size=11))
    atomic_write_text(path, _svg(width, height, parts))


# ---------------------------------------------------------------------------
# summary table


def summary_table_svg(table: B.SummaryTable, path: str) -> None:
    """The summary CSV as a grid: one row per train spec, mean and max per
    eval set, then the two row-sum columns used for selection."""
    headers = ["train_spec"]
    for name in table.eval_sets:
        headers.append(f"mean:{name}")
        headers.append(f"max:{name}")
    headers.extend(["sum_mean", "sum_max"])

    first_w, cell_w, cell_h = 190.0, 98.0, 28.0
    left, top = 12.0, 16.0
    width = left + first_w + cell_w * (len(headers) - 1) + 12.0
    height = top + cell_h * (len(table.rows) + 1) + 12.0

    def column_x(index: int) -> float:
        return left if index == 0 else left + first_w + cell_w * (index - 1)

    def column_w(index: int) -> float:
        return first_w if index == 0 else cell_w

    parts = []
    for i, header in enumerate(headers):
        parts.append(_rect(column_x(i), top, column_w(i), cell_h, "#e3e8ef"))
        parts.append(_text(column_x(i) + column_w(i) / 2, top + cell_h / 2 + 4, header, size=10))
    for r, row in enumerate(table.rows):
        y = top + cell_h * (r + 1)
        cells = [row.train_spec]
        for name in table.eval_sets:
            cells.append(fmt6(row.means[name]) if name in row.means else "")
            cells.append(fmt6(row.maxes[name]) if name in row.maxes else "")
        cells.append(fmt6(row.sum_mean))
        cells.append(fmt6(row.sum_max))
        for i, cell in enumerate(cells):
            parts.append(_rect(column_x(i), y, column_w(i), cell_h, "#ffffff"))
            if cell:
                parts.append(_text(column_x(i) + column_w(i) / 2, y + cell_h / 2 + 4, cell, size=10))
    atomic_write_text(path, _svg(width, height, parts))
