"""Loss-curve and AP-bar charts as hand-assembled SVG.

No plotting dependency; the output is a plain string, so identical
inputs give identical bytes. Each chart's source data is also written
as JSON next to the image.
"""

from __future__ import annotations

import json
from pathlib import Path

from .core import MapClass

WIDTH = 720
HEIGHT = 440
MARGIN_L = 64
MARGIN_R = 140
MARGIN_T = 24
MARGIN_B = 48

LOSS_COLORS = {
    "total": "#111111",
    "l_pts": "#d62728",
    "l_cls": "#1f77b4",
    "l_dir": "#9467bd",
    "l_bevseg": "#2ca02c",
    "l_pvseg": "#8c564b",
    "l_surf": "#e377c2",
}

_CLASS_LABELS = [
    (MapClass.DIVIDER.value, "divider"),
    (MapClass.PED_CROSSING.value, "ped_crossing"),
    (MapClass.BOUNDARY.value, "boundary"),
]


def _num(x: float) -> str:
    s = f"{x:.2f}".rstrip("0").rstrip(".")
    return "0" if s in ("", "-0") else s


def read_metrics(path) -> list[dict]:
    records = []
    with open(Path(path), encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    if not records:
        raise ValueError(f"no metrics records in {path}")
    return records


def _svg_open() -> str:
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">\n'
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>\n'
    )


def _axes(y_ticks: list[tuple[float, str]], x_ticks: list[tuple[float, str]]) -> str:
    x0, x1 = MARGIN_L, WIDTH - MARGIN_R
    y0, y1 = HEIGHT - MARGIN_B, MARGIN_T
    parts = [
        f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="#444444"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="#444444"/>',
    ]
    for py, label in y_ticks:
        parts.append(f'<line x1="{x0 - 4}" y1="{_num(py)}" x2="{x0}" y2="{_num(py)}" stroke="#444444"/>')
        parts.append(
            f'<text x="{x0 - 8}" y="{_num(py + 4)}" text-anchor="end">{label}</text>'
        )
    for px, label in x_ticks:
        parts.append(f'<line x1="{_num(px)}" y1="{y0}" x2="{_num(px)}" y2="{y0 + 4}" stroke="#444444"/>')
        parts.append(
            f'<text x="{_num(px)}" y="{y0 + 18}" text-anchor="middle">{label}</text>'
        )
    return "\n".join(parts) + "\n"


def loss_curves_svg(records: list[dict]) -> str:
    keys = [k for k in LOSS_COLORS if k in records[0]]
    steps = [r["step"] for r in records]
    lo_x, hi_x = min(steps), max(steps)
    span_x = max(hi_x - lo_x, 1)
    hi_y = max(max(r[k] for r in records) for k in keys)
    hi_y = hi_y * 1.05 if hi_y > 0 else 1.0

    def sx(step: float) -> float:
        return MARGIN_L + (step - lo_x) / span_x * (WIDTH - MARGIN_L - MARGIN_R)

    def sy(val: float) -> float:
        return HEIGHT - MARGIN_B - val / hi_y * (HEIGHT - MARGIN_T - MARGIN_B)

    y_ticks = [(sy(hi_y * i / 4), f"{hi_y * i / 4:.3g}") for i in range(5)]
    n_x = min(len(set(steps)), 6)
    x_ticks = []
    for i in range(n_x):
        s = lo_x + round(i * span_x / max(n_x - 1, 1))
        x_ticks.append((sx(s), str(int(s))))

    out = [_svg_open(), _axes(y_ticks, x_ticks)]
    out.append(
        f'<text x="{(MARGIN_L + WIDTH - MARGIN_R) // 2}" y="{HEIGHT - 8}" '
        f'text-anchor="middle">step</text>\n'
    )
    for key in keys:
        pts = " ".join(f"{_num(sx(r['step']))},{_num(sy(r[key]))}" for r in records)
        width = 2 if key == "total" else 1
        out.append(
            f'<polyline fill="none" stroke="{LOSS_COLORS[key]}" '
            f'stroke-width="{width}" points="{pts}"/>\n'
        )
    lx = WIDTH - MARGIN_R + 12
    for i, key in enumerate(keys):
        ly = MARGIN_T + 10 + i * 18
        out.append(
            f'<line x1="{lx}" y1="{ly}" x2="{lx + 18}" y2="{ly}" '
            f'stroke="{LOSS_COLORS[key]}" stroke-width="2"/>\n'
        )
        out.append(f'<text x="{lx + 24}" y="{ly + 4}">{key}</text>\n')
    out.append("</svg>\n")
    return "".join(out)


def ap_bars_svg(report: dict) -> str:
    """Grouped bars: one group per class (a bar per threshold), then mAP."""
    thresholds = sorted(next(iter(report["ap"].values())), key=float)
    groups = []
    for cls, label in _CLASS_LABELS:
        bars = [(f"{float(t):g}", report["ap"][cls][t]) for t in thresholds]
        groups.append((label, bars))
    groups.append(("mAP", [("", report["map"])]))

    x0, x1 = MARGIN_L, WIDTH - MARGIN_R
    y0, y1 = HEIGHT - MARGIN_B, MARGIN_T
    shades = ["#9ecae1", "#4292c6", "#084594", "#111111"]

    def sy(val: float) -> float:
        return y0 - val * (y0 - y1)

    y_ticks = [(sy(i / 4), f"{i / 4:.2f}") for i in range(5)]
    out = [_svg_open(), _axes(y_ticks, [])]
    n_groups = len(groups)
    group_w = (x1 - x0) / n_groups
    for gi, (label, bars) in enumerate(groups):
        gx = x0 + gi * group_w
        bar_w = group_w * 0.8 / max(len(bars), 1)
        for bi, (tag, val) in enumerate(bars):
            bx = gx + group_w * 0.1 + bi * bar_w
            by = sy(val)
            color = shades[3] if label == "mAP" else shades[bi % 3]
            out.append(
                f'<rect x="{_num(bx)}" y="{_num(by)}" width="{_num(bar_w * 0.9)}" '
                f'height="{_num(y0 - by)}" fill="{color}"/>\n'
            )
            out.append(
                f'<text x="{_num(bx + bar_w * 0.45)}" y="{_num(by - 4)}" '
                f'text-anchor="middle" font-size="10">{val:.2f}</text>\n'
            )
            if tag:
                out.append(
                    f'<text x="{_num(bx + bar_w * 0.45)}" y="{y0 + 14}" '
                    f'text-anchor="middle" font-size="10">{tag}</text>\n'
                )
        out.append(
            f'<text x="{_num(gx + group_w / 2)}" y="{y0 + 30}" '
            f'text-anchor="middle">{label}</text>\n'
        )
    out.append("</svg>\n")
    return "".join(out)


def render_plots(metrics_path, out_dir, report_path=None) -> list[Path]:
    """Write loss curves (and AP bars when a report is given) plus the
    JSON data each chart was drawn from."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = read_metrics(metrics_path)
    written = []

    svg_path = out / "loss_curves.svg"
    svg_path.write_text(loss_curves_svg(records), encoding="utf-8")
    written.append(svg_path)
    data_path = out / "loss_data.json"
    with open(data_path, "w", encoding="utf-8") as f:
        json.dump(records, f, indent=1, sort_keys=True)
        f.write("\n")
    written.append(data_path)

    if report_path is not None:
        with open(Path(report_path), encoding="utf-8") as f:
            report = json.load(f)
        bars_path = out / "ap_bars.svg"
        bars_path.write_text(ap_bars_svg(report), encoding="utf-8")
        written.append(bars_path)
        ap_data = out / "ap_data.json"
        with open(ap_data, "w", encoding="utf-8") as f:
            json.dump(report, f, indent=1, sort_keys=True)
            f.write("\n")
        written.append(ap_data)
    return written
