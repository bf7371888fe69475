"""Plain-text tables and dependency-free SVG figures."""
from __future__ import annotations

from typing import Sequence
from xml.sax.saxutils import escape

from .metrics import METRIC_COLUMNS, ReliabilityTable

DISPLAY_NAMES = {"baseline": "Baseline", "de": "DE", "mcd": "MCD", "end-kl": "EnD-KL",
                 "end-crd": "EnD-CRD", "gt": "Ground truth"}
HIGHER_IS_BETTER = {"dsc": True, "mcc": True, "ece": False, "brier": False, "nll": False}
HEADERS = {"dsc": "DSC ↑", "mcc": "MCC ↑", "ece": "ECE ↓", "brier": "BS ↓", "nll": "NLL ↓"}
COLORS = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"]


def read_metrics_csv(text: str) -> list[tuple[str, dict[str, float]]]:
    lines = text.strip().splitlines()
    header = lines[0].split(",")
    rows = []
    for ln in lines[1:]:
        cells = ln.split(",")
        rows.append((cells[0], {k: float(v) for k, v in zip(header[1:], cells[1:])}))
    return rows


def markdown_table(rows: Sequence[tuple[str, dict[str, float]]], digits: int = 4) -> str:
    """Method-by-metric table with the best value of each column in bold."""
    best = {}
    for c in METRIC_COLUMNS:
        vals = [r[c] for name, r in rows if name != "gt"]
        if vals:
            best[c] = max(vals) if HIGHER_IS_BETTER[c] else min(vals)
    out = ["| Method | " + " | ".join(HEADERS[c] for c in METRIC_COLUMNS) + " |",
           "|---" * (len(METRIC_COLUMNS) + 1) + "|"]
    for name, r in rows:
        cells = []
        for c in METRIC_COLUMNS:
            s = f"{r[c]:.{digits}f}"
            cells.append(f"**{s}**" if name != "gt" and f"{best[c]:.{digits}f}" == s else s)
        out.append(f"| {DISPLAY_NAMES.get(name, name)} | " + " | ".join(cells) + " |")
    return "\n".join(out) + "\n"


def _frame(width: int, height: int, title: str, xlabel: str, ylabel: str, x0, y0, pw, ph) -> list[str]:
    return [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<title>{escape(title)}</title>',
        f'<rect class="background" x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line class="axis" x1="{x0}" y1="{y0}" x2="{x0 + pw}" y2="{y0}" stroke="black"/>',
        f'<line class="axis" x1="{x0}" y1="{y0}" x2="{x0}" y2="{y0 - ph}" stroke="black"/>',
        f'<text x="{x0 + pw / 2}" y="{y0 + 35}" text-anchor="middle" font-size="13">{escape(xlabel)}</text>',
        f'<text x="{x0 - 40}" y="{y0 - ph / 2}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 {x0 - 40} {y0 - ph / 2})">{escape(ylabel)}</text>',
        f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
    ]


def reliability_svg(table: ReliabilityTable, title: str = "Reliability diagram") -> str:
    """Per-bin accuracy bars over the [0.5, 1] confidence axis plus the y = x diagonal.

    Bars are the only ``rect`` elements with class ``bar`` and the diagonal
    is the only ``path``.
    """
    width, height = 420, 400
    x0, y0, pw, ph = 60, 340, 330, 300
    lo, hi = 0.5, 1.0

    def sx(c):
        return x0 + (c - lo) / (hi - lo) * pw

    def sy(a):
        return y0 - (a - lo) / (hi - lo) * ph if a >= lo else y0

    parts = _frame(width, height, title, "Confidence", "Accuracy", x0, y0, pw, ph)
    for b in table.bins:
        top = sy(b.accuracy) if b.count else y0
        parts.append(f'<rect class="bar" x="{sx(b.confidence_lo):.3f}" y="{top:.3f}" '
                     f'width="{sx(b.confidence_hi) - sx(b.confidence_lo):.3f}" height="{y0 - top:.3f}" '
                     f'fill="#4c72b0" stroke="white" data-count="{b.count}" '
                     f'data-accuracy="{b.accuracy:.6f}" data-confidence="{b.mean_confidence:.6f}"/>')
    parts.append(f'<path class="diagonal" d="M {sx(lo):.3f} {sy(lo):.3f} L {sx(hi):.3f} {sy(hi):.3f}" '
                 f'stroke="red" stroke-dasharray="6 4" fill="none"/>')
    for t in (0.5, 0.6, 0.7, 0.8, 0.9, 1.0):
        parts.append(f'<text x="{sx(t):.1f}" y="{y0 + 16}" text-anchor="middle" font-size="11">{t:.1f}</text>')
        parts.append(f'<text x="{x0 - 8}" y="{sy(t) + 4:.1f}" text-anchor="end" font-size="11">{t:.1f}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def scatter_svg(points: Sequence[tuple[str, float, float]], title: str = "ECE vs Dice per image") -> str:
    """One circle per (method, dice, ece) point; ECE shown in percent."""
    width, height = 480, 400
    x0, y0, pw, ph = 60, 340, 300, 300
    methods = list(dict.fromkeys(m for m, _, _ in points))
    emax = max([e * 100 for _, _, e in points] + [1e-9]) * 1.05
    dmin = min([d for _, d, _ in points] + [1.0])
    dmin = max(0.0, dmin - 0.05)

    def sx(e):
        return x0 + e / emax * pw

    def sy(d):
        return y0 - (d - dmin) / (1.0 - dmin if dmin < 1 else 1.0) * ph

    parts = _frame(width, height, title, "ECE (%)", "Dice", x0, y0, pw, ph)
    for m, d, e in points:
        color = COLORS[methods.index(m) % len(COLORS)]
        parts.append(f'<circle class="point" cx="{sx(e * 100):.3f}" cy="{sy(d):.3f}" r="3.5" '
                     f'fill="{color}" fill-opacity="0.75" data-method="{escape(m)}"/>')
    for i, m in enumerate(methods):
        color = COLORS[i % len(COLORS)]
        parts.append(f'<circle class="legend" cx="{x0 + pw + 20}" cy="{60 + 18 * i}" r="5" fill="{color}"/>')
        parts.append(f'<text x="{x0 + pw + 30}" y="{64 + 18 * i}" font-size="12">'
                     f'{escape(DISPLAY_NAMES.get(m, m))}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def read_per_image_csv(text: str) -> list[tuple[str, float, float]]:
    out = []
    for ln in text.strip().splitlines()[1:]:
        method, _img, d, e = ln.split(",")
        out.append((method, float(d), float(e)))
    return out
