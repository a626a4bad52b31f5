"""Hand-written SVG density histograms of known vs unknown scores."""

from __future__ import annotations

from html import escape

import numpy as np

WIDTH, HEIGHT = 640, 400
MARGIN = {"left": 64, "right": 24, "top": 40, "bottom": 56}
COLORS = {"known": "#1f5fbf", "unknown": "#c8281e"}


def _fmt(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".") if abs(v) < 1e4 else f"{v:.3g}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def density_histogram(scores, bins: int, lo: float, hi: float) -> np.ndarray:
    """Histogram normalised to unit area over [lo, hi]."""
    counts, _ = np.histogram(np.asarray(scores, dtype=np.float64), bins=bins, range=(lo, hi))
    width = (hi - lo) / bins
    total = counts.sum()
    return counts / (total * width) if total else counts.astype(np.float64)


def histogram_svg(known, unknown, bins: int = 30, title: str = "unknown-class score",
                  xlabel: str = "score") -> str:
    """Overlaid density histograms of known and unknown scores as an SVG document."""
    known = np.asarray(known, dtype=np.float64)
    unknown = np.asarray(unknown, dtype=np.float64)
    both = np.concatenate([known, unknown])
    if both.size == 0:
        lo, hi = 0.0, 1.0
    else:
        lo, hi = float(both.min()), float(both.max())
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    dens = {"known": density_histogram(known, bins, lo, hi),
            "unknown": density_histogram(unknown, bins, lo, hi)}
    ymax = max(float(d.max()) if d.size else 0.0 for d in dens.values()) or 1.0

    x0, x1 = MARGIN["left"], WIDTH - MARGIN["right"]
    y0, y1 = HEIGHT - MARGIN["bottom"], MARGIN["top"]

    def sx(v):
        return x0 + (v - lo) / (hi - lo) * (x1 - x0)

    def sy(v):
        return y0 - v / ymax * (y0 - y1)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
    ]
    bw = (x1 - x0) / bins
    for name, d in dens.items():
        color = COLORS[name]
        for i, v in enumerate(d):
            if v <= 0:
                continue
            top = sy(v)
            out.append(
                f'<rect x="{x0 + i * bw:.2f}" y="{top:.2f}" width="{bw:.2f}" '
                f'height="{y0 - top:.2f}" fill="{color}" fill-opacity="0.45" stroke="{color}" '
                f'stroke-width="0.6"/>'
            )
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>')
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>')
    for t in _ticks(lo, hi):
        x = sx(t)
        out.append(f'<line x1="{x:.2f}" y1="{y0}" x2="{x:.2f}" y2="{y0 + 5}" stroke="black"/>')
        out.append(f'<text x="{x:.2f}" y="{y0 + 19}" text-anchor="middle">{_fmt(t)}</text>')
    for t in _ticks(0.0, ymax):
        y = sy(t)
        out.append(f'<line x1="{x0 - 5}" y1="{y:.2f}" x2="{x0}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<text x="{x0 - 8}" y="{y + 4:.2f}" text-anchor="end">{_fmt(t)}</text>')
    out.append(f'<text x="{(x0 + x1) / 2:.1f}" y="{HEIGHT - 14}" text-anchor="middle">'
               f'{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{(y0 + y1) / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {(y0 + y1) / 2:.1f})">density</text>')
    lx = x1 - 130
    for i, (name, n) in enumerate((("known", len(known)), ("unknown", len(unknown)))):
        ly = y1 + 8 + 18 * i
        out.append(f'<rect x="{lx}" y="{ly}" width="12" height="12" fill="{COLORS[name]}" '
                   f'fill-opacity="0.6"/>')
        out.append(f'<text x="{lx + 18}" y="{ly + 10}">{name} (n={n})</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
