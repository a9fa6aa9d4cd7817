"""Minimal SVG scatter and line plots for run reports."""

from __future__ import annotations

from html import escape

W, H = 480, 360
PAD_L, PAD_R, PAD_T, PAD_B = 60, 20, 30, 45
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def _scale(values, lo_px, hi_px):
    lo, hi = min(values), max(values)
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    span = hi - lo
    lo, hi = lo - 0.05 * span, hi + 0.05 * span
    return (lambda v: lo_px + (v - lo) / (hi - lo) * (hi_px - lo_px)), lo, hi


def _frame(title: str, xlabel: str, ylabel: str, xlo, xhi, ylo, yhi) -> list[str]:
    x0, x1, y0, y1 = PAD_L, W - PAD_R, H - PAD_B, PAD_T
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           '<rect width="100%" height="100%" fill="white"/>',
           f'<text x="{W / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
           f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>',
           f'<text x="{(x0 + x1) / 2:.1f}" y="{H - 10}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
           f'<text x="14" y="{(y0 + y1) / 2:.1f}" text-anchor="middle" font-size="12" '
           f'transform="rotate(-90 14 {(y0 + y1) / 2:.1f})">{escape(ylabel)}</text>']
    for k in range(5):
        fx = xlo + (xhi - xlo) * k / 4
        fy = ylo + (yhi - ylo) * k / 4
        px = x0 + (x1 - x0) * k / 4
        py = y0 + (y1 - y0) * k / 4
        out.append(f'<text x="{px:.1f}" y="{y0 + 15}" text-anchor="middle" font-size="10">{fx:.3g}</text>')
        out.append(f'<text x="{x0 - 5}" y="{py + 3:.1f}" text-anchor="end" font-size="10">{fy:.3g}</text>')
    return out


def scatter(xs, ys, title: str, xlabel: str, ylabel: str, highlight=None, path=None) -> str:
    """Scatter plot; points whose index is in ``highlight`` are drawn red and joined by a dashed line."""
    highlight = set(highlight or ())
    sx, xlo, xhi = _scale(list(xs), PAD_L, W - PAD_R)
    sy, ylo, yhi = _scale(list(ys), H - PAD_B, PAD_T)
    out = _frame(title, xlabel, ylabel, xlo, xhi, ylo, yhi)
    front = sorted((x, y) for i, (x, y) in enumerate(zip(xs, ys)) if i in highlight)
    if len(front) > 1:
        pts = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in front)
        out.append(f'<polyline points="{pts}" fill="none" stroke="{PALETTE[1]}" stroke-dasharray="4 3"/>')
    for i, (x, y) in enumerate(zip(xs, ys)):
        color = PALETTE[1] if i in highlight else PALETTE[0]
        out.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="3.5" fill="{color}"/>')
    out.append("</svg>")
    return _emit(out, path)


def line_chart(x, series: dict[str, list[float]], title: str, xlabel: str, ylabel: str, path=None) -> str:
    """Several series sharing both axes."""
    ally = [v for ys in series.values() for v in ys]
    sx, xlo, xhi = _scale(list(x), PAD_L, W - PAD_R)
    sy, ylo, yhi = _scale(ally, H - PAD_B, PAD_T)
    out = _frame(title, xlabel, ylabel, xlo, xhi, ylo, yhi)
    for k, (name, ys) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{sx(a):.1f},{sy(b):.1f}" for a, b in zip(x, ys))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        out.append(f'<text x="{W - PAD_R - 5}" y="{PAD_T + 14 * (k + 1)}" text-anchor="end" '
                   f'font-size="11" fill="{color}">{escape(name)}</text>')
    out.append("</svg>")
    return _emit(out, path)


def _emit(lines: list[str], path) -> str:
    text = "\n".join(lines) + "\n"
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
