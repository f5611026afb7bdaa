"""Minimal hand-rolled SVG learning curves.

Deterministic output: identical metrics produce byte-identical SVG, which a
plotting framework's embedded ids and creation dates would break.
"""

from __future__ import annotations

W, H = 640, 400
MARGIN = 56
COLORS = {"success_rate": "#1f77b4", "mean_return": "#d62728", "loss": "#2ca02c"}


def _scale(points, x_lo, x_hi, y_lo, y_hi):
    def sx(x):
        span = (x_hi - x_lo) or 1.0
        return MARGIN + (x - x_lo) / span * (W - 2 * MARGIN)

    def sy(y):
        span = (y_hi - y_lo) or 1.0
        return H - MARGIN - (y - y_lo) / span * (H - 2 * MARGIN)

    return [(sx(x), sy(y)) for x, y in points]


def _series(rows: list[dict], kind: str, x_key: str, y_key: str):
    pts = []
    for row in rows:
        if row.get("kind") == kind and row.get(y_key) is not None:
            pts.append((float(row[x_key]), float(row[y_key])))
    return pts


def learning_curve_svg(rows: list[dict], title: str = "learning curve") -> str:
    """Eval success rate and mean return against environment steps; falls
    back to training loss when no eval rows exist."""
    series = {}
    for key in ("success_rate", "mean_return"):
        pts = _series(rows, "eval", "env_steps", key)
        if pts:
            series[key] = pts
    if not series:
        pts = _series(rows, "train", "env_steps", "loss")
        if pts:
            series["loss"] = pts

    xs = [x for pts in series.values() for x, _ in pts] or [0.0, 1.0]
    ys = [y for pts in series.values() for _, y in pts] or [0.0, 1.0]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys + [0.0]), max(ys + [1.0])

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="24" text-anchor="middle" font-family="monospace" font-size="14">{title}</text>',
        f'<line x1="{MARGIN}" y1="{H - MARGIN}" x2="{W - MARGIN}" y2="{H - MARGIN}" stroke="black"/>',
        f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{H - MARGIN}" stroke="black"/>',
        f'<text x="{W / 2}" y="{H - 16}" text-anchor="middle" font-family="monospace" font-size="12">env steps</text>',
        f'<text x="{MARGIN}" y="{MARGIN - 8}" font-family="monospace" font-size="10">[{y_lo:g}, {y_hi:g}]</text>',
        f'<text x="{W - MARGIN}" y="{H - MARGIN + 16}" text-anchor="end" font-family="monospace" font-size="10">{x_hi:g}</text>',
    ]
    legend_y = 40
    for name, pts in sorted(series.items()):
        color = COLORS.get(name, "#333333")
        scaled = _scale(pts, x_lo, x_hi, y_lo, y_hi)
        coord = " ".join(f"{x:.2f},{y:.2f}" for x, y in scaled)
        parts.append(f'<polyline points="{coord}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for x, y in scaled:
            parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="2.5" fill="{color}"/>')
        parts.append(
            f'<text x="{W - MARGIN}" y="{legend_y}" text-anchor="end" font-family="monospace" '
            f'font-size="12" fill="{color}">{name}</text>'
        )
        legend_y += 16
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def summary_table(rows: list[dict]) -> str:
    """Plain-text digest of a metrics file."""
    train = [r for r in rows if r.get("kind") == "train"]
    evals = [r for r in rows if r.get("kind") == "eval"]
    lines = [f"{'metric':<24}{'value':>16}"]
    lines.append(f"{'train rows':<24}{len(train):>16}")
    lines.append(f"{'eval rows':<24}{len(evals):>16}")
    if train:
        lines.append(f"{'final loss':<24}{train[-1]['loss']:>16.6f}")
    if evals:
        last = evals[-1]
        lines.append(f"{'final success rate':<24}{last['success_rate']:>16.4f}")
        lines.append(f"{'final mean return':<24}{last['mean_return']:>16.4f}")
        lines.append(f"{'final return std':<24}{last['std_return']:>16.4f}")
        lines.append(f"{'env steps':<24}{last['env_steps']:>16}")
    return "\n".join(lines)
