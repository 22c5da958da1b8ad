"""Loss and accuracy curves from metrics.jsonl as a standalone SVG (no plotting library)."""
from __future__ import annotations

from xml.sax.saxutils import escape

WIDTH, HEIGHT, PAD = 640, 300, 48
SERIES = (("train_loss", "#1f77b4"), ("test_loss", "#ff7f0e"),
          ("train_acc", "#2ca02c"), ("test_acc", "#d62728"))


def _polyline(xs, ys, lo, hi, color, panel_x):
    span = (hi - lo) or 1.0
    pw = WIDTH / 2 - PAD * 1.5
    n = max(len(xs) - 1, 1)
    pts = " ".join(f"{panel_x + pw * i / n:.1f},{HEIGHT - PAD - (HEIGHT - 2 * PAD) * (y - lo) / span:.1f}"
                   for i, y in zip(range(len(xs)), ys))
    return f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>'


def metrics_svg(records: list[dict]) -> str:
    """Two panels: losses on the left, accuracies on the right, epochs on x."""
    epochs = [r["epoch"] for r in records]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
             f'font-family="sans-serif" font-size="11">',
             '<rect width="100%" height="100%" fill="white"/>']
    for panel, keys in enumerate((("train_loss", "test_loss"), ("train_acc", "test_acc"))):
        x0 = PAD + panel * WIDTH / 2
        vals = [r[k] for k in keys for r in records if r.get(k) is not None]
        lo, hi = (min(vals), max(vals)) if vals else (0.0, 1.0)
        parts.append(f'<rect x="{x0}" y="{PAD}" width="{WIDTH / 2 - PAD * 1.5}" '
                     f'height="{HEIGHT - 2 * PAD}" fill="none" stroke="#999"/>')
        parts.append(f'<text x="{x0}" y="{PAD - 8}">{"loss" if panel == 0 else "accuracy"} '
                     f'[{lo:.4g}, {hi:.4g}]</text>')
        for name, color in SERIES:
            if name not in keys:
                continue
            ys = [r.get(name) for r in records]
            if any(y is None for y in ys) or not ys:
                continue
            parts.append(_polyline(epochs, ys, lo, hi, color, x0))
            parts.append(f'<text x="{x0 + 4}" y="{HEIGHT - PAD + 16 + 12 * keys.index(name)}" '
                         f'fill="{color}">{escape(name)}</text>')
    parts.append(f'<text x="{WIDTH / 2 - 20}" y="{HEIGHT - 6}">epochs 0..{epochs[-1] if epochs else 0}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
