"""Standalone SVG plots of the Stage II results.

Written by hand rather than through a plotting library so the bytes depend
only on the report contents.
"""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

from .errors import MissingStage

WIDTH, HEIGHT = 480, 360
MARGIN = 48
PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def _num(v: float) -> str:
    return f"{v:.2f}"


def _doc(title: str, body: list) -> str:
    head = (f'<?xml version="1.0" encoding="UTF-8"?>\n'
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}">\n'
            f'<title>{escape(title)}</title>\n'
            f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>\n'
            f'<text x="{WIDTH / 2:.0f}" y="24" text-anchor="middle" font-family="sans-serif" '
            f'font-size="14">{escape(title)}</text>\n')
    return head + "".join(line + "\n" for line in body) + "</svg>\n"


def _axes() -> list:
    x0, y0, x1, y1 = MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN / 2, MARGIN
    return [f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
            f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>']


def silhouette_svg(per_k: dict) -> str:
    """Bar chart of mean silhouette against k."""
    items = sorted((int(k), float(v)) for k, v in per_k.items())
    body = _axes()
    if items:
        lo = min(0.0, min(v for _, v in items))
        hi = max(1e-9, max(v for _, v in items))
        plot_w = WIDTH - 1.5 * MARGIN
        plot_h = HEIGHT - 2 * MARGIN
        slot = plot_w / len(items)
        zero_y = MARGIN + plot_h * hi / (hi - lo)
        for i, (k, v) in enumerate(items):
            x = MARGIN + i * slot + slot * 0.15
            top = MARGIN + plot_h * (hi - max(v, 0.0)) / (hi - lo)
            h = abs(v) * plot_h / (hi - lo)
            y = top if v >= 0 else zero_y
            body.append(f'<rect class="bar" data-k="{k}" data-value="{v!r}" x="{_num(x)}" '
                        f'y="{_num(y)}" width="{_num(slot * 0.7)}" height="{_num(h)}" '
                        f'fill="{PALETTE[0]}"/>')
            body.append(f'<text x="{_num(x + slot * 0.35)}" y="{HEIGHT - MARGIN + 16}" '
                        f'text-anchor="middle" font-family="sans-serif" font-size="11">{k}</text>')
    body.append(f'<text x="{WIDTH / 2:.0f}" y="{HEIGHT - 8}" text-anchor="middle" '
                f'font-family="sans-serif" font-size="12">k</text>')
    return _doc("Mean silhouette by number of clusters", body)


def clusters_svg(features: dict, labels: dict) -> str:
    """Scatter of normalized (dx, dy) coloured by cluster label.

    `features` maps pid to its 4-vector and `labels` maps pid to a label.
    """
    pids = sorted(int(p) for p in features)
    body = _axes()
    if pids:
        xs = [float(features[p][0]) for p in pids]
        ys = [float(features[p][1]) for p in pids]
        xlo, xhi = min(xs), max(xs)
        ylo, yhi = min(ys), max(ys)
        xspan = (xhi - xlo) or 1.0
        yspan = (yhi - ylo) or 1.0
        plot_w = WIDTH - 2 * MARGIN
        plot_h = HEIGHT - 2 * MARGIN
        for p, x, y in zip(pids, xs, ys):
            px = MARGIN + 8 + (x - xlo) / xspan * (plot_w - 16)
            py = HEIGHT - MARGIN - 8 - (y - ylo) / yspan * (plot_h - 16)
            lab = int(labels[p])
            body.append(f'<circle data-pid="{p}" data-label="{lab}" cx="{_num(px)}" cy="{_num(py)}" '
                        f'r="4" fill="{PALETTE[lab % len(PALETTE)]}"/>')
    body.append(f'<text x="{WIDTH / 2:.0f}" y="{HEIGHT - 8}" text-anchor="middle" '
                f'font-family="sans-serif" font-size="12">dx / sigma_x</text>')
    return _doc("View clusters", body)


def emit_plots(report: dict, out_dir) -> list:
    """Write ``silhouette.svg`` and ``clusters.svg`` from a run report dict.

    Raises MissingStage when the report has no Stage II section.
    """
    stage2 = report.get("stage2")
    if not stage2:
        raise MissingStage("plots need a Stage II section in the report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    per_k = (stage2.get("silhouette") or {}).get("per_k", {})
    features = {int(p): v for p, v in stage2["features"].items()}
    labels = {int(p): v for p, v in stage2["assignment"]["labels"].items()}
    paths = [out / "silhouette.svg", out / "clusters.svg"]
    paths[0].write_text(silhouette_svg(per_k), encoding="utf-8")
    paths[1].write_text(clusters_svg(features, labels), encoding="utf-8")
    return paths
