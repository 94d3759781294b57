"""Run-directory summaries: text tables and small SVG line plots."""
from __future__ import annotations

import csv
from pathlib import Path

EXPECTED = {
    "train_metrics.csv": "train",
    "fisher_report.csv": "fisher",
    "inversion_curves.csv": "invert",
    "transfer_report.csv": "transfer",
    "emd.csv": "transfer",
    "gap_vs_distance.csv": "transfer --correlate",
}

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def read_csv(path) -> tuple[list, list, list]:
    """(comment lines, header, rows) of a schema-tagged CSV."""
    comments, lines = [], []
    with open(path, newline="") as fh:
        for line in fh:
            (comments if line.startswith("#") else lines).append(line)
    rows = list(csv.reader(lines))
    if not rows:
        return comments, [], []
    return comments, rows[0], rows[1:]


def text_table(header, rows) -> str:
    cells = [list(map(str, header))] + [[_short(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    out = []
    for j, r in enumerate(cells):
        out.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
        if j == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out)


def _short(cell: str) -> str:
    try:
        v = float(cell)
    except ValueError:
        return cell
    if "." not in cell and "e" not in cell.lower():
        return cell
    return f"{v:.6g}"


def line_plot_svg(series: dict, title: str, xlabel: str, ylabel: str, log_y: bool = False,
                  points_only: bool = False, labels=None, width: int = 520, height: int = 340) -> str:
    """Deterministic SVG of named (xs, ys) series."""
    import math

    def ty(v):
        return math.log10(v) if log_y else v

    pts = [(x, ty(y)) for xs, ys in series.values() for x, y in zip(xs, ys)
           if not (log_y and y <= 0)]
    if not pts:
        pts = [(0.0, 0.0), (1.0, 1.0)]
    x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
    y0, y1 = min(p[1] for p in pts), max(p[1] for p in pts)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    ml, mr, mt, mb = 60, 20, 30, 45
    pw, ph = width - ml - mr, height - mt - mb

    def sx(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return mt + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{_esc(title)}</text>',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
           f'<text x="{ml + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">{_esc(xlabel)}</text>',
           f'<text x="14" y="{mt + ph / 2:.1f}" text-anchor="middle" '
           f'transform="rotate(-90 14 {mt + ph / 2:.1f})">{_esc(ylabel + (" (log10)" if log_y else ""))}</text>']
    for i in range(5):
        xv = x0 + (x1 - x0) * i / 4
        yv = y0 + (y1 - y0) * i / 4
        out.append(f'<text x="{sx(xv):.1f}" y="{mt + ph + 14}" text-anchor="middle">{xv:.4g}</text>')
        out.append(f'<text x="{ml - 4}" y="{sy(yv) + 4:.1f}" text-anchor="end">{yv:.4g}</text>')
    for j, (name, (xs, ys)) in enumerate(series.items()):
        color = PALETTE[j % len(PALETTE)]
        coords = [(sx(x), sy(ty(y))) for x, y in zip(xs, ys) if not (log_y and y <= 0)]
        if points_only:
            for k, (px, py) in enumerate(coords):
                out.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="4" fill="{color}"/>')
                if labels:
                    out.append(f'<text x="{px + 6:.2f}" y="{py - 6:.2f}">{_esc(labels[k])}</text>')
        elif coords:
            path = " ".join(f"{px:.2f},{py:.2f}" for px, py in coords)
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{path}"/>')
        out.append(f'<text x="{ml + 8}" y="{mt + 14 + 14 * j}" fill="{color}">{_esc(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s: str) -> str:
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def build_report(run_dir) -> tuple[str, dict]:
    """Return (summary text, {svg filename: svg text}).

    Raises FileNotFoundError listing the expected files when none exist.
    """
    run = Path(run_dir)
    present = [f for f in EXPECTED if (run / f).is_file()]
    if not present:
        checklist = "\n".join(f"  [ ] {f}  (from `robustlens {cmd}`)" for f, cmd in EXPECTED.items())
        raise FileNotFoundError(f"no experiment outputs in {run}; expected any of:\n{checklist}")
    parts, plots = [f"run directory: {run}", ""], {}
    for f in EXPECTED:
        if f not in present:
            parts.append(f"[missing] {f}")
    parts.append("")
    for f in present:
        comments, header, rows = read_csv(run / f)
        parts.append(f"== {f} ({len(rows)} rows)")
        parts += [c.rstrip("\n") for c in comments]
        parts.append(text_table(header, rows))
        parts.append("")
        if f == "inversion_curves.csv" and rows:
            it = [float(r[0]) for r in rows]
            series = {m: (it, [float(r[i + 1]) for r in rows]) for i, m in enumerate(header[1:])}
            plots["inversion_curves.svg"] = line_plot_svg(series, "median inversion loss", "iteration",
                                                          "L_inv", log_y=True)
        if f == "train_metrics.csv" and rows:
            ep = [float(r[0]) for r in rows]
            series = {c: (ep, [float(r[i]) for r in rows]) for i, c in enumerate(header) if c in ("clean_acc", "robust_acc")}
            plots["train_metrics.svg"] = line_plot_svg(series, "training accuracy", "epoch", "accuracy")
        if f == "gap_vs_distance.csv" and rows:
            d = [float(r[1]) for r in rows]
            g = [float(r[4]) for r in rows]
            plots["gap_vs_distance.svg"] = line_plot_svg({"robust - standard": (d, g)}, "accuracy gap vs EMD",
                                                         "EMD", "gap", points_only=True,
                                                         labels=[r[0] for r in rows])
    return "\n".join(parts).rstrip() + "\n", plots
