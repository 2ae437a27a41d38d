"""CSV traces/tables and minimal standalone SVG line plots."""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


def fmt(x) -> str:
    """Shortest round-trip float text; keeps output byte-stable."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    return repr(x) if math.isfinite(x) else ("inf" if x > 0 else "-inf")


def _meta_lines(meta: dict) -> list[str]:
    lines = []
    for k in sorted(meta):
        v = meta[k]
        if isinstance(v, float):
            v = fmt(v)
        lines.append(f"# {k}={v}")
    return lines


def write_table_csv(path, header: Sequence[str], rows: Iterable[Sequence], meta: dict | None = None) -> None:
    buf = io.StringIO()
    for line in _meta_lines(meta or {}):
        buf.write(line + "\r\n")
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(x) if isinstance(x, (float, np.floating)) else x for x in row])
    Path(path).write_text(buf.getvalue(), newline="")


def read_table_csv(path) -> tuple[dict, list[str], list[list[str]]]:
    meta: dict = {}
    body = []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                meta[key.strip()] = val.strip()
            else:
                body.append(line)
    reader = csv.reader(body)
    rows = [r for r in reader if r]
    if not rows:
        raise ValueError(f"{path}: no header row")
    return meta, rows[0], rows[1:]


def write_trace_csv(path, trace) -> None:
    write_table_csv(path, ["time_s", "value"], zip(trace.times, trace.values), trace.meta)


def read_trace_csv(path):
    from .dynamics import TimedTrace

    meta, header, rows = read_table_csv(path)
    if len(header) != 2:
        raise ValueError(f"{path}: expected two columns (time_s, value), got {header}")
    try:
        data = np.array([[float(a), float(b)] for a, b in rows])
    except ValueError as exc:
        raise ValueError(f"{path}: malformed numeric row ({exc})") from None
    if data.size == 0:
        raise ValueError(f"{path}: empty trace")
    return TimedTrace(data[:, 0], data[:, 1], meta)


def dump_json(obj, path=None) -> str:
    text = json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def svg_line_plot(
    series: Sequence[tuple[str, np.ndarray, np.ndarray]],
    xlabel: str = "",
    ylabel: str = "",
    title: str = "",
    width: int = 640,
    height: int = 400,
) -> str:
    """Render ``(label, x, y)`` series as polylines in a bare SVG document."""
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]
    left, right, top, bottom = 60, 20, 30, 45
    xs = np.concatenate([np.asarray(s[1], float) for s in series]) if series else np.array([0.0, 1.0])
    ys = np.concatenate([np.asarray(s[2], float) for s in series]) if series else np.array([0.0, 1.0])
    x0, x1 = float(np.nanmin(xs)), float(np.nanmax(xs))
    y0, y1 = float(np.nanmin(ys)), float(np.nanmax(ys))
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    pw, ph = width - left - right, height - top - bottom

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + ph - (y - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#000"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="14">{title}</text>',
        f'<text x="{width / 2:.1f}" y="{height - 8}" text-anchor="middle" font-size="12">{xlabel}</text>',
        f'<text x="14" y="{height / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {height / 2:.1f})">{ylabel}</text>',
    ]
    for frac in (0.0, 0.5, 1.0):
        xv, yv = x0 + frac * (x1 - x0), y0 + frac * (y1 - y0)
        out.append(f'<text x="{sx(xv):.1f}" y="{top + ph + 15}" text-anchor="middle" font-size="10">{xv:.4g}</text>')
        out.append(f'<text x="{left - 4}" y="{sy(yv) + 3:.1f}" text-anchor="end" font-size="10">{yv:.4g}</text>')
    for i, (label, x, y) in enumerate(series):
        color = colors[i % len(colors)]
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x, y) if math.isfinite(a) and math.isfinite(b))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{pts}"/>')
        out.append(
            f'<text x="{left + 8}" y="{top + 14 + 14 * i}" font-size="11" fill="{color}">{label}</text>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"
