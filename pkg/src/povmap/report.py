"""Report files: long-format CSV, markdown summary and SVG plots.

SVG output is hand-assembled XML with fixed float formatting, so repeated
runs with identical inputs produce byte-identical files.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .evalreport import TTestResult, VariantResult

__all__ = [
    "write_report_csv",
    "write_summary_md",
    "svg_bar_chart",
    "svg_heatmap",
    "render_transfer_csv",
]

METRICS = ("pearson", "spearman", "r2")


def write_report_csv(path: str | os.PathLike, results: dict[str, VariantResult], variant_order: list[str]) -> None:
    with open(os.fspath(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "repetition", "metric", "value"])
        for variant in variant_order:
            res = results[variant]
            for metric in METRICS:
                for rep, value in enumerate(getattr(res, metric)):
                    w.writerow([variant, rep, metric, repr(float(value))])


def _fmt_pair(mean_sd: tuple[float, float]) -> str:
    return f"{mean_sd[0]:.4f} ± {mean_sd[1]:.4f}"


def write_summary_md(
    path: str | os.PathLike,
    results: dict[str, VariantResult],
    variant_order: list[str],
    ttests: dict[str, TTestResult],
    quartiles: dict[str, dict[str, float | None]],
    pca_ratios: np.ndarray | None,
    config_echo: dict,
) -> None:
    lines = ["# Evaluation summary", ""]
    lines += ["## Split-protocol metrics (mean ± sd over repetitions)", ""]
    lines += ["| variant | pearson | spearman | r2 |", "|---|---|---|---|"]
    for variant in variant_order:
        s = results[variant].summary()
        lines.append(
            f"| {variant} | {_fmt_pair(s['pearson'])} | {_fmt_pair(s['spearman'])} | {_fmt_pair(s['r2'])} |"
        )
    lines.append("")

    if ttests:
        lines += ["## Paired t-tests on per-repetition Pearson (full vs variant)", ""]
        lines += ["| comparison | t | p (two-sided) |", "|---|---|---|"]
        for name, tt in ttests.items():
            if tt.degenerate:
                lines.append(f"| {name} | degenerate | degenerate |")
            else:
                lines.append(f"| {name} | {tt.t:.4f} | {tt.p:.3e} |")
        lines.append("")

    if quartiles:
        lines += ["## Pearson by ground-truth headcount group", ""]
        groups = ("bottom25", "bottom50", "top50", "top25")
        lines += ["| variant | " + " | ".join(groups) + " |", "|---|" + "---|" * len(groups)]
        for variant, q in quartiles.items():
            cells = [("undefined" if q[g] is None else f"{q[g]:.4f}") for g in groups]
            lines.append(f"| {variant} | " + " | ".join(cells) + " |")
        lines.append("")

    if pca_ratios is not None:
        shown = ", ".join(f"{v:.4f}" for v in pca_ratios[:10])
        lines += ["## PCA explained-variance ratios (full district features)", "", shown, ""]

    lines += ["## Run configuration", ""]
    for key in sorted(config_echo):
        lines.append(f"- {key} = {config_echo[key]}")
    lines.append("")
    with open(os.fspath(path), "w") as fh:
        fh.write("\n".join(lines))


# ---------------------------------------------------------------------------
# SVG


def _svg_header(width: int, height: int, title: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" font-size="14" text-anchor="middle" '
        f'font-family="sans-serif">{title}</text>',
    ]


def svg_bar_chart(path: str | os.PathLike, labels: list[str], values: list[float], title: str) -> None:
    """Vertical bars; None values render as hatched gaps."""
    width, height = 640, 360
    plot_l, plot_r, plot_t, plot_b = 60, width - 20, 40, height - 60
    usable = [v for v in values if v is not None]
    vmax = max(1e-9, max((abs(v) for v in usable), default=1.0))
    lines = _svg_header(width, height, title)
    n = max(1, len(values))
    slot = (plot_r - plot_l) / n
    zero_y = plot_b if all(v is None or v >= 0 for v in values) else (plot_t + plot_b) / 2
    lines.append(
        f'<line x1="{plot_l}" y1="{zero_y:.1f}" x2="{plot_r}" y2="{zero_y:.1f}" stroke="black"/>'
    )
    for i, (label, v) in enumerate(zip(labels, values)):
        x = plot_l + i * slot + slot * 0.15
        bw = slot * 0.7
        if v is None:
            lines.append(
                f'<text x="{x + bw / 2:.1f}" y="{zero_y - 6:.1f}" font-size="10" '
                f'text-anchor="middle" font-family="sans-serif">n/a</text>'
            )
        else:
            h = abs(v) / vmax * (zero_y - plot_t)
            y = zero_y - h if v >= 0 else zero_y
            lines.append(
                f'<rect x="{x:.1f}" y="{y:.1f}" width="{bw:.1f}" height="{h:.1f}" fill="#4878a8"/>'
            )
            lines.append(
                f'<text x="{x + bw / 2:.1f}" y="{y - 4 if v >= 0 else y + h + 12:.1f}" font-size="10" '
                f'text-anchor="middle" font-family="sans-serif">{v:.3f}</text>'
            )
        lines.append(
            f'<text x="{x + bw / 2:.1f}" y="{plot_b + 16}" font-size="10" text-anchor="middle" '
            f'font-family="sans-serif">{label}</text>'
        )
    lines.append("</svg>")
    with open(os.fspath(path), "w") as fh:
        fh.write("\n".join(lines))


def _heat_color(v: float, vmin: float, vmax: float) -> str:
    t = 0.0 if vmax <= vmin else (v - vmin) / (vmax - vmin)
    r = int(255 * (1.0 - 0.75 * t))
    g = int(255 * (1.0 - 0.45 * t))
    b = 255
    return f"rgb({r},{g},{b})"


def svg_heatmap(
    path: str | os.PathLike,
    row_labels: list[str],
    col_labels: list[str],
    matrix: np.ndarray,
    title: str,
) -> None:
    m = np.asarray(matrix, dtype=np.float64)
    width, height = 120 + 90 * len(col_labels), 90 + 60 * len(row_labels)
    lines = _svg_header(width, height, title)
    vmin, vmax = float(np.nanmin(m)), float(np.nanmax(m))
    for j, cl in enumerate(col_labels):
        lines.append(
            f'<text x="{110 + 90 * j + 45}" y="50" font-size="11" text-anchor="middle" '
            f'font-family="sans-serif">{cl}</text>'
        )
    for i, rl in enumerate(row_labels):
        y0 = 60 + 60 * i
        lines.append(
            f'<text x="100" y="{y0 + 34}" font-size="11" text-anchor="end" font-family="sans-serif">{rl}</text>'
        )
        for j in range(len(col_labels)):
            v = m[i, j]
            color = "#dddddd" if not np.isfinite(v) else _heat_color(v, vmin, vmax)
            lines.append(
                f'<rect x="{110 + 90 * j}" y="{y0}" width="86" height="56" fill="{color}" stroke="black"/>'
            )
            text = "n/a" if not np.isfinite(v) else f"{v:.3f}"
            lines.append(
                f'<text x="{110 + 90 * j + 43}" y="{y0 + 34}" font-size="12" text-anchor="middle" '
                f'font-family="sans-serif">{text}</text>'
            )
    lines.append("</svg>")
    with open(os.fspath(path), "w") as fh:
        fh.write("\n".join(lines))


def render_transfer_csv(
    path: str | os.PathLike,
    cities: list[str],
    cells: dict[tuple[str, str], dict[str, float]],
) -> None:
    """Long-format transfer table: variant, source, target, mean test Pearson."""
    with open(os.fspath(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "source", "target", "pearson_mean"])
        variants = sorted({v for cell in cells.values() for v in cell})
        for variant in variants:
            for src in cities:
                for tgt in cities:
                    value = cells[(src, tgt)].get(variant)
                    w.writerow([variant, src, tgt, repr(float(value))])
