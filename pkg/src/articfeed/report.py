"""Report output: JSON summary, key=value metrics, and figures.

Figures are rendered next to the delimited outputs so a session or an
offline export can be eyeballed without loading anything into a notebook.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .pipeline import ReportSeries, SessionReport


def write_report(report: SessionReport, out_dir, stem: str = "session") -> list[Path]:
    """Write <stem>_report.json, <stem>_metrics.txt and figures; returns paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    path = out / f"{stem}_report.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    written.append(path)

    path = out / f"{stem}_metrics.txt"
    path.write_text(report.metrics_text(), encoding="utf-8")
    written.append(path)

    if report.series is not None:
        written.extend(render_series_figures(report.series, out, stem=stem))
    return written


def render_series_figures(series: ReportSeries, out_dir, stem: str = "session") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    if series.latency_ms:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.hist(series.latency_ms, bins=40, color="#4878d0")
        ax.set_xlabel("per-frame processing time [ms]")
        ax.set_ylabel("frames")
        ax.set_title("Processing latency")
        fig.tight_layout()
        path = out / f"{stem}_latency_hist.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(path)

    residual = [r for r in series.residual if not math.isnan(r)]
    if residual:
        fig, ax = plt.subplots(figsize=(7, 4))
        t = series.t[-len(residual):] if len(series.t) >= len(residual) else range(len(residual))
        ax.plot(t, residual, lw=0.8, color="#d65f5f")
        ax.set_xlabel("t [s]")
        ax.set_ylabel("fit residual [mm]")
        ax.set_title("Correspondence residual")
        fig.tight_layout()
        path = out / f"{stem}_residual_trace.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(path)

    if series.y:
        ys = np.asarray(series.y)
        fig, ax = plt.subplots(figsize=(7, 4))
        t = series.t[-len(ys):] if len(series.t) >= len(ys) else range(len(ys))
        for j in range(ys.shape[1]):
            ax.plot(t, ys[:, j], lw=0.8, label=f"y{j}")
        ax.set_xlabel("t [s]")
        ax.set_ylabel("pose weight [sd]")
        ax.set_title("Pose weights")
        if ys.shape[1] <= 8:
            ax.legend(fontsize=8, ncol=4)
        fig.tight_layout()
        path = out / f"{stem}_weights_trace.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(path)

    return written


def write_weights_csv(path, times, xs, ys, residuals) -> None:
    """Delimited per-frame weights: t, x..., y..., residual."""
    xs = np.asarray(xs)
    ys = np.asarray(ys)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        header = (
            ["t"]
            + [f"x{i}" for i in range(xs.shape[1])]
            + [f"y{j}" for j in range(ys.shape[1])]
            + ["residual_mm"]
        )
        writer.writerow(header)
        for k in range(len(times)):
            row = [repr(float(times[k]))]
            row += [repr(float(v)) for v in xs[k]]
            row += [repr(float(v)) for v in ys[k]]
            row.append(repr(float(residuals[k])))
            writer.writerow(row)


def render_palate_fit_figure(residual_history, out_dir, stem: str = "palate") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(range(1, len(residual_history) + 1), residual_history, "o-", color="#6acc64")
    ax.set_xlabel("outer iteration")
    ax.set_ylabel("mean point-to-mesh distance [mm]")
    ax.set_title("Palate fit convergence")
    fig.tight_layout()
    path = out / f"{stem}_residual.png"
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
