"""Figures for ``describe --plot`` and ``bench --plot`` (written to files, never shown)."""
from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .analysis import CostReport  # noqa: E402
from .bench import BenchReport  # noqa: E402

STYLE = {
    "figure.dpi": 120,
    "savefig.bbox": "tight",
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
}


def plot_costs(report: CostReport, path, title: str = "") -> str:
    """Side-by-side bars of parameters (M) and MACs (G) per stage group."""
    groups = report.by_stage()
    names = list(groups)
    params = [groups[n][0] / 1e6 for n in names]
    macs = [groups[n][1] / 1e9 for n in names]
    with plt.rc_context(STYLE):
        fig, (ax_p, ax_f) = plt.subplots(1, 2, figsize=(9, 3.6))
        ax_p.bar(names, params, color="#4c72b0")
        ax_p.set_ylabel("parameters (M)")
        ax_f.bar(names, macs, color="#dd8452")
        h, w = report.input_size
        ax_f.set_ylabel(f"GMACs @ {h}x{w}")
        for ax in (ax_p, ax_f):
            ax.tick_params(axis="x", rotation=30)
        fig.suptitle(title or f"{report.params_total / 1e6:.2f} M params, {report.flops_total / 1e9:.2f} GMACs")
        return _save(fig, path)


def plot_bench(report: BenchReport, path, title: str = "") -> str:
    """Horizontal bars of median latency with a tick at p95, one per target."""
    rows = report.rows
    labels = [r.target for r in rows]
    med = [r.median_ms for r in rows]
    spread = [r.p95_ms - r.median_ms for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(7, 0.9 + 0.22 * len(rows)))
        ax.barh(labels, med, xerr=[[0] * len(rows), spread], color="#55a868", capsize=2)
        ax.invert_yaxis()
        ax.set_xlabel("milliseconds (median, whisker to p95)")
        r0 = rows[0]
        ax.set_title(title or f"{report.model}: batch {r0.batch}, {r0.height}x{r0.width}, threads {report.threads}")
        return _save(fig, path)


def _save(fig, path) -> str:
    path = os.fspath(path)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path
