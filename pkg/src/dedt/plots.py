"""Figure analogues from metrics CSV files."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .experiments import read_metrics, write_metrics  # noqa: E402

FIGURES = ("nmse", "rate", "convergence")


class NothingToPlot(ValueError):
    pass


def _nmse(ax, rows):
    series = defaultdict(list)
    for r in rows:
        if r.nmse is not None and r.snr_db is not None:
            series[(r.method, r.mask_ratio)].append((r.snr_db, r.nmse))
    for (method, rho), pts in sorted(series.items()):
        pts.sort()
        ax.plot(*zip(*pts), "-o" if method == "DEDT" else "--s", label=f"{method} rho={rho:g}")
    ax.set_xlabel("estimation SNR (dB)")
    ax.set_ylabel("average NMSE")
    ax.set_yscale("log")
    ax.set_title("NMSE vs SNR")


def _rate(ax, rows, caption):
    series = defaultdict(list)
    refs = {}
    for r in rows:
        if r.effective_rate is None or r.method in ("DM-PPO", "RC-PPO"):
            continue
        if r.method in ("DEDT", "RCDT"):
            series[r.method].append((r.mask_ratio, r.effective_rate))
        else:
            refs[r.method] = r.effective_rate
    for method, pts in sorted(series.items()):
        pts.sort()
        ax.plot(*zip(*pts), "-o", label=method)
    for i, (method, v) in enumerate(sorted(refs.items())):
        ax.axhline(v, ls=":", color=f"C{i + 2}", label=method)
    ax.set_xlabel("mask ratio rho")
    ax.set_ylabel("effective rate (bits/s/Hz)")
    ax.set_title(f"Effective rate vs mask ratio\n{caption}", fontsize=9)


def _convergence(ax, rows):
    series = defaultdict(list)
    for r in rows:
        if r.step is not None and r.effective_rate is None and r.raw_rate is not None:
            series[r.method].append((r.step, r.raw_rate))
    for method, pts in sorted(series.items()):
        pts.sort()
        ax.plot(*zip(*pts), label=method)
    ax.set_xlabel("gradient step (DEDT) / update (PPO)")
    ax.set_ylabel("mean rate (bits/s/Hz)")
    ax.set_title("Convergence on the held-out environment")


def emit_plots(metrics_files, out_dir, figures=FIGURES,
               caption: str = "overhead: T_p = 1 symbol per element, T_s = 2N symbols per slot"):
    """Write ``metrics.csv`` (all rows) and one PNG per requested figure; returns the paths."""
    rows = [r for f in metrics_files for r in read_metrics(f)]
    if not rows:
        raise NothingToPlot("nothing to plot: the metrics files contain no rows")
    unknown = set(figures) - set(FIGURES)
    if unknown:
        raise ValueError(f"unknown figures: {sorted(unknown)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [write_metrics(out / "metrics.csv", rows)]
    for name in figures:
        fig, ax = plt.subplots(figsize=(6, 4.2))
        if name == "nmse":
            _nmse(ax, rows)
        elif name == "rate":
            _rate(ax, rows, caption)
        else:
            _convergence(ax, rows)
        if ax.lines:
            ax.legend(fontsize=7)
        else:
            ax.text(0.5, 0.5, "no data", ha="center", va="center", transform=ax.transAxes)
        fig.tight_layout()
        path = out / f"{name}.png"
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        paths.append(path)
    return paths
