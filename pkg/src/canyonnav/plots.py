"""Report figures rendered alongside the delimited outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_error_series(err_report, path) -> Path:
    """Three stacked panels: East/North/Up error time series."""
    fig, axes = plt.subplots(3, 1, figsize=(8, 6), sharex=True)
    labels = ["East", "North", "Up"]
    rmses = [err_report.rmse_east, err_report.rmse_north, err_report.rmse_up]
    for i, ax in enumerate(axes):
        ax.plot(err_report.times, err_report.errors[:, i], lw=0.8)
        ax.axhline(0.0, color="k", lw=0.4)
        ax.set_ylabel(f"{labels[i]} (m)")
        ax.text(0.99, 0.92, f"RMSE {rmses[i]:.3f} m", transform=ax.transAxes,
                ha="right", va="top", fontsize=8)
        ax.grid(alpha=0.3)
    axes[-1].set_xlabel("time (s)")
    fig.suptitle("Position error vs ground truth")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def plot_los_counts(los_rows, path) -> Path:
    """Per-epoch LOS/total satellite counts (top) and PDOP (bottom)."""
    fig, (ax0, ax1) = plt.subplots(2, 1, figsize=(8, 5), sharex=True)
    if los_rows:
        t = [r[0] for r in los_rows]
        n_los = [r[1] for r in los_rows]
        n_tot = [r[3] for r in los_rows]
        pdop = [(r[4] if r[4] != "" else float("nan")) for r in los_rows]
        ax0.step(t, n_tot, where="mid", label="total", lw=0.9)
        ax0.step(t, n_los, where="mid", label="LOS", lw=0.9)
        ax0.legend(loc="upper right", fontsize=8)
        ax1.plot(t, pdop, lw=0.9)
    ax0.set_ylabel("satellites")
    ax0.grid(alpha=0.3)
    ax1.set_ylabel("PDOP")
    ax1.set_xlabel("time (s)")
    ax1.grid(alpha=0.3)
    fig.suptitle("Satellite visibility and geometry")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def plot_segmentation_summary(metrics: dict, path) -> Path:
    """Bar chart of per-method accuracy/FPS from a segmentation run."""
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(8, 3.2))
    methods = list(metrics)
    acc = [metrics[m]["pixel_accuracy_mean"] for m in methods]
    fps = [metrics[m]["fps"] for m in methods]
    ax0.bar(methods, acc)
    ax0.set_ylim(0, 1.05)
    ax0.set_ylabel("pixel accuracy")
    ax1.bar(methods, fps)
    ax1.set_ylabel("images / s")
    for ax in (ax0, ax1):
        ax.tick_params(axis="x", rotation=20)
        ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)
