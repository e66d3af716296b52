"""Figures rendered next to the CSV outputs (opt-in from the CLI)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .train import TrainingTrace  # noqa: E402


def trace_figure(trace: TrainingTrace, path, title: str = "") -> Path:
    """Three panels: PCC/MSE curves, sigma_yhat, gradient ratio against its ceiling."""
    ep = trace.series("epoch")
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))

    ax = axes[0]
    ax.plot(ep, trace.series("pcc"), label="train PCC", color="C0")
    ax.plot(ep, trace.series("pcc", "val"), label="val PCC", color="C0", ls="--")
    if trace.plateau_epoch is not None:
        ax.axvline(trace.plateau_epoch, color="grey", lw=0.8, ls=":")
    ax.set_xlabel("epoch")
    ax.set_ylabel("PCC")
    twin = ax.twinx()
    twin.plot(ep, trace.series("mse"), color="C3", label="train MSE")
    twin.set_yscale("log")
    twin.set_ylabel("MSE")
    ax.legend(loc="lower right", fontsize=8)

    axes[1].plot(ep, trace.series("sigma_yhat"), color="C2", label=r"$\sigma_{\hat y}$")
    axes[1].plot(ep, trace.series("sigma_y"), color="k", ls="--", lw=0.8, label=r"$\sigma_y$")
    axes[1].set_xlabel("epoch")
    axes[1].legend(fontsize=8)

    axes[2].plot(ep, trace.series("r_global"), label="observed ratio")
    axes[2].plot(ep, trace.series("r_global_bound"), ls="--", label="ceiling")
    axes[2].set_yscale("log")
    axes[2].set_xlabel("epoch")
    axes[2].legend(fontsize=8)

    if title:
        fig.suptitle(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def study_figure(summary_rows: list[dict], path) -> Path:
    """Median final validation PCC per level and variant, with the mean-pooling line."""
    levels = sorted({r["level"] for r in summary_rows})
    variants = list(dict.fromkeys(r["variant"] for r in summary_rows))
    x = np.arange(len(levels))
    width = 0.8 / max(1, len(variants))
    fig, ax = plt.subplots(figsize=(7, 3.8))
    for k, v in enumerate(variants):
        vals = [next((r["median_val_pcc"] for r in summary_rows if r["level"] == lv and r["variant"] == v), np.nan)
                for lv in levels]
        ax.bar(x + (k - (len(variants) - 1) / 2) * width, vals, width, label=v)
    rho0 = [next(r["rho0"] for r in summary_rows if r["level"] == lv) for lv in levels]
    ax.plot(x, rho0, "k_", ms=30, mew=2, label="mean pooling")
    ax.set_xticks(x, [f"{lv:.2f}" for lv in levels])
    ax.set_xlabel(r"$\tilde\sigma$")
    ax.set_ylabel("median val PCC")
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
