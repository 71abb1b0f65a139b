"""Figures written next to the CSV outputs.  Rendering uses the Agg backend."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
}

LOSS_KEYS = ("l_seg", "l_adv_E", "l_adv_D", "l_dis_E", "l_dis_D", "l_mse_E", "l_mse_D")


def _read(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _series(rows, key):
    xs, ys = [], []
    for r in rows:
        if r.get(key):
            xs.append(int(r["iter"]))
            ys.append(float(r[key]))
    return xs, ys


def training_curves(run_dir: str | Path) -> Path | None:
    """Loss curves, learning rates and per-epoch target metrics of one run."""
    run_dir = Path(run_dir)
    rows = _read(run_dir / "metrics.csv")
    if not rows:
        return None
    epochs = _read(run_dir / "epoch_metrics.csv")
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
        for key in LOSS_KEYS:
            xs, ys = _series(rows, key)
            if xs:
                axes[0].plot(xs, ys, lw=0.8, label=key)
        axes[0].set_yscale("log")
        axes[0].set_xlabel("iteration")
        axes[0].set_title("losses")
        axes[0].legend(ncol=2)
        for key in ("lr_seg", "lr_disc"):
            xs, ys = _series(rows, key)
            axes[1].plot(xs, ys, label=key)
        axes[1].set_xlabel("iteration")
        axes[1].set_title("learning rate")
        axes[1].legend()
        if epochs:
            ep = [int(r["epoch"]) + 1 for r in epochs]
            for key in ("dice_cup", "dice_disc", "gamma_cdr"):
                axes[2].plot(ep, [float(r[key]) for r in epochs], marker="o", ms=2, label=key)
            axes[2].set_xlabel("epoch")
            axes[2].set_title("target test")
            axes[2].legend()
        fig.tight_layout()
        out = run_dir / "training_curves.png"
        fig.savefig(out)
        plt.close(fig)
    return out


def ablation_bars(summary_rows: list[dict], out: str | Path) -> Path:
    """Mean +- sd bars per variant for dice_cup, dice_disc and gamma_cdr."""
    out = Path(out)
    names = [r["variant"] for r in summary_rows]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
        for ax, key in zip(axes, ("dice_cup", "dice_disc", "gamma_cdr")):
            means = [float(r[f"{key}_mean"]) for r in summary_rows]
            sds = [float(r[f"{key}_sd"]) for r in summary_rows]
            ax.bar(range(len(names)), means, yerr=sds, capsize=3, color="0.6", edgecolor="0.2")
            ax.set_xticks(range(len(names)))
            ax.set_xticklabels(names, rotation=35, ha="right")
            ax.set_title(key)
        fig.tight_layout()
        fig.savefig(out)
        plt.close(fig)
    return out


def trend_plot(rows: list[dict], out: str | Path) -> Path:
    """Per-seed target dice_cup of full adaptation vs. source-only, one panel per shift."""
    out = Path(out)
    shifts = sorted({float(r["shift"]) for r in rows})
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(shifts), figsize=(4 * len(shifts), 3.2), squeeze=False)
        for ax, shift in zip(axes[0], shifts):
            sub = [r for r in rows if float(r["shift"]) == shift]
            for variant, marker in (("source_only", "s"), ("full", "o")):
                pts = sorted((int(r["seed"]), float(r["dice_cup"])) for r in sub if r["variant"] == variant)
                if pts:
                    ax.plot([p[0] for p in pts], [p[1] for p in pts], marker=marker, ls="none", label=variant)
            ax.set_xlabel("seed")
            ax.set_ylabel("target dice_cup")
            ax.set_title(f"shift = {shift:g}")
            ax.legend()
        fig.tight_layout()
        fig.savefig(out)
        plt.close(fig)
    return out
