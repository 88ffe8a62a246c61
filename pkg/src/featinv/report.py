"""Figures for finished runs, written as PNGs next to the run's CSV files."""

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io import load_png, sha256_file, write_json  # noqa: E402

TRACE_PARTS = ("total", "reconstruction", "tv", "negentropy", "temporal")


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _num(s):
    return float(s) if s not in ("", None) else np.nan


def plot_loss_trace(csv_path, out_path):
    rows = _rows(csv_path)
    frames = sorted({int(r["frame"]) for r in rows}) if rows and "frame" in rows[0] else [None]
    fig, ax = plt.subplots(figsize=(6, 4))
    for f in frames:
        sel = [r for r in rows if f is None or int(r["frame"]) == f]
        it = [int(r["iteration"]) for r in sel]
        for part in TRACE_PARTS:
            vals = np.array([_num(r[part]) for r in sel])
            if np.all(vals == 0):
                continue
            label = part if f is None else f"{part} (frame {f})"
            ax.plot(it, np.maximum(vals, 1e-12), label=label, lw=1)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_train_trace(csv_path, out_path):
    rows = _rows(csv_path)
    ep = [int(r["epoch"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ep, [_num(r["train_loss"]) for r in rows], label="train")
    val = [_num(r["val_loss"]) for r in rows]
    if not np.all(np.isnan(val)):
        ax.plot(ep, val, label="validation")
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def image_grid(originals, recons, out_path, max_images=10, labels=None):
    """Two-row grid: originals on top, reconstructions below. Images are (C, H, W) in [0, 1]."""
    n = min(len(originals), len(recons), max_images)
    fig, axes = plt.subplots(2, n, figsize=(1.3 * n, 2.8), squeeze=False)
    for i in range(n):
        for row, img in enumerate((originals[i], recons[i])):
            ax = axes[row][i]
            ax.imshow(np.clip(np.asarray(img).transpose(1, 2, 0), 0, 1), interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if labels is not None and row == 1:
                ax.set_xlabel(labels[i], fontsize=6)
    axes[0][0].set_ylabel("original", fontsize=7)
    axes[1][0].set_ylabel("recon", fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_tradeoff(csv_path, out_path):
    rows = _rows(csv_path)
    sig = [float(r["sigma"]) for r in rows]
    fig, ax1 = plt.subplots(figsize=(6, 4))
    ax1.errorbar(sig, [float(r["accuracy"]) for r in rows], yerr=[float(r["accuracy_std"]) for r in rows],
                 marker="o", color="tab:blue", label="task accuracy")
    ax1.set_xlabel("noise sigma")
    ax1.set_ylabel("task accuracy", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(sig, [_num(r["attack_psnr"]) for r in rows], marker="s", color="tab:red", label="attack PSNR")
    ax2.set_ylabel("attack PSNR (dB)", color="tab:red")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def _psnr_labels(directory, n):
    path = directory / "metrics.csv"
    if not path.exists():
        return None
    rows = _rows(path)
    return [f"{float(r['psnr']):.1f} dB" for r in rows[:n]]


def render_report(run_dir, max_images=10):
    """Render every figure the run's files support; returns the written paths.

    If the directory holds a manifest, the new figures are added to its
    artifact list so the manifest keeps covering every file.
    """
    run_dir = Path(run_dir)
    written = []
    for d in [run_dir, *sorted(p for p in run_dir.iterdir() if p.is_dir() and not p.name.startswith("."))]:
        if (d / "loss_trace.csv").exists():
            written.append(plot_loss_trace(d / "loss_trace.csv", d / "loss_curves.png"))
        if (d / "train_trace.csv").exists():
            written.append(plot_train_trace(d / "train_trace.csv", d / "train_curve.png"))
        if (d / "tradeoff.csv").exists():
            written.append(plot_tradeoff(d / "tradeoff.csv", d / "tradeoff.png"))
        recons = sorted(d.glob("recon_*.png"))[:max_images]
        if recons:
            origs = [d / p.name.replace("recon_", "original_") for p in recons]
            if all(p.exists() for p in origs):
                written.append(image_grid([load_png(p) for p in origs], [load_png(p) for p in recons],
                                          d / "grid.png", max_images, _psnr_labels(d, len(recons))))
        manifest = d / "manifest.json"
        if manifest.exists():
            m = json.loads(manifest.read_text())
            for p in written:
                if p.parent == d:
                    m["artifacts"][p.name] = sha256_file(p)
            write_json(manifest, m)
    return written
