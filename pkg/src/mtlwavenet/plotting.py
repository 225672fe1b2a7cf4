"""Figures written next to evaluation reports and training logs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import COLUMNS, EvalReport, F0Track  # noqa: E402


def plot_report(report: EvalReport, path) -> Path:
    """One bar panel per metric, one bar per system."""
    fig, axes = plt.subplots(1, len(COLUMNS), figsize=(3.2 * len(COLUMNS), 3.2))
    names = [r.system for r in report.rows]
    for k, (ax, title) in enumerate(zip(axes, COLUMNS)):
        vals = [r.values()[k] for r in report.rows]
        heights = [np.nan if v is None else v for v in vals]
        ax.bar(range(len(names)), heights, color="tab:blue")
        ax.set_xticks(range(len(names)), names, rotation=30, ha="right", fontsize=8)
        ax.set_title(title, fontsize=9)
        for i, v in enumerate(vals):
            if v is None:
                ax.text(i, 0, "n/a", ha="center", va="bottom", fontsize=7)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_loss(records: list[dict], path, smooth: int = 50) -> Path:
    """Cross-entropy (and secondary terms, when logged) against step."""
    steps = np.array([r["step"] for r in records])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key in ("ce", "cep", "f0", "vuv"):
        if not records or records[0].get(key) is None:
            continue
        y = np.array([r[key] for r in records], dtype=float)
        if smooth > 1 and y.size >= smooth:
            y = np.convolve(y, np.ones(smooth) / smooth, mode="valid")
            x = steps[smooth - 1:]
        else:
            x = steps
        ax.plot(x, y, label=key, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_f0_contours(reference: F0Track, generated: dict[str, F0Track], path, frame_shift_ms: float = 5.0) -> Path:
    """Overlay F0 tracks (unvoiced frames left blank)."""
    fig, ax = plt.subplots(figsize=(7, 3.2))
    for label, track in [("reference", reference), *generated.items()]:
        t = np.arange(len(track)) * frame_shift_ms / 1000.0
        y = np.where(track.vuv == 1, track.f0_hz, np.nan)
        ax.plot(t, y, label=label, linewidth=1.4 if label == "reference" else 1.0)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("F0 (Hz)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
