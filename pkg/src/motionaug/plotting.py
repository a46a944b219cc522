"""Report figures written next to the CSV/JSON reports."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.dpi": 100,
    "svg.hashsalt": "motionaug",
}
# no Software/Date metadata so reruns are byte-identical
PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, metadata=PNG_META)
    plt.close(fig)
    return path


def plot_reward_traces(traces: Mapping[str, np.ndarray], frame_time: float | None, path) -> Path:
    """Per-frame normalized imitation reward for each corrected motion."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(6.0, 3.2))
        for name, r in sorted(traces.items()):
            r = np.asarray(r)
            x = np.arange(len(r)) * frame_time if frame_time else np.arange(len(r))
            ax.plot(x, r, lw=1, label=name)
        ax.set_xlabel("time [s]" if frame_time else "frame")
        ax.set_ylabel("r / r_max")
        ax.set_ylim(0, 1.05)
        if 0 < len(traces) <= 12:
            ax.legend(loc="lower left", ncol=2)
        fig.tight_layout()
        return _save(fig, path)


def plot_dtw_table(table: np.ndarray, test_ids: Sequence[str], cand_ids: Sequence[str], path) -> Path:
    """Heatmap of test x candidate DTW distances with each row's minimum marked."""
    table = np.asarray(table)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(max(3.0, 0.25 * len(cand_ids) + 2), max(2.5, 0.25 * len(test_ids) + 1.5)))
        im = ax.imshow(table, aspect="auto", cmap="viridis")
        rows = np.arange(len(test_ids))
        ax.scatter(np.argmin(table, axis=1), rows, marker="x", c="w", s=20)
        ax.set_xlabel("candidate")
        ax.set_ylabel("test")
        if len(test_ids) <= 30:
            ax.set_yticks(rows, labels=list(test_ids))
        if len(cand_ids) <= 30:
            ax.set_xticks(np.arange(len(cand_ids)), labels=list(cand_ids), rotation=90)
        fig.colorbar(im, ax=ax, label="DTW")
        fig.tight_layout()
        return _save(fig, path)


def plot_nearest_dtw(test_ids: Sequence[str], nearest: Sequence[float], path) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(max(3.0, 0.3 * len(test_ids) + 1.5), 3.0))
        ax.bar(np.arange(len(nearest)), nearest, color="0.4")
        ax.axhline(float(np.mean(nearest)), color="C3", lw=1, label="mean")
        if len(test_ids) <= 30:
            ax.set_xticks(np.arange(len(test_ids)), labels=list(test_ids), rotation=90)
        ax.set_ylabel("min DTW")
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)
