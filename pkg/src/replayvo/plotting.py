"""Report figures (SVG or PNG, chosen by file extension)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# keep SVG output byte-stable across runs
matplotlib.rcParams["svg.hashsalt"] = "replayvo"
matplotlib.rcParams["svg.fonttype"] = "none"


def _save(fig, path) -> None:
    meta = {"Date": None} if str(path).endswith(".svg") else {}
    fig.savefig(path, metadata=meta, bbox_inches="tight")
    plt.close(fig)


def plot_trajectories(path, trajectories: dict, title: str = "") -> None:
    """Top-down (x, z) view of named :class:`TrajectoryRecord` objects."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, traj in trajectories.items():
        pos = np.stack([p.translation for p in traj.poses]) if len(traj) else np.zeros((0, 3))
        ax.plot(pos[:, 0], pos[:, 2], label=name, lw=1.2)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("z [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(loc="best", fontsize=8)
    if title:
        ax.set_title(title)
    _save(fig, path)


def plot_loss_traces(path, reports, title: str = "") -> None:
    """First and last loss of every adaptation step."""
    steps = [r for r in reports if r.loss_trace]
    fig, ax = plt.subplots(figsize=(6, 3))
    if steps:
        x = np.arange(len(steps))
        ax.plot(x, [r.loss_trace[0] for r in steps], lw=0.8, label="first cycle")
        ax.plot(x, [r.loss_trace[-1] for r in steps], lw=0.8, label="last cycle")
        ax.legend(loc="best", fontsize=8)
    ax.set_xlabel("adaptation step")
    ax.set_ylabel("loss")
    if title:
        ax.set_title(title)
    _save(fig, path)


def plot_error_matrix(path, report, metric: str = "t_err") -> None:
    """Heat map of a :class:`ContinualReport` (rows: sequences, columns: checkpoints)."""
    m = report.matrix(metric)
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(report.steps), 0.8 + 0.6 * len(report.sequences)))
    im = ax.imshow(m, cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(report.steps)), report.steps)
    ax.set_yticks(range(len(report.sequences)), report.sequences)
    for i in range(m.shape[0]):
        for j in range(m.shape[1]):
            ax.text(j, i, f"{m[i, j]:.1f}", ha="center", va="center", color="w", fontsize=8)
    fig.colorbar(im, ax=ax, label=metric)
    _save(fig, path)
