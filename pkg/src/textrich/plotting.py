"""Report figures (matplotlib, file output only)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_loss(log: list[dict], path) -> None:
    """Training loss per logged step, one line per stage."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    offset = 0
    for stage in sorted({e["stage"] for e in log}):
        rows = [e for e in log if e["stage"] == stage]
        ax.plot([offset + e["step"] for e in rows], [e["loss"] for e in rows], label=f"stage {stage}")
        offset += rows[-1]["step"] + 1
    ax.set_yscale("log")
    ax.set_xlabel("step (cumulative)")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_metrics(report: dict, path) -> None:
    """Horizontal bar chart of every metric value in an evaluation report."""
    metrics = report["metrics"]
    labels = [f"{m['group']}:{m['name']}" for m in metrics]
    values = [m["value"] for m in metrics]
    fig, ax = plt.subplots(figsize=(6, 0.4 * max(len(labels), 1) + 1.2))
    ax.barh(range(len(values)), values, color="tab:blue")
    ax.set_yticks(range(len(labels)), labels)
    ax.set_xlim(0, 1)
    ax.invert_yaxis()
    ax.set_xlabel("score")
    for i, v in enumerate(values):
        ax.text(min(v, 0.85) + 0.01, i, f"{v:.3f}", va="center")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
