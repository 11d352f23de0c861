"""Report emission: metrics as JSON and CSV, confusion counts, and
matplotlib figures rendered to files next to the delimited output."""

from __future__ import annotations

import json

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .protocol import MetricsReport


class ReportFormatError(ValueError):
    """Serialized metrics do not follow the declared schema."""


_METRIC_KEYS = {"accuracies", "average_acc", "pd", "delta_fi"}


def metrics_json(report: MetricsReport) -> str:
    payload = {
        "accuracies": [float(a) for a in report.accuracies],
        "average_acc": float(report.average_acc),
        "pd": float(report.pd),
        "delta_fi": None if report.delta_fi is None else float(report.delta_fi),
    }
    return json.dumps(payload, indent=2) + "\n"


def metrics_from_json(text: str) -> MetricsReport:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as e:
        raise ReportFormatError(f"bad metrics json: {e}") from None
    if not isinstance(payload, dict) or set(payload) != _METRIC_KEYS:
        raise ReportFormatError(f"metrics json must carry exactly the keys {sorted(_METRIC_KEYS)}")
    return MetricsReport(
        accuracies=[float(a) for a in payload["accuracies"]],
        average_acc=float(payload["average_acc"]),
        pd=float(payload["pd"]),
        delta_fi=None if payload["delta_fi"] is None else float(payload["delta_fi"]),
    )


def metrics_csv(report: MetricsReport) -> str:
    lines = ["session,accuracy"]
    lines += [f"{i},{a:.6f}" for i, a in enumerate(report.accuracies)]
    return "\n".join(lines) + "\n"


def confusion_csv(classes: np.ndarray, counts: np.ndarray) -> str:
    """Counts as CSV, rows are true classes, columns are predictions."""
    header = "true," + ",".join(str(int(c)) for c in classes)
    lines = [header]
    for cls, row in zip(classes, counts):
        lines.append(f"{int(cls)}," + ",".join(str(int(v)) for v in row))
    return "\n".join(lines) + "\n"


def train_log_csv(logs: list[dict]) -> str:
    lines = ["epoch,loss,class_loss,sscl_loss"]
    lines += [
        f"{rec['epoch']},{rec['loss']:.6f},{rec['class_loss']:.6f},{rec['sscl_loss']:.6f}"
        for rec in logs
    ]
    return "\n".join(lines) + "\n"


def save_session_curve(accuracies, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(range(len(accuracies)), accuracies, marker="o")
    ax.set_xlabel("session")
    ax.set_ylabel("accuracy (%)")
    ax.set_title("accuracy across sessions")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_loss_curve(logs: list[dict], path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    epochs = [rec["epoch"] for rec in logs]
    ax.plot(epochs, [rec["loss"] for rec in logs], label="joint")
    ax.plot(epochs, [rec["class_loss"] for rec in logs], label="class", linestyle="--")
    if any(rec["sscl_loss"] for rec in logs):
        ax.plot(epochs, [rec["sscl_loss"] for rec in logs], label="contrastive", linestyle=":")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean batch loss")
    ax.set_title("base session training loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_confusion_heatmap(classes: np.ndarray, counts: np.ndarray, path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(counts, cmap="viridis")
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title("final-session confusion")
    step = max(1, classes.size // 8)
    ticks = range(0, classes.size, step)
    ax.set_xticks(list(ticks), [str(int(classes[i])) for i in ticks])
    ax.set_yticks(list(ticks), [str(int(classes[i])) for i in ticks])
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_sweep_curve(deltas, final_accuracies, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(deltas, final_accuracies, marker="s")
    ax.set_xlabel("mix coefficient")
    ax.set_ylabel("final-session accuracy (%)")
    ax.set_title("mix coefficient sweep")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_variant_curves(rows: list[tuple[str, list[float]]], path) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    for name, accs in rows:
        ax.plot(range(len(accs)), accs, marker="o", label=name)
    ax.set_xlabel("session")
    ax.set_ylabel("accuracy (%)")
    ax.set_title("ablation grid")
    ax.legend(fontsize=7)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
