"""Figures written next to the CSV reports: loss curves, prototype usage, probe bars."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_training_curves(records, path) -> Path:
    """Grouping, contrastive and overall loss plus mean pair confidence per step."""
    steps = np.array([r.step for r in records])
    fig, (ax_loss, ax_conf) = plt.subplots(1, 2, figsize=(10, 4))
    for name in ("l_group", "l_con", "l_overall"):
        ax_loss.plot(steps, [getattr(r, name) for r in records], label=name)
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_conf.plot(steps, [r.mean_confidence for r in records], color="tab:purple")
    ax_conf.set_xlabel("step")
    ax_conf.set_ylabel("mean pair confidence")
    ax_conf.set_ylim(0, 1)
    return _save(fig, path)


def plot_prototype_usage(counts, path, title: str = "prototype usage") -> Path:
    """Bar chart of how many segments (or points) each prototype received."""
    counts = np.asarray(counts, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(8, 3.5))
    ax.bar(np.arange(len(counts)), counts, color="tab:blue")
    ax.set_xlabel("prototype")
    ax.set_ylabel("count")
    ax.set_title(title)
    return _save(fig, path)


def plot_usage_entropy(records, path, num_prototypes: int) -> Path:
    """Per-step entropy of the teacher's group histogram, with the collapse reference lines."""
    ent = []
    for r in records:
        u = np.asarray(r.usage, dtype=np.float64)
        p = u[u > 0] / u.sum() if u.sum() > 0 else np.array([1.0])
        ent.append(float(-(p * np.log(p)).sum()))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([r.step for r in records], ent, label="usage entropy")
    ax.axhline(np.log(num_prototypes), color="grey", ls="--", label="log n")
    ax.axhline(0.5 * np.log(num_prototypes), color="grey", ls=":", label="0.5 log n")
    ax.axhline(np.log(2), color="tab:red", ls=":", label="log 2")
    ax.set_xlabel("step")
    ax.set_ylabel("nats")
    ax.legend()
    return _save(fig, path)


def plot_probe(results: dict, path) -> Path:
    """Grouped bars of per-class probe accuracy, one group per encoder."""
    names = list(results)
    classes = sorted({c for r in results.values() for c in r.per_class})
    width = 0.8 / max(len(names), 1)
    fig, ax = plt.subplots(figsize=(7, 4))
    x = np.arange(len(classes))
    for i, name in enumerate(names):
        acc = [results[name].per_class.get(c, np.nan) for c in classes]
        ax.bar(x + i * width, acc, width, label=f"{name} (mean {results[name].mean_accuracy:.3f})")
    ax.set_xticks(x + width * (len(names) - 1) / 2)
    ax.set_xticklabels([str(c) for c in classes])
    ax.set_xlabel("class")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    ax.legend()
    return _save(fig, path)
