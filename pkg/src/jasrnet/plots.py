from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image, ImageDraw  # noqa: E402

from .datasets import to_uint8  # noqa: E402


def plot_loss_curve(history, path, title=""):
    steps = [r["step"] for r in history.steps]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, [r["total"] for r in history.steps], label="total")
    if any(r["sr_term"] for r in history.steps):
        ax.plot(steps, [r["sr_term"] for r in history.steps], label="SR (L1)")
    if any(r["heatmap_term"] for r in history.steps):
        ax.plot(steps, [r["heatmap_term"] for r in history.steps], label="heatmap (MSE)")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, dpi=80, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_metric_curve(history, key, path, title=""):
    rows = [r for r in history.epochs if r.get(key) is not None]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([r["epoch"] for r in rows], [r[key] for r in rows], marker="o")
    ax.set_xlabel("epoch")
    ax.set_ylabel(key)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=80, metadata={"Software": None})
    plt.close(fig)
    return path


def draw_landmarks(image, landmarks, color=(0, 255, 0), radius=1) -> Image.Image:
    """One filled square marker per landmark on a copy of ``image`` (H x W x 3 in [0, 1])."""
    im = Image.fromarray(to_uint8(image))
    d = ImageDraw.Draw(im)
    for x, y in np.asarray(landmarks, dtype=np.float64):
        cx, cy = int(np.floor(x)), int(np.floor(y))
        d.rectangle([cx - radius, cy - radius, cx + radius, cy + radius], fill=color)
    return im
