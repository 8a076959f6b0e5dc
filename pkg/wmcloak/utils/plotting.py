# wmcloak/utils/plotting.py
import logging
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

OBJECTIVE_KEYS = ("l_adv", "total")
COMPONENT_KEYS = ("l_gan", "l_pert", "l_disc")


def plot_loss_curves(history: Iterable, path: Union[str, Path]) -> Path:
    """Per-epoch loss curves (EpochRecord objects or dicts) to a PNG"""
    rows = [r if isinstance(r, dict) else vars(r) for r in history]
    frame = pd.DataFrame(rows)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    for key in OBJECTIVE_KEYS:
        if key in frame:
            axes[0].plot(frame["epoch"], frame[key], label=key)
    for key in COMPONENT_KEYS:
        if key in frame:
            axes[1].plot(frame["epoch"], frame[key], label=key)
    for ax in axes:
        ax.set_xlabel("epoch")
        ax.legend()
        ax.grid(alpha=0.3)
    axes[0].set_title("generator objective")
    axes[1].set_title("GAN / perturbation / discriminator")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    logger.debug(f"Loss curves written to {path}")
    return path


def plot_sweep(frame: pd.DataFrame, x: str, ys: Sequence[str], path: Union[str, Path],
               title: Optional[str] = None) -> Path:
    """One line per metric column against a swept parameter"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(1, len(ys), figsize=(4.5 * len(ys), 4), squeeze=False)
    for ax, y in zip(axes[0], ys):
        ax.plot(frame[x], frame[y], marker="o")
        ax.set_xlabel(x)
        ax.set_ylabel(y)
        ax.grid(alpha=0.3)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_comparison(original: np.ndarray, cloaked: np.ndarray, path: Union[str, Path], gain: float = 5.0) -> Path:
    """Original, cloaked and amplified difference side by side"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    diff = np.clip(np.abs(cloaked.astype(np.float64) - original) * gain, 0.0, 1.0)
    fig = plt.figure(figsize=(15, 5))
    for i, (img, title) in enumerate(((original, "Original"), (cloaked, "Cloaked"),
                                      (diff, f"Difference (×{gain:g})")), start=1):
        plt.subplot(1, 3, i)
        plt.imshow(np.clip(img, 0.0, 1.0))
        plt.title(title)
        plt.axis('off')
    fig.savefig(path)
    plt.close(fig)
    return path
