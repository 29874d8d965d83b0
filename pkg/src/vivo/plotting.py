"""Figures written next to report files (matplotlib, Agg backend)."""

from __future__ import annotations

import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import VivoIOError  # noqa: E402

# no Software/date chunks, so reruns produce identical bytes
_META = {"Software": None}


def _save(fig, path: str) -> None:
    tmp = f"{path}.tmp.png"
    try:
        fig.savefig(tmp, dpi=100, metadata=_META)
        os.replace(tmp, path)
    except OSError as exc:
        raise VivoIOError(f"cannot write figure {path}: {exc.strerror}") from exc
    finally:
        plt.close(fig)


def plot_training(rows: Sequence[dict], path: str, title: str = "") -> None:
    """Loss and set accuracy per logged step."""
    steps = [r["step"] for r in rows if r.get("type", "step") == "step"]
    loss = [r["loss"] for r in rows if r.get("type", "step") == "step"]
    acc = [r["set_acc"] for r in rows if r.get("type", "step") == "step"]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, loss, color="tab:blue", lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss", color="tab:blue")
    if steps:
        ax2 = ax.twinx()
        ax2.plot(steps, acc, color="tab:orange", lw=1)
        ax2.set_ylabel("masked-set accuracy", color="tab:orange")
        ax2.set_ylim(-0.02, 1.02)
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)


def plot_alignment(sim: np.ndarray, region_labels: Sequence[str], tags: Sequence[str], path: str,
                   title: str = "") -> None:
    """Region x tag cosine heatmap."""
    sim = np.asarray(sim, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(1.2 + 0.6 * max(len(tags), 1), 1.0 + 0.4 * max(len(region_labels), 1)))
    im = ax.imshow(sim, vmin=-1, vmax=1, cmap="coolwarm", aspect="auto")
    ax.set_xticks(range(len(tags)), labels=list(tags), rotation=45, ha="right")
    ax.set_yticks(range(len(region_labels)), labels=list(region_labels))
    for (i, j), v in np.ndenumerate(sim):
        ax.text(j, i, f"{v:.2f}", ha="center", va="center", fontsize=7)
    fig.colorbar(im, ax=ax)
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)
