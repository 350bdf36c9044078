"""File-based plots: affinity heatmaps, attention maps, prediction grids.

Everything renders to PNG on disk (no interactive windows). The
one-pixel-per-cell affinity heatmap is the canonical dump (its pixel
count equals the number of matrix cells); the "_large" variant adds
axes, numbers, and a colorbar for human reading.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

from . import autodiff as ad
from .data import LABEL_PALETTE


def _colormap(values: np.ndarray, vmin=None, vmax=None, cmap="viridis") -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    lo = v.min() if vmin is None else vmin
    hi = v.max() if vmax is None else vmax
    norm = (v - lo) / (hi - lo) if hi > lo else np.full_like(v, 0.5)
    rgba = plt.get_cmap(cmap)(np.clip(norm, 0.0, 1.0))
    return (rgba[..., :3] * 255.0 + 0.5).astype(np.uint8)


def affinity_heatmap_png(matrix: np.ndarray, path) -> None:
    """N x N matrix -> N x N pixel PNG (one pixel per cell)."""
    Image.fromarray(_colormap(matrix), "RGB").save(path)


def affinity_figure_png(matrix: np.ndarray, task_names: list[str], path) -> None:
    """Annotated heatmap: columns are target tasks, rows are source tasks."""
    m = np.asarray(matrix, dtype=np.float64)
    n = m.shape[0]
    fig, ax = plt.subplots(figsize=(1.1 * n + 2.2, 1.1 * n + 1.2), dpi=110)
    im = ax.imshow(m, cmap="viridis", vmin=0.0)
    ax.set_xticks(range(n), task_names, rotation=30, ha="right")
    ax.set_yticks(range(n), task_names)
    ax.set_xlabel("target task t")
    ax.set_ylabel("source task n")
    mid = 0.5 * (m.min() + m.max())
    for i in range(n):
        for j in range(n):
            ax.text(j, i, f"{m[i, j]:.2f}", ha="center", va="center", fontsize=8,
                    color="white" if m[i, j] < mid else "black")
    fig.colorbar(im, ax=ax, fraction=0.046)
    ax.set_title("task affinity")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def attention_heatmap_png(weights: np.ndarray, path, scale: int = 8) -> None:
    """One (T, T) softmax map -> nearest-upscaled heatmap PNG."""
    img = _colormap(weights, vmin=0.0)
    img = np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)
    Image.fromarray(img, "RGB").save(path)


def export_attention_maps(model, features: list[np.ndarray], affinity,
                          out_dir, block_index: int = 0, sample: int = 0) -> list:
    """Dump per-task, per-head attention maps of one adapter block.

    Returns the list of written paths, named attn_t{task}_h{head}.png.
    """
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    block = model.chain.blocks[block_index]
    x = ad.as_tensor(np.ascontiguousarray(features[block_index][sample:sample + 1]))
    written = []
    with ad.no_grad():
        u = block.norm1(x)
        for t in range(model.n_tasks):
            logits = block.attn.attention_logits(u, affinity.column(t), t)
            probs = ad.softmax(logits, axis=-1).data[0]  # (heads, hw, hw)
            for h in range(probs.shape[0]):
                path = out / f"attn_t{t}_h{h}.png"
                attention_heatmap_png(probs[h], path)
                written.append(path)
    return written


# -- prediction rendering ---------------------------------------------


def seg_to_rgb(labels: np.ndarray) -> np.ndarray:
    idx = np.clip(labels.astype(np.int64), 0, len(LABEL_PALETTE) - 1)
    return LABEL_PALETTE[idx]


def depth_to_gray(depth: np.ndarray) -> np.ndarray:
    d = np.clip(np.asarray(depth, dtype=np.float64), 0.0, 1.0)
    g = (d * 255.0 + 0.5).astype(np.uint8)
    return np.repeat(g[..., None] if g.ndim == 2 else g, 3, axis=-1)


def normal_to_rgb(normal: np.ndarray) -> np.ndarray:
    n = np.clip((np.asarray(normal, dtype=np.float64) + 1.0) * 0.5, 0.0, 1.0)
    return (n * 255.0 + 0.5).astype(np.uint8)


def edge_to_gray(edge: np.ndarray) -> np.ndarray:
    e = (np.asarray(edge, dtype=np.float64) > 0.5).astype(np.uint8) * 255
    if e.ndim == 3 and e.shape[-1] == 1:
        e = e[..., 0]
    return np.repeat(e[..., None], 3, axis=-1)


def prediction_png(task: str, array: np.ndarray, path) -> None:
    """Single-sample per-task dump with the task's canonical encoding."""
    if task == "segmentation":
        img = seg_to_rgb(array)
    elif task == "depth":
        img = depth_to_gray(array[..., 0] if array.ndim == 3 else array)
    elif task == "normal":
        img = normal_to_rgb(array)
    elif task == "edge":
        img = edge_to_gray(array)
    else:
        raise KeyError(task)
    Image.fromarray(img, "RGB").save(path)


def prediction_grid(images: np.ndarray, gts: dict, preds: dict, path,
                    k_seg: int = 6, scale: int = 2) -> None:
    """Rows = samples; columns = input, then gt/pred pairs per task."""
    del k_seg  # labels index the shared fixed palette directly
    rows = []
    for i in range(images.shape[0]):
        cells = [(np.clip(images[i], 0, 1) * 255 + 0.5).astype(np.uint8)]
        for task in ("segmentation", "depth", "normal", "edge"):
            for source in (gts, preds):
                arr = source[task][i]
                if task == "segmentation":
                    cells.append(seg_to_rgb(arr))
                elif task == "depth":
                    cells.append(depth_to_gray(arr[..., 0]))
                elif task == "normal":
                    cells.append(normal_to_rgb(arr))
                else:
                    cells.append(edge_to_gray(arr))
        h = cells[0].shape[0]
        sep = np.full((h, 2, 3), 255, dtype=np.uint8)
        row = cells[0]
        for c in cells[1:]:
            row = np.concatenate([row, sep, c], axis=1)
        rows.append(row)
    sep_row = np.full((2, rows[0].shape[1], 3), 255, dtype=np.uint8)
    grid = rows[0]
    for r in rows[1:]:
        grid = np.concatenate([grid, sep_row, r], axis=0)
    grid = np.repeat(np.repeat(grid, scale, axis=0), scale, axis=1)
    Image.fromarray(grid, "RGB").save(path)
