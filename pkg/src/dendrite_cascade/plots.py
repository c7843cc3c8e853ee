"""Figures written next to the CSV outputs.

Overlays are drawn with Pillow straight onto the upscaled image.  Curves and
bar charts use matplotlib's Agg backend; every PNG is re-encoded as 8-bit
RGB so reruns give identical bytes.
"""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image, ImageDraw  # noqa: E402

GT_COLOR = (230, 30, 30)
ESD_COLOR = (30, 200, 60)
HSD_COLOR = (250, 200, 0)
REJECT_COLOR = (120, 120, 255)

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _to_rgb_array(image):
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] in (1, 3):
        arr = arr.transpose(1, 2, 0)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.shape[-1] == 1:
        arr = np.repeat(arr, 3, axis=-1)
    return np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)


def _triangle(draw, point, scale, size, color, apex="top"):
    # apex sits on the pixel centre; "top" hangs the triangle below it
    y = (point[0] + 0.5) * scale
    x = (point[1] + 0.5) * scale
    dy = size if apex == "top" else -size
    draw.polygon([(x, y), (x - size * 0.6, y + dy), (x + size * 0.6, y + dy)], outline=color, fill=color)


def overlay_image(image, gt=(), esd=(), hsd=(), rejected=(), scale=6):
    """RGB overlay: ground truth as red triangles with the apex on the core,
    predictions as triangles whose apex points up into the detection (green
    for the easy stage, amber for accepted hard-stage points).  Rejected
    hard-stage candidates, if given, are small blue crosses."""
    base = Image.fromarray(_to_rgb_array(image), mode="RGB")
    big = base.resize((base.width * scale, base.height * scale), Image.NEAREST)
    draw = ImageDraw.Draw(big)
    size = max(3, int(1.6 * scale))
    for p in gt:
        _triangle(draw, p, scale, size, GT_COLOR, apex="top")
    for p in esd:
        _triangle(draw, p, scale, size, ESD_COLOR, apex="bottom")
    for p in hsd:
        _triangle(draw, p, scale, size, HSD_COLOR, apex="bottom")
    for p in rejected:
        y, x = (p[0] + 0.5) * scale, (p[1] + 0.5) * scale
        r = size / 2
        draw.line([(x - r, y - r), (x + r, y + r)], fill=REJECT_COLOR, width=1)
        draw.line([(x - r, y + r), (x + r, y - r)], fill=REJECT_COLOR, width=1)
    return big


def save_overlay(path, image, gt=(), esd=(), hsd=(), rejected=(), scale=6):
    overlay_image(image, gt, esd, hsd, rejected, scale).save(path, format="PNG")
    return path


def save_heatmap(path, heatmap, vmax=None):
    """Grayscale PNG of a heatmap, linearly scaled to [0, vmax] (default: its max)."""
    h = np.asarray(heatmap, dtype=np.float64)
    top = float(h.max()) if vmax is None else float(vmax)
    scaled = np.clip(h / top, 0, 1) if top > 0 else np.zeros_like(h)
    Image.fromarray(_to_rgb_array(scaled), mode="RGB").save(path, format="PNG")
    return path


def _save_figure(fig, path):
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=120, metadata={"Software": None})
    plt.close(fig)
    buf.seek(0)
    Image.open(buf).convert("RGB").save(path, format="PNG")
    return path


def plot_loss_curves(path, logs: dict):
    """One line per stage; ``logs`` maps stage name to a list of per-epoch losses
    (or ``(loss, accuracy)`` tuples)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for stage, values in logs.items():
            if not values:
                continue
            y = [v[0] if isinstance(v, (tuple, list)) else v for v in values]
            ax.plot(np.arange(1, len(y) + 1), y, marker="o", ms=2.5, lw=1.2, label=stage)
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean batch loss")
        ax.set_yscale("log")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save_figure(fig, path)


def plot_sweep(path, rows, title=""):
    """Recall / precision / F-score against the sweep setting."""
    labels = [str(r[0]) for r in rows]
    x = np.arange(len(rows))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for attr, marker in (("recall", "o"), ("precision", "s"), ("fscore", "^")):
            ax.plot(x, [getattr(r[1], attr) for r in rows], marker=marker, lw=1.2, label=attr)
        ax.set_xticks(x)
        ax.set_xticklabels(labels)
        ax.set_ylim(0, 1.02)
        if title:
            ax.set_title(title)
        ax.legend(frameon=False, loc="lower right")
        fig.tight_layout()
        return _save_figure(fig, path)


def plot_ablation(path, rows):
    """Grouped bars per cascade prefix."""
    labels = [str(r[0]) for r in rows]
    x = np.arange(len(rows))
    width = 0.26
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for k, attr in enumerate(("recall", "precision", "fscore")):
            vals = [getattr(r[1], attr) for r in rows]
            ax.bar(x + (k - 1) * width, vals, width, label=attr)
        ax.set_xticks(x)
        ax.set_xticklabels(labels)
        ax.set_ylim(0, 1.05)
        ax.legend(frameon=False, ncol=3, loc="lower center")
        fig.tight_layout()
        return _save_figure(fig, path)
