"""PNG report rendering: heatmap overlays (direct pixel math) and charts."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .formats import write_png
from .imageops import to_u8

_STOPS = np.array([
    [0.0, 0.0, 0.3],
    [0.0, 0.4, 1.0],
    [0.2, 1.0, 0.6],
    [1.0, 1.0, 0.0],
    [1.0, 0.2, 0.0],
])


def colormap(values: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to RGB through a fixed blue-to-red ramp."""
    v = np.clip(values, 0.0, 1.0) * (len(_STOPS) - 1)
    lo = np.floor(v).astype(int)
    hi = np.minimum(lo + 1, len(_STOPS) - 1)
    frac = (v - lo)[..., None]
    return _STOPS[lo] * (1.0 - frac) + _STOPS[hi] * frac


def overlay_heatmap(frame: np.ndarray, saliency: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend a normalized saliency map over an RGB frame; returns uint8."""
    img = frame.astype(np.float64)
    if frame.dtype == np.uint8:
        img /= 255.0
    peak = float(saliency.max())
    norm = saliency / peak if peak > 0 else np.zeros_like(saliency)
    heat = colormap(norm)
    out = (1.0 - alpha) * img + alpha * heat
    return to_u8(np.clip(out, 0.0, 1.0).astype(np.float32))


def save_overlay(path, frame: np.ndarray, saliency: np.ndarray, alpha: float = 0.5) -> None:
    write_png(overlay_heatmap(frame, saliency, alpha), path)


def scatter_png(path, series: dict[str, tuple[np.ndarray, np.ndarray]],
                xlabel: str, ylabel: str, title: str = "",
                invert_x: bool = False, logx: bool = False) -> None:
    """One scatter chart; series maps label -> (x, y)."""
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for label, (x, y) in series.items():
        ax.scatter(x, y, label=label, s=28)
    if logx:
        ax.set_xscale("log")
    if invert_x:
        ax.invert_xaxis()
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if series:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def grouped_bar_png(path, groups: list[str], series: dict[str, list[float]],
                    ylabel: str, title: str = "") -> None:
    """Grouped bars; series maps label -> one value per group."""
    fig, ax = plt.subplots(figsize=(6, 4.5))
    n = max(len(series), 1)
    width = 0.8 / n
    xs = np.arange(len(groups))
    for i, (label, values) in enumerate(series.items()):
        ax.bar(xs + (i - (n - 1) / 2) * width, values, width, label=label)
    ax.set_xticks(xs)
    ax.set_xticklabels(groups)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if series:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
