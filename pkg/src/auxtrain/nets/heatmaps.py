"""Heatmap targets, coordinate decoding, and the tracker's template store."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

DEFAULT_TARGET_SIGMA_PX = 3.0


def make_target_heatmap(
    tip_xy: tuple[float, float],
    sigma_px: float,
    size: tuple[int, int],
) -> np.ndarray:
    """Unnormalized Gaussian bump with peak value 1 at the tip."""
    h, w = size
    x, y = tip_xy
    if not (0 <= x < w and 0 <= y < h):
        raise ValueError(f"tip {tip_xy} lies outside a {w}x{h} image")
    ys, xs = np.mgrid[0:h, 0:w]
    d2 = (xs - x) ** 2 + (ys - y) ** 2
    return np.exp(-d2 / (2.0 * sigma_px**2)).astype(np.float32)


def heatmap_to_coord(heatmap: np.ndarray) -> tuple[float, float, float]:
    """Decode a heatmap to (x, y, confidence).

    The coordinate is the intensity-weighted centroid of the 5x5 window
    around the argmax; confidence is the peak value. An all-zero map decodes
    to the first index with confidence 0 (callers should treat that as a
    non-detection).
    """
    hm = np.asarray(heatmap, dtype=np.float64)
    if hm.ndim != 2:
        raise ValueError("heatmap must be 2-D")
    idx = int(np.argmax(hm))
    py, px = divmod(idx, hm.shape[1])
    conf = float(hm[py, px])
    if conf <= 0.0:
        return float(px), float(py), 0.0

    y0, y1 = max(0, py - 2), min(hm.shape[0], py + 3)
    x0, x1 = max(0, px - 2), min(hm.shape[1], px + 3)
    window = hm[y0:y1, x0:x1]
    total = window.sum()
    ys, xs = np.mgrid[y0:y1, x0:x1]
    return float((window * xs).sum() / total), float((window * ys).sum() / total), conf


def crop_patch(image: np.ndarray, center_xy: tuple[float, float], size: int) -> np.ndarray:
    """Square crop centered on ``center_xy`` with edge replication padding.

    Accepts (H, W) or (C, H, W) arrays and always returns a ``size`` x
    ``size`` patch (per channel).
    """
    arr = np.asarray(image)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    _, h, w = arr.shape
    cx, cy = int(round(center_xy[0])), int(round(center_xy[1]))
    half = size // 2
    x0, y0 = cx - half, cy - half
    pad_l = max(0, -x0)
    pad_t = max(0, -y0)
    pad_r = max(0, x0 + size - w)
    pad_b = max(0, y0 + size - h)
    if pad_l or pad_t or pad_r or pad_b:
        arr = np.pad(arr, ((0, 0), (pad_t, pad_b), (pad_l, pad_r)), mode="edge")
        x0 += pad_l
        y0 += pad_t
    patch = arr[:, y0 : y0 + size, x0 : x0 + size]
    return patch[0] if squeeze else patch


@dataclass(frozen=True)
class TemplateStore:
    """The tracker's reference crops: the initial template plus up to two
    recently accepted ones (newest last)."""

    initial: np.ndarray
    recent: tuple[np.ndarray, ...] = ()
    template_size_px: int = 64
    update_threshold: float = 0.5

    @property
    def templates(self) -> list[np.ndarray]:
        return [self.initial, *self.recent]


def update_templates(
    store: TemplateStore, new_heatmap: np.ndarray, search_image: np.ndarray
) -> TemplateStore:
    """Accept a new template crop when the heatmap peak clears the threshold.

    The store keeps the initial template and the two most recent accepted
    crops, evicting the oldest accepted crop first.
    """
    x, y, conf = heatmap_to_coord(new_heatmap)
    if conf <= store.update_threshold:
        return store
    patch = crop_patch(search_image, (x, y), store.template_size_px)
    recent = (*store.recent, patch)[-2:]
    return replace(store, recent=recent)
