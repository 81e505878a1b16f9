"""Evaluation protocol: matching distance, tracking precision/recall,
paired significance testing, and principal-component feature imaging.

Phase matching is scored by the circular frame distance between the predicted
angio frame and the nearest ground-truth frame, reported both in frames and
as a percentage of the cardiac cycle. Tracking is scored against a 2 mm
success radius (10 px at 0.2 mm isotropic spacing) with precision, recall,
and distance statistics over true positives and over all frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import stats

DEFAULT_THRESHOLD_MM = 2.0
DEFAULT_CONF_FLOOR = {"cnn-c": 0.1, "cnn-t": 0.5}


class TTestResult(NamedTuple):
    t: float
    p: float
    note: str | None = None  # 'tie' or 'constant-diff' for degenerate inputs


@dataclass
class CpmResult:
    """Per-fluoro-frame matching records plus aggregate distance stats."""

    pred_indices: list[int] = field(default_factory=list)
    dist_frames: list[float] = field(default_factory=list)
    dist_pct: list[float] = field(default_factory=list)

    @property
    def mean_frames(self) -> float:
        return float(np.mean(self.dist_frames)) if self.dist_frames else float("nan")

    @property
    def std_frames(self) -> float:
        return float(np.std(self.dist_frames)) if self.dist_frames else float("nan")

    @property
    def mean_pct(self) -> float:
        return float(np.mean(self.dist_pct)) if self.dist_pct else float("nan")

    @property
    def std_pct(self) -> float:
        return float(np.std(self.dist_pct)) if self.dist_pct else float("nan")


@dataclass
class CttResult:
    """Tracking outcome: per-frame distances plus the aggregate table row."""

    distances_mm: list[float] = field(default_factory=list)
    detected: list[bool] = field(default_factory=list)
    true_positive: list[bool] = field(default_factory=list)

    precision_pct: float = float("nan")
    recall_pct: float = float("nan")
    dist_tp_mean: float = float("nan")
    dist_tp_std: float = float("nan")
    dist_all_mean: float = float("nan")
    dist_all_std: float = float("nan")


def cpm_match(angio_features: np.ndarray, fluoro_feature: np.ndarray) -> int:
    """Index of the angio feature most cosine-similar to the fluoro feature.

    Ties break toward the lowest index.
    """
    angio = np.asarray(angio_features, dtype=np.float64)
    fluoro = np.asarray(fluoro_feature, dtype=np.float64)
    if angio.ndim != 2 or len(angio) == 0:
        raise ValueError("angio feature list must be a non-empty 2-D array")
    norms = np.linalg.norm(angio, axis=1) * np.linalg.norm(fluoro)
    sims = np.where(norms > 0, angio @ fluoro / np.where(norms > 0, norms, 1.0), 0.0)
    return int(np.argmax(sims))


def phase_distance(
    pred_idx: int, gt_set: set[int], cycle_len_frames: float
) -> tuple[float, float]:
    """Circular frame distance from the prediction to the nearest ground-truth
    index, and the same distance as a percentage of the cardiac cycle."""
    if not gt_set:
        raise ValueError("ground-truth index set must be non-empty")
    if cycle_len_frames <= 0:
        raise ValueError("cycle length must be positive")
    best = min(_circular_index_distance(pred_idx, g, cycle_len_frames) for g in gt_set)
    return best, 100.0 * best / cycle_len_frames


def _circular_index_distance(i: int, j: int, cycle_len_frames: float) -> float:
    d = abs(i - j) % cycle_len_frames
    return min(d, cycle_len_frames - d)


def ctt_evaluate(
    preds: Sequence[tuple[tuple[float, float], float]],
    gts: Sequence[tuple[float, float]],
    spacing_mm: float,
    threshold_mm: float = DEFAULT_THRESHOLD_MM,
    conf_floor: float = 0.5,
) -> CttResult:
    """Score tracked tips against ground truth.

    A frame counts as a detection when its confidence reaches ``conf_floor``;
    a detection within ``threshold_mm`` is a true positive. Precision is
    TP/detections, recall is TP/frames. dist(TP) summarizes true positives;
    dist(all) charges every frame the distance of its best-guess point,
    detected or not.
    """
    if len(preds) != len(gts):
        raise ValueError(f"got {len(preds)} predictions for {len(gts)} frames")
    result = CttResult()
    for (tip, conf), gt in zip(preds, gts):
        d_mm = float(np.hypot(tip[0] - gt[0], tip[1] - gt[1])) * spacing_mm
        det = conf >= conf_floor
        result.distances_mm.append(d_mm)
        result.detected.append(det)
        result.true_positive.append(bool(det and d_mm <= threshold_mm))

    n_frames = len(gts)
    n_det = sum(result.detected)
    n_tp = sum(result.true_positive)
    result.precision_pct = 100.0 * n_tp / n_det if n_det else float("nan")
    result.recall_pct = 100.0 * n_tp / n_frames if n_frames else float("nan")
    tp_dists = [d for d, tp in zip(result.distances_mm, result.true_positive) if tp]
    if tp_dists:
        result.dist_tp_mean = float(np.mean(tp_dists))
        result.dist_tp_std = float(np.std(tp_dists))
    if result.distances_mm:
        result.dist_all_mean = float(np.mean(result.distances_mm))
        result.dist_all_std = float(np.std(result.distances_mm))
    return result


def paired_ttest(errors_a: Sequence[float], errors_b: Sequence[float]) -> TTestResult:
    """Two-sided paired t-test on per-case differences.

    Degenerate inputs are reported instead of raising: identical samples give
    (0, 1, 'tie'); a constant nonzero difference gives an infinite statistic
    with p = 0 and note 'constant-diff'.
    """
    a = np.asarray(errors_a, dtype=np.float64)
    b = np.asarray(errors_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and equally long")
    if len(a) < 2:
        raise ValueError("need at least two pairs")
    diff = a - b
    sd = diff.std(ddof=1)
    mean = diff.mean()
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0, "tie")
        return TTestResult(float(np.sign(mean)) * float("inf"), 0.0, "constant-diff")
    n = len(diff)
    t = mean / (sd / np.sqrt(n))
    p = 2.0 * stats.t.sf(abs(t), df=n - 1)
    return TTestResult(float(t), float(p), None)


def feature_pca_rgb(feature_maps: np.ndarray) -> np.ndarray:
    """Project per-pixel feature vectors onto their top-3 principal
    components and map the magnitudes to RGB in ``(H, W, 3)``.

    Each channel is min-max scaled to [0, 1]; zero-variance inputs yield a
    uniform image.
    """
    fmaps = np.asarray(feature_maps, dtype=np.float64)
    if fmaps.ndim != 3 or fmaps.shape[0] < 3:
        raise ValueError("need a (C, H, W) stack with C >= 3")
    c, h, w = fmaps.shape
    flat = fmaps.reshape(c, h * w).T  # pixels as samples
    centered = flat - flat.mean(axis=0, keepdims=True)
    # SVD of the centered data: right singular vectors = principal axes.
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    proj = np.abs(centered @ vt[:3].T)  # (pixels, 3) component magnitudes
    rgb = np.zeros((h * w, 3))
    for k in range(3):
        lo, hi = proj[:, k].min(), proj[:, k].max()
        if hi - lo > 1e-12:
            rgb[:, k] = (proj[:, k] - lo) / (hi - lo)
    return rgb.reshape(h, w, 3)


# ---------------------------------------------------------------------------
# Structured-text report tables (2-decimal display, raw records keep full
# precision elsewhere).


def format_cpm_table(rows: dict[str, CpmResult], marks: dict[str, str] | None = None) -> str:
    lines = [f"{'Method':<16} {'dist(frame)':>14} {'dist(%)':>14}"]
    lines.append("-" * 46)
    for name, res in rows.items():
        mark = (marks or {}).get(name, "")
        lines.append(
            f"{name + mark:<16} "
            f"{res.mean_frames:>6.2f}±{res.std_frames:<7.2f} "
            f"{res.mean_pct:>6.2f}±{res.std_pct:<7.2f}"
        )
    return "\n".join(lines)


def format_ctt_table(rows: dict[str, CttResult], marks: dict[str, str] | None = None) -> str:
    lines = [
        f"{'Method':<16} {'P(%)':>7} {'R(%)':>7} {'dist(TP)':>14} {'dist(all)':>14}"
    ]
    lines.append("-" * 62)
    for name, res in rows.items():
        mark = (marks or {}).get(name, "")
        lines.append(
            f"{name + mark:<16} {res.precision_pct:>7.2f} {res.recall_pct:>7.2f} "
            f"{res.dist_tp_mean:>6.2f}±{res.dist_tp_std:<7.2f} "
            f"{res.dist_all_mean:>6.2f}±{res.dist_all_std:<7.2f}"
        )
    return "\n".join(lines)
