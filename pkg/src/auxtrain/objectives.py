"""Loss functions and the triplet sampling policy.

Phase matching trains a cosine-similarity embedding with a margin triplet
loss; tip tracking regresses heatmaps under an L1 loss. The baselines add a
segmentation loss (BCE plus soft Dice), a multi-task combination, and a
kernel maximum-mean-discrepancy loss for teacher-student feature guidance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .synthgen import SequencePair, circular_phase_distance, gt_match_set

DEFAULT_TRIPLET_MARGIN = 0.8
DEFAULT_NEG_MIN_FRAC = 0.25
DICE_SMOOTH = 1.0


@dataclass(frozen=True)
class TripletConfig:
    """Margin and phase rules for triplet construction.

    Positives come from the set of nearest-phase angio frames; negatives must
    sit at least ``neg_min_frac`` of a cycle away.
    """

    margin: float = DEFAULT_TRIPLET_MARGIN
    neg_min_frac: float = DEFAULT_NEG_MIN_FRAC

    def __post_init__(self) -> None:
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if not 0.0 < self.neg_min_frac <= 0.5:
            raise ValueError("neg_min_frac must lie in (0, 0.5]")


def cosine_similarity(u: torch.Tensor, v: torch.Tensor, return_flag: bool = False):
    """Cosine similarity of two vectors; zero vectors map to 0 with a flag."""
    nu = torch.linalg.vector_norm(u)
    nv = torch.linalg.vector_norm(v)
    degenerate = bool(nu == 0.0) or bool(nv == 0.0)
    if degenerate:
        sim = torch.zeros((), dtype=u.dtype, device=u.device)
    else:
        sim = torch.dot(u, v) / (nu * nv)
    return (sim, degenerate) if return_flag else sim


def triplet_loss(
    v_fluoro: torch.Tensor,
    v_pos: torch.Tensor,
    v_neg: torch.Tensor,
    margin: float = DEFAULT_TRIPLET_MARGIN,
) -> torch.Tensor:
    """Hinge on cosine similarities: pull the matching-phase angio frame in,
    push the off-phase one out by at least ``margin``."""
    s_pos = cosine_similarity(v_fluoro, v_pos)
    s_neg = cosine_similarity(v_fluoro, v_neg)
    return torch.clamp(-s_pos + s_neg + margin, min=0.0)


def sample_triplets(
    pair: SequencePair,
    angio_features: torch.Tensor,
    fluoro_features: torch.Tensor,
    config: TripletConfig,
    rng: np.random.Generator,
) -> list[tuple[torch.Tensor, torch.Tensor, torch.Tensor]]:
    """One (fluoro, positive angio, negative angio) triple per fluoro frame.

    Positives are drawn uniformly from the nearest-phase set, negatives
    uniformly from angio frames at least ``neg_min_frac`` of a cycle away.
    Deterministic given the generator state.
    """
    angio_phases = [f.phase for f in pair.angio]
    triples = []
    for i, fluoro_frame in enumerate(pair.fluoro):
        pos_candidates = sorted(gt_match_set(fluoro_frame, pair.angio))
        neg_candidates = [
            j
            for j, phase in enumerate(angio_phases)
            if circular_phase_distance(phase, fluoro_frame.phase) >= config.neg_min_frac - 1e-12
        ]
        if not neg_candidates:
            raise ValueError(
                "no eligible negative frame; sequence shorter than one cycle?"
            )
        pos = pos_candidates[int(rng.integers(len(pos_candidates)))]
        neg = neg_candidates[int(rng.integers(len(neg_candidates)))]
        triples.append((fluoro_features[i], angio_features[pos], angio_features[neg]))
    return triples


def l1_heatmap_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over all pixels."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().mean()


def _pairwise_sq_dists(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # Expansion form keeps gradients finite at zero distance (cdist does not).
    a2 = (a * a).sum(dim=1, keepdim=True)
    b2 = (b * b).sum(dim=1, keepdim=True)
    return torch.clamp(a2 + b2.mT - 2.0 * (a @ b.mT), min=0.0)


def mmd_loss(
    student_feats: torch.Tensor, teacher_feats: torch.Tensor
) -> torch.Tensor:
    """Squared maximum mean discrepancy with a multi-bandwidth Gaussian kernel.

    Bandwidths are the median pairwise distance of the joint sample scaled by
    {0.5, 1, 2}; the three kernels are averaged so that k(x, x) = 1. Uses the
    biased (V-statistic) estimator, which is exactly zero for identical sets.
    """
    if student_feats.ndim != 2 or teacher_feats.ndim != 2:
        raise ValueError("feature sets must be 2-D (n_samples, dim)")
    if student_feats.shape[1] != teacher_feats.shape[1]:
        raise ValueError(
            f"feature dims differ: {student_feats.shape[1]} vs {teacher_feats.shape[1]}"
        )
    if len(student_feats) == 0 or len(teacher_feats) == 0:
        raise ValueError("feature sets must be non-empty")

    joint = torch.cat([student_feats, teacher_feats], dim=0)
    sq = _pairwise_sq_dists(joint, joint)
    n = joint.shape[0]
    offdiag = sq[torch.triu_indices(n, n, offset=1).unbind()]
    median = torch.quantile(torch.sqrt(torch.clamp(offdiag, min=0.0)), 0.5)
    median = torch.clamp(median, min=1e-12)

    def kernel(d2: torch.Tensor) -> torch.Tensor:
        total = torch.zeros_like(d2)
        for factor in (0.5, 1.0, 2.0):
            h = median * factor
            total = total + torch.exp(-d2 / (2.0 * h * h))
        return total / 3.0

    k_ss = kernel(_pairwise_sq_dists(student_feats, student_feats)).mean()
    k_tt = kernel(_pairwise_sq_dists(teacher_feats, teacher_feats)).mean()
    k_st = kernel(_pairwise_sq_dists(student_feats, teacher_feats)).mean()
    return k_ss + k_tt - 2.0 * k_st


def seg_loss(pred_logits: torch.Tensor, gt_mask: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy plus soft Dice, equally weighted."""
    bce, dice = seg_loss_terms(pred_logits, gt_mask)
    return bce + dice


def seg_loss_terms(
    pred_logits: torch.Tensor, gt_mask: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """The two segmentation loss components, reported separately."""
    if pred_logits.shape != gt_mask.shape:
        raise ValueError(
            f"shape mismatch: {tuple(pred_logits.shape)} vs {tuple(gt_mask.shape)}"
        )
    gt = gt_mask.to(pred_logits.dtype)
    bce = torch.nn.functional.binary_cross_entropy_with_logits(pred_logits, gt)
    p = torch.sigmoid(pred_logits)
    inter = (p * gt).sum()
    dice = 1.0 - (2.0 * inter + DICE_SMOOTH) / (p.sum() + gt.sum() + DICE_SMOOTH)
    return bce, dice


def dice_score(pred_logits: torch.Tensor, gt_mask: torch.Tensor, threshold: float = 0.5) -> float:
    """Hard Dice overlap of the thresholded prediction against the mask."""
    p = (torch.sigmoid(pred_logits) > threshold).to(torch.float64)
    gt = gt_mask.to(torch.float64)
    inter = (p * gt).sum()
    return float((2.0 * inter + DICE_SMOOTH) / (p.sum() + gt.sum() + DICE_SMOOTH))


def mtl_loss(
    task_loss: torch.Tensor, seg_loss_value: torch.Tensor, lambda_seg: float = 1.0
) -> torch.Tensor:
    """Weighted sum of the task loss and the auxiliary segmentation loss."""
    if lambda_seg < 0:
        raise ValueError("lambda_seg must be nonnegative")
    return task_loss + lambda_seg * seg_loss_value


def mean_triplet_loss(
    triples: Sequence[tuple[torch.Tensor, torch.Tensor, torch.Tensor]],
    margin: float = DEFAULT_TRIPLET_MARGIN,
) -> torch.Tensor:
    """Average triplet loss over a batch of triples."""
    if not triples:
        raise ValueError("empty triple batch")
    losses = [triplet_loss(f, p, n, margin) for f, p, n in triples]
    return torch.stack(losses).mean()
