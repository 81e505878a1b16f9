"""Auxiliary-channel ablation: the operator, its schedule, and mask dropout.

The auxiliary catheter mask rides along as an extra input channel. During
training it is progressively destroyed by mixing in unit Gaussian noise while
shrinking the overall magnitude,

    ablated = (1 - alpha) * ((1 - alpha) * z + alpha * noise),

so that at strength 0 the channel is the clean mask and at strength 1 it is a
zero matrix the network no longer depends on. The strength climbs a fixed
ladder (default step 0.1), escalating only once training has plateaued at the
current level without signs of overfitting.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .synthgen import Frame, SequencePair

NoiseSource = Callable[[tuple[int, ...]], "np.ndarray"]

DEFAULT_ALPHA_STEP = 0.1
DEFAULT_PATIENCE = 10
DEFAULT_MIN_REL_IMPROVE = 1e-3
# Escalation is blocked while the latest validation loss sits more than 5%
# above the level's best (divergence = overfitting signal).
OVERFIT_TOLERANCE = 0.05


def gaussian_noise_source(seed: int) -> NoiseSource:
    """Seeded standard-normal sampler usable as an ablation noise source."""
    rng = np.random.default_rng(seed)
    return lambda shape: rng.standard_normal(shape)


def zero_noise_source(shape: tuple[int, ...]) -> np.ndarray:
    """Noise source that is identically zero; handy for exactness checks."""
    return np.zeros(shape)


def ablate(z, alpha: float, noise_source: NoiseSource):
    """Apply the ablation operator to a binary mask (or batch of masks).

    Works elementwise on numpy arrays and torch tensors alike, provided the
    noise source returns the matching array type. Strength 0 returns the mask
    unchanged; strength 1 returns exact zeros without drawing noise.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"ablation strength must lie in [0, 1], got {alpha}")
    if alpha == 0.0:
        return z * 1.0
    if alpha == 1.0:
        return z * 0.0
    n = noise_source(tuple(z.shape))
    return (1.0 - alpha) * ((1.0 - alpha) * z + alpha * n)


def attach(x, z_tilde):
    """Concatenate the (ablated) mask as the trailing input channel.

    ``x`` is ``(..., C, H, W)``; ``z_tilde`` is ``(..., H, W)`` or
    ``(..., 1, H, W)``. Channel order is fixed: image channels first, mask
    channel last, everywhere in this package.
    """
    import torch

    is_torch = isinstance(x, torch.Tensor)
    xp = torch if is_torch else np
    if z_tilde.ndim == x.ndim - 1:
        z_tilde = z_tilde[..., None, :, :]
    if z_tilde.ndim != x.ndim or x.shape[-2:] != z_tilde.shape[-2:] or z_tilde.shape[-3] != 1:
        raise ValueError(
            f"mask shape {tuple(z_tilde.shape)} does not match image stack {tuple(x.shape)}"
        )
    if x.shape[:-3] != z_tilde.shape[:-3]:
        raise ValueError(
            f"leading dimensions differ: {tuple(x.shape)} vs {tuple(z_tilde.shape)}"
        )
    if is_torch:
        return torch.cat([x, z_tilde.to(x.dtype)], dim=-3)
    return xp.concatenate([x, z_tilde.astype(x.dtype)], axis=-3)


@dataclass(frozen=True)
class AblationState:
    """Bookkeeping for the strength ladder."""

    alpha: float = 0.0
    step: float = DEFAULT_ALPHA_STEP
    epochs_at_level: int = 0
    best_val_at_level: float = math.inf
    patience: int = DEFAULT_PATIENCE
    min_rel_improve: float = DEFAULT_MIN_REL_IMPROVE

    @property
    def finished(self) -> bool:
        return self.alpha >= 1.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AblationState":
        return cls(**d)


def _epochs_since_improvement(val_history: Sequence[float], min_rel_improve: float) -> int:
    best = math.inf
    last_improve = 0
    for i, v in enumerate(val_history):
        if v < best * (1.0 - min_rel_improve):
            last_improve = i
        best = min(best, v)
    return len(val_history) - 1 - last_improve


def plateaued(val_history: Sequence[float], patience: int, min_rel_improve: float) -> bool:
    """True once the best validation loss has stalled for ``patience`` epochs."""
    if not val_history:
        return False
    return _epochs_since_improvement(val_history, min_rel_improve) >= patience


def advance(
    state: AblationState,
    val_history: Sequence[float],
    train_history: Sequence[float] = (),
) -> AblationState:
    """Decide whether to escalate the ablation strength after an epoch.

    ``val_history`` (and ``train_history``, unused by the default gate) cover
    the epochs spent at the current level. Escalates one step when the best
    validation loss has not improved by ``min_rel_improve`` for ``patience``
    epochs and the latest validation loss has not drifted above the level's
    best (overfitting guard). Strength never decreases and caps at 1.
    """
    del train_history  # gate is validation-driven; kept for call-site symmetry
    if not val_history:
        return state
    best = min(val_history)
    stalled = plateaued(val_history, state.patience, state.min_rel_improve)
    not_overfitting = val_history[-1] <= best * (1.0 + OVERFIT_TOLERANCE)
    if stalled and not_overfitting and state.alpha < 1.0:
        new_alpha = round(state.alpha + state.step, 10)
        if new_alpha > 1.0 - 1e-12:
            new_alpha = 1.0
        return dataclasses.replace(
            state,
            alpha=new_alpha,
            epochs_at_level=0,
            best_val_at_level=math.inf,
        )
    return dataclasses.replace(
        state,
        epochs_at_level=len(val_history),
        best_val_at_level=best,
    )


def partial_mask(
    pairs: Sequence[SequencePair], fraction: float, seed: int
) -> list[SequencePair]:
    """Keep masks on a seed-selected ``fraction`` of sequences, zero the rest.

    Selection is per sequence pair: a pair either keeps all its masks or gets
    all-zero placeholders with ``mask_available=False`` on every frame. The
    input is never mutated. Exactly ``round(fraction * n)`` pairs keep masks.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return list(pairs)
    n = len(pairs)
    n_keep = int(round(fraction * n))
    rng = np.random.default_rng(seed)
    keep = set(rng.permutation(n)[:n_keep].tolist())

    out = []
    for i, pair in enumerate(pairs):
        if i in keep:
            out.append(pair)
            continue
        out.append(
            SequencePair(
                angio=[_strip_mask(f) for f in pair.angio],
                fluoro=[_strip_mask(f) for f in pair.fluoro],
                spec=pair.spec,
                phase_offset=pair.phase_offset,
            )
        )
    return out


def _strip_mask(frame: Frame) -> Frame:
    return Frame(
        image=frame.image,
        mask_data=np.zeros_like(frame.mask_data),
        tip_xy=frame.tip_xy,
        phase=frame.phase,
        mask_available=False,
    )
