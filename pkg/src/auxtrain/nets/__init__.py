"""Model zoo: phase-matching encoders, tip trackers, and heatmap utilities."""

from __future__ import annotations

from torch import nn

from .blocks import ConvEncoder, ConvLSTM, ConvLSTMCell, ResConvBlock, UpsampleDecoder
from .heatmaps import (
    DEFAULT_TARGET_SIGMA_PX,
    TemplateStore,
    crop_patch,
    heatmap_to_coord,
    make_target_heatmap,
    update_templates,
)
from .phase_models import (
    CpmBackboneConfig,
    PhaseEncoderConvLstm,
    PhaseEncoderTransformer,
    desk_cpm_config,
    full_cpm_config,
)
from .tracking_models import (
    CttBackboneConfig,
    TipTrackerTransformer,
    TipTrackerUnet,
    desk_ctt_config,
    full_ctt_config,
)

PARAM_BUDGET = 5_000_000  # desk-scale models stay under this


def build_cpm_model(
    cfg: CpmBackboneConfig, image_size: int, with_seg_head: bool = False
) -> nn.Module:
    if cfg.variant == "cnn-c":
        return PhaseEncoderConvLstm(cfg, image_size, with_seg_head)
    return PhaseEncoderTransformer(cfg, image_size, with_seg_head)


def build_ctt_model(cfg: CttBackboneConfig, with_seg_head: bool = False) -> nn.Module:
    if cfg.variant == "cnn-c":
        return TipTrackerUnet(cfg, with_seg_head)
    return TipTrackerTransformer(cfg, with_seg_head)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


__all__ = [
    "ConvEncoder",
    "ConvLSTM",
    "ConvLSTMCell",
    "ResConvBlock",
    "UpsampleDecoder",
    "DEFAULT_TARGET_SIGMA_PX",
    "TemplateStore",
    "crop_patch",
    "heatmap_to_coord",
    "make_target_heatmap",
    "update_templates",
    "CpmBackboneConfig",
    "PhaseEncoderConvLstm",
    "PhaseEncoderTransformer",
    "desk_cpm_config",
    "full_cpm_config",
    "CttBackboneConfig",
    "TipTrackerTransformer",
    "TipTrackerUnet",
    "desk_ctt_config",
    "full_ctt_config",
    "PARAM_BUDGET",
    "build_cpm_model",
    "build_ctt_model",
    "parameter_count",
]
