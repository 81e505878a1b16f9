"""Phase-matching backbones: conv-LSTM and conv-transformer encoders.

Both consume the recorded angio frames followed by the live fluoro stream and
emit one embedding vector per frame; cosine similarity between embeddings
scores cardiac-phase agreement. The transformer variant runs self-attention
over the angio block and strictly causal attention for the fluoro stream, so
appending future frames can never change past outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .blocks import ConvEncoder, ConvLSTM, ResConvBlock, UpsampleDecoder


@dataclass(frozen=True)
class CpmBackboneConfig:
    variant: str = "cnn-c"
    input_channels: int = 1
    stage_channels: tuple[int, ...] = (16, 32, 64)  # cnn-c stages
    feature_dim: int = 64
    attn_layers: int = 2
    attn_heads: int = 4
    stem_channels: int = 8
    stem_stride: int = 4  # desk-scale front downsampling (cnn-c)
    encoder_channels: tuple[int, ...] = (16, 32, 96, 160)  # cnn-t stages

    def __post_init__(self) -> None:
        if self.variant not in ("cnn-c", "cnn-t"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == "cnn-t":
            got = self.encoder_channels[-2] + self.encoder_channels[-1]
            if got != self.feature_dim:
                raise ValueError(
                    "cnn-t feature_dim must equal the sum of the last two "
                    f"encoder stages ({got}), got {self.feature_dim}"
                )
        if self.stem_stride not in (1, 2, 4):
            raise ValueError("stem_stride must be 1, 2, or 4")


def desk_cpm_config(variant: str, input_channels: int = 1) -> CpmBackboneConfig:
    if variant == "cnn-c":
        return CpmBackboneConfig(variant=variant, input_channels=input_channels)
    return CpmBackboneConfig(
        variant=variant,
        input_channels=input_channels,
        feature_dim=256,
        attn_layers=2,
        attn_heads=4,
    )


def full_cpm_config(variant: str, input_channels: int = 1) -> CpmBackboneConfig:
    """Reference-scale configuration; defined but not exercised in CI."""
    if variant == "cnn-c":
        return CpmBackboneConfig(
            variant=variant,
            input_channels=input_channels,
            stage_channels=(64, 128, 256),
            feature_dim=512,
            stem_channels=32,
            stem_stride=2,
        )
    return CpmBackboneConfig(
        variant=variant,
        input_channels=input_channels,
        feature_dim=3072,
        attn_layers=5,
        attn_heads=4,
        encoder_channels=(64, 256, 1024, 2048),
    )


class _Stem(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__()
        layers: list[nn.Module] = []
        prev = c_in
        for _ in range(int(math.log2(stride)) if stride > 1 else 0):
            layers += [nn.Conv2d(prev, c_out, 3, stride=2, padding=1), nn.ReLU(inplace=True)]
            prev = c_out
        if not layers:
            layers += [nn.Conv2d(prev, c_out, 3, padding=1), nn.ReLU(inplace=True)]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class _ConvLstmTrunk(nn.Module):
    """Alternating residual block / conv-LSTM / stride-2 downsample stages."""

    def __init__(self, cfg: CpmBackboneConfig):
        super().__init__()
        self.stem = _Stem(cfg.input_channels, cfg.stem_channels, cfg.stem_stride)
        n = len(cfg.stage_channels)
        self.res_blocks = nn.ModuleList()
        self.lstms = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        prev = cfg.stem_channels
        for i, ch in enumerate(cfg.stage_channels):
            self.res_blocks.append(ResConvBlock(prev, ch))
            self.lstms.append(ConvLSTM(ch, ch, n_layers=3 if i == n - 1 else 1))
            self.downsamples.append(nn.Conv2d(ch, ch, 1, stride=2))
            prev = ch

    def forward(
        self, frames: torch.Tensor, collect_maps: bool = False
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """(B, T, C, H, W) -> last conv-LSTM maps (B, T, ch, h, w) plus,
        optionally, every stage's conv-LSTM output."""
        b, t = frames.shape[:2]
        x = self.stem(frames.flatten(0, 1)).unflatten(0, (b, t))
        maps = []
        for i in range(len(self.res_blocks)):
            x = self.res_blocks[i](x.flatten(0, 1)).unflatten(0, (b, t))
            x, _ = self.lstms[i](x)
            if collect_maps:
                maps.append(x)
            if i < len(self.res_blocks) - 1:
                x = self.downsamples[i](x.flatten(0, 1)).unflatten(0, (b, t))
        return x, maps


class PhaseEncoderConvLstm(nn.Module):
    """Conv-LSTM phase encoder with optional mask-regression branch."""

    def __init__(self, cfg: CpmBackboneConfig, image_size: int, with_seg_head: bool = False):
        super().__init__()
        self.cfg = cfg
        self.image_size = image_size
        self.trunk = _ConvLstmTrunk(cfg)
        ch = cfg.stage_channels[-1]
        self.final_downsample = nn.Conv2d(ch, ch, 1, stride=2)
        self.task_head = nn.Linear(ch, cfg.feature_dim)
        if with_seg_head:
            trunk_res = image_size // (cfg.stem_stride * 2 ** (len(cfg.stage_channels) - 1))
            self.seg_head = UpsampleDecoder(ch, n_ups=int(math.log2(image_size // trunk_res)))
        else:
            self.seg_head = None

    def forward(self, frames: torch.Tensor, n_angio: int | None = None) -> torch.Tensor:
        feats, _ = self._encode(frames)
        return feats

    def _encode(
        self, frames: torch.Tensor, collect_maps: bool = False
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        maps, stage_maps = self.trunk(frames, collect_maps)
        b, t = maps.shape[:2]
        x = self.final_downsample(maps.flatten(0, 1))
        pooled = x.amax(dim=(-2, -1))
        feats = self.task_head(pooled).unflatten(0, (b, t))
        return feats, (stage_maps if collect_maps else [maps])

    def forward_seg(self, frames: torch.Tensor, n_angio: int | None = None) -> torch.Tensor:
        """Mask logits at input resolution, one map per frame."""
        if self.seg_head is None:
            raise RuntimeError("model was built without a segmentation head")
        maps, _ = self.trunk(frames)
        b, t = maps.shape[:2]
        return self.seg_head(maps.flatten(0, 1)).unflatten(0, (b, t))

    def forward_with_branch_features(
        self, frames: torch.Tensor, n_angio: int | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Embeddings plus the pre-branch feature vectors used for feature
        distillation (spatially averaged last conv-LSTM maps)."""
        maps, _ = self.trunk(frames)
        b, t = maps.shape[:2]
        x = self.final_downsample(maps.flatten(0, 1))
        feats = self.task_head(x.amax(dim=(-2, -1))).unflatten(0, (b, t))
        branch = maps.mean(dim=(-2, -1))  # (B, T, ch)
        return feats, branch

    def feature_maps(self, frames: torch.Tensor) -> dict[str, torch.Tensor]:
        """Per-stage conv-LSTM outputs, for feature visualization."""
        _, stage_maps = self.trunk(frames, collect_maps=True)
        return {f"stage{i + 1}": m for i, m in enumerate(stage_maps)}


class PhaseEncoderTransformer(nn.Module):
    """Conv encoder plus stacked attention with a causal fluoro stream."""

    def __init__(self, cfg: CpmBackboneConfig, image_size: int, with_seg_head: bool = False):
        super().__init__()
        self.cfg = cfg
        self.image_size = image_size
        self.encoder = ConvEncoder(cfg.input_channels, cfg.encoder_channels)
        self.attn_layers = nn.ModuleList(
            nn.MultiheadAttention(cfg.feature_dim, cfg.attn_heads, batch_first=True)
            for _ in range(cfg.attn_layers)
        )
        self.task_head = nn.Identity()
        if with_seg_head:
            if cfg.feature_dim % 16 != 0:
                raise ValueError("feature_dim must be divisible by 16 for the seg head")
            self.seg_grid = 4
            c0 = cfg.feature_dim // (self.seg_grid**2)
            self.seg_head = UpsampleDecoder(c0, n_ups=int(math.log2(image_size // self.seg_grid)))
        else:
            self.seg_head = None

    def _frame_features(self, frames: torch.Tensor) -> torch.Tensor:
        b, t = frames.shape[:2]
        stages = self.encoder(frames.flatten(0, 1))
        pooled = [stages[-2].mean(dim=(-2, -1)), stages[-1].mean(dim=(-2, -1))]
        return torch.cat(pooled, dim=1).unflatten(0, (b, t))

    def _attend(self, feats: torch.Tensor, n_angio: int) -> torch.Tensor:
        """Self-attention over the angio block; causal streaming attention for
        each fluoro frame with all earlier frames as keys and values."""
        angio_in = feats[:, :n_angio]
        key_caches: list[torch.Tensor] = []
        x = angio_in
        for layer in self.attn_layers:
            key_caches.append(x)
            x = x + layer(x, x, x, need_weights=False)[0] if n_angio > 0 else x
        angio_out = x

        fluoro_outs = []
        for i in range(n_angio, feats.shape[1]):
            x = feats[:, i : i + 1]
            for li, layer in enumerate(self.attn_layers):
                kv = torch.cat([key_caches[li], x], dim=1)
                key_caches[li] = kv
                x = x + layer(x, kv, kv, need_weights=False)[0]
            fluoro_outs.append(x)
        if fluoro_outs:
            return torch.cat([angio_out, *fluoro_outs], dim=1)
        return angio_out

    def forward(self, frames: torch.Tensor, n_angio: int | None = None) -> torch.Tensor:
        if n_angio is None:
            n_angio = frames.shape[1]
        feats = self._frame_features(frames)
        return self._attend(feats, n_angio)

    def forward_seg(self, frames: torch.Tensor, n_angio: int | None = None) -> torch.Tensor:
        if self.seg_head is None:
            raise RuntimeError("model was built without a segmentation head")
        out = self.forward(frames, n_angio)
        b, t, d = out.shape
        grid = out.reshape(b * t, d // (self.seg_grid**2), self.seg_grid, self.seg_grid)
        return self.seg_head(grid).unflatten(0, (b, t))

    def forward_with_branch_features(
        self, frames: torch.Tensor, n_angio: int | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.forward(frames, n_angio)
        return out, out

    def feature_maps(self, frames: torch.Tensor) -> dict[str, torch.Tensor]:
        b, t = frames.shape[:2]
        stages = self.encoder(frames.flatten(0, 1))
        return {f"enc{i + 1}": s.unflatten(0, (b, t)) for i, s in enumerate(stages)}
