"""Tip-tracking backbones: a recurrent-skip UNet and a template tracker.

The UNet variant consumes per-frame stacks of (reference image, reference tip
heatmap, current image) and threads conv-LSTM state through its skip
connections. The transformer variant follows the template-tracker recipe:
up to three reference crops plus the search image pass through a shared conv
encoder and a transformer, and a query-conditioned head regresses a single
tip heatmap over the search image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .blocks import ConvEncoder, ConvLSTM, ResConvBlock, UpsampleDecoder


@dataclass(frozen=True)
class CttBackboneConfig:
    variant: str = "cnn-c"
    input_channels: int = 3  # cnn-c: ref image, ref heatmap, current image
    template_size_px: int = 64
    max_templates: int = 3
    template_update_threshold: float = 0.5
    search_size_px: int = 128
    enc_channels: tuple[int, ...] = (8, 16, 32)  # cnn-c UNet levels
    input_downsample: int = 2  # cnn-c desk-scale pooling before the UNet
    d_model: int = 64  # cnn-t transformer width
    n_heads: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 1

    def __post_init__(self) -> None:
        if self.variant not in ("cnn-c", "cnn-t"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.input_downsample not in (1, 2):
            raise ValueError("input_downsample must be 1 or 2")

    @property
    def heatmap_size(self) -> tuple[int, int]:
        return (self.search_size_px, self.search_size_px)


def desk_ctt_config(variant: str, with_mask_channel: bool = False) -> CttBackboneConfig:
    base = 3 if variant == "cnn-c" else 1
    return CttBackboneConfig(variant=variant, input_channels=base + int(with_mask_channel))


def full_ctt_config(variant: str, with_mask_channel: bool = False) -> CttBackboneConfig:
    """Reference-scale configuration; defined but not exercised in CI."""
    base = 3 if variant == "cnn-c" else 1
    return CttBackboneConfig(
        variant=variant,
        input_channels=base + int(with_mask_channel),
        enc_channels=(32, 64, 128),
        input_downsample=1,
        d_model=256,
        n_encoder_layers=6,
        n_decoder_layers=6,
        search_size_px=320,
    )


class _UnetDecoder(nn.Module):
    """Upsample-concat-residual decoder over the recurrent skip features."""

    def __init__(self, channels: tuple[int, ...], out_upsample: int):
        super().__init__()
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.blocks = nn.ModuleList()
        prev = channels[-1]
        for ch in reversed(channels[:-1]):
            self.blocks.append(ResConvBlock(prev + ch, ch))
            prev = ch
        self.out_conv = nn.Conv2d(prev, 1, 1)
        self.out_upsample = out_upsample

    def forward(self, skips: list[torch.Tensor]) -> torch.Tensor:
        x = skips[-1]
        for block, skip in zip(self.blocks, reversed(skips[:-1])):
            x = block(torch.cat([self.up(x), skip], dim=1))
        logits = self.out_conv(x)
        if self.out_upsample > 1:
            logits = nn.functional.interpolate(
                logits, scale_factor=self.out_upsample, mode="bilinear", align_corners=False
            )
        return logits


class _UnetTrunk(nn.Module):
    """Encoder levels with conv-LSTM layers in every skip connection."""

    def __init__(self, cfg: CttBackboneConfig):
        super().__init__()
        self.pool_in = (
            nn.AvgPool2d(cfg.input_downsample) if cfg.input_downsample > 1 else nn.Identity()
        )
        self.pool = nn.MaxPool2d(2)
        self.enc_blocks = nn.ModuleList()
        prev = cfg.input_channels
        for ch in cfg.enc_channels:
            self.enc_blocks.append(ResConvBlock(prev, ch))
            prev = ch
        n = len(cfg.enc_channels)
        self.skip_lstms = nn.ModuleList(
            ConvLSTM(ch, ch, n_layers=3 if i == n - 1 else 1)
            for i, ch in enumerate(cfg.enc_channels)
        )

    def forward(self, frames: torch.Tensor) -> list[torch.Tensor]:
        """(B, T, C, H, W) -> per-level recurrent skip features."""
        b, t = frames.shape[:2]
        x = self.pool_in(frames.flatten(0, 1))
        skips = []
        for i, block in enumerate(self.enc_blocks):
            if i > 0:
                x = self.pool(x)
            x = block(x)
            lstm_out, _ = self.skip_lstms[i](x.unflatten(0, (b, t)))
            skips.append(lstm_out)
            x = lstm_out.flatten(0, 1)
        return skips


class TipTrackerUnet(nn.Module):
    """UNet tracker with recurrent skips; emits a [0, 1] heatmap per frame."""

    def __init__(self, cfg: CttBackboneConfig, with_seg_head: bool = False):
        super().__init__()
        self.cfg = cfg
        self.trunk = _UnetTrunk(cfg)
        self.task_head = _UnetDecoder(cfg.enc_channels, cfg.input_downsample)
        self.seg_head = _UnetDecoder(cfg.enc_channels, cfg.input_downsample) if with_seg_head else None

    def _decode(self, head: _UnetDecoder, skips: list[torch.Tensor]) -> torch.Tensor:
        b, t = skips[0].shape[:2]
        flat = [s.flatten(0, 1) for s in skips]
        return head(flat).unflatten(0, (b, t))

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.forward_logits(frames))

    def forward_logits(self, frames: torch.Tensor) -> torch.Tensor:
        return self._decode(self.task_head, self.trunk(frames))

    def forward_seg(self, frames: torch.Tensor) -> torch.Tensor:
        if self.seg_head is None:
            raise RuntimeError("model was built without a segmentation head")
        return self._decode(self.seg_head, self.trunk(frames))

    def forward_with_branch_features(
        self, frames: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Heatmap logits plus spatially averaged bottleneck features."""
        skips = self.trunk(frames)
        logits = self._decode(self.task_head, skips)
        return logits, skips[-1].mean(dim=(-2, -1))

    def feature_maps(self, frames: torch.Tensor) -> dict[str, torch.Tensor]:
        skips = self.trunk(frames)
        return {f"skip{i + 1}": s for i, s in enumerate(skips)}


class _TrackerTrunk(nn.Module):
    """Shared conv encoder plus transformer over template and search tokens."""

    def __init__(self, cfg: CttBackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = ConvEncoder(cfg.input_channels, (16, 32, 64))
        self.proj = nn.Conv2d(64, cfg.d_model, 1)
        self.search_grid = cfg.search_size_px // 8
        self.template_grid = cfg.template_size_px // 8
        self.pos_search = nn.Parameter(torch.zeros(self.search_grid**2, cfg.d_model))
        self.pos_template = nn.Parameter(torch.zeros(self.template_grid**2, cfg.d_model))
        self.slot_embed = nn.Parameter(torch.zeros(cfg.max_templates, cfg.d_model))
        nn.init.normal_(self.pos_search, std=0.02)
        nn.init.normal_(self.pos_template, std=0.02)
        nn.init.normal_(self.slot_embed, std=0.02)

        enc_layer = nn.TransformerEncoderLayer(
            cfg.d_model, cfg.n_heads, dim_feedforward=2 * cfg.d_model,
            dropout=0.0, batch_first=True,
        )
        self.transformer = nn.TransformerEncoder(enc_layer, cfg.n_encoder_layers)
        dec_layer = nn.TransformerDecoderLayer(
            cfg.d_model, cfg.n_heads, dim_feedforward=2 * cfg.d_model,
            dropout=0.0, batch_first=True,
        )
        self.decoder = nn.TransformerDecoder(dec_layer, cfg.n_decoder_layers)
        self.target_query = nn.Parameter(torch.zeros(1, cfg.d_model))
        nn.init.normal_(self.target_query, std=0.02)

    def _tokens(self, image: torch.Tensor) -> torch.Tensor:
        feat = self.proj(self.encoder(image)[-1])  # (B, D, g, g)
        return feat.flatten(2).transpose(1, 2)  # (B, g*g, D)

    def forward(
        self, templates: torch.Tensor, search: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """templates (B, K, C, s, s), search (B, C, H, W) ->
        (search memory (B, Ns, D), query embedding (B, D))."""
        b, k = templates.shape[:2]
        if not 1 <= k <= self.cfg.max_templates:
            raise ValueError(f"need 1..{self.cfg.max_templates} templates, got {k}")
        if templates.shape[-1] != self.cfg.template_size_px:
            raise ValueError(
                f"templates must be {self.cfg.template_size_px} px squares, "
                f"got {tuple(templates.shape[-2:])}"
            )
        tmpl_tokens = []
        for j in range(k):
            tok = self._tokens(templates[:, j]) + self.pos_template + self.slot_embed[j]
            tmpl_tokens.append(tok)
        search_tokens = self._tokens(search) + self.pos_search
        n_search = search_tokens.shape[1]
        joint = torch.cat([search_tokens, *tmpl_tokens], dim=1)
        memory = self.transformer(joint)
        query = self.decoder(self.target_query.expand(b, -1, -1), memory)
        return memory[:, :n_search], query[:, 0]


class _TrackerHead(nn.Module):
    """Query-to-search similarity map decoded to a full-resolution heatmap."""

    def __init__(self, cfg: CttBackboneConfig):
        super().__init__()
        grid = cfg.search_size_px // 8
        self.grid = grid
        self.decode = UpsampleDecoder(cfg.d_model + 1, n_ups=int(math.log2(8)))

    def forward(self, search_memory: torch.Tensor, query: torch.Tensor) -> torch.Tensor:
        b, n, d = search_memory.shape
        sim = torch.bmm(search_memory, query[:, :, None]) / math.sqrt(d)  # (B, N, 1)
        sim_map = sim.transpose(1, 2).reshape(b, 1, self.grid, self.grid)
        feat_map = search_memory.transpose(1, 2).reshape(b, d, self.grid, self.grid)
        return self.decode(torch.cat([feat_map, sim_map], dim=1))


class TipTrackerTransformer(nn.Module):
    """Template tracker emitting one [0, 1] tip heatmap over the search image."""

    def __init__(self, cfg: CttBackboneConfig, with_seg_head: bool = False):
        super().__init__()
        self.cfg = cfg
        self.trunk = _TrackerTrunk(cfg)
        self.task_head = _TrackerHead(cfg)
        self.seg_head = _TrackerHead(cfg) if with_seg_head else None

    def forward(self, templates: torch.Tensor, search: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.forward_logits(templates, search))

    def forward_logits(self, templates: torch.Tensor, search: torch.Tensor) -> torch.Tensor:
        memory, query = self.trunk(templates, search)
        return self.task_head(memory, query)

    def forward_seg(self, templates: torch.Tensor, search: torch.Tensor) -> torch.Tensor:
        if self.seg_head is None:
            raise RuntimeError("model was built without a segmentation head")
        memory, query = self.trunk(templates, search)
        return self.seg_head(memory, query)

    def forward_with_branch_features(
        self, templates: torch.Tensor, search: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Heatmap logits plus the query embedding used for distillation."""
        memory, query = self.trunk(templates, search)
        return self.task_head(memory, query), query

    def feature_maps(self, templates: torch.Tensor, search: torch.Tensor) -> dict[str, torch.Tensor]:
        memory, _ = self.trunk(templates, search)
        b, n, d = memory.shape
        g = self.trunk.search_grid
        return {"search_memory": memory.transpose(1, 2).reshape(b, d, g, g)}
