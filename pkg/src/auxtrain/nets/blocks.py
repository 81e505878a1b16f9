"""Shared building blocks: residual conv blocks, conv-LSTM layers, decoders."""

from __future__ import annotations

import torch
from torch import nn


class ResConvBlock(nn.Module):
    """Two 3x3 convolutions with a residual path; no normalization, ReLU."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Identity() if c_in == c_out else nn.Conv2d(c_in, c_out, 1)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.conv2(self.act(self.conv1(x))) + self.skip(x))


class ConvLSTMCell(nn.Module):
    """Convolutional LSTM cell: gates from a single 3x3 convolution."""

    def __init__(self, c_in: int, hidden: int, kernel_size: int = 3, bias: bool = True):
        super().__init__()
        self.hidden = hidden
        self.gates = nn.Conv2d(
            c_in + hidden, 4 * hidden, kernel_size, padding=kernel_size // 2, bias=bias
        )

    def forward(
        self, x: torch.Tensor, state: tuple[torch.Tensor, torch.Tensor]
    ) -> tuple[torch.Tensor, torch.Tensor]:
        h, c = state
        gi, gf, go, gc = self.gates(torch.cat([x, h], dim=1)).chunk(4, dim=1)
        i = torch.sigmoid(gi)
        f = torch.sigmoid(gf)
        o = torch.sigmoid(go)
        c_next = f * c + i * torch.tanh(gc)
        h_next = o * torch.tanh(c_next)
        return h_next, c_next

    def initial_state(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, _, hh, ww = x.shape
        zeros = x.new_zeros(b, self.hidden, hh, ww)
        return zeros, zeros.clone()


class ConvLSTM(nn.Module):
    """Stack of conv-LSTM cells threading state over a frame sequence."""

    def __init__(self, c_in: int, hidden: int, n_layers: int = 1, kernel_size: int = 3):
        super().__init__()
        self.cells = nn.ModuleList(
            ConvLSTMCell(c_in if i == 0 else hidden, hidden, kernel_size)
            for i in range(n_layers)
        )

    def forward(
        self,
        x_seq: torch.Tensor,
        state: list[tuple[torch.Tensor, torch.Tensor]] | None = None,
    ) -> tuple[torch.Tensor, list[tuple[torch.Tensor, torch.Tensor]]]:
        """``x_seq`` is (B, T, C, H, W); returns (B, T, hidden, H, W) and the
        final per-layer states for streaming continuation."""
        if state is None:
            state = [cell.initial_state(x_seq[:, 0]) for cell in self.cells]
        outputs = []
        for t in range(x_seq.shape[1]):
            x = x_seq[:, t]
            for i, cell in enumerate(self.cells):
                h, c = cell(x, state[i])
                state[i] = (h, c)
                x = h
            outputs.append(x)
        return torch.stack(outputs, dim=1), state


class UpsampleDecoder(nn.Module):
    """Plain conv decoder: repeated (upsample x2, conv, ReLU), then 1x1 logits."""

    def __init__(self, c_in: int, n_ups: int, out_channels: int = 1, base: int = 16):
        super().__init__()
        layers: list[nn.Module] = []
        c = c_in
        for _ in range(n_ups):
            c_next = max(base, c // 2)
            layers += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(c, c_next, 3, padding=1),
                nn.ReLU(inplace=True),
            ]
            c = c_next
        layers.append(nn.Conv2d(c, out_channels, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class ConvEncoder(nn.Module):
    """Stride-2 conv stages; exposes per-stage feature maps."""

    def __init__(self, c_in: int, stage_channels: tuple[int, ...]):
        super().__init__()
        stages = []
        prev = c_in
        for ch in stage_channels:
            stages.append(
                nn.Sequential(
                    nn.Conv2d(prev, ch, 3, stride=2, padding=1),
                    nn.ReLU(inplace=True),
                    nn.Conv2d(ch, ch, 3, padding=1),
                    nn.ReLU(inplace=True),
                )
            )
            prev = ch
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats
