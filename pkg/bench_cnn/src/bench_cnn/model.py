"""The four-network composite: analog nets feed digital nets.

``tx_phase_net`` and ``rx_phase_net`` map the stacked channel tensor to the
analog phase matrices; the analog-combined equivalent channel
``U_k H_k F`` then feeds ``precoder_net`` and ``combiner_net``.  Each
network is a 17-layer stack of 3x3 convolutions with batch normalization
and stride-2 pooling every four blocks, followed by fully connected layers.
The precoder output is rescaled onto the power budget so the transmit
constraint holds by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn


@dataclass(frozen=True)
class SystemDims:
    n_tx: int
    n_rf_tx: int
    n_users: int
    n_rx: int
    n_rf_rx: int
    streams: int
    power_budget: float = 1.0

    @property
    def total_streams(self) -> int:
        return self.n_users * self.streams


def _conv_stack(in_channels: int, width: int = 32,
                n_conv: int = 12) -> nn.Sequential:
    layers = []
    ch = in_channels
    for i in range(n_conv):
        layers += [nn.Conv2d(ch, width, 3, padding=1),
                   nn.BatchNorm2d(width), nn.ReLU()]
        ch = width
        if (i + 1) % 4 == 0:
            layers.append(nn.MaxPool2d(2, ceil_mode=True))
    layers.append(nn.AdaptiveAvgPool2d((2, 2)))
    layers.append(nn.Flatten())
    return nn.Sequential(*layers)


def _head(out_dim: int, width: int = 32) -> nn.Sequential:
    # four fully connected layers plus the output map: with the 12
    # convolutions this makes 17 weight layers per network
    hidden = 4 * width
    return nn.Sequential(
        nn.Linear(hidden, 128), nn.ReLU(),
        nn.Linear(128, 128), nn.ReLU(),
        nn.Linear(128, 128), nn.ReLU(),
        nn.Linear(128, 128), nn.ReLU(),
        nn.Linear(128, out_dim))


class PhaseNet(nn.Module):
    """Channel tensor -> one real phase matrix (scaled to [-pi, pi])."""

    def __init__(self, in_channels: int, rows: int, cols: int):
        super().__init__()
        self.rows, self.cols = rows, cols
        self.features = _conv_stack(in_channels)
        self.head = _head(rows * cols)

    def forward(self, x):
        out = self.head(self.features(x))
        return math.pi * torch.tanh(out).view(-1, self.rows, self.cols)


class ComplexNet(nn.Module):
    """Channel tensor -> one complex matrix (real/imag pair)."""

    def __init__(self, in_channels: int, rows: int, cols: int):
        super().__init__()
        self.rows, self.cols = rows, cols
        self.features = _conv_stack(in_channels)
        self.head = _head(2 * rows * cols)

    def forward(self, x):
        out = self.head(self.features(x)).view(-1, 2, self.rows, self.cols)
        return torch.complex(out[:, 0], out[:, 1])


class CompositeBeamformer(nn.Module):
    """The P/W/tx-phase/rx-phase networks wired through the equivalent channel."""

    def __init__(self, dims: SystemDims):
        super().__init__()
        self.dims = dims
        in_ch = 2 * dims.n_users
        self.tx_phase_net = PhaseNet(in_ch, dims.n_tx, dims.n_rf_tx)
        self.rx_phase_net = PhaseNet(in_ch, dims.n_users * dims.n_rf_rx,
                                     dims.n_rx)
        eq_ch = 2 * dims.n_users
        self.precoder_net = ComplexNet(eq_ch, dims.n_rf_tx, dims.total_streams)
        self.combiner_net = ComplexNet(eq_ch, dims.n_users * dims.n_rf_rx,
                                       dims.streams)

    def forward(self, channels: torch.Tensor, raw: torch.Tensor):
        """``channels``: (B, 2K, n_rx, n_tx) real; ``raw``: complex (B, K, n_rx, n_tx)."""
        d = self.dims
        tx_phase = self.tx_phase_net(channels)                  # B x n_tx x R_t
        rx_phase = self.rx_phase_net(channels).view(
            -1, d.n_users, d.n_rf_rx, d.n_rx)
        analog_tx = torch.exp(1j * tx_phase)
        analog_rx = torch.exp(1j * rx_phase)

        # equivalent channel per user: U_k H_k F  (B, K, R_r, R_t)
        eq = torch.einsum("bkrn,bknt,bktf->bkrf", analog_rx,
                          raw.to(analog_tx.dtype), analog_tx.unsqueeze(1)
                          .expand(-1, d.n_users, -1, -1))
        eq_real = torch.cat([eq.real, eq.imag], dim=1).float()

        v = self.precoder_net(eq_real)                          # B x R_t x D
        w = self.combiner_net(eq_real).view(
            -1, d.n_users, d.n_rf_rx, d.streams)

        # transmit power normalization onto the budget
        fv = torch.einsum("btf,bfd->btd", analog_tx, v)
        norm = torch.sqrt(torch.sum(torch.abs(fv) ** 2, dim=(1, 2),
                                    keepdim=True))
        v = v * (math.sqrt(d.power_budget) / torch.clamp(norm, min=1e-12))
        return v, w, analog_tx, analog_rx
