"""Feature fusion pyramid: channel attention and cross-layer attention cells.

Cell (i, j) turns the lower-level map X[i][j] and the higher-level map
X[i+1][j] into X[i][j+1]. Level i hosts 3 - i cells, so the grid is
triangular and level i finally emits X[i][3-i] at its own resolution.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ContractViolation


def default_reduction(channels: int) -> int:
    return 4 if channels < 256 else 16


class ChannelAttention(nn.Module):
    """Squeeze-excitation gating: pool -> bottleneck MLP -> sigmoid -> scale."""

    def __init__(self, channels: int, reduction: int | None = None):
        super().__init__()
        reduction = default_reduction(channels) if reduction is None else reduction
        if channels < reduction:
            raise ConfigError(f"channels ({channels}) < reduction ratio ({reduction})")
        hidden = channels // reduction
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def gates(self, x):
        pooled = x.mean(dim=(-2, -1))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(pooled))))

    def forward(self, x):
        return x * self.gates(x)[..., None, None]


class CrossLayerAttention(nn.Module):
    def __init__(self, channels: int, reduction: int | None = None):
        super().__init__()
        self.channels = channels
        self.kappa = nn.Conv2d(2 * channels, channels, kernel_size=3, padding=1)
        self.ca = ChannelAttention(2 * channels, reduction)
        self.proj = nn.Conv2d(2 * channels, channels, kernel_size=1)

    def forward(self, lower, higher):
        C, h, w = lower.shape[-3:]
        want = (2 * C, h // 2, w // 2)
        if C != self.channels or tuple(higher.shape[-3:]) != want:
            raise ContractViolation(
                f"CLA({self.channels}) expects lower (C={self.channels}, h, w) and higher {want}; "
                f"got {tuple(lower.shape[-3:])} and {tuple(higher.shape[-3:])}"
            )
        up = F.interpolate(F.elu(self.kappa(higher)), scale_factor=2, mode="nearest")
        return self.proj(self.ca(torch.cat([lower, up], dim=1)))


class FeatureFusionPyramid(nn.Module):
    def __init__(self, C_e: int, reduction: int | None = None, levels: int = 4):
        super().__init__()
        if reduction is None:
            reduction = 4 if C_e < 64 else 16
        self.levels = levels
        self.initial = nn.ModuleList(ChannelAttention(C_e * 2**i, reduction) for i in range(levels))
        self.cells = nn.ModuleDict()
        for j in range(levels - 1):
            for i in range(levels - 1 - j):
                self.cells[f"{i}_{j}"] = CrossLayerAttention(C_e * 2**i, reduction)

    def forward(self, pyramid):
        """Return the fused maps ordered by level: [X03, X12, X21, X30]."""
        if len(pyramid) != self.levels:
            raise ContractViolation(f"expected {self.levels} pyramid levels, got {len(pyramid)}")
        grid = [[ca(x)] for ca, x in zip(self.initial, pyramid)]
        for j in range(self.levels - 1):
            for i in range(self.levels - 1 - j):
                grid[i].append(self.cells[f"{i}_{j}"](grid[i][j], grid[i + 1][j]))
        return [grid[i][self.levels - 1 - i] for i in range(self.levels)]
