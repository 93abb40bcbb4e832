"""Directional 3D scans (SS3D) and the residual VSS3D block."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .ssm import SelectiveSSM

# Fastest-varying axis first; odd directions traverse the same order reversed.
SCAN_ORDERS = ((0, 1, 2), (1, 2, 0), (2, 0, 1))
MAX_DIRECTIONS = 2 * len(SCAN_ORDERS)


def _order(direction: int) -> tuple[tuple[int, int, int], bool]:
    if not 0 <= direction < MAX_DIRECTIONS:
        raise ValueError(f"unknown scan direction {direction}; expected 0..{MAX_DIRECTIONS - 1}")
    return SCAN_ORDERS[direction // 2], bool(direction % 2)


def ss3d_unfold(features: torch.Tensor, direction: int) -> torch.Tensor:
    """``(C, h, w, d)`` or ``(B, C, h, w, d)`` -> tokens ``(T, C)`` / ``(B, T, C)``.

    Direction 0 is the storage raster order: x fastest, then y, then z.
    """
    order, reverse = _order(direction)
    batched = features.dim() == 5
    f = features if batched else features.unsqueeze(0)
    # slowest axis first in the permuted layout so reshape walks `order[0]` fastest
    spatial = [2 + a for a in reversed(order)]
    seq = f.permute(0, *spatial, 1).reshape(f.shape[0], -1, f.shape[1])
    if reverse:
        seq = seq.flip(1)
    return seq if batched else seq[0]


def ss3d_refold(seq: torch.Tensor, direction: int, spatial_shape) -> torch.Tensor:
    order, reverse = _order(direction)
    batched = seq.dim() == 3
    s = seq if batched else seq.unsqueeze(0)
    if reverse:
        s = s.flip(1)
    shape = [spatial_shape[a] for a in reversed(order)]
    grid = s.reshape(s.shape[0], *shape, s.shape[-1])
    # grid axes are (B, order[2], order[1], order[0], C); move back to (B, C, x, y, z)
    inverse = [0, 4, 0, 0, 0]
    for pos, axis in enumerate(reversed(order)):
        inverse[2 + axis] = 1 + pos
    out = grid.permute(*inverse)
    return out if batched else out[0]


class DropPath(nn.Module):
    """Per-sample stochastic depth on a residual update."""

    def __init__(self, rate: float = 0.0):
        super().__init__()
        self.rate = rate

    def forward(self, x: torch.Tensor, keep: torch.Tensor | None = None) -> torch.Tensor:
        if keep is not None:
            return x * keep.to(x.dtype).view(-1, *([1] * (x.dim() - 1)))
        if not self.training or self.rate == 0.0:
            return x
        if self.rate >= 1.0:
            return torch.zeros_like(x)
        keep_prob = 1.0 - self.rate
        mask = torch.rand(x.shape[0], *([1] * (x.dim() - 1)), dtype=x.dtype, device=x.device) < keep_prob
        return x * mask.to(x.dtype) / keep_prob


class VSS3DBlock(nn.Module):
    """LayerNorm -> directional selective scans -> SiLU gate MLP -> DropPath residual."""

    def __init__(self, width: int, state_dim: int = 8, scan_directions: int = 6, droppath_rate: float = 0.0):
        super().__init__()
        if scan_directions not in (2, 4, 6):
            raise ValueError("scan_directions must be 2, 4 or 6")
        self.scan_directions = scan_directions
        self.norm = nn.LayerNorm(width)
        self.scans = nn.ModuleList(SelectiveSSM(width, state_dim) for _ in range(scan_directions))
        self.fc1 = nn.Linear(width, width)
        self.fc2 = nn.Linear(width, width)
        self.drop_path = DropPath(droppath_rate)

    def update_parameters(self):
        for m in (*self.scans, self.fc1, self.fc2):
            yield from m.parameters()

    def update(self, features: torch.Tensor) -> torch.Tensor:
        spatial = features.shape[2:]
        tokens = self.norm(ss3d_unfold(features, 0))
        normed = ss3d_refold(tokens, 0, spatial)
        acc = 0
        for direction, scan in enumerate(self.scans):
            seq = ss3d_unfold(normed, direction)
            acc = acc + ss3d_refold(scan(seq), direction, spatial)
        mixed = ss3d_unfold(acc / self.scan_directions, 0)
        out = self.fc2(F.silu(self.fc1(mixed)))
        return ss3d_refold(out, 0, spatial)

    def forward(self, features: torch.Tensor, keep: torch.Tensor | None = None) -> torch.Tensor:
        return features + self.drop_path(self.update(features), keep)
