"""Self-attention bottleneck used as the comparison backbone."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .vss3d import ss3d_refold, ss3d_unfold


class _Layer(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(width)
        self.fc1 = nn.Linear(width, mlp_ratio * width)
        self.fc2 = nn.Linear(mlp_ratio * width, width)

    def forward(self, x, pos):
        # position enters the attention input only, so zeroed output projections give the identity
        h = self.norm1(x + pos)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.fc2(F.silu(self.fc1(self.norm2(x))))

    def output_projections(self):
        return (self.attn.out_proj, self.fc2)


class TransformerBottleneck(nn.Module):
    def __init__(self, width: int, n_tokens: int, layers: int = 2, heads: int = 4):
        super().__init__()
        if width % heads:
            raise ValueError(f"width {width} is not divisible by {heads} heads")
        self.n_tokens = n_tokens
        self.pos = nn.Parameter(0.02 * torch.randn(n_tokens, width))
        self.layers = nn.ModuleList(_Layer(width, heads) for _ in range(layers))

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        spatial = features.shape[2:]
        x = ss3d_unfold(features, 0)
        if x.shape[1] != self.n_tokens:
            raise ValueError(f"bottleneck has {x.shape[1]} tokens, positional table expects {self.n_tokens}")
        for layer in self.layers:
            x = layer(x, self.pos)
        return ss3d_refold(x, 0, spatial)
