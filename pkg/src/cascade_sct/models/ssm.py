"""Selective state-space recurrence x_{t+1} = exp(delta(u_t) * A) x_t + B(u_t)."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import NumericalError


def selective_scan(a_bar: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Run ``x_{t+1} = a_bar_t * x_t + b_t`` from ``x_0 = 0`` along dim -2.

    Both inputs have shape ``(..., T, N)`` (diagonal transitions). Returns the
    states ``x_1 .. x_T``. Evaluated as a log-depth associative scan: combining
    ``(a1, b1)`` then ``(a2, b2)`` gives ``(a2 * a1, a2 * b1 + b2)``.
    """
    if a_bar.shape != b.shape:
        raise ValueError(f"a_bar {tuple(a_bar.shape)} and b {tuple(b.shape)} must match")
    T = b.shape[-2]
    a, x = a_bar, b
    offset = 1
    while offset < T:
        head_a, head_x = a[..., :offset, :], x[..., :offset, :]
        tail_a = a[..., offset:, :]
        new_x = tail_a * x[..., :-offset, :] + x[..., offset:, :]
        new_a = tail_a * a[..., :-offset, :]
        a = torch.cat([head_a, new_a], dim=-2)
        x = torch.cat([head_x, new_x], dim=-2)
        offset *= 2
    return x


def check_finite_states(states: torch.Tensor) -> None:
    bad = ~torch.isfinite(states)
    if bad.any():
        steps = bad.reshape(-1, *states.shape[-2:]).any(dim=(0, 2))
        t = int(torch.nonzero(steps)[0])
        raise NumericalError(f"non-finite SSM state at step {t}")


def inverse_softplus(y: float) -> float:
    return y + math.log(-math.expm1(-y))


class SelectiveSSM(nn.Module):
    """Input-conditioned diagonal SSM over token sequences ``(B, T, C)``.

    ``A = -softplus(a_raw)`` keeps the transition contractive; ``delta`` is a
    per-state step size made positive by softplus.
    """

    def __init__(self, d_model: int, state_dim: int = 8):
        super().__init__()
        self.d_model = d_model
        self.state_dim = state_dim
        # A_n initialised to -(1..N) (S4D-real style)
        init = torch.arange(1, state_dim + 1, dtype=torch.float32)
        self.a_raw = nn.Parameter(torch.tensor([inverse_softplus(float(v)) for v in init]))
        self.b_proj = nn.Linear(d_model, state_dim)
        self.delta_proj = nn.Linear(d_model, state_dim)
        self.c_proj = nn.Linear(state_dim, d_model)
        with torch.no_grad():
            nn.init.zeros_(self.delta_proj.weight)
            self.delta_proj.bias.fill_(inverse_softplus(0.5))

    def transition(self) -> torch.Tensor:
        return -F.softplus(self.a_raw)

    def delta(self, u: torch.Tensor) -> torch.Tensor:
        return F.softplus(self.delta_proj(u))

    def states(self, u: torch.Tensor, delta: torch.Tensor | None = None) -> torch.Tensor:
        if delta is None:
            delta = self.delta(u)
        a_bar = torch.exp(delta * self.transition())
        x = selective_scan(a_bar, self.b_proj(u))
        check_finite_states(x)
        return x

    def forward(self, u: torch.Tensor, delta: torch.Tensor | None = None) -> torch.Tensor:
        return self.c_proj(self.states(u, delta))


def ssm_scan(tokens: torch.Tensor, params: SelectiveSSM, delta: torch.Tensor | None = None) -> torch.Tensor:
    """Outputs ``y_t = C(x_{t+1})`` for a ``(T, C)`` or ``(B, T, C)`` token sequence."""
    if tokens.shape[-2] < 1:
        raise ValueError("ssm_scan needs at least one token")
    return params(tokens, delta)
