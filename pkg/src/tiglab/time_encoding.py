"""Harmonic time encoding shared by the backbone and the prompt generators."""
from __future__ import annotations

import numpy as np
import torch
from torch import nn

FREQ_DECADES = 9.0


class TimeEncoder(nn.Module):
    """
    cos(omega * dt + phase) with learnable frequencies and phases.

    Frequencies start on a geometric grid, omega_i = 10 ** (-9 i / d_t), so the
    first channel has period 2 pi seconds and the last spans roughly 10 decades.
    """

    def __init__(self, d_t: int):
        super().__init__()
        if d_t < 1:
            raise ValueError(f"time dimension must be >= 1, got {d_t}")
        self.d_t = d_t
        exponents = FREQ_DECADES * np.arange(d_t) / d_t
        self.omega = nn.Parameter(torch.from_numpy(1.0 / 10 ** exponents).float())
        self.phase = nn.Parameter(torch.zeros(d_t))

    def forward(self, delta: torch.Tensor) -> torch.Tensor:
        delta = torch.as_tensor(delta, dtype=self.omega.dtype)
        if not torch.isfinite(delta).all():
            raise ValueError("time delta must be finite")
        return torch.cos(delta.unsqueeze(-1) * self.omega + self.phase)


def init_time_encoder(d_t: int, seed: int = 0) -> TimeEncoder:
    # seed is accepted for interface stability; the init is deterministic
    return TimeEncoder(d_t)


def encode_delta(encoder: TimeEncoder, delta) -> torch.Tensor:
    """Encode a scalar (-> d_t vector) or a batch of deltas (-> n x d_t)."""
    return encoder(torch.as_tensor(delta, dtype=torch.float64))
