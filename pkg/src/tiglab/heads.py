"""Fusion of backbone embeddings with prompts, and the downstream task heads."""
from __future__ import annotations

import torch
from torch import nn

from .backbone import MLP


class FusionMLP(nn.Module):
    """Prompted embedding = MLP(z || p); ReLU hidden layer of width d_embed."""

    def __init__(self, d_embed: int, d_prompt: int | None = None):
        super().__init__()
        self.d_embed = d_embed
        self.d_prompt = d_embed if d_prompt is None else d_prompt
        self.mlp = MLP(self.d_embed + self.d_prompt, d_embed, d_embed)

    def init_passthrough(self, shift: float = 50.0, prompt_scale: float = 0.01) -> "FusionMLP":
        """
        Start as fuse(z, p) = z + small(p).

        The hidden bias ``shift`` keeps every ReLU active for |z| < shift, so the
        embedding half passes through unchanged; the prompt half gets small random
        weights so gradients reach the prompt from the first step.
        """
        first, last = self.mlp[0], self.mlp[-1]
        d = self.d_embed
        with torch.no_grad():
            first.weight.zero_()
            first.weight[:, :d].copy_(torch.eye(d))
            first.weight[:, d:].normal_(0.0, prompt_scale)
            first.bias.fill_(shift)
            last.weight.copy_(torch.eye(d))
            last.bias.fill_(-shift)
        return self

    def forward(self, z: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.d_embed or p.shape[-1] != self.d_prompt:
            raise ValueError(f"fuse expects dims ({self.d_embed}, {self.d_prompt}), got ({z.shape[-1]}, {p.shape[-1]})")
        return self.mlp(torch.cat([z, p], dim=-1))


class LinkHead(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.mlp = MLP(2 * d, d, 1)

    @classmethod
    def from_pretext(cls, pretext: nn.Module) -> "LinkHead":
        """Copy of the backbone's pretraining link scorer (same 2d -> d -> 1 layout)."""
        head = cls(pretext[0].in_features // 2)
        head.mlp.load_state_dict(pretext.state_dict())
        return head

    def forward(self, z_src: torch.Tensor, z_dst: torch.Tensor) -> torch.Tensor:
        """Logits; ordered pairs, no symmetry is imposed."""
        return self.mlp(torch.cat([z_src, z_dst], dim=-1)).squeeze(-1)


class NodeClassHead(nn.Module):
    def __init__(self, d: int, n_classes: int = 2, dropout: float = 0.1):
        super().__init__()
        if n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        self.mlp = MLP(d, max(d // 2, 1), n_classes, dropout=dropout)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.mlp(z)


def fuse(rho: FusionMLP, z_v: torch.Tensor, p_v: torch.Tensor) -> torch.Tensor:
    return rho(z_v, p_v)


def predict_link(phi: LinkHead, z_u: torch.Tensor, z_v: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(phi(z_u, z_v))


def classify_node(phi: NodeClassHead, z_v: torch.Tensor) -> torch.Tensor:
    return torch.softmax(phi(z_v), dim=-1)
