"""Temporal prompt generators and the uniform static-graph prompt baselines."""
from __future__ import annotations

import enum

import numpy as np
import torch
from torch import nn

from .backbone import MLP
from .time_encoding import TimeEncoder


class PromptVariant(str, enum.Enum):
    VANILLA = "vanilla"
    TRANSFORMER = "transformer"
    PROJECTION = "projection"
    STATIC_OUTPUT = "static_output"
    STATIC_INPUT = "static_input"

    @property
    def is_static(self) -> bool:
        return self in (PromptVariant.STATIC_OUTPUT, PromptVariant.STATIC_INPUT)


class VanillaPrompt(nn.Module):
    """A learnable prompt row per node, zero at start."""

    variant = PromptVariant.VANILLA

    def __init__(self, n_nodes: int, d: int):
        super().__init__()
        self.table = nn.Parameter(torch.zeros(n_nodes, d))

    @property
    def d(self) -> int:
        return self.table.shape[1]

    def forward(self, nodes) -> torch.Tensor:
        idx = torch.as_tensor(np.asarray(nodes, dtype=np.int64))
        if len(idx) and (idx.min() < 0 or idx.max() >= self.table.shape[0]):
            raise IndexError("node id out of range for prompt table")
        return self.table[idx]


class TransformerPrompt(nn.Module):
    """
    Encodes the K most recent neighbor tokens of a node into its prompt.

    Each token concatenates the target embedding, the neighbor embedding, a
    recency-rank position embedding, the edge feature and the time code of the
    interaction; a linear map brings it to the encoder width. Encoder outputs
    are mean-pooled over real tokens and projected to the prompt dimension.
    A node without history is encoded from a single learnable token.
    """

    variant = PromptVariant.TRANSFORMER

    def __init__(self, d_embed: int, d: int, d_e: int, d_t: int, k: int = 10, d_pos: int | None = None,
                 d_tok: int | None = None, n_heads: int = 2, dropout: float = 0.1):
        super().__init__()
        d_pos = d if d_pos is None else d_pos
        d_tok = d if d_tok is None else d_tok
        self.k, self.d_embed, self.d_e, self.d_t = k, d_embed, d_e, d_t
        self.positions = nn.Parameter(torch.randn(k, d_pos) * 0.1)
        self.token_proj = nn.Linear(2 * d_embed + d_pos + d_e + d_t, d_tok)
        self.encoder = nn.TransformerEncoderLayer(d_tok, n_heads, dim_feedforward=2 * d_tok, dropout=dropout,
                                                  batch_first=True)
        self.no_history = nn.Parameter(torch.randn(d_tok) * 0.1)
        self.readout = nn.Linear(d_tok, d)

    @property
    def d(self) -> int:
        return self.readout.out_features

    def tokens(self, z_v, z_nbr, edge, time_code) -> torch.Tensor:
        """Raw (pre-projection) neighbor tokens, shape (B, K, 2 d_embed + d_pos + d_e + d_t)."""
        b, k = z_nbr.shape[:2]
        pos = self.positions[:k].unsqueeze(0).expand(b, k, -1)
        return torch.cat([z_v.unsqueeze(1).expand(b, k, -1), z_nbr, pos, edge, time_code], dim=-1)

    def forward(self, z_v: torch.Tensor, z_nbr: torch.Tensor, edge: torch.Tensor, time_code: torch.Tensor,
                mask: torch.Tensor) -> torch.Tensor:
        """
        :param z_v: (B, d_embed) target embeddings
        :param z_nbr: (B, K, d_embed) neighbor embeddings, most recent first
        :param edge: (B, K, d_e) edge features of the neighbor interactions
        :param time_code: (B, K, d_t) encoded t - t_uv
        :param mask: (B, K) bool, True for real neighbors
        """
        if z_v.shape[-1] != self.d_embed or z_nbr.shape[-1] != self.d_embed:
            raise ValueError(f"embedding dim {z_v.shape[-1]} does not match configured {self.d_embed}")
        mask = torch.as_tensor(mask, dtype=torch.bool)
        tok = self.token_proj(self.tokens(z_v, z_nbr, edge, time_code))
        empty = ~mask.any(dim=1)
        if empty.any():
            tok = tok.clone()
            tok[empty, 0] = self.no_history.to(tok.dtype)
            mask = mask.clone()
            mask[empty, 0] = True
        out = self.encoder(tok, src_key_padding_mask=~mask)
        w = mask.to(out.dtype).unsqueeze(-1)
        pooled = (out * w).sum(1) / w.sum(1)
        return self.readout(pooled)


class ProjectionPrompt(nn.Module):
    """MLP over a per-node personal vector and the time code of the node's idle gap."""

    variant = PromptVariant.PROJECTION

    def __init__(self, n_nodes: int, d: int, d_t: int):
        super().__init__()
        self.personal = nn.Parameter(torch.zeros(n_nodes, d))
        self.mlp = MLP(d + d_t, d, d)
        # zero final layer: prompts start neutral like the vanilla table
        nn.init.zeros_(self.mlp[-1].weight)
        nn.init.zeros_(self.mlp[-1].bias)

    @property
    def d(self) -> int:
        return self.personal.shape[1]

    def forward(self, nodes, time_code: torch.Tensor) -> torch.Tensor:
        idx = torch.as_tensor(np.asarray(nodes, dtype=np.int64))
        return self.mlp(torch.cat([self.personal[idx], time_code], dim=-1))


class StaticPrompt(nn.Module):
    """One vector shared by all nodes, added to outputs or to input node features."""

    def __init__(self, variant: PromptVariant, d: int):
        super().__init__()
        if not PromptVariant(variant).is_static:
            raise ValueError(f"{variant} is not a static prompt variant")
        self.variant = PromptVariant(variant)
        self.vector = nn.Parameter(torch.zeros(d))

    @property
    def d(self) -> int:
        return self.vector.shape[0]

    def forward(self, values: torch.Tensor) -> torch.Tensor:
        return values + self.vector


def vanilla_prompt(state: VanillaPrompt, nodes) -> torch.Tensor:
    return state(nodes)


def transformer_prompt(state: TransformerPrompt, graph, z_lookup, v: int, t: float, k: int,
                       time_enc: TimeEncoder) -> torch.Tensor:
    """
    Prompt for a single node.
    :param z_lookup: callable (nodes, t) -> embeddings (len(nodes), d_embed) from the frozen backbone
    """
    nbr, eid, ts, mask = graph.neighbor_index.query(np.array([v]), np.array([t]), k)
    z_v = z_lookup(np.array([v]), t)
    z_nbr = z_lookup(nbr[0], t).unsqueeze(0)
    dtype = z_v.dtype
    edge = torch.as_tensor(graph.edge_feats[eid], dtype=dtype)
    code = time_enc(torch.as_tensor(t - ts)).to(dtype)
    return state(z_v, z_nbr, edge, code, torch.as_tensor(mask))[0]


def idle_delta(t, last, t_min: float) -> np.ndarray:
    """t - last interaction time; nodes that never interacted count from the stream start."""
    t = np.asarray(t, dtype=np.float64)
    last = np.asarray(last, dtype=np.float64)
    return np.where(np.isfinite(last), t - last, t - t_min)


def projection_prompt(state: ProjectionPrompt, v, t, tracker, time_enc: TimeEncoder, t_min: float = 0.0) -> torch.Tensor:
    nodes = np.atleast_1d(np.asarray(v, dtype=np.int64))
    delta = idle_delta(np.broadcast_to(t, nodes.shape), tracker.get(nodes), t_min)
    code = time_enc(torch.as_tensor(delta)).to(state.personal.dtype)
    out = state(nodes, code)
    return out[0] if np.ndim(v) == 0 else out


def static_prompt(state: StaticPrompt, variant, inputs: torch.Tensor) -> torch.Tensor:
    if PromptVariant(variant) != state.variant:
        raise ValueError(f"prompt holds {state.variant.value}, asked for {variant}")
    return state(inputs)


def count_prompt_parameters(state: nn.Module) -> int:
    return sum(p.numel() for p in state.parameters() if p.requires_grad)


def build_prompt(variant, n_nodes: int, d: int, d_embed: int, d_e: int, d_t: int, d_n: int, k: int = 10,
                 d_pos: int | None = None, dropout: float = 0.1) -> nn.Module:
    variant = PromptVariant(variant)
    if variant is PromptVariant.VANILLA:
        return VanillaPrompt(n_nodes, d)
    if variant is PromptVariant.TRANSFORMER:
        return TransformerPrompt(d_embed, d, d_e, d_t, k=k, d_pos=d_pos, dropout=dropout)
    if variant is PromptVariant.PROJECTION:
        return ProjectionPrompt(n_nodes, d, d_t)
    if variant is PromptVariant.STATIC_OUTPUT:
        return StaticPrompt(variant, d_embed)
    return StaticPrompt(variant, d_n)
