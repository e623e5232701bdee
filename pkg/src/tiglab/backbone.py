"""Memory-based temporal graph backbone.

Per-node memory is refreshed by a GRU from deferred interaction messages; node
embeddings come from one temporal-attention layer over the most recent
neighbors. Messages produced by a batch are only absorbed at the start of the
next batch, so an event's score never sees its own interaction.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .graph import SplitSpec, TemporalGraph
from .time_encoding import TimeEncoder

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
BACKBONES: dict[str, type] = {}


def register_backbone(name: str):
    def deco(cls):
        BACKBONES[name] = cls
        return cls
    return deco


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    n_nodes: int
    d_n: int
    d_e: int
    d_mem: int = 172
    d_t: int = 172
    d_embed: int = 172
    n_heads: int = 2
    dropout: float = 0.1
    name: str = "memory_attention"

    def digest(self) -> str:
        payload = json.dumps(dataclasses.asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class PendingMessages:
    nodes: np.ndarray
    self_mem: torch.Tensor
    partner_mem: torch.Tensor
    event_idx: np.ndarray
    t: np.ndarray

    def __len__(self) -> int:
        return len(self.nodes)


@dataclass
class MemoryState:
    memory: torch.Tensor
    last_update: torch.Tensor
    pending: PendingMessages | None = None

    @property
    def n_nodes(self) -> int:
        return self.memory.shape[0]

    def detach(self) -> "MemoryState":
        return MemoryState(self.memory.detach(), self.last_update.clone(), self.pending)

    def clone(self) -> "MemoryState":
        p = self.pending
        if p is not None:
            p = PendingMessages(p.nodes.copy(), p.self_mem.clone(), p.partner_mem.clone(),
                                p.event_idx.copy(), p.t.copy())
        return MemoryState(self.memory.detach().clone(), self.last_update.clone(), p)

    def with_messages(self, src: np.ndarray, dst: np.ndarray, event_idx: np.ndarray, t: np.ndarray) -> "MemoryState":
        """Queue one message per endpoint of each event, snapshotting current memories."""
        mem = self.memory.detach()
        nodes = np.concatenate([src, dst])
        partners = np.concatenate([dst, src])
        new = PendingMessages(nodes, mem[nodes], mem[partners], np.concatenate([event_idx, event_idx]),
                              np.concatenate([t, t]))
        if self.pending is not None and len(self.pending):
            old = self.pending
            new = PendingMessages(np.concatenate([old.nodes, new.nodes]),
                                  torch.cat([old.self_mem, new.self_mem]),
                                  torch.cat([old.partner_mem, new.partner_mem]),
                                  np.concatenate([old.event_idx, new.event_idx]),
                                  np.concatenate([old.t, new.t]))
        return MemoryState(self.memory, self.last_update, new)


def init_state(n_nodes: int, d_mem: int, dtype=torch.float32) -> MemoryState:
    if n_nodes < 1:
        raise ValueError("n_nodes must be >= 1")
    return MemoryState(torch.zeros(n_nodes, d_mem, dtype=dtype), torch.zeros(n_nodes, dtype=torch.float64))


def _graph_tensors(graph: TemporalGraph, dtype=torch.float32):
    cache = graph.__dict__.setdefault("_tensor_cache", {})
    if dtype not in cache:
        cache[dtype] = (torch.as_tensor(graph.node_feats, dtype=dtype), torch.as_tensor(graph.edge_feats, dtype=dtype))
    return cache[dtype]


class MLP(nn.Sequential):
    """Two linear layers with a ReLU in between."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, dropout: float = 0.0):
        layers = [nn.Linear(d_in, d_hidden), nn.ReLU()]
        if dropout:
            layers.append(nn.Dropout(dropout))
        layers.append(nn.Linear(d_hidden, d_out))
        super().__init__(*layers)


@register_backbone("memory_attention")
class MemoryBackbone(nn.Module):
    """GRU memory + single-layer multi-head temporal attention + pretext link head."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        c = self.config = config
        if c.d_embed % c.n_heads:
            raise ValueError("d_embed must be divisible by n_heads")
        self.time_encoder = TimeEncoder(c.d_t)
        d_msg_in = 2 * c.d_mem + c.d_e + c.d_t
        self.message_mlp = MLP(d_msg_in, c.d_mem, c.d_mem)
        self.gru = nn.GRUCell(c.d_mem, c.d_mem)
        d_self = c.d_mem + c.d_n
        self.w_query = nn.Linear(d_self + c.d_t, c.d_embed)
        self.w_key = nn.Linear(d_self + c.d_e + c.d_t, c.d_embed)
        self.w_value = nn.Linear(d_self + c.d_e + c.d_t, c.d_embed)
        self.w_out = nn.Linear(c.d_embed, c.d_embed)
        self.merge = MLP(c.d_embed + d_self, c.d_embed, c.d_embed)
        self.dropout = nn.Dropout(c.dropout)
        self.link_head = MLP(2 * c.d_embed, c.d_embed, 1)

    @property
    def d_embed(self) -> int:
        return self.config.d_embed

    def encoder_parameters(self):
        """Parameters of the embedding path, i.e. everything except the pretext head."""
        return [p for n, p in self.named_parameters() if not n.startswith("link_head.")]

    def score(self, z_src: torch.Tensor, z_dst: torch.Tensor) -> torch.Tensor:
        return self.link_head(torch.cat([z_src, z_dst], dim=-1)).squeeze(-1)


def count_parameters(params) -> int:
    return sum(p.numel() for p in params)


def flush_and_update_memory(state: MemoryState, backbone: MemoryBackbone, graph: TemporalGraph) -> MemoryState:
    """Absorb pending messages (latest per node) through message MLP + GRU; clears the buffer."""
    p = state.pending
    if p is None or len(p) == 0:
        return MemoryState(state.memory, state.last_update, None)
    order = np.lexsort((p.event_idx, p.t))
    nodes_sorted = p.nodes[order]
    # keep the last (most recent) message per node
    rev = nodes_sorted[::-1]
    _, first_rev = np.unique(rev, return_index=True)
    pick = order[len(order) - 1 - first_rev]
    nodes = p.nodes[pick]
    dtype = state.memory.dtype
    _, edge_feats = _graph_tensors(graph, dtype)
    t_msg = torch.as_tensor(p.t[pick], dtype=torch.float64)
    idx = torch.as_tensor(nodes)
    delta = (t_msg - state.last_update[idx]).to(dtype)
    msg_in = torch.cat([p.self_mem[pick], p.partner_mem[pick], edge_feats[p.event_idx[pick]],
                        backbone.time_encoder(delta)], dim=-1)
    new_mem = backbone.gru(backbone.message_mlp(msg_in), state.memory[idx])
    memory = state.memory.index_copy(0, idx, new_mem)
    last_update = state.last_update.clone()
    last_update[idx] = torch.maximum(last_update[idx], t_msg)
    return MemoryState(memory, last_update, None)


def embed_nodes(graph: TemporalGraph, state: MemoryState, backbone: MemoryBackbone, nodes, t, k: int = 10,
                node_feat_offset: torch.Tensor | None = None) -> torch.Tensor:
    """
    Temporal-attention embeddings of ``nodes`` at times ``t``.
    :param node_feat_offset: optional vector added to every node feature (input-style prompt)
    :return: tensor (len(nodes), d_embed), rows in request order
    """
    nodes = np.atleast_1d(np.asarray(nodes, dtype=np.int64))
    times = np.broadcast_to(np.asarray(t, dtype=np.float64), nodes.shape)
    if len(nodes) and (nodes.min() < 0 or nodes.max() >= graph.n_nodes):
        raise IndexError("unknown node id in embedding request")
    dtype = state.memory.dtype
    node_feats, edge_feats = _graph_tensors(graph, dtype)
    nbr, eid, ts, mask = graph.neighbor_index.query(nodes, times, k)
    mem = state.memory
    te = backbone.time_encoder
    c = backbone.config

    def self_feats(ids):
        nf = node_feats[ids]
        if node_feat_offset is not None:
            nf = nf + node_feat_offset
        return torch.cat([mem[ids], nf], dim=-1)

    idx = torch.as_tensor(nodes)
    s_v = self_feats(idx)
    zero_code = te(torch.zeros(len(nodes), dtype=torch.float64))
    q = backbone.w_query(torch.cat([s_v, zero_code], dim=-1))
    nbr_t = torch.as_tensor(nbr)
    s_u = self_feats(nbr_t.reshape(-1)).reshape(len(nodes), k, -1)
    dt = torch.as_tensor(times[:, None] - ts)
    kv_in = torch.cat([s_u, edge_feats[torch.as_tensor(eid)], te(dt)], dim=-1)
    keys = backbone.w_key(kv_in)
    values = backbone.w_value(kv_in)

    h, dh = c.n_heads, c.d_embed // c.n_heads
    qh = q.view(-1, 1, h, dh)
    kh = keys.view(-1, k, h, dh)
    vh = values.view(-1, k, h, dh)
    logits = (qh * kh).sum(-1) / math.sqrt(dh)  # (B, K, H)
    mask_t = torch.as_tensor(mask)
    logits = logits.masked_fill(~mask_t[..., None], float("-inf"))
    has_nbr = mask_t.any(dim=1)
    weights = torch.softmax(logits.masked_fill(~has_nbr[:, None, None], 0.0), dim=1)
    weights = backbone.dropout(weights)
    attn = (weights[..., None] * vh).sum(1).reshape(-1, c.d_embed)
    out = backbone.w_out(attn) * has_nbr[:, None].to(dtype)
    return backbone.merge(torch.cat([out, s_v], dim=-1))


def batches(idx, batch_size: int):
    idx = np.asarray(idx, dtype=np.int64)
    for start in range(0, len(idx), batch_size):
        yield idx[start:start + batch_size]


def commit_batch(state: MemoryState, graph: TemporalGraph, b: np.ndarray) -> MemoryState:
    """Detach the refreshed memory and queue this batch's messages."""
    return state.detach().with_messages(graph.src[b], graph.dst[b], b, graph.t[b])


def replay(graph: TemporalGraph, state: MemoryState, backbone: MemoryBackbone, idx, batch_size: int) -> MemoryState:
    """Advance memory state over events without scoring or gradients."""
    with torch.no_grad():
        for b in batches(idx, batch_size):
            state = flush_and_update_memory(state, backbone, graph)
            state = commit_batch(state, graph, b)
    return state


def sample_negatives(graph: TemporalGraph, n: int, rng: np.random.Generator) -> np.ndarray:
    pool = graph.destination_pool
    return pool[rng.integers(0, len(pool), size=n)]


def bce_link_loss(pos_logits: torch.Tensor, neg_logits: torch.Tensor) -> torch.Tensor:
    return (F.binary_cross_entropy_with_logits(pos_logits, torch.ones_like(pos_logits))
            + F.binary_cross_entropy_with_logits(neg_logits, torch.zeros_like(neg_logits)))


@dataclass
class PretrainConfig:
    batch_size: int = 200
    lr: float = 1e-4
    epochs: int = 50
    patience: int = 5
    k: int = 10
    seed: int = 0
    eval_seed: int = 12345


@dataclass
class PretrainResult:
    backbone: MemoryBackbone
    state: MemoryState
    log: list = field(default_factory=list)
    best_epoch: int = -1


def score_stage(graph: TemporalGraph, state: MemoryState, backbone: MemoryBackbone, idx, batch_size: int, k: int,
                rng: np.random.Generator, score_fn: Callable | None = None):
    """
    Replay ``idx`` chronologically, scoring each positive and one sampled negative.
    :param score_fn: (state, src, dst, neg, t) -> (pos_logits, neg_logits); defaults to the pretext head
    :return: (pos_scores, neg_scores, final state)
    """
    pos_all, neg_all = [], []
    with torch.no_grad():
        for b in batches(idx, batch_size):
            state = flush_and_update_memory(state, backbone, graph)
            src, dst, t = graph.src[b], graph.dst[b], graph.t[b]
            neg = sample_negatives(graph, len(b), rng)
            if score_fn is None:
                z = embed_nodes(graph, state, backbone, np.concatenate([src, dst, neg]), np.tile(t, 3), k)
                zs, zd, zn = z.split(len(b))
                pos, negs = backbone.score(zs, zd), backbone.score(zs, zn)
            else:
                pos, negs = score_fn(state, src, dst, neg, t, b)
            pos_all.append(torch.sigmoid(pos).double().numpy())
            neg_all.append(torch.sigmoid(negs).double().numpy())
            state = commit_batch(state, graph, b)
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0)
    return cat(pos_all), cat(neg_all), state


def pretrain(graph: TemporalGraph, split: SplitSpec, config: PretrainConfig | None = None,
             backbone_config: BackboneConfig | None = None, train_mask: np.ndarray | None = None,
             hooks=None) -> PretrainResult:
    """
    Link-prediction pretraining over the pretrain stage with early stopping on val AP.

    Memory is reset each epoch; validation replays the prompt stage (state only)
    before scoring the val stage.
    """
    from .metrics import average_precision

    config = config or PretrainConfig()
    if backbone_config is None:
        backbone_config = BackboneConfig(n_nodes=graph.n_nodes, d_n=graph.d_n, d_e=graph.d_e)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    backbone = BACKBONES[backbone_config.name](backbone_config)
    opt = torch.optim.Adam(backbone.parameters(), lr=config.lr, foreach=True)
    train_idx = np.asarray(split.stage("pretrain"))
    if train_mask is not None:
        train_idx = train_idx[train_mask[train_idx]]
    if len(train_idx) == 0:
        raise ValueError("pretrain stage is empty")
    prompt_idx = np.asarray(split.stage("prompt"))
    val_idx = np.asarray(split.stage("val"))

    best_ap, best_epoch, bad = -1.0, -1, 0
    best_params, best_state = None, None
    history = []
    for epoch in range(config.epochs):
        backbone.train()
        state = init_state(graph.n_nodes, backbone_config.d_mem)
        losses = []
        for bi, b in enumerate(batches(train_idx, config.batch_size)):
            if hooks is not None:
                hooks.gradient_events(b, split)
            opt.zero_grad()
            state = flush_and_update_memory(state, backbone, graph)
            src, dst, t = graph.src[b], graph.dst[b], graph.t[b]
            neg = sample_negatives(graph, len(b), rng)
            z = embed_nodes(graph, state, backbone, np.concatenate([src, dst, neg]), np.tile(t, 3), config.k)
            zs, zd, zn = z.split(len(b))
            loss = bce_link_loss(backbone.score(zs, zd), backbone.score(zs, zn))
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite pretraining loss at epoch {epoch}, batch {bi}: {loss.item()}")
            loss.backward()
            opt.step()
            losses.append(loss.item())
            state = commit_batch(state, graph, b)
        end_state = state.clone()
        backbone.eval()
        state = replay(graph, state, backbone, prompt_idx, config.batch_size)
        if hooks is not None:
            hooks.early_stop_events(val_idx, split)
        pos, neg, _ = score_stage(graph, state, backbone, val_idx, config.batch_size, config.k,
                                  np.random.default_rng(config.eval_seed))
        val_ap = average_precision(pos, neg)
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_ap": val_ap})
        log.info("pretrain epoch %d loss %.4f val_ap %.4f", epoch, np.mean(losses), val_ap)
        if val_ap > best_ap:
            best_ap, best_epoch, bad = val_ap, epoch, 0
            best_params = copy.deepcopy(backbone.state_dict())
            best_state = end_state
        else:
            bad += 1
            if bad >= config.patience:
                break
    backbone.load_state_dict(best_params)
    backbone.eval()
    return PretrainResult(backbone, best_state, history, best_epoch)


def serialize_params(module_or_params) -> bytes:
    """Deterministic byte image of parameters (name-ordered) for freeze checks."""
    if isinstance(module_or_params, nn.Module):
        items = sorted(module_or_params.state_dict().items())
    else:
        items = [(str(i), p) for i, p in enumerate(module_or_params)]
    buf = io.BytesIO()
    for name, tensor in items:
        buf.write(name.encode())
        buf.write(tensor.detach().cpu().contiguous().numpy().tobytes())
    return buf.getvalue()


def save_checkpoint(path: str | Path, backbone: MemoryBackbone, state: MemoryState, extra: dict | None = None,
                    kind: str = "backbone") -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "kind": kind,
        "config": dataclasses.asdict(backbone.config),
        "config_hash": backbone.config.digest(),
        "params": backbone.state_dict(),
        "memory": state.memory.detach(),
        "last_update": state.last_update,
        "pending": None if state.pending is None else dataclasses.asdict(state.pending),
        "torch_rng": torch.get_rng_state(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path, expected: BackboneConfig | None = None, force: bool = False):
    """:return: (backbone, memory state, payload dict)"""
    payload = torch.load(path, weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {payload.get('format')}")
    config = BackboneConfig(**payload["config"])
    if expected is not None and expected.digest() != payload["config_hash"] and not force:
        raise CheckpointError(f"config hash mismatch: checkpoint {payload['config_hash']} vs {expected.digest()}")
    backbone = BACKBONES[config.name](config)
    backbone.load_state_dict(payload["params"])
    backbone.eval()
    pending = payload["pending"]
    state = MemoryState(payload["memory"], payload["last_update"],
                        None if pending is None else PendingMessages(**pending))
    return backbone, state, payload
