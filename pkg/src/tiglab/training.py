"""Prompt tuning (frozen backbone) and prompt-based fine-tuning (joint) over the prompt stage.

The backbone's memory is *state*, not a parameter: it is replayed through the
prompt, val and test stages in every mode so a frozen backbone still sees
recent interactions. Only parameters are frozen.
"""
from __future__ import annotations

import contextlib
import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import (MemoryBackbone, MemoryState, PretrainResult, TrainingDivergedError, batches, bce_link_loss,
                       commit_batch, embed_nodes, flush_and_update_memory, load_checkpoint, replay,
                       sample_negatives, serialize_params)
from .graph import LastInteractionTracker, SplitSpec, TemporalGraph
from .heads import FusionMLP, LinkHead, NodeClassHead
from .metrics import auroc, average_precision
from .prompts import PromptVariant, build_prompt, idle_delta

log = logging.getLogger(__name__)

MODES = ("prompt", "prompt_finetune")
TASKS = ("link_prediction", "node_classification")
NC_STRATEGIES = ("reuse_frozen", "init_and_tune", "reinit")


class FreezeViolationError(RuntimeError):
    """A parameter that must stay frozen changed during tuning."""


class DataDisciplineError(AssertionError):
    pass


@dataclass
class ParadigmSpec:
    mode: str = "prompt"
    task: str = "link_prediction"
    variant: PromptVariant | str | None = PromptVariant.PROJECTION
    nc_strategy: str | None = None
    prompt_fraction: float | None = None
    epochs: int = 50
    patience: int = 5
    batch_size: int = 100
    lr: float = 1e-4
    k: int = 10
    prompt_dim: int = 172
    d_pos: int | None = None
    dropout: float = 0.1
    n_classes: int = 2
    seed: int = 0
    eval_seed: int = 12345
    eval_batch_size: int = 200
    head_init: str = "pretrained"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.nc_strategy is not None:
            if self.task != "node_classification":
                raise ValueError("nc_strategy only applies to node classification")
            if self.nc_strategy not in NC_STRATEGIES:
                raise ValueError(f"nc_strategy must be one of {NC_STRATEGIES}")
        if self.variant is not None:
            self.variant = PromptVariant(self.variant)
        if self.head_init not in ("pretrained", "random"):
            raise ValueError("head_init must be 'pretrained' or 'random'")


class DisciplineMonitor:
    """Records which events feed gradients and early stopping; raises on leaks when strict."""

    def __init__(self, strict: bool = True):
        self.strict = strict
        self.gradient_idx: list[np.ndarray] = []
        self.early_stop_idx: list[np.ndarray] = []

    def gradient_events(self, idx, split: SplitSpec) -> None:
        idx = np.asarray(idx)
        self.gradient_idx.append(idx.copy())
        if self.strict and len(idx) and idx.max() >= split.val_start:
            raise DataDisciplineError(f"event {idx.max()} at/after the val boundary {split.val_start} fed a gradient")

    def early_stop_events(self, idx, split: SplitSpec) -> None:
        idx = np.asarray(idx)
        self.early_stop_idx.append(idx.copy())
        val = split.stage("val")
        if self.strict and len(idx) and (idx.min() < val.start or idx.max() >= val.stop):
            raise DataDisciplineError("early stopping looked outside the val stage")


class PromptedModel(nn.Module):
    """Backbone + prompt generator + fusion + task heads; ``prompt=None`` is the no-prompt baseline."""

    def __init__(self, backbone: MemoryBackbone, prompt: nn.Module | None, fusion: FusionMLP | None,
                 link_head: LinkHead | None = None, node_head: NodeClassHead | None = None, k: int = 10):
        super().__init__()
        self.backbone = backbone
        self.prompt = prompt
        self.fusion = fusion
        self.link_head = link_head
        self.node_head = node_head
        self.k = k
        self.t_min = 0.0

    @property
    def variant(self) -> PromptVariant | None:
        return None if self.prompt is None else self.prompt.variant

    def _backbone_ctx(self, grad_backbone: bool):
        needs = torch.is_grad_enabled() and (grad_backbone or self.variant is PromptVariant.STATIC_INPUT)
        return contextlib.nullcontext() if needs else torch.no_grad()

    def node_embeddings(self, graph: TemporalGraph, state: MemoryState, tracker: LastInteractionTracker,
                        nodes: np.ndarray, times: np.ndarray, grad_backbone: bool = False) -> torch.Tensor:
        """Prompted embeddings of ``nodes`` at ``times``."""
        variant = self.variant
        offset = self.prompt.vector if variant is PromptVariant.STATIC_INPUT else None
        with self._backbone_ctx(grad_backbone):
            z = embed_nodes(graph, state, self.backbone, nodes, times, self.k, node_feat_offset=offset)
        if variant is None or variant is PromptVariant.STATIC_INPUT:
            return z
        if variant is PromptVariant.STATIC_OUTPUT:
            return self.prompt(z)
        te = self.backbone.time_encoder
        if variant is PromptVariant.VANILLA:
            p = self.prompt(nodes)
        elif variant is PromptVariant.PROJECTION:
            delta = idle_delta(times, tracker.get(nodes), self.t_min)
            p = self.prompt(nodes, te(torch.as_tensor(delta)).to(z.dtype))
        else:
            nbr, eid, ts, mask = graph.neighbor_index.query(nodes, times, self.k)
            z_nbr = torch.zeros(len(nodes), self.k, z.shape[-1], dtype=z.dtype)
            if mask.any():
                with self._backbone_ctx(grad_backbone):
                    z_flat = embed_nodes(graph, state, self.backbone, nbr[mask],
                                         np.broadcast_to(times[:, None], mask.shape)[mask], self.k)
                z_nbr = z_nbr.index_put((torch.as_tensor(mask),), z_flat)
            edge = torch.as_tensor(graph.edge_feats[eid], dtype=z.dtype)
            code = te(torch.as_tensor(times[:, None] - ts)).to(z.dtype)
            p = self.prompt(z, z_nbr, edge, code, torch.as_tensor(mask))
        return self.fusion(z, p)

    def link_logits(self, graph, state, tracker, src, dst, neg, t, grad_backbone: bool = False):
        n = len(src)
        z = self.node_embeddings(graph, state, tracker, np.concatenate([src, dst, neg]), np.tile(t, 3), grad_backbone)
        zs, zd, zn = z.split(n)
        head = self.backbone.score if self.link_head is None else self.link_head
        return head(zs, zd), head(zs, zn)

    def node_logits(self, graph, state, tracker, nodes, t, grad_backbone: bool = False):
        return self.node_head(self.node_embeddings(graph, state, tracker, nodes, t, grad_backbone))


@dataclass
class StageOutput:
    event_idx: list = field(default_factory=list)
    pos: list = field(default_factory=list)
    neg: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    probs: list = field(default_factory=list)

    def class_probs(self) -> np.ndarray:
        return np.concatenate(self.probs) if self.probs else np.zeros((0, 0))

    def arrays(self):
        cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0)
        return cat(self.event_idx).astype(np.int64), cat(self.pos), cat(self.neg), cat(self.labels)


def run_stage(model: PromptedModel, graph: TemporalGraph, state: MemoryState, tracker: LastInteractionTracker,
              idx, task: str, batch_size: int, rng: np.random.Generator, grad_backbone: bool = False,
              optimizer: torch.optim.Optimizer | None = None, split: SplitSpec | None = None, hooks=None):
    """
    Walk events chronologically: absorb pending messages, score (and optionally train on) the batch,
    then queue its messages and advance the interaction tracker.

    For node classification only labeled events are scored; ``pos`` holds P(class 1).
    :return: (StageOutput, state, tracker)
    """
    out = StageOutput()
    train = optimizer is not None
    for b in batches(idx, batch_size):
        if train:
            if split is not None and len(b) and b.max() >= split.val_start:
                raise DataDisciplineError("training batch crosses the val boundary")
            if hooks is not None:
                hooks.gradient_events(b, split)
        grad_ctx = contextlib.nullcontext() if train else torch.no_grad()
        with grad_ctx:
            with contextlib.nullcontext() if (train and grad_backbone) else torch.no_grad():
                state = flush_and_update_memory(state, model.backbone, graph)
            src, dst, t = graph.src[b], graph.dst[b], graph.t[b]
            loss = None
            if task == "link_prediction":
                neg = sample_negatives(graph, len(b), rng)
                pos_l, neg_l = model.link_logits(graph, state, tracker, src, dst, neg, t, grad_backbone)
                if train:
                    loss = bce_link_loss(pos_l, neg_l)
                out.event_idx.append(b)
                out.pos.append(torch.sigmoid(pos_l).detach().double().numpy())
                out.neg.append(torch.sigmoid(neg_l).detach().double().numpy())
            else:
                lab = graph.labels[b]
                sel = lab >= 0
                if sel.any():
                    logits = model.node_logits(graph, state, tracker, src[sel], t[sel], grad_backbone)
                    target = torch.as_tensor(lab[sel])
                    if train:
                        loss = F.cross_entropy(logits, target)
                    out.event_idx.append(b[sel])
                    probs = torch.softmax(logits, -1).detach().double().numpy()
                    out.probs.append(probs)
                    out.pos.append(probs[:, 1])
                    out.labels.append(lab[sel])
            if loss is not None:
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(f"non-finite loss {loss.item()} at events {b[0]}..{b[-1]}")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                out.losses.append(loss.item())
        state = commit_batch(state, graph, b)
        tracker.update(src, dst, t)
    return out, state, tracker


def stage_metric(out: StageOutput, task: str, mask: np.ndarray | None = None) -> float:
    idx, pos, neg, labels = out.arrays()
    if mask is not None:
        keep = mask[idx]
        pos, neg, labels = pos[keep], neg[keep] if len(neg) else neg, labels[keep] if len(labels) else labels
    if task == "link_prediction":
        return average_precision(pos, neg)
    return auroc(pos, labels)


@dataclass
class PromptArtifacts:
    model: PromptedModel
    spec: ParadigmSpec
    split: SplitSpec
    start_state: MemoryState
    start_tracker: LastInteractionTracker
    train_mask: np.ndarray | None = None
    log: list = field(default_factory=list)
    trainable: int = 0
    best_epoch: int = -1
    graph: TemporalGraph | None = field(default=None, repr=False)

    def prompt_stage_indices(self):
        """(events trained on, prompt-stage events only replayed)."""
        return prompt_stage_indices(self.split, self.spec.prompt_fraction, self.train_mask, self.split.n_events)

    def state_at(self, stage: str):
        """Memory state and tracker right before ``stage`` ('val' or 'test'), replayed without gradients."""
        train_idx, rest_idx = self.prompt_stage_indices()
        bs = self.spec.eval_batch_size
        state, tracker = self.start_state.clone(), self.start_tracker.copy()
        backbone, graph = self.model.backbone, self.graph
        for idx, size in ((train_idx, self.spec.batch_size), (rest_idx, bs)):
            state = replay(graph, state, backbone, idx, size)
            tracker.replay(graph, idx)
        if stage == "test":
            val_idx = np.asarray(self.split.stage("val"))
            state = replay(graph, state, backbone, val_idx, bs)
            tracker.replay(graph, val_idx)
        return state, tracker


def prompt_stage_indices(split: SplitSpec, prompt_fraction: float | None, train_mask, n_events: int):
    stage = np.asarray(split.stage("prompt"))
    if prompt_fraction is not None:
        n_use = int(np.floor(prompt_fraction * n_events + 0.5))
        if n_use > len(stage):
            raise ValueError(f"prompt_fraction {prompt_fraction} exceeds the prompt stage")
        used, rest = stage[:n_use], stage[n_use:]
    else:
        used, rest = stage, stage[:0]
    if train_mask is not None:
        used = used[train_mask[used]]
        rest = rest[train_mask[rest]]
    return used, rest


def _as_checkpoint(checkpoint):
    if isinstance(checkpoint, PretrainResult):
        return checkpoint.backbone, checkpoint.state
    if isinstance(checkpoint, (str, Path)):
        backbone, state, _ = load_checkpoint(checkpoint)
        return backbone, state
    backbone, state = checkpoint
    return backbone, state


def _start_tracker(graph: TemporalGraph, split: SplitSpec, train_mask) -> LastInteractionTracker:
    pre = np.asarray(split.stage("pretrain"))
    if train_mask is not None:
        pre = pre[train_mask[pre]]
    return LastInteractionTracker(graph.n_nodes).replay(graph, pre)


def _build_model(backbone: MemoryBackbone, graph: TemporalGraph, spec: ParadigmSpec,
                 prompt: nn.Module | None = None, fusion: FusionMLP | None = None) -> PromptedModel:
    c = backbone.config
    if prompt is None and spec.variant is not None:
        prompt = build_prompt(spec.variant, graph.n_nodes, spec.prompt_dim, c.d_embed, c.d_e, c.d_t, c.d_n,
                              k=spec.k, d_pos=spec.d_pos, dropout=spec.dropout)
    # warm start (pass-through fusion + pretext link scorer) only exists for link prediction
    warm = spec.head_init == "pretrained" and spec.task == "link_prediction"
    if fusion is None and prompt is not None and not prompt.variant.is_static:
        fusion = FusionMLP(c.d_embed, prompt.d)
        if warm:
            fusion.init_passthrough()
    link_head = node_head = None
    if spec.task == "link_prediction":
        if prompt is not None:
            link_head = LinkHead.from_pretext(backbone.link_head) if warm else LinkHead(c.d_embed)
            link_head.requires_grad_(True)
    else:
        node_head = NodeClassHead(c.d_embed, spec.n_classes, dropout=spec.dropout)
    model = PromptedModel(backbone, prompt, fusion, link_head, node_head, k=spec.k)
    model.t_min = float(graph.t[0])
    return model


def _tune(model: PromptedModel, trainable: list, graph: TemporalGraph, split: SplitSpec, spec: ParadigmSpec,
          start_state: MemoryState, start_tracker: LastInteractionTracker, train_mask, grad_backbone: bool,
          hooks) -> PromptArtifacts:
    art = PromptArtifacts(model, spec, split, start_state, start_tracker, train_mask,
                          trainable=sum(p.numel() for p in trainable), graph=graph)
    train_idx, rest_idx = art.prompt_stage_indices()
    val_idx = np.asarray(split.stage("val"))
    if len(train_idx) == 0:
        raise ValueError("prompt stage has no trainable events")
    if not trainable:
        return art
    rng = np.random.default_rng(spec.seed)
    opt = torch.optim.Adam(trainable, lr=spec.lr, foreach=True)
    best, best_epoch, bad, best_params = -np.inf, -1, 0, None
    for epoch in range(spec.epochs):
        model.train()
        if not grad_backbone:
            model.backbone.eval()
        state, tracker = start_state.clone(), start_tracker.copy()
        out, state, tracker = run_stage(model, graph, state, tracker, train_idx, spec.task, spec.batch_size, rng,
                                        grad_backbone, opt, split, hooks)
        model.eval()
        state = replay(graph, state, model.backbone, rest_idx, spec.eval_batch_size)
        tracker.replay(graph, rest_idx)
        if hooks is not None:
            hooks.early_stop_events(val_idx, split)
        val_out, _, _ = run_stage(model, graph, state, tracker, val_idx, spec.task, spec.eval_batch_size,
                                  np.random.default_rng(spec.eval_seed))
        metric = stage_metric(val_out, spec.task)
        loss = float(np.mean(out.losses)) if out.losses else float("nan")
        art.log.append({"epoch": epoch, "loss": loss, "val_metric": metric})
        log.info("%s/%s epoch %d loss %.4f val %.4f", spec.mode, spec.variant, epoch, loss, metric)
        if metric > best:
            best, best_epoch, bad = metric, epoch, 0
            best_params = copy.deepcopy(model.state_dict())
        else:
            bad += 1
            if bad >= spec.patience:
                break
    model.load_state_dict(best_params)
    model.eval()
    art.best_epoch = best_epoch
    return art


def _freeze(module: nn.Module | None) -> None:
    if module is not None:
        for p in module.parameters():
            p.requires_grad_(False)


def prompt_tune(checkpoint, graph: TemporalGraph, split: SplitSpec, spec: ParadigmSpec, train_mask=None,
                hooks=None) -> PromptArtifacts:
    """Tune prompt generator, fusion and head on the prompt stage with the backbone frozen."""
    if spec.mode != "prompt":
        raise ValueError("prompt_tune requires mode='prompt'")
    torch.manual_seed(spec.seed)
    backbone, state = _as_checkpoint(checkpoint)
    backbone = copy.deepcopy(backbone)
    _freeze(backbone)
    frozen_before = serialize_params(backbone)
    model = _build_model(backbone, graph, spec)
    trainable = [p for n, p in model.named_parameters() if not n.startswith("backbone.") and p.requires_grad]
    art = _tune(model, trainable, graph, split, spec, state.clone(), _start_tracker(graph, split, train_mask),
                train_mask, grad_backbone=False, hooks=hooks)
    if serialize_params(backbone) != frozen_before:
        raise FreezeViolationError("backbone parameters changed during prompt tuning")
    return art


def prompt_finetune(checkpoint, graph: TemporalGraph, split: SplitSpec, spec: ParadigmSpec, train_mask=None,
                    hooks=None) -> PromptArtifacts:
    """Same loop as :func:`prompt_tune`, with backbone and time encoder optimised jointly."""
    if spec.mode != "prompt_finetune":
        raise ValueError("prompt_finetune requires mode='prompt_finetune'")
    torch.manual_seed(spec.seed)
    backbone, state = _as_checkpoint(checkpoint)
    backbone = copy.deepcopy(backbone)
    for p in backbone.parameters():
        p.requires_grad_(True)
    model = _build_model(backbone, graph, spec)
    trainable = [p for p in model.parameters() if p.requires_grad]
    return _tune(model, trainable, graph, split, spec, state.clone(), _start_tracker(graph, split, train_mask),
                 train_mask, grad_backbone=True, hooks=hooks)


def run_nc_strategy(lp_artifacts: PromptArtifacts | None, graph: TemporalGraph, split: SplitSpec,
                    spec: ParadigmSpec, checkpoint=None, train_mask=None, hooks=None) -> PromptArtifacts:
    """
    Node classification on top of a link-prediction prompt run.

    reuse_frozen: the link-tuned generator is kept fixed; fusion and class head train.
    init_and_tune: the generator starts from the link-tuned weights and keeps training.
    reinit: a fresh generator (needs only ``checkpoint`` when no link run is given).
    """
    strategy = spec.nc_strategy or "reinit"
    if spec.task != "node_classification":
        raise ValueError("run_nc_strategy needs task='node_classification'")
    if strategy != "reinit" and lp_artifacts is None:
        raise ValueError(f"strategy {strategy!r} needs link-prediction artifacts")
    torch.manual_seed(spec.seed)
    if lp_artifacts is not None:
        backbone = copy.deepcopy(lp_artifacts.model.backbone)
        state = lp_artifacts.start_state.clone()
    else:
        if checkpoint is None:
            raise ValueError("reinit without link artifacts needs a checkpoint")
        backbone, state = _as_checkpoint(checkpoint)
        backbone = copy.deepcopy(backbone)
    grad_backbone = spec.mode == "prompt_finetune"
    for p in backbone.parameters():
        p.requires_grad_(grad_backbone)
    frozen_before = serialize_params(backbone)
    prompt = fusion = None
    if strategy != "reinit":
        prompt = copy.deepcopy(lp_artifacts.model.prompt)
        fusion = copy.deepcopy(lp_artifacts.model.fusion)
        for p in prompt.parameters():
            p.requires_grad_(strategy == "init_and_tune")
        if fusion is not None:
            for p in fusion.parameters():
                p.requires_grad_(True)
    model = _build_model(backbone, graph, spec, prompt=prompt, fusion=fusion)
    prompt_before = serialize_params(model.prompt) if strategy == "reuse_frozen" else None
    trainable = [p for p in model.parameters() if p.requires_grad]
    art = _tune(model, trainable, graph, split, spec, state, _start_tracker(graph, split, train_mask), train_mask,
                grad_backbone=grad_backbone, hooks=hooks)
    if not grad_backbone and serialize_params(backbone) != frozen_before:
        raise FreezeViolationError("backbone parameters changed during node-classification prompt tuning")
    if prompt_before is not None and serialize_params(model.prompt) != prompt_before:
        raise FreezeViolationError("reused prompt generator changed")
    return art
