"""Test-stage evaluation: transductive / inductive link prediction (AP) and dynamic node classification (AUROC)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .graph import InductiveSpec, SplitSpec, TemporalGraph, transductive_mask
from .metrics import auroc, average_precision
from .training import PromptArtifacts, run_stage

SETTINGS = ("transductive", "inductive", "all")


class EvaluationError(ValueError):
    pass


@dataclass
class EvalBatchResult:
    pos_scores: np.ndarray
    neg_scores: np.ndarray
    event_idx: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    t: np.ndarray


def setting_mask(graph: TemporalGraph, split: SplitSpec, setting: str,
                 inductive: InductiveSpec | None = None) -> np.ndarray:
    if setting == "transductive":
        return transductive_mask(graph, split, inductive)
    if setting == "inductive":
        if inductive is None:
            raise EvaluationError("inductive evaluation needs an InductiveSpec")
        return inductive.eval_mask
    if setting == "all":
        return np.ones(graph.n_events, dtype=bool)
    raise EvaluationError(f"unknown setting {setting!r}")


def score_test_links(artifacts: PromptArtifacts, graph: TemporalGraph, split: SplitSpec, seed: int = 0) -> EvalBatchResult:
    """Replay to the test stage and score every test event against one seeded negative destination."""
    state, tracker = artifacts.state_at("test")
    idx = np.asarray(split.stage("test"))
    model = artifacts.model
    model.eval()
    with torch.no_grad():
        out, _, _ = run_stage(model, graph, state, tracker, idx, "link_prediction", artifacts.spec.eval_batch_size,
                              np.random.default_rng(seed))
    ev, pos, neg, _ = out.arrays()
    return EvalBatchResult(pos, neg, ev, graph.src[ev], graph.dst[ev], graph.t[ev])


def evaluate_link_prediction(artifacts: PromptArtifacts, graph: TemporalGraph, split: SplitSpec,
                             setting: str | list[str] = "transductive", seed: int = 0,
                             inductive: InductiveSpec | None = None):
    """
    AP on the test stage restricted to ``setting``.

    A list of settings is scored from a single replay and returned as {setting: metrics}.
    """
    settings = [setting] if isinstance(setting, str) else list(setting)
    res = score_test_links(artifacts, graph, split, seed)
    metrics = {}
    for s in settings:
        keep = setting_mask(graph, split, s, inductive)[res.event_idx]
        if not keep.any():
            raise EvaluationError(f"no test events left for the {s} setting")
        metrics[s] = {"ap": average_precision(res.pos_scores[keep], res.neg_scores[keep]), "n_events": int(keep.sum())}
    return metrics[settings[0]] if isinstance(setting, str) else metrics


def evaluate_node_classification(artifacts: PromptArtifacts, graph: TemporalGraph, split: SplitSpec) -> float:
    """AUROC of P(label = 1) for the source node of every labeled test event."""
    if artifacts.model.node_head is None:
        raise EvaluationError("artifacts carry no node-classification head")
    state, tracker = artifacts.state_at("test")
    idx = np.asarray(split.stage("test"))
    if not (graph.labels[idx] >= 0).any():
        raise EvaluationError("no labeled events in the test stage")
    artifacts.model.eval()
    with torch.no_grad():
        out, _, _ = run_stage(artifacts.model, graph, state, tracker, idx, "node_classification",
                              artifacts.spec.eval_batch_size, np.random.default_rng(0))
    _, probs, _, labels = out.arrays()
    return auroc(probs, labels)
