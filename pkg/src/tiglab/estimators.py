"""scikit-learn style wrappers around pretraining and prompt tuning, plus input validation helpers."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .backbone import BackboneConfig, PretrainConfig, PretrainResult, pretrain, replay, score_stage
from .evaluation import evaluate_link_prediction, evaluate_node_classification, score_test_links
from .graph import GraphDataError, SplitConfigError, SplitSpec, TemporalGraph, chronological_split
from .metrics import average_precision
from .prompts import PromptVariant
from .training import ParadigmSpec, prompt_finetune, prompt_tune, run_nc_strategy, run_stage


def check_graph(graph) -> TemporalGraph:
    if not isinstance(graph, TemporalGraph):
        raise GraphDataError(f"expected a TemporalGraph, got {type(graph).__name__}")
    if graph.n_events == 0:
        raise GraphDataError("graph has no events")
    if not np.all(np.diff(graph.t) >= 0):
        raise GraphDataError("event timestamps are not sorted")
    return graph


def check_split(split, graph: TemporalGraph, need_prompt: bool = True) -> SplitSpec:
    """Accept a SplitSpec or a 4-tuple of fractions; returns a SplitSpec consistent with ``graph``."""
    if not isinstance(split, SplitSpec):
        split = chronological_split(graph, split)
    if split.n_events != graph.n_events:
        raise SplitConfigError(f"split covers {split.n_events} events, graph has {graph.n_events}")
    if need_prompt and len(split.stage("prompt")) == 0:
        raise SplitConfigError("prompt stage is empty")
    return split


class TemporalLinkPretrainer(BaseEstimator):
    """Memory backbone pretrained on temporal link prediction."""

    def __init__(self, d_mem=172, d_t=172, d_embed=172, n_heads=2, dropout=0.1, k=10, batch_size=200,
                 lr=1e-4, epochs=50, patience=5, seed=0):
        self.d_mem = d_mem
        self.d_t = d_t
        self.d_embed = d_embed
        self.n_heads = n_heads
        self.dropout = dropout
        self.k = k
        self.batch_size = batch_size
        self.lr = lr
        self.epochs = epochs
        self.patience = patience
        self.seed = seed

    def fit(self, graph, split=(0.5, 0.2, 0.15, 0.15), train_mask=None, hooks=None):
        graph = check_graph(graph)
        split = check_split(split, graph, need_prompt=False)
        bc = BackboneConfig(n_nodes=graph.n_nodes, d_n=graph.d_n, d_e=graph.d_e, d_mem=self.d_mem, d_t=self.d_t,
                            d_embed=self.d_embed, n_heads=self.n_heads, dropout=self.dropout)
        pc = PretrainConfig(batch_size=self.batch_size, lr=self.lr, epochs=self.epochs, patience=self.patience,
                            k=self.k, seed=self.seed)
        self.result_ = pretrain(graph, split, pc, bc, train_mask=train_mask, hooks=hooks)
        self.split_ = split
        self.history_ = self.result_.log
        return self

    @property
    def checkpoint_(self) -> PretrainResult:
        check_is_fitted(self, "result_")
        return self.result_

    def score(self, graph, split=None) -> float:
        """Val-stage AP of the pretext link head after replaying the prompt stage."""
        check_is_fitted(self, "result_")
        split = self.split_ if split is None else check_split(split, graph, need_prompt=False)
        res = self.result_
        state = replay(graph, res.state.clone(), res.backbone, split.stage("prompt"), self.batch_size)
        pos, neg, _ = score_stage(graph, state, res.backbone, split.stage("val"), self.batch_size, self.k,
                                  np.random.default_rng(12345))
        return average_precision(pos, neg)


class TemporalPromptTuner(BaseEstimator):
    """
    Prompt generator, fusion and head tuned on the prompt stage of a pretrained backbone.

    ``variant=None`` gives the frozen no-prompt baseline.
    """

    def __init__(self, variant="projection", mode="prompt", task="link_prediction", nc_strategy=None,
                 prompt_dim=172, d_pos=None, prompt_fraction=None, k=10, batch_size=100, lr=1e-4, epochs=50,
                 patience=5, n_classes=2, seed=0):
        self.variant = variant
        self.mode = mode
        self.task = task
        self.nc_strategy = nc_strategy
        self.prompt_dim = prompt_dim
        self.d_pos = d_pos
        self.prompt_fraction = prompt_fraction
        self.k = k
        self.batch_size = batch_size
        self.lr = lr
        self.epochs = epochs
        self.patience = patience
        self.n_classes = n_classes
        self.seed = seed

    def _spec(self) -> ParadigmSpec:
        variant = None if self.variant in (None, "none") else PromptVariant(self.variant)
        return ParadigmSpec(mode=self.mode, task=self.task, variant=variant, nc_strategy=self.nc_strategy,
                            prompt_fraction=self.prompt_fraction, epochs=self.epochs, patience=self.patience,
                            batch_size=self.batch_size, lr=self.lr, k=self.k, prompt_dim=self.prompt_dim,
                            d_pos=self.d_pos, n_classes=self.n_classes, seed=self.seed)

    def fit(self, graph, split, checkpoint, train_mask=None, lp_artifacts=None, hooks=None):
        """
        :param checkpoint: PretrainResult, fitted TemporalLinkPretrainer, checkpoint path or (backbone, state)
        :param lp_artifacts: link-prediction run reused by the node-classification strategies
        """
        graph = check_graph(graph)
        split = check_split(split, graph)
        if isinstance(checkpoint, TemporalLinkPretrainer):
            checkpoint = checkpoint.checkpoint_
        spec = self._spec()
        if spec.task == "node_classification":
            if isinstance(lp_artifacts, TemporalPromptTuner):
                lp_artifacts = lp_artifacts.artifacts_
            self.artifacts_ = run_nc_strategy(lp_artifacts, graph, split, spec, checkpoint=checkpoint,
                                              train_mask=train_mask, hooks=hooks)
        elif spec.mode == "prompt":
            self.artifacts_ = prompt_tune(checkpoint, graph, split, spec, train_mask=train_mask, hooks=hooks)
        else:
            self.artifacts_ = prompt_finetune(checkpoint, graph, split, spec, train_mask=train_mask, hooks=hooks)
        self.split_ = split
        self.history_ = self.artifacts_.log
        self.n_trainable_ = self.artifacts_.trainable
        return self

    def _check(self):
        if not hasattr(self, "artifacts_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit first")

    def predict_proba(self, graph, seed: int = 0) -> np.ndarray:
        """
        Test-stage probabilities, in event order.

        Link prediction: P(link) for each true test event.
        Node classification: class probabilities for each labeled test event.
        """
        self._check()
        if self.task == "link_prediction":
            return score_test_links(self.artifacts_, graph, self.split_, seed).pos_scores
        state, tracker = self.artifacts_.state_at("test")
        model = self.artifacts_.model
        model.eval()
        with torch.no_grad():
            out, _, _ = run_stage(model, graph, state, tracker, np.asarray(self.split_.stage("test")),
                                  "node_classification", self.artifacts_.spec.eval_batch_size,
                                  np.random.default_rng(seed))
        return out.class_probs()

    def score(self, graph, setting="transductive", seed: int = 0, inductive=None) -> float:
        """Test AP (link prediction) or test AUROC (node classification)."""
        self._check()
        if self.task == "link_prediction":
            return evaluate_link_prediction(self.artifacts_, graph, self.split_, setting, seed, inductive)["ap"]
        return evaluate_node_classification(self.artifacts_, graph, self.split_)
