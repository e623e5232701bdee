import numpy as np
import pytest
import torch

import tiglab.training as training
from tiglab.backbone import init_state, serialize_params
from tiglab.graph import LastInteractionTracker
from tiglab.training import (DataDisciplineError, DisciplineMonitor, FreezeViolationError, ParadigmSpec,
                             prompt_finetune, prompt_stage_indices, prompt_tune, run_nc_strategy, run_stage)


def _spec(**kw):
    base = dict(prompt_dim=8, epochs=2, patience=2, batch_size=50, lr=3e-3, eval_batch_size=100, dropout=0.0)
    base.update(kw)
    return ParadigmSpec(**base)


@pytest.fixture(scope="module")
def tuned(drift_graph, drift_split, drift_pretrained):
    before = serialize_params(drift_pretrained.backbone)
    art = prompt_tune(drift_pretrained, drift_graph, drift_split, _spec())
    return art, before


def test_prompt_tuning_leaves_backbone_bytes_identical(tuned, drift_pretrained):
    art, before = tuned
    assert serialize_params(art.model.backbone) == before
    assert serialize_params(drift_pretrained.backbone) == before
    assert all(p.grad is None for p in art.model.backbone.parameters())


def test_only_prompt_side_parameters_are_counted(tuned):
    art, _ = tuned
    side = [p for n, p in art.model.named_parameters() if not n.startswith("backbone.")]
    assert art.trainable == sum(p.numel() for p in side)
    assert not any(p.requires_grad for p in art.model.backbone.parameters())


def test_freeze_violation_is_detected(drift_graph, drift_split, drift_pretrained, monkeypatch):
    real = training._tune

    def tampering(model, *a, **kw):
        art = real(model, *a, **kw)
        with torch.no_grad():
            next(model.backbone.parameters()).add_(1.0)
        return art

    monkeypatch.setattr(training, "_tune", tampering)
    with pytest.raises(FreezeViolationError):
        prompt_tune(drift_pretrained, drift_graph, drift_split, _spec(epochs=1))


def test_mode_guards(drift_graph, drift_split, drift_pretrained):
    with pytest.raises(ValueError):
        prompt_tune(drift_pretrained, drift_graph, drift_split, _spec(mode="prompt_finetune"))
    with pytest.raises(ValueError):
        prompt_finetune(drift_pretrained, drift_graph, drift_split, _spec())
    with pytest.raises(ValueError):
        ParadigmSpec(task="link_prediction", nc_strategy="reinit")
    with pytest.raises(ValueError):
        ParadigmSpec(mode="bogus")


def test_finetune_moves_backbone(drift_graph, drift_split, drift_pretrained):
    art = prompt_finetune(drift_pretrained, drift_graph, drift_split, _spec(mode="prompt_finetune", epochs=1))
    assert serialize_params(art.model.backbone) != serialize_params(drift_pretrained.backbone)
    assert art.trainable == sum(p.numel() for p in art.model.parameters())


def test_tuning_is_deterministic(drift_graph, drift_split, drift_pretrained, tuned):
    again = prompt_tune(drift_pretrained, drift_graph, drift_split, _spec())
    assert serialize_params(again.model) == serialize_params(tuned[0].model)
    assert again.log == tuned[0].log


def test_discipline_hooks_see_only_legal_events(drift_graph, drift_split, drift_pretrained):
    mon = DisciplineMonitor()
    prompt_tune(drift_pretrained, drift_graph, drift_split, _spec(), hooks=mon)
    grad = np.concatenate(mon.gradient_idx)
    prompt = drift_split.stage("prompt")
    assert grad.min() >= prompt.start and grad.max() < drift_split.val_start
    val = np.arange(drift_split.stage("val").start, drift_split.stage("val").stop)
    assert all(np.array_equal(ix, val) for ix in mon.early_stop_idx)


def test_monitor_raises_on_leaks(drift_split):
    mon = DisciplineMonitor()
    with pytest.raises(DataDisciplineError):
        mon.gradient_events([drift_split.val_start], drift_split)
    with pytest.raises(DataDisciplineError):
        mon.early_stop_events([drift_split.stage("test").start], drift_split)
    DisciplineMonitor(strict=False).gradient_events([drift_split.val_start], drift_split)


def test_training_batch_across_val_boundary_is_refused(drift_graph, drift_split, tuned):
    art, _ = tuned
    model = art.model
    opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad])
    state = init_state(drift_graph.n_nodes, model.backbone.config.d_mem)
    idx = np.arange(drift_split.val_start - 5, drift_split.val_start + 5)
    with pytest.raises(DataDisciplineError):
        run_stage(model, drift_graph, state, LastInteractionTracker(drift_graph.n_nodes), idx, "link_prediction",
                  10, np.random.default_rng(0), optimizer=opt, split=drift_split)


def test_prompt_fraction_takes_head_of_prompt_stage(drift_split):
    stage = drift_split.stage("prompt")
    used, rest = prompt_stage_indices(drift_split, 0.05, None, drift_split.n_events)
    assert used.tolist() == list(range(stage.start, stage.start + 30))
    assert rest.tolist() == list(range(stage.start + 30, stage.stop))
    full, none = prompt_stage_indices(drift_split, None, None, drift_split.n_events)
    assert len(full) == len(stage) and len(none) == 0
    with pytest.raises(ValueError):
        prompt_stage_indices(drift_split, 0.5, None, drift_split.n_events)


def test_nc_strategies(hetero_graph):
    from conftest import small_backbone_config
    from tiglab.backbone import PretrainConfig, pretrain
    from tiglab.graph import chronological_split
    split = chronological_split(hetero_graph, (0.5, 0.2, 0.15, 0.15))
    # d=16: a 4-unit class head can start with every ReLU dead on near-constant embeddings
    ckpt = pretrain(hetero_graph, split, PretrainConfig(lr=3e-3, epochs=1, seed=0),
                    small_backbone_config(hetero_graph, d=16))
    lp = prompt_tune(ckpt, hetero_graph, split, _spec(variant="vanilla", epochs=1, prompt_dim=16))
    nc = dict(task="node_classification", variant="vanilla", epochs=1, prompt_dim=16)
    reuse = run_nc_strategy(lp, hetero_graph, split, _spec(nc_strategy="reuse_frozen", **nc))
    assert serialize_params(reuse.model.prompt) == serialize_params(lp.model.prompt)
    tuned_nc = run_nc_strategy(lp, hetero_graph, split, _spec(nc_strategy="init_and_tune", **nc))
    assert serialize_params(tuned_nc.model.prompt) != serialize_params(lp.model.prompt)
    fresh = run_nc_strategy(None, hetero_graph, split, _spec(nc_strategy="reinit", **nc), checkpoint=ckpt)
    assert fresh.model.node_head is not None
    for art in (reuse, tuned_nc, fresh):
        assert serialize_params(art.model.backbone) == serialize_params(ckpt.backbone)
    with pytest.raises(ValueError):
        run_nc_strategy(None, hetero_graph, split, _spec(nc_strategy="reuse_frozen", **nc))
    with pytest.raises(ValueError):
        run_nc_strategy(None, hetero_graph, split, _spec(nc_strategy="reinit", **nc))
