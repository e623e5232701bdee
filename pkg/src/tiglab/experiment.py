"""End-to-end runs driven by an ExperimentConfig: per-seed pipelines, sweeps, efficiency records and plots."""
from __future__ import annotations

import copy
import csv
import json
import logging
import platform
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .backbone import (BackboneConfig, MemoryBackbone, PretrainConfig, PretrainResult, count_parameters, init_state,
                       pretrain, replay)
from .config import ConfigError, ExperimentConfig
from .evaluation import evaluate_link_prediction, evaluate_node_classification
from .graph import (InductiveSpec, LastInteractionTracker, SplitSpec, TemporalGraph, chronological_split,
                    mask_inductive_nodes)
from .training import (ParadigmSpec, _build_model, _start_tracker, prompt_finetune, prompt_tune, run_nc_strategy,
                       run_stage)

log = logging.getLogger(__name__)

MANIFEST_SCHEMA_VERSION = 1
SWEEP_AXES = ("prompt_fraction", "prompt_dim", "pretrain_fraction")
PROMPT_SIDE_AXES = ("prompt_fraction", "prompt_dim")


class StageError(RuntimeError):
    """Runtime failure tagged with the pipeline stage it happened in."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


class _stage:
    def __init__(self, name: str, timings: dict | None = None):
        self.name, self.timings = name, timings

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        if self.timings is not None:
            self.timings[self.name] = time.perf_counter() - self.t0
        if exc is not None and not isinstance(exc, (StageError, ConfigError)):
            raise StageError(self.name, exc) from exc
        return False


def _backbone_config(cfg: ExperimentConfig, graph) -> BackboneConfig:
    m = cfg["model"]
    return BackboneConfig(n_nodes=graph.n_nodes, d_n=graph.d_n, d_e=graph.d_e, d_mem=m["d_mem"], d_t=m["d_t"],
                          d_embed=m["d_embed"], n_heads=m["n_heads"], dropout=m["dropout"])


def _paradigm_spec(cfg: ExperimentConfig, seed: int, **over) -> ParadigmSpec:
    p = dict(cfg["paradigm"])
    p.update(over)
    variant = p["variant"]
    return ParadigmSpec(mode=p["mode"], task=p["task"], variant=None if variant == "none" else variant,
                        nc_strategy=p["nc_strategy"], prompt_fraction=p["prompt_fraction"], epochs=p["epochs"],
                        patience=p["patience"], batch_size=p["batch_size"], lr=p["lr"], k=cfg["model"]["k"],
                        prompt_dim=p["prompt_dim"], d_pos=p["d_pos"], dropout=cfg["model"]["dropout"], seed=seed)


@dataclass
class SeedContext:
    """Everything the prompt stage needs from one seed's data loading and pretraining."""
    seed: int
    graph: TemporalGraph
    split: SplitSpec
    inductive: InductiveSpec | None
    pretrained: PretrainResult
    timing: dict

    @property
    def train_mask(self):
        return None if self.inductive is None else self.inductive.train_mask


def prepare_seed(cfg: ExperimentConfig, seed: int) -> SeedContext:
    """Load data, split, mask inductive nodes and pretrain the backbone for one seed."""
    timings: dict[str, float] = {}
    with _stage("load", timings):
        graph = cfg.load_graph(seed)
        split = chronological_split(graph, cfg["split"])
        inductive = None
        if cfg["inductive_fraction"] > 0:
            inductive = mask_inductive_nodes(graph, split, cfg["inductive_fraction"], seed=seed)
        elif "inductive" in cfg["settings"]:
            raise ConfigError("$.settings", "inductive evaluation needs inductive_fraction > 0")
    pc = cfg["pretrain"]
    with _stage("pretrain", timings):
        res = pretrain(graph, split, PretrainConfig(batch_size=pc["batch_size"], lr=pc["lr"], epochs=pc["epochs"],
                                                    patience=pc["patience"], k=cfg["model"]["k"], seed=seed),
                       _backbone_config(cfg, graph),
                       train_mask=None if inductive is None else inductive.train_mask)
    return SeedContext(seed, graph, split, inductive, res, timings)


def tune_and_evaluate(cfg: ExperimentConfig, ctx: SeedContext, **overrides) -> dict:
    """
    Paradigm stage and test evaluation on a prepared seed.
    :param overrides: paradigm fields replacing the config's, e.g. ``variant="none"``
    """
    timings = dict(ctx.timing)
    graph, split, res, mask = ctx.graph, ctx.split, ctx.pretrained, ctx.train_mask
    spec = _paradigm_spec(cfg, ctx.seed, **overrides)
    with _stage("prompt", timings):
        if spec.task == "node_classification":
            lp = None
            if spec.nc_strategy in ("reuse_frozen", "init_and_tune"):
                lp_spec = _paradigm_spec(cfg, ctx.seed, **{**overrides, "task": "link_prediction",
                                                           "nc_strategy": None})
                lp = (prompt_tune if spec.mode == "prompt" else prompt_finetune)(res, graph, split, lp_spec,
                                                                                train_mask=mask)
            art = run_nc_strategy(lp, graph, split, spec, checkpoint=res, train_mask=mask)
        elif spec.mode == "prompt":
            art = prompt_tune(res, graph, split, spec, train_mask=mask)
        else:
            art = prompt_finetune(res, graph, split, spec, train_mask=mask)
    settings = cfg["settings"]
    with _stage("eval", timings):
        if spec.task == "link_prediction":
            ev = evaluate_link_prediction(art, graph, split, list(settings), seed=ctx.seed, inductive=ctx.inductive)
            metrics = {s: {"ap": ev[s]["ap"], "n_events": ev[s]["n_events"]} for s in settings}
        else:
            metrics = {"all": {"auroc": evaluate_node_classification(art, graph, split)}}
    return {
        "seed": ctx.seed,
        "dataset_hash": graph.content_hash(),
        "metrics": metrics,
        "timing": timings,
        "trainable": {"pretrain": count_parameters(res.backbone.parameters()), "prompt": art.trainable},
        "pretrain_best_epoch": res.best_epoch,
        "prompt_best_epoch": art.best_epoch,
    }


def run_seed(cfg: ExperimentConfig, seed: int, ctx: SeedContext | None = None) -> dict:
    """pretrain -> paradigm stage -> evaluation for one seed (``ctx`` reuses a finished pretraining)."""
    return tune_and_evaluate(cfg, ctx if ctx is not None else prepare_seed(cfg, seed))


def _aggregate(per_seed: list[dict]) -> dict:
    """mean and sample std per (setting, metric); std is n/a below two seeds."""
    agg: dict = {}
    for setting in per_seed[0]["metrics"]:
        for metric in per_seed[0]["metrics"][setting]:
            if metric == "n_events":
                continue
            vals = np.array([r["metrics"][setting][metric] for r in per_seed], dtype=np.float64)
            agg.setdefault(setting, {})[metric] = {
                "mean": float(vals.mean()),
                "std": float(vals.std(ddof=1)) if len(vals) >= 2 else "n/a",
                "n": len(vals),
            }
    return agg


def _dataset_name(cfg: ExperimentConfig) -> str:
    ds = cfg["dataset"]
    return ds["synthetic"]["generator"] if "synthetic" in ds else Path(ds["path"]).stem


def _records(cfg: ExperimentConfig, per_seed: list[dict]) -> list[dict]:
    par = cfg["paradigm"]
    out = []
    for r in per_seed:
        for setting, m in r["metrics"].items():
            rec = {"dataset": _dataset_name(cfg), "backbone": "memory", "tprog": par["variant"] or "none",
                   "paradigm": par["mode"], "setting": setting, "seed": r["seed"],
                   "wall_clock": float(sum(r["timing"].values()))}
            rec.update({k.upper(): v for k, v in m.items() if k != "n_events"})
            out.append(rec)
    return out


def write_manifest(out_dir: Path, cfg: ExperimentConfig, seeds: list[int], hashes: dict) -> Path:
    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "config": cfg.data,
        "seeds": list(seeds),
        "dataset_hashes": hashes,
        "environment": {"python": platform.python_version(), "torch": torch.__version__, "numpy": np.__version__},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def config_from_manifest(path: str | Path) -> tuple[ExperimentConfig, list[int]]:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise ConfigError("$.schema_version", f"unsupported manifest version {doc.get('schema_version')!r}")
    return ExperimentConfig.from_dict(doc["config"]), list(doc["seeds"])


def run_experiment(cfg: ExperimentConfig, seeds: list[int] | None = None, out_dir: str | Path | None = None,
                   extra: dict | None = None, contexts: dict | None = None) -> dict:
    """Run every seed, aggregate, and write report.json, records.jsonl and manifest.json under ``out_dir``."""
    if seeds:
        cfg = cfg.replace(seeds=list(seeds))
    seeds = cfg["seeds"]
    out = Path(out_dir or cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    per_seed = []
    for seed in seeds:
        log.info("seed %d", seed)
        per_seed.append(run_seed(cfg, seed, None if contexts is None else contexts.get(seed)))
    report = {"config": cfg.data, "per_seed": per_seed, "aggregate": _aggregate(per_seed), **(extra or {})}
    write_manifest(out, cfg, seeds, {str(r["seed"]): r["dataset_hash"] for r in per_seed})
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    with open(out / "records.jsonl", "w") as fh:
        for rec in _records(cfg, per_seed):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return report


def _primary_metric(report: dict) -> tuple[str, str]:
    agg = report["aggregate"]
    setting = "transductive" if "transductive" in agg else next(iter(agg))
    return setting, next(iter(agg[setting]))


def _axis_change(cfg: ExperimentConfig, axis: str, value) -> dict:
    if axis == "prompt_fraction":
        return {"paradigm.prompt_fraction": float(value)}
    if axis == "prompt_dim":
        return {"paradigm.prompt_dim": int(value)}
    # the val/test tail stays fixed; the pretrain/prompt boundary moves
    _, _, val, test = cfg["split"]
    prompt = 1.0 - float(value) - val - test
    if prompt <= 0:
        raise ConfigError("$.values", f"pretrain_fraction {value} leaves no prompt stage")
    return {"split": [float(value), prompt, val, test]}


def sweep(cfg: ExperimentConfig, axis: str, values, out_dir: str | Path | None = None) -> list[dict]:
    """
    One run per value with shared seeds; writes sweep_<axis>.csv sorted by value.

    Axes that only touch the prompt stage reuse one pretraining per seed across all values.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError("$.axis", f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    values = sorted(values)
    if not values:
        raise ConfigError("$.values", "sweep needs at least one value")
    out = Path(out_dir or cfg["output_dir"])
    contexts = {} if axis in PROMPT_SIDE_AXES else None
    if contexts is not None:
        for seed in cfg["seeds"]:
            contexts[seed] = prepare_seed(cfg, seed)
    reports = []
    for v in values:
        run_cfg = cfg.replace(**_axis_change(cfg, axis, v))
        reports.append(run_experiment(run_cfg, out_dir=out / f"{axis}={v}", extra={"sweep": {"axis": axis, "value": v}},
                                      contexts=contexts))
    write_sweep_csv(reports, out / f"sweep_{axis}.csv")
    return reports


def write_sweep_csv(reports: list[dict], path: Path) -> Path:
    rows = []
    for rep in reports:
        for setting, metrics in rep["aggregate"].items():
            for metric, s in metrics.items():
                rows.append({"axis": rep["sweep"]["axis"], "value": rep["sweep"]["value"], "setting": setting,
                             "metric": metric, "mean": s["mean"], "std": s["std"], "n_seeds": s["n"]})
    rows.sort(key=lambda r: (r["setting"], r["metric"], r["value"]))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["axis", "value", "setting", "metric", "mean", "std", "n_seeds"])
        w.writeheader()
        w.writerows(rows)
    return path


def _epoch_timer(model, trainable, graph, split, state, tracker, idx, task, batch_size, grad_backbone, seed):
    """
    Callable timing one training epoch over ``idx`` (plus an ``n_batches`` cap for warm-up).

    Every call trains a throwaway copy of ``model`` from the same start, so timing never changes shared
    weights and repeated calls measure identical work.
    """
    names = {id(p): n for n, p in model.named_parameters()}

    def timed_epoch(n_batches: int | None = None) -> float:
        shadow = copy.deepcopy(model)
        by_name = dict(shadow.named_parameters())
        opt = torch.optim.Adam([by_name[names[id(p)]] for p in trainable], lr=1e-4, foreach=True)
        shadow.train()
        if not grad_backbone:
            shadow.backbone.eval()
        events = idx if n_batches is None else idx[:n_batches * batch_size]
        st, tr, rng = state.clone(), tracker.copy(), np.random.default_rng(seed)
        t0 = time.perf_counter()
        run_stage(shadow, graph, st, tr, events, task, batch_size, rng, grad_backbone, opt, split)
        return time.perf_counter() - t0

    return timed_epoch


def _stage_model(backbone, graph, spec, grad_backbone: bool):
    """Prompted model over a private copy of ``backbone`` with the requested freeze flags."""
    bb = copy.deepcopy(backbone)
    bb.requires_grad_(grad_backbone)
    model = _build_model(bb, graph, spec)
    if grad_backbone:
        trainable = [p for p in model.parameters() if p.requires_grad]
    else:
        trainable = [p for n, p in model.named_parameters() if not n.startswith("backbone.") and p.requires_grad]
    return model, trainable


def report_efficiency(cfg: ExperimentConfig, seed: int | None = None, variants=("vanilla", "projection"),
                      max_events: int | None = None, repeats: int = 5) -> dict:
    """
    Wall-clock of one training epoch and trainable scalar counts per stage.

    Stages: each prompt variant with the backbone frozen, full fine-tuning (every parameter of the
    prompted model trains on the same prompt-stage events), and full-model training of the backbone
    alone over the pretrain + prompt window. Ratios are prompt-stage / reference.

    Timing runs round-robin over stages after one untimed warm-up each, ``repeats`` rounds, keeping
    each stage's fastest epoch, so machine-load drift does not favour any one stage.
    """
    seed = cfg["seeds"][0] if seed is None else seed
    torch.manual_seed(seed)
    graph = cfg.load_graph(seed)
    split = chronological_split(graph, cfg["split"])
    backbone = MemoryBackbone(_backbone_config(cfg, graph)).eval()
    state = init_state(graph.n_nodes, backbone.config.d_mem)
    tracker = _start_tracker(graph, split, None)
    pre_idx = np.asarray(split.stage("pretrain"))
    prompt_idx = np.asarray(split.stage("prompt"))
    if max_events is not None:
        pre_idx, prompt_idx = pre_idx[:max_events], prompt_idx[:max_events]
    bs_prompt, bs_pre = cfg["paradigm"]["batch_size"], cfg["pretrain"]["batch_size"]
    with torch.no_grad():
        state = replay(graph, state, backbone, pre_idx, bs_pre)

    def spec(variant, mode):
        return _paradigm_spec(cfg, seed, variant=variant, mode=mode, task="link_prediction", nc_strategy=None)

    stages, timers = [], []
    for variant in variants:
        model, trainable = _stage_model(backbone, graph, spec(variant, "prompt"), grad_backbone=False)
        theta = sum(p.numel() for n, p in model.named_parameters() if n.startswith("backbone.") and p.requires_grad)
        stages.append({"stage": f"prompt:{variant}", "trainable": count_parameters(trainable),
                       "trainable_backbone": theta, "n_events": int(len(prompt_idx))})
        timers.append(_epoch_timer(model, trainable, graph, split, state, tracker, prompt_idx, "link_prediction",
                                   bs_prompt, False, seed))
    model, trainable = _stage_model(backbone, graph, spec(variants[0], "prompt_finetune"), grad_backbone=True)
    ft = {"stage": f"full_finetune:{variants[0]}", "trainable": count_parameters(trainable),
          "n_events": int(len(prompt_idx))}
    timers.append(_epoch_timer(model, trainable, graph, split, state, tracker, prompt_idx, "link_prediction",
                               bs_prompt, True, seed))
    # full-model training reference: the backbone alone over pretrain + prompt from empty memory
    base_idx = np.concatenate([pre_idx, prompt_idx])
    model, trainable = _stage_model(backbone, graph, spec("none", "prompt_finetune"), grad_backbone=True)
    base = {"stage": "full_model_training", "trainable": count_parameters(trainable), "n_events": int(len(base_idx))}
    timers.append(_epoch_timer(model, trainable, graph, split, init_state(graph.n_nodes, backbone.config.d_mem),
                               LastInteractionTracker(graph.n_nodes), base_idx, "link_prediction", bs_pre, True,
                               seed))
    records = stages + [ft, base]
    for timer in timers:
        # first calls pay allocator and kernel-selection costs
        timer(n_batches=2)
    best = [float("inf")] * len(timers)
    for _ in range(max(repeats, 1)):
        for i, timer in enumerate(timers):
            best[i] = min(best[i], timer())
    for rec, secs in zip(records, best):
        rec["seconds"] = secs
    for s in stages:
        s["time_ratio_vs_finetune"] = s["seconds"] / ft["seconds"]
        s["param_ratio_vs_finetune"] = s["trainable"] / ft["trainable"]
        s["time_ratio_vs_full_model"] = s["seconds"] / base["seconds"]
        s["param_ratio_vs_full_model"] = s["trainable"] / base["trainable"]
    return {"dataset": _dataset_name(cfg), "n_nodes": graph.n_nodes, "seed": seed, "repeats": repeats,
            "stages": records}


def _load_reports(in_dir: Path) -> list[dict]:
    reports = []
    for path in sorted(in_dir.rglob("report.json")):
        rep = json.loads(path.read_text())
        rep["_path"] = str(path.parent)
        reports.append(rep)
    return reports


def emit_plots(reports: list[dict], kind: str, out_dir: str | Path) -> list[Path]:
    """
    sweep: metric mean vs swept value, one CSV row per report (plus a line plot).
    comparison: metric mean per prompt variant (plus grouped bars, one group per setting).
    The CSV is always written; the image only when matplotlib is importable.
    """
    if not reports:
        raise ValueError("emit_plots needs at least one report")
    if kind not in ("sweep", "comparison"):
        raise ValueError(f"unknown plot kind {kind!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    setting, metric = _primary_metric(reports[0])
    rows = []
    for rep in reports:
        if kind == "sweep":
            if "sweep" not in rep:
                raise ValueError(f"report {rep.get('_path', '?')} is not part of a sweep")
            key = rep["sweep"]["value"]
        else:
            key = rep["config"]["paradigm"]["variant"] or "none"
        for s, metrics in rep["aggregate"].items():
            stat = metrics[metric] if metric in metrics else next(iter(metrics.values()))
            rows.append({"key": key, "setting": s, "metric": metric, "mean": stat["mean"], "std": stat["std"]})
    rows.sort(key=lambda r: (r["setting"], str(r["key"]) if kind == "comparison" else r["key"]))
    csv_path = out / f"{kind}.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["key", "setting", "metric", "mean", "std"])
        w.writeheader()
        w.writerows(rows)
    files = [csv_path]
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return files
    fig, ax = plt.subplots(figsize=(5, 3.5))
    settings = sorted({r["setting"] for r in rows})
    if kind == "sweep":
        for s in settings:
            pts = [r for r in rows if r["setting"] == s]
            ax.plot([r["key"] for r in pts], [r["mean"] for r in pts], marker="o", label=s)
        ax.set_xlabel(reports[0]["sweep"]["axis"])
    else:
        keys = sorted({str(r["key"]) for r in rows})
        width = 0.8 / len(keys)
        for i, k in enumerate(keys):
            means = [next((r["mean"] for r in rows if str(r["key"]) == k and r["setting"] == s), np.nan)
                     for s in settings]
            ax.bar(np.arange(len(settings)) + i * width, means, width, label=k)
        ax.set_xticks(np.arange(len(settings)) + 0.4 - width / 2, settings)
    ax.set_ylabel(metric)
    ax.legend()
    fig.tight_layout()
    png = out / f"{kind}.png"
    fig.savefig(png, dpi=120)
    plt.close(fig)
    return files + [png]


def plot_dir(in_dir: str | Path, kind: str) -> list[Path]:
    in_dir = Path(in_dir)
    reports = _load_reports(in_dir)
    if kind == "sweep":
        reports = [r for r in reports if "sweep" in r]
        reports.sort(key=lambda r: r["sweep"]["value"])
    return emit_plots(reports, kind, in_dir)
