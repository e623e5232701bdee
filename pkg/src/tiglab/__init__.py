"""Prompt tuning for temporal interaction graphs: memory backbone, temporal prompt generators, evaluation, runner."""
from .backbone import BackboneConfig, MemoryBackbone, PretrainConfig, PretrainResult, load_checkpoint, pretrain, save_checkpoint
from .config import ConfigError, ExperimentConfig
from .estimators import TemporalLinkPretrainer, TemporalPromptTuner, check_graph, check_split
from .evaluation import evaluate_link_prediction, evaluate_node_classification
from .experiment import prepare_seed, report_efficiency, run_experiment, sweep, tune_and_evaluate
from .graph import (EventTable, InteractionEvent, SplitSpec, TemporalGraph, build_graph, chronological_split,
                    load_graph, mask_inductive_nodes)
from .metrics import auroc, average_precision
from .prompts import PromptVariant, build_prompt
from .synthetic import SyntheticSpec, generate_synthetic
from .training import ParadigmSpec, prompt_finetune, prompt_tune, run_nc_strategy

__version__ = "0.1.0"
