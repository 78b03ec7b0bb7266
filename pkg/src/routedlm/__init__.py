"""Token-routed language model with frozen numeric experts.

A tiny causal transformer, a set of separately trained frozen regression
experts, a text-to-computation aligner, and a token router alternate inside
one generation loop: language tokens come from the model, numeric answers are
computed by an expert and spliced into the stream in a canonical format.
"""

from .autodiff import Tensor, cosine_sim, softmax
from .backbone import LmConfig, OpCounter, TransformerLM, next_token, train_lm
from .bench import compute_success, latency_stats, run_bench
from .config import RunConfig
from .datagen import (DatasetSplit, NormStats, Sample, generate_dataset,
                      linear_reward, read_jsonl, soh_oracle, write_jsonl)
from .expert import (ExpertModel, ExpertSet, expert_mse, register_expert,
                     train_expert)
from .aligner import (AlignerModel, Stage2Config, contrastive_loss, stage2_loss,
                      text2comp_mse)
from .gradcheck import GradCheckReport, grad_check
from .inference import GenerationTrace, RoutedPipeline, extract_answer
from .optim import AdamState, Parameter, adam_step
from .router import RouterModel, binary_ce, derive_labels, router_ce, train_router
from .templates import TaskText, TemplateSet, build_stage_datasets
from .tokenizer import Vocabulary, build_vocab, format_number, parse_number

__all__ = [
    "AdamState", "AlignerModel", "DatasetSplit", "ExpertModel", "ExpertSet",
    "GenerationTrace", "GradCheckReport", "LmConfig", "NormStats", "OpCounter",
    "Parameter", "RoutedPipeline", "RouterModel", "RunConfig", "Sample",
    "Stage2Config", "TaskText", "TemplateSet", "Tensor", "TransformerLM",
    "Vocabulary", "adam_step", "binary_ce", "build_stage_datasets", "build_vocab",
    "compute_success", "contrastive_loss", "cosine_sim", "derive_labels",
    "expert_mse", "extract_answer", "format_number", "generate_dataset",
    "grad_check", "latency_stats", "linear_reward", "next_token", "parse_number",
    "read_jsonl", "register_expert", "router_ce", "run_bench", "soh_oracle",
    "softmax", "stage2_loss", "text2comp_mse", "train_expert", "train_lm",
    "train_router", "write_jsonl",
]

__version__ = "0.1.0"
