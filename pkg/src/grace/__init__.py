"""Automatic prompt optimization by gated refinement and adaptive compression."""

from .dataset import DatasetError, DatasetSplits, Metric, Sample, TaskSpec, load_samples, make_splits
from .engine import EngineConfig, EngineState, EvalReport, GraceEngine, RunAborted, RunResult, StepEvent, run
from .gateway import (
    CompletionRequest,
    CompletionResult,
    FunctionProvider,
    Gateway,
    HTTPChatProvider,
    RetryPolicy,
    ScriptedProvider,
    Usage,
    script_provider,
)
from .prompts import MetaPromptTemplates, PromptText, assemble_task_input, extract_candidate
from .scoring import Score, aggregate, rouge_l, set_f1
from .telemetry import DEEPSEEK_V3_R1, PricingTable, RunDirectory, UsageLedger, estimate_cost

__version__ = "0.1.0"
