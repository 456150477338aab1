"""The GRACE optimization loop: gated refinement plus adaptive compression.

Each step asks the optimizer for exactly one new prompt:

* refinement: the current prompt is scored on the training set, a batch of
  successes and failures is shown to the optimizer, and its candidate replaces
  the current prompt only if it scores strictly higher on validation;
* compression: once ``compression_trigger`` updates in a row were blocked, the
  optimizer condenses the current prompt, and the result is adopted without a
  validation gate.

The prompt with the highest validation score seen at any point is returned.
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .dataset import DatasetSplits, Metric, Sample, TaskSpec
from .gateway import (
    CompletionRequest,
    Gateway,
    Provider,
    RetryPolicy,
    TransportError,
)
from .prompts import (
    CaseRecord,
    ExtractionError,
    MetaPromptTemplates,
    PromptText,
    assemble_task_input,
    extract_candidate,
    render_compress_prompt,
    render_refine_prompt,
)
from .scoring import SampleOutcome, Score, aggregate, binarize_by_quantile, score_sample
from .telemetry import PricingTable, RunDirectory, UsageLedger

logger = logging.getLogger(__name__)

EVENT_KINDS = ("accepted", "rejected", "compressed", "skipped_no_failures", "extraction_failed")
CHECKPOINT_VERSION = 1


class RunAborted(RuntimeError):
    """The run stopped on an unrecoverable error; a checkpoint was kept."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class EngineConfig:
    max_iters: int = 80
    compression_trigger: int = 5
    n_success: int = 3
    n_failure: int = 3
    early_stop_window: int | None = 20
    seed: int = 0
    eval_concurrency: int = 8
    extraction_retries: int = 2
    base_temperature: float = 0.0
    optimizer_temperature: float = 0.6
    top_frac: Fraction = Fraction(1, 5)
    bottom_frac: Fraction = Fraction(1, 5)
    macro_f1: bool = False

    def __post_init__(self) -> None:
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.compression_trigger < 1:
            raise ValueError("compression_trigger must be >= 1")
        if self.n_success < 0 or self.n_failure < 0 or self.n_success + self.n_failure < 1:
            raise ValueError("batch sizes must be >= 0 with at least one sample in total")
        if self.early_stop_window is not None and self.early_stop_window < 1:
            raise ValueError("early_stop_window must be >= 1 or None")
        if self.eval_concurrency < 1:
            raise ValueError("eval_concurrency must be >= 1")
        if self.extraction_retries < 0:
            raise ValueError("extraction_retries must be >= 0")
        object.__setattr__(self, "top_frac", Fraction(str(self.top_frac)))
        object.__setattr__(self, "bottom_frac", Fraction(str(self.bottom_frac)))

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["top_frac"] = str(self.top_frac)
        d["bottom_frac"] = str(self.bottom_frac)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "EngineConfig":
        aliases = {"T": "max_iters", "K": "compression_trigger", "k": "compression_trigger"}
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in d.items():
            key = aliases.get(key, key)
            if key not in known:
                raise ValueError(f"unknown engine option {key!r}")
            kwargs[key] = value
        return cls(**kwargs)


def prompt_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass
class EvalReport:
    prompt: PromptText
    samples: list[Sample]
    outcomes: list[SampleOutcome]
    score: Score
    new_calls: int = 0

    @property
    def flagged(self) -> list[str]:
        return [o.sample_id for o in self.outcomes if o.flagged]


@dataclass(frozen=True)
class CaseItem:
    """A training sample with its outcome under the current prompt."""

    sample: Sample
    outcome: SampleOutcome
    question_input: str

    def record(self, index: int) -> CaseRecord:
        return CaseRecord(
            index=index,
            question_input=self.question_input,
            response=self.outcome.raw_response,
            label=self.sample.gold,
            prediction=self.outcome.extracted if self.outcome.extracted is not None else "None",
        )


@dataclass(frozen=True)
class StepEvent:
    step: int
    kind: str
    current_val_score: Score
    candidate_val_score: Score | None
    prompt_hash: str
    reject_counter: int
    best_step: int
    best_val_score: Score
    generations: int
    candidate_text: str | None = None
    phase: str = "refine"

    def __post_init__(self) -> None:
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")
        if self.kind == "compressed" and self.candidate_val_score is not None:
            raise ValueError("compressed events carry no candidate score")

    def to_dict(self) -> dict[str, Any]:
        return {
            "step": self.step,
            "kind": self.kind,
            "phase": self.phase,
            "current_val_score": self.current_val_score.to_dict(),
            "candidate_val_score": self.candidate_val_score.to_dict() if self.candidate_val_score else None,
            "prompt_hash": self.prompt_hash,
            "reject_counter": self.reject_counter,
            "best_step": self.best_step,
            "best_val_score": self.best_val_score.to_dict(),
            "generations": self.generations,
            "candidate_text": self.candidate_text,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "StepEvent":
        cand = d.get("candidate_val_score")
        return cls(
            step=d["step"],
            kind=d["kind"],
            phase=d.get("phase", "refine"),
            current_val_score=Score.from_dict(d["current_val_score"]),
            candidate_val_score=Score.from_dict(cand) if cand else None,
            prompt_hash=d["prompt_hash"],
            reject_counter=d["reject_counter"],
            best_step=d["best_step"],
            best_val_score=Score.from_dict(d["best_val_score"]),
            generations=d["generations"],
            candidate_text=d.get("candidate_text"),
        )


@dataclass
class EngineState:
    """Everything the loop needs to continue from step ``step``.

    ``current_score`` is the validation score of ``current_prompt``.
    ``reject_counter`` equals the compression trigger only between a blocking
    step and the compression step that it arms.
    """

    step: int
    current_prompt: PromptText
    current_score: Score
    best_prompt: PromptText
    best_score: Score
    best_step: int
    rng: np.random.Generator
    reject_counter: int = 0
    stagnation_counter: int = 0
    generations: int = 0
    trace: list[StepEvent] = field(default_factory=list)

    @property
    def rng_state(self) -> dict[str, Any]:
        return self.rng.bit_generator.state


@dataclass
class RunResult:
    best_prompt: PromptText
    best_score: Score
    best_step: int
    trace: list[StepEvent]
    ledger: UsageLedger
    state: EngineState
    test_score: Score | None = None
    stop_reason: str = "max_iters"


def partition_train(
    report: EvalReport,
    spec: TaskSpec,
    *,
    top_frac: Fraction = Fraction(1, 5),
    bottom_frac: Fraction = Fraction(1, 5),
) -> tuple[list[CaseItem], list[CaseItem]]:
    """Split a training report into successes and failures.

    ROUGE-L outcomes are labelled by :func:`binarize_by_quantile`; samples in
    the middle band land in neither list.
    """
    items = [
        CaseItem(s, o, assemble_task_input(report.prompt, s, spec))
        for s, o in zip(report.samples, report.outcomes)
    ]
    if spec.metric is Metric.ROUGE_L:
        labels = binarize_by_quantile([(o.sample_id, o.metric_value) for o in report.outcomes], top_frac, bottom_frac)
        return (
            [it for it in items if labels[it.sample.id] == "correct"],
            [it for it in items if labels[it.sample.id] == "incorrect"],
        )
    return [it for it in items if it.outcome.correct], [it for it in items if not it.outcome.correct]


def sample_update_batch(
    successes: Sequence[CaseItem],
    failures: Sequence[CaseItem],
    config: EngineConfig,
    rng: np.random.Generator,
) -> tuple[list[CaseItem], list[CaseItem]]:
    """Uniformly draw up to ``n_success`` successes and ``n_failure`` failures
    without replacement."""

    def draw(pool: Sequence[CaseItem], k: int) -> list[CaseItem]:
        k = min(k, len(pool))
        if k == 0:
            return []
        return [pool[i] for i in rng.choice(len(pool), size=k, replace=False)]

    return draw(successes, config.n_success), draw(failures, config.n_failure)


def gate_accepts(candidate: Score, incumbent: Score) -> bool:
    """Update rejection gate: strict improvement only, ties keep the incumbent."""
    return candidate.value > incumbent.value


def _encode(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": obj.tolist(), "dtype": str(obj.dtype)}
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, dict):
        return {k: _encode(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode(v) for v in obj]
    return obj


def _decode(obj: Any) -> Any:
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.array(obj["__ndarray__"], dtype=obj["dtype"])
        return {k: _decode(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode(v) for v in obj]
    return obj


class GraceEngine:
    """Runs the loop against a :class:`Gateway` for a fixed task and split."""

    def __init__(
        self,
        config: EngineConfig,
        splits: DatasetSplits,
        spec: TaskSpec,
        gateway: Gateway,
        *,
        templates: MetaPromptTemplates | None = None,
        run_dir: str | Path | RunDirectory | None = None,
        ledger: UsageLedger | None = None,
        pricing: PricingTable | None = None,
    ):
        self.config = config
        self.splits = splits
        self.spec = spec
        self.gateway = gateway
        self.templates = templates or MetaPromptTemplates.default()
        self.pricing = pricing
        if run_dir is not None and not isinstance(run_dir, RunDirectory):
            run_dir = RunDirectory(run_dir)
        self.run_dir = run_dir
        self.ledger = ledger or UsageLedger(run_dir.calls if run_dir else None)
        if gateway.on_usage is None:
            gateway.on_usage = self.ledger.record_call
        self.cache: dict[str, dict[str, SampleOutcome]] = {}
        self.use_cache = config.base_temperature == 0

    # -- evaluation -------------------------------------------------------

    def _run_sample(self, prompt: PromptText, sample: Sample, tag: str) -> SampleOutcome:
        request = CompletionRequest.user(
            "base",
            assemble_task_input(prompt, sample, self.spec),
            temperature=self.config.base_temperature,
            request_tag=f"{tag}:{sample.id}",
        )
        try:
            result = self.gateway.complete(request)
        except TransportError as exc:
            logger.warning("sample %s failed after retries: %s", sample.id, exc)
            return SampleOutcome(sample.id, "", None, False, Fraction(0), flagged=True)
        return score_sample(result.text, sample, self.spec)

    def evaluate_prompt(self, prompt: PromptText, samples: Sequence[Sample]) -> EvalReport:
        """Score ``prompt`` on ``samples``; cached outcomes issue no model calls."""
        if not samples:
            raise ValueError("evaluate_prompt needs at least one sample")
        key = prompt_hash(prompt.text)
        cached = self.cache.setdefault(key, {}) if self.use_cache else {}
        todo = [s for s in samples if s.id not in cached]
        tag = f"eval:{key[:12]}"
        if self.config.eval_concurrency > 1 and len(todo) > 1:
            with ThreadPoolExecutor(max_workers=self.config.eval_concurrency) as pool:
                fresh = list(pool.map(lambda s: self._run_sample(prompt, s, tag), todo))
        else:
            fresh = [self._run_sample(prompt, s, tag) for s in todo]
        fresh_by_id = {o.sample_id: o for o in fresh}
        if self.use_cache:
            cached.update({sid: o for sid, o in fresh_by_id.items() if not o.flagged})
        outcomes = [fresh_by_id[s.id] if s.id in fresh_by_id else cached[s.id] for s in samples]
        score = aggregate(outcomes, self.spec.metric, macro=self.config.macro_f1)
        return EvalReport(prompt, list(samples), outcomes, score, new_calls=len(todo))

    # -- state ------------------------------------------------------------

    def initial_state(self) -> EngineState:
        p0 = PromptText(self.spec.initial_prompt, origin="initial")
        score = self.evaluate_prompt(p0, self.splits.validation).score
        rng = np.random.Generator(np.random.Philox(self.config.seed))
        return EngineState(
            step=0,
            current_prompt=p0,
            current_score=score,
            best_prompt=p0,
            best_score=score,
            best_step=0,
            rng=rng,
        )

    def _generate(self, meta_prompt: str, origin: str, step: int) -> PromptText | None:
        for attempt in range(self.config.extraction_retries + 1):
            request = CompletionRequest.user(
                "optimizer",
                meta_prompt,
                temperature=self.config.optimizer_temperature,
                request_tag=f"step{step}:{origin}:try{attempt}",
            )
            result = self.gateway.complete(request)
            try:
                return extract_candidate(result.text, origin=origin, parent_step=step - 1)
            except ExtractionError as exc:
                logger.info("step %d: %s (attempt %d)", step, exc, attempt + 1)
        return None

    def _track_best(self, state: EngineState, prompt: PromptText, score: Score) -> None:
        if score.value > state.best_score.value:
            state.best_prompt, state.best_score, state.best_step = prompt, score, state.step
            state.stagnation_counter = 0
        else:
            state.stagnation_counter += 1

    def _emit(self, state: EngineState, kind: str, incumbent: Score, candidate: Score | None,
              text: str | None, phase: str = "refine") -> StepEvent:
        event = StepEvent(
            step=state.step,
            kind=kind,
            phase=phase,
            current_val_score=incumbent,
            candidate_val_score=candidate,
            prompt_hash=prompt_hash(state.current_prompt.text)[:16],
            reject_counter=state.reject_counter,
            best_step=state.best_step,
            best_val_score=state.best_score,
            generations=state.generations,
            candidate_text=text,
        )
        state.trace.append(event)
        if self.run_dir is not None:
            self.run_dir.append_event(event.to_dict())
        return event

    def refinement_step(self, state: EngineState) -> EngineState:
        state.step += 1
        report = self.evaluate_prompt(state.current_prompt, self.splits.train)
        successes, failures = partition_train(
            report, self.spec, top_frac=self.config.top_frac, bottom_frac=self.config.bottom_frac
        )
        incumbent = state.current_score
        if not failures:
            # nothing to fix; counts toward early stopping but not compression
            state.stagnation_counter += 1
            self._emit(state, "skipped_no_failures", incumbent, None, None)
            return state
        s_batch, f_batch = sample_update_batch(successes, failures, self.config, state.rng)
        meta = render_refine_prompt(
            state.current_prompt,
            [it.record(i) for i, it in enumerate(s_batch, start=1)],
            [it.record(i) for i, it in enumerate(f_batch, start=1)],
            self.templates,
        )
        candidate = self._generate(meta, "refined", state.step)
        state.generations += 1
        if candidate is None:
            state.reject_counter += 1
            state.stagnation_counter += 1
            self._emit(state, "extraction_failed", incumbent, None, None)
            return state
        cand_score = self.evaluate_prompt(candidate, self.splits.validation).score
        if gate_accepts(cand_score, incumbent):
            state.current_prompt, state.current_score = candidate, cand_score
            state.reject_counter = 0
            kind = "accepted"
        else:
            state.reject_counter += 1
            kind = "rejected"
        self._track_best(state, candidate, cand_score)
        self._emit(state, kind, incumbent, cand_score, candidate.text)
        return state

    def compression_step(self, state: EngineState) -> EngineState:
        K = self.config.compression_trigger
        if state.reject_counter < K:
            raise ValueError("compression_step needs reject_counter == compression_trigger")
        state.step += 1
        incumbent = state.current_score
        meta = render_compress_prompt(state.current_prompt, self.templates)
        compressed = self._generate(meta, "compressed", state.step)
        state.generations += 1
        if compressed is None:
            # re-arm: the next blocked update triggers compression again
            state.reject_counter = K - 1
            state.stagnation_counter += 1
            self._emit(state, "extraction_failed", incumbent, None, None, phase="compress")
            return state
        score = self.evaluate_prompt(compressed, self.splits.validation).score
        state.current_prompt, state.current_score = compressed, score
        state.reject_counter = 0
        self._track_best(state, compressed, score)
        self._emit(state, "compressed", incumbent, None, compressed.text, phase="compress")
        return state

    # -- checkpoints ------------------------------------------------------

    def checkpoint_data(self, state: EngineState) -> dict[str, Any]:
        return {
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "step": state.step,
            "current_prompt": asdict(state.current_prompt),
            "current_score": state.current_score.to_dict(),
            "best_prompt": asdict(state.best_prompt),
            "best_score": state.best_score.to_dict(),
            "best_step": state.best_step,
            "reject_counter": state.reject_counter,
            "stagnation_counter": state.stagnation_counter,
            "generations": state.generations,
            "rng_state": _encode(state.rng_state),
            "trace": [e.to_dict() for e in state.trace],
            "cache": {
                h: {sid: o.to_dict() for sid, o in sorted(entries.items())}
                for h, entries in sorted(self.cache.items())
            },
        }

    def restore(self, data: dict[str, Any]) -> EngineState:
        if data.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {data.get('version')!r}")
        rng = np.random.Generator(np.random.Philox(self.config.seed))
        rng.bit_generator.state = _decode(data["rng_state"])
        self.cache = {
            h: {sid: SampleOutcome.from_dict(o) for sid, o in entries.items()}
            for h, entries in data["cache"].items()
        }
        return EngineState(
            step=data["step"],
            current_prompt=PromptText(**data["current_prompt"]),
            current_score=Score.from_dict(data["current_score"]),
            best_prompt=PromptText(**data["best_prompt"]),
            best_score=Score.from_dict(data["best_score"]),
            best_step=data["best_step"],
            rng=rng,
            reject_counter=data["reject_counter"],
            stagnation_counter=data["stagnation_counter"],
            generations=data["generations"],
            trace=[StepEvent.from_dict(e) for e in data["trace"]],
        )

    def _save(self, state: EngineState) -> None:
        if self.run_dir is not None:
            self.run_dir.save_checkpoint(self.checkpoint_data(state))

    # -- main loop --------------------------------------------------------

    def should_stop(self, state: EngineState) -> str | None:
        if state.step >= self.config.max_iters:
            return "max_iters"
        window = self.config.early_stop_window
        if window is not None and state.stagnation_counter >= window:
            return "early_stop"
        return None

    def run(self, *, resume: bool = False, evaluate_test: bool = False) -> RunResult:
        if resume:
            if self.run_dir is None or not self.run_dir.checkpoint.exists():
                raise FileNotFoundError("resume requested but no checkpoint found")
            state = self.restore(self.run_dir.load_checkpoint())
            # drop trace lines and rebuild the ledger so both match the checkpoint
            self.run_dir.rewrite_trace(e.to_dict() for e in state.trace)
            restored = UsageLedger.from_log(self.run_dir.calls)
            self.ledger.totals, self.ledger.calls = restored.totals, restored.calls
            logger.info("resuming at step %d", state.step)
        else:
            if self.run_dir is not None:
                self.run_dir.reset()
            state = self.initial_state()
            self._save(state)

        stop = self.should_stop(state)
        while stop is None:
            try:
                if state.reject_counter >= self.config.compression_trigger:
                    self.compression_step(state)
                else:
                    self.refinement_step(state)
            except Exception as exc:
                if self.run_dir is not None:
                    self.run_dir.write_summary(self.ledger, self.pricing)
                raise RunAborted(f"run aborted during step {state.step}: {exc}", state.step) from exc
            self._save(state)
            stop = self.should_stop(state)

        test_score = None
        if evaluate_test and self.splits.test:
            test_score = self.evaluate_prompt(state.best_prompt, self.splits.test).score
        if self.run_dir is not None:
            self.run_dir.write_best_prompt(state.best_prompt.text)
            self.run_dir.write_summary(self.ledger, self.pricing)
        return RunResult(
            best_prompt=state.best_prompt,
            best_score=state.best_score,
            best_step=state.best_step,
            trace=list(state.trace),
            ledger=self.ledger,
            state=state,
            test_score=test_score,
            stop_reason=stop,
        )


def run(
    config: EngineConfig,
    splits: DatasetSplits,
    spec: TaskSpec,
    providers: dict[str, Provider] | Gateway,
    *,
    templates: MetaPromptTemplates | None = None,
    run_dir: str | Path | None = None,
    pricing: PricingTable | None = None,
    resume: bool = False,
    evaluate_test: bool = False,
    retry: RetryPolicy | None = None,
) -> RunResult:
    """Optimize ``spec.initial_prompt`` and return the best validated prompt."""
    gateway = providers if isinstance(providers, Gateway) else Gateway(dict(providers), retry=retry or RetryPolicy())
    engine = GraceEngine(config, splits, spec, gateway, templates=templates, run_dir=run_dir, pricing=pricing)
    return engine.run(resume=resume, evaluate_test=evaluate_test)
