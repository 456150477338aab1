"""Synthetic keyword task with rule-based stand-ins for both models.

A prompt's fitness is the fraction of task keywords it mentions. The fake base
model answers a sample correctly with probability equal to that fraction,
using a hash of (noise seed, sample id, prompt) instead of a shared RNG, so
repeated evaluations agree and caching stays valid.

The fake optimizer follows simple rules:

* refinement adds one missing keyword and sometimes a distractor token. When
  the meta-prompt shows no successful examples it overcorrects: each keyword
  already present is dropped with probability ``drift_rate``;
* compression strips distractor tokens and keeps everything else.
"""

from __future__ import annotations

import hashlib
import random
import re
from dataclasses import dataclass, field

from .dataset import DatasetSplits, Metric, Sample, TaskSpec
from .gateway import CompletionRequest, FunctionProvider
from .prompts import END_MARKER, START_MARKER

KEYWORDS = ("alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliet")
DISTRACTORS = ("basically", "honestly", "literally", "actually", "generally", "simply")
INITIAL_PROMPT = "Answer the question."
ANSWER_FORMAT = "Put your answer within \\boxed{}."

_CURRENT = re.compile(r'The current prompt is:\s*"(.*?)"\n', re.S)
_SUCCESS_HEADER = "It successfully handled the following examples:"
_FAILURE_HEADER = "It failed on the following examples:"


def _unit(*parts: object) -> float:
    digest = hashlib.sha256("|".join(map(str, parts)).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2**64


@dataclass
class SyntheticTask:
    keyword_set: tuple[str, ...]
    samples: list[Sample]
    noise_seed: int = 0
    distractor_rate: float = 0.3
    drift_rate: float = 0.5
    spec: TaskSpec = field(init=False)

    def __post_init__(self) -> None:
        self.spec = TaskSpec(
            name="synthetic-keywords",
            metric=Metric.ACCURACY,
            answer_format=ANSWER_FORMAT,
            initial_prompt=INITIAL_PROMPT,
        )
        self._by_question = {s.question: s for s in self.samples}

    def coverage(self, prompt: str) -> float:
        words = set(re.findall(r"[a-z]+", prompt.lower()))
        return sum(kw in words for kw in self.keyword_set) / len(self.keyword_set)

    def splits(self, n_train: int, n_val: int) -> DatasetSplits:
        return DatasetSplits(
            train=self.samples[:n_train],
            validation=self.samples[n_train : n_train + n_val],
            test=self.samples[n_train + n_val :],
        )

    # -- base model -------------------------------------------------------

    def base_respond(self, prompt: str, sample: Sample) -> str:
        u = _unit(self.noise_seed, sample.id, prompt)
        if u < self.coverage(prompt):
            answer = sample.gold
        else:
            answer = "no" if sample.gold == "yes" else "yes"
        return f"Checking the statement against the instructions.\nThe answer is \\boxed{{{answer}}}."

    def _base_request(self, request: CompletionRequest) -> str:
        blocks = request.text.split("\n\n")
        sample = self._by_question[blocks[1]]
        return self.base_respond(blocks[0], sample)

    def base_provider(self) -> FunctionProvider:
        return FunctionProvider(self._base_request, provider_id="synthetic-base")

    # -- optimizer --------------------------------------------------------

    def optimizer_respond(self, meta_prompt: str, seed: int = 0) -> str:
        m = _CURRENT.search(meta_prompt)
        if m is None:
            raise ValueError("meta-prompt does not contain a quoted current prompt")
        tokens = m.group(1).split()
        rng = random.Random(int(_unit(seed, meta_prompt) * 2**53))
        if _FAILURE_HEADER in meta_prompt:
            new = self._refine(tokens, self._count_successes(meta_prompt), rng)
        else:
            new = [t for t in tokens if t not in DISTRACTORS]
        text = " ".join(new)
        return f"Reasoning about the examples.\n{START_MARKER}{text}{END_MARKER}"

    def _refine(self, tokens: list[str], n_successes: int, rng: random.Random) -> list[str]:
        keep = list(tokens)
        if n_successes == 0 and self.drift_rate > 0:
            keep = [t for t in keep if t not in self.keyword_set or rng.random() >= self.drift_rate]
        missing = [kw for kw in self.keyword_set if kw not in tokens]
        if missing:
            keep.append(rng.choice(missing))
        if rng.random() < self.distractor_rate:
            keep.append(rng.choice(DISTRACTORS))
        return keep or list(tokens)

    @staticmethod
    def _count_successes(meta_prompt: str) -> int:
        start = meta_prompt.find(_SUCCESS_HEADER)
        end = meta_prompt.find(_FAILURE_HEADER)
        if start < 0 or end < 0:
            return 0
        return len(re.findall(r"^<\d+>$", meta_prompt[start:end], re.M))

    def optimizer_provider(self, seed: int = 0) -> FunctionProvider:
        return FunctionProvider(lambda req: self.optimizer_respond(req.text, seed), provider_id="synthetic-optimizer")

    def providers(self, seed: int = 0) -> dict[str, FunctionProvider]:
        return {"base": self.base_provider(), "optimizer": self.optimizer_provider(seed)}


def make_synthetic_task(
    n_keywords: int = 6,
    n_samples: int = 120,
    noise_seed: int = 0,
    **kwargs,
) -> SyntheticTask:
    if not 1 <= n_keywords <= len(KEYWORDS):
        raise ValueError(f"n_keywords must be in 1..{len(KEYWORDS)}")
    samples = [
        Sample(id=str(i), question=f"Item {i}: does statement #{i} hold?", gold="yes" if i % 2 == 0 else "no")
        for i in range(n_samples)
    ]
    return SyntheticTask(KEYWORDS[:n_keywords], samples, noise_seed, **kwargs)


def synthetic_base_respond(task: SyntheticTask, prompt: str, sample: Sample) -> str:
    return task.base_respond(prompt, sample)


def synthetic_optimizer_respond(task: SyntheticTask, meta_prompt: str, seed: int = 0) -> str:
    return task.optimizer_respond(meta_prompt, seed)
