"""Task data: samples, task metadata and train/validation/test splits.

Dataset files are line-delimited JSON, one record per line::

    {"id": "17", "question": "...", "gold": "B", "options": [["A", "yes"], ["B", "no"]], "split": "train"}

``id``, ``options`` and ``split`` are optional. Shuffling uses numpy's Philox
counter-based generator so a (seed, counts) pair always yields the same split.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

SPLIT_TAGS = ("train", "validation", "test")


class DatasetError(ValueError):
    """Raised for malformed dataset files or impossible split requests."""


class Metric(str, Enum):
    ACCURACY = "accuracy"
    SET_F1 = "set_f1"
    ROUGE_L = "rouge_l"


@dataclass(frozen=True)
class Sample:
    id: str
    question: str
    gold: str
    options: tuple[tuple[str, str], ...] | None = None
    split: str | None = None

    def __post_init__(self) -> None:
        if not self.question.strip():
            raise DatasetError(f"sample {self.id!r}: empty question")
        if self.options is not None:
            keys = [k for k, _ in self.options]
            if self.gold not in keys:
                raise DatasetError(
                    f"sample {self.id!r}: gold {self.gold!r} is not an option key {keys}"
                )
        if self.split is not None and self.split not in SPLIT_TAGS:
            raise DatasetError(f"sample {self.id!r}: unknown split tag {self.split!r}")

    def to_record(self) -> dict[str, Any]:
        rec: dict[str, Any] = {"id": self.id, "question": self.question, "gold": self.gold}
        if self.options is not None:
            rec["options"] = [list(o) for o in self.options]
        if self.split is not None:
            rec["split"] = self.split
        return rec


@dataclass(frozen=True)
class TaskSpec:
    """Fixed formatting around the optimized prompt, plus the metric and P0.

    ``task_suffix_template`` may contain an ``{options}`` slot which is filled
    with one ``(K) text`` line per option of the sample.
    """

    name: str
    metric: Metric
    answer_format: str
    initial_prompt: str
    task_suffix_template: str | None = None

    def __post_init__(self) -> None:
        if not self.answer_format.strip():
            raise ValueError("answer_format must be non-empty")
        object.__setattr__(self, "metric", Metric(self.metric))
        if not self.initial_prompt.strip():
            raise ValueError("initial_prompt must be non-empty")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TaskSpec":
        return cls(
            name=d["name"],
            metric=Metric(d.get("metric", "accuracy")),
            answer_format=d["answer_format"],
            initial_prompt=d["initial_prompt"],
            task_suffix_template=d.get("task_suffix_template"),
        )


@dataclass(frozen=True)
class DatasetSplits:
    train: list[Sample]
    validation: list[Sample]
    test: list[Sample] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.train or not self.validation:
            raise DatasetError("train and validation splits must be non-empty")
        ids = [{s.id for s in part} for part in (self.train, self.validation, self.test)]
        if ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2]:
            raise DatasetError("splits share sample ids")


def _parse_options(raw: Any, where: str) -> tuple[tuple[str, str], ...] | None:
    if raw is None:
        return None
    if isinstance(raw, dict):
        return tuple((str(k), str(v)) for k, v in raw.items())
    out = []
    for item in raw:
        if isinstance(item, dict):
            out.append((str(item["key"]), str(item["text"])))
        elif isinstance(item, (list, tuple)) and len(item) == 2:
            out.append((str(item[0]), str(item[1])))
        else:
            raise DatasetError(f"{where}: option entries must be [key, text] pairs")
    return tuple(out)


def _records(path: Path, format_hint: str | None) -> Iterable[tuple[int, Any]]:
    fmt = format_hint or ("json" if path.suffix == ".json" else "jsonl")
    text = path.read_text(encoding="utf-8")
    if fmt == "json":
        try:
            data = json.loads(text) if text.strip() else []
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}: invalid JSON: {exc}") from exc
        # array entries are reported by 1-based position
        yield from enumerate(data, start=1)
    elif fmt == "jsonl":
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: invalid JSON: {exc.msg}") from exc
    else:
        raise DatasetError(f"unknown format hint {format_hint!r}")


def load_samples(path: str | Path, format_hint: str | None = None) -> list[Sample]:
    """Read samples in file order; missing ids become zero-based indices."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset file not found: {path}")
    samples: list[Sample] = []
    seen: set[str] = set()
    for lineno, rec in _records(path, format_hint):
        where = f"{path}:{lineno}"
        if not isinstance(rec, dict):
            raise DatasetError(f"{where}: record must be an object")
        for key in ("question", "gold"):
            if key not in rec or rec[key] is None:
                raise DatasetError(f"{where}: missing field {key!r}")
        sid = str(rec["id"]) if rec.get("id") is not None else str(len(samples))
        if sid in seen:
            raise DatasetError(f"{where}: duplicate id {sid!r}")
        seen.add(sid)
        try:
            samples.append(
                Sample(
                    id=sid,
                    question=str(rec["question"]),
                    gold=str(rec["gold"]),
                    options=_parse_options(rec.get("options"), where),
                    split=rec.get("split"),
                )
            )
        except DatasetError as exc:
            raise DatasetError(f"{where}: {exc}") from exc
    return samples


def save_samples(samples: Iterable[Sample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_record(), ensure_ascii=False) + "\n")


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def make_splits(
    samples: Sequence[Sample],
    counts: tuple[int, int, int],
    seed: int,
    *,
    test_cap: int | None = 1000,
    cap_mode: str = "head",
) -> DatasetSplits:
    """Partition ``samples`` into train/validation/test.

    When records carry split tags the tags decide membership and ``counts`` is
    ignored; the tagged test split is then capped at ``test_cap`` samples,
    either the first ones (``cap_mode="head"``) or a seeded random subset.
    Otherwise the samples are shuffled with Philox(seed) and cut into
    consecutive blocks of the requested sizes.
    """
    tagged = [s for s in samples if s.split is not None]
    if tagged:
        if len(tagged) != len(samples):
            raise DatasetError("either every record carries a split tag or none does")
        parts = {tag: [s for s in samples if s.split == tag] for tag in SPLIT_TAGS}
        test = parts["test"]
        if test_cap is not None and len(test) > test_cap:
            if cap_mode == "head":
                test = test[:test_cap]
            elif cap_mode == "random":
                keep = sorted(_rng(seed).choice(len(test), size=test_cap, replace=False))
                test = [test[i] for i in keep]
            else:
                raise DatasetError(f"unknown cap_mode {cap_mode!r}")
        return DatasetSplits(parts["train"], parts["validation"], test)

    n_train, n_val, n_test = (int(c) for c in counts)
    if min(n_train, n_val, n_test) < 0:
        raise DatasetError(f"split counts must be non-negative, got {counts}")
    if n_train == 0 or n_val == 0:
        raise DatasetError("train and validation counts must be positive")
    required = n_train + n_val + n_test
    if required > len(samples):
        raise DatasetError(f"split needs {required} samples, only {len(samples)} available")
    order = _rng(seed).permutation(len(samples))
    picked = [samples[i] for i in order[:required]]
    return DatasetSplits(
        train=picked[:n_train],
        validation=picked[n_train : n_train + n_val],
        test=picked[n_train + n_val :],
    )
