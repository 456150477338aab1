"""Answer extraction, per-sample scoring and aggregate metrics.

All metric values are :class:`fractions.Fraction` so the rejection gate
compares scores exactly; floats appear only in :meth:`Score.display`.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from .dataset import Metric, Sample, TaskSpec

BOXED = "\\boxed{"
ENTITY_DELIMITERS = re.compile(r"[,;|\n]")


@dataclass(frozen=True)
class SampleOutcome:
    sample_id: str
    raw_response: str
    extracted: str | None
    correct: bool
    metric_value: Fraction
    # pooled counts for micro-F1; zero for other metrics
    tp: int = 0
    fp: int = 0
    fn: int = 0
    flagged: bool = False

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "raw_response": self.raw_response,
            "extracted": self.extracted,
            "correct": self.correct,
            "metric_value": str(self.metric_value),
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "flagged": self.flagged,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SampleOutcome":
        return cls(
            sample_id=d["sample_id"],
            raw_response=d["raw_response"],
            extracted=d["extracted"],
            correct=d["correct"],
            metric_value=Fraction(d["metric_value"]),
            tp=d.get("tp", 0),
            fp=d.get("fp", 0),
            fn=d.get("fn", 0),
            flagged=d.get("flagged", False),
        )


@dataclass(frozen=True, order=False)
class Score:
    value: Fraction
    n: int
    metric: Metric

    def __post_init__(self) -> None:
        if self.n <= 0:
            raise ValueError("a score needs at least one sample")
        if not 0 <= self.value <= 1:
            raise ValueError(f"score {self.value} outside [0, 1]")

    def display(self) -> str:
        """Percentage with one decimal, e.g. 50/56 -> '89.3'."""
        return f"{float(self.value) * 100:.1f}"

    def __str__(self) -> str:
        return f"{self.display()} ({self.value}, n={self.n})"

    def to_dict(self) -> dict:
        return {"value": str(self.value), "n": self.n, "metric": self.metric.value}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Score":
        return cls(Fraction(d["value"]), int(d["n"]), Metric(d["metric"]))


def _boxed_spans(response: str) -> list[str]:
    spans = []
    pos = response.find(BOXED)
    while pos >= 0:
        i = pos + len(BOXED)
        depth = 1
        j = i
        while j < len(response) and depth:
            if response[j] == "{":
                depth += 1
            elif response[j] == "}":
                depth -= 1
            j += 1
        if depth == 0:
            spans.append(response[i : j - 1])
        pos = response.find(BOXED, pos + len(BOXED))
    return spans


def _strip_option(text: str) -> str:
    text = text.strip().rstrip(".:").strip()
    m = re.fullmatch(r"\(\s*([^()]*?)\s*\)", text)
    if m:
        text = m.group(1)
    return text.strip()


def extract_answer(response: str, spec: TaskSpec | None = None) -> str | None:
    """Content of the last ``\\boxed{...}``, with option punctuation removed."""
    spans = _boxed_spans(response)
    if not spans:
        return None
    return _strip_option(spans[-1])


def _normalize(text: str) -> str:
    return " ".join(text.split()).lower()


def parse_entities(text: str) -> frozenset[str]:
    return frozenset(e for e in (_normalize(p) for p in ENTITY_DELIMITERS.split(text)) if e)


def set_f1(pred: Iterable[str], gold: Iterable[str]) -> Fraction:
    pred, gold = set(pred), set(gold)
    if not pred and not gold:
        return Fraction(1)
    overlap = len(pred & gold)
    return Fraction(2 * overlap, len(pred) + len(gold))


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    # bit-parallel LCS (Allison-Dix / Hyyro): one integer bitmask per row of b
    if not a or not b:
        return 0
    masks: dict[str, int] = {}
    for i, tok in enumerate(a):
        masks[tok] = masks.get(tok, 0) | (1 << i)
    full = (1 << len(a)) - 1
    row = full
    for tok in b:
        m = masks.get(tok, 0)
        u = row & m
        row = ((row + u) | (row - u)) & full
    return len(a) - bin(row).count("1")


def rouge_l(candidate: str, reference: str) -> Fraction:
    """ROUGE-L F1 over lowercased whitespace tokens."""
    cand = candidate.lower().split()
    ref = reference.lower().split()
    lcs = _lcs_length(cand, ref)
    if lcs == 0:
        return Fraction(0)
    # F = 2PR/(P+R) with P = lcs/|cand|, R = lcs/|ref|
    return Fraction(2 * lcs, len(cand) + len(ref))


def score_sample(response: str, sample: Sample, spec: TaskSpec) -> SampleOutcome:
    extracted = extract_answer(response, spec)
    metric = spec.metric
    if metric is Metric.ACCURACY:
        if extracted is not None and sample.options:
            m = re.match(r"\(?([A-Za-z0-9]+)\)\s", extracted)
            if m:
                extracted = m.group(1)
        correct = extracted is not None and extracted.strip().lower() == sample.gold.strip().lower()
        return SampleOutcome(sample.id, response, extracted, correct, Fraction(int(correct)))
    if metric is Metric.SET_F1:
        gold = parse_entities(sample.gold)
        if extracted is None:
            return SampleOutcome(sample.id, response, None, False, Fraction(0), 0, 0, len(gold))
        pred = parse_entities(extracted)
        value = set_f1(pred, gold)
        tp = len(pred & gold)
        return SampleOutcome(
            sample.id, response, extracted, value == 1, value, tp, len(pred) - tp, len(gold) - tp
        )
    # rouge_l: the whole response is the summary unless it boxed one
    text = extracted if extracted is not None else response
    return SampleOutcome(sample.id, response, extracted, False, rouge_l(text, sample.gold))


def aggregate(outcomes: Sequence[SampleOutcome], metric: Metric, *, macro: bool = False) -> Score:
    """Accuracy as correct/n; set F1 micro-averaged over pooled counts (or
    macro with ``macro=True``); ROUGE-L as the mean per-sample value."""
    if not outcomes:
        raise ValueError("cannot aggregate an empty outcome list")
    metric = Metric(metric)
    n = len(outcomes)
    if metric is Metric.ACCURACY:
        return Score(Fraction(sum(o.correct for o in outcomes), n), n, metric)
    if metric is Metric.SET_F1 and not macro:
        tp = sum(o.tp for o in outcomes)
        fp = sum(o.fp for o in outcomes)
        fn = sum(o.fn for o in outcomes)
        denom = 2 * tp + fp + fn
        return Score(Fraction(2 * tp, denom) if denom else Fraction(1), n, metric)
    return Score(sum((o.metric_value for o in outcomes), Fraction(0)) / n, n, metric)


def binarize_by_quantile(
    values: Sequence[tuple[str, Fraction]],
    top_frac: Fraction | float = Fraction(1, 5),
    bottom_frac: Fraction | float = Fraction(1, 5),
) -> dict[str, str]:
    """Label the top slice ``correct``, the bottom slice ``incorrect``, the rest
    ``excluded``. Slice sizes are floor(n * frac); ties rank by sample id."""
    if not values:
        raise ValueError("binarize_by_quantile needs at least one value")
    top = Fraction(str(top_frac)) if isinstance(top_frac, float) else Fraction(top_frac)
    bottom = Fraction(str(bottom_frac)) if isinstance(bottom_frac, float) else Fraction(bottom_frac)
    if top <= 0 or bottom <= 0 or top + bottom > 1:
        raise ValueError("need 0 < top_frac, bottom_frac and top_frac + bottom_frac <= 1")
    n = len(values)
    n_top = int(n * top)
    n_bottom = int(n * bottom)
    ranked = sorted(values, key=lambda kv: (-kv[1], kv[0]))
    labels = {sid: "excluded" for sid, _ in ranked}
    for sid, _ in ranked[:n_top]:
        labels[sid] = "correct"
    for sid, _ in ranked[n - n_bottom :] if n_bottom else []:
        labels[sid] = "incorrect"
    return labels
