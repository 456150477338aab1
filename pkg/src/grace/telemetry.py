"""Usage ledger, cost estimation and run-directory persistence.

A run directory holds::

    trace.log        one JSON record per engine step
    calls.log        one JSON record per model call (role + usage)
    ledger.json      totals per role, pricing and dollar estimate
    best_prompt.txt  best prompt found
    checkpoint.json  resumable engine state
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Mapping

from .gateway import Usage

TRACE_FILE = "trace.log"
CALLS_FILE = "calls.log"
LEDGER_FILE = "ledger.json"
BEST_PROMPT_FILE = "best_prompt.txt"
CHECKPOINT_FILE = "checkpoint.json"
CONVERGENCE_FILE = "convergence.csv"

MILLION = 10**6


def dumps(record: Mapping[str, Any]) -> str:
    """Canonical single-line JSON used for every log record."""
    return json.dumps(record, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


@dataclass
class RoleTotals:
    api_calls: int = 0
    input_tokens: int = 0
    output_tokens: int = 0
    reasoning_tokens: int = 0
    estimated_flag_count: int = 0

    def add(self, usage: Usage) -> None:
        self.api_calls += usage.api_calls
        self.input_tokens += usage.input_tokens
        self.output_tokens += usage.output_tokens
        self.reasoning_tokens += usage.reasoning_tokens
        self.estimated_flag_count += int(usage.estimated)


class UsageLedger:
    """Per-role call and token totals backed by an append-only call log.

    ``record_call`` is serialized by a lock so concurrent evaluators can share
    one ledger. When ``log_path`` is given each call is also appended to that
    file and flushed immediately.
    """

    def __init__(self, log_path: str | Path | None = None):
        self.totals: dict[str, RoleTotals] = {}
        self.calls: list[dict[str, Any]] = []
        self.log_path = Path(log_path) if log_path else None
        self._lock = threading.Lock()

    def record_call(self, role: str, usage: Usage) -> "UsageLedger":
        entry = {"role": role, **asdict(usage)}
        with self._lock:
            self.totals.setdefault(role, RoleTotals()).add(usage)
            self.calls.append(entry)
            if self.log_path is not None:
                with open(self.log_path, "a", encoding="utf-8") as fh:
                    fh.write(dumps(entry) + "\n")
        return self

    __call__ = record_call

    @classmethod
    def from_calls(cls, entries: Iterable[Mapping[str, Any]], log_path: str | Path | None = None) -> "UsageLedger":
        ledger = cls()
        for e in entries:
            usage = Usage(
                input_tokens=e["input_tokens"],
                output_tokens=e["output_tokens"],
                reasoning_tokens=e.get("reasoning_tokens", 0),
                api_calls=e.get("api_calls", 1),
                estimated=e.get("estimated", False),
            )
            ledger.record_call(e["role"], usage)
        ledger.log_path = Path(log_path) if log_path else None
        return ledger

    @classmethod
    def from_log(cls, path: str | Path) -> "UsageLedger":
        path = Path(path)
        entries = []
        if path.exists():
            for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
                if line.strip():
                    try:
                        entries.append(json.loads(line))
                    except json.JSONDecodeError as exc:
                        raise ValueError(f"{path}:{lineno}: corrupt call record") from exc
        return cls.from_calls(entries, log_path=path)

    def snapshot(self) -> dict[str, dict[str, int]]:
        with self._lock:
            return {role: asdict(t) for role, t in sorted(self.totals.items())}

    def role(self, role: str) -> RoleTotals:
        return self.totals.get(role, RoleTotals())

    @property
    def total_calls(self) -> int:
        return sum(t.api_calls for t in self.totals.values())


def record_call(ledger: UsageLedger, role: str, usage: Usage) -> UsageLedger:
    return ledger.record_call(role, usage)


@dataclass(frozen=True)
class RolePrice:
    input_per_million: Fraction
    output_per_million: Fraction
    reasoning_excluded: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "input_per_million", _money(self.input_per_million))
        object.__setattr__(self, "output_per_million", _money(self.output_per_million))
        if self.input_per_million < 0 or self.output_per_million < 0:
            raise ValueError("prices must be non-negative")


def _money(x: Any) -> Fraction:
    # str() first so 0.27 means exactly 27/100
    return x if isinstance(x, Fraction) else Fraction(str(x))


@dataclass(frozen=True)
class PricingTable:
    """Dollar prices per million tokens, per role."""

    roles: dict[str, RolePrice] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: Mapping[str, Mapping[str, Any]]) -> "PricingTable":
        return cls(
            {
                role: RolePrice(
                    p.get("input_per_million", p.get("input")),
                    p.get("output_per_million", p.get("output")),
                    bool(p.get("reasoning_excluded", False)),
                )
                for role, p in d.items()
            }
        )

    def to_dict(self) -> dict[str, dict[str, Any]]:
        return {
            role: {
                "input_per_million": str(p.input_per_million),
                "output_per_million": str(p.output_per_million),
                "reasoning_excluded": p.reasoning_excluded,
            }
            for role, p in sorted(self.roles.items())
        }


# DeepSeek API prices (USD per 1M tokens) for a V3 base and an R1 optimizer.
# The base input rate blends cache hits and misses; the cache-miss list price
# is 0.27. R1 reasoning tokens are not billed here.
DEEPSEEK_V3_R1 = PricingTable(
    {
        "base": RolePrice(Fraction("0.15"), Fraction("1.10")),
        "optimizer": RolePrice(Fraction("0.55"), Fraction("2.19"), reasoning_excluded=True),
    }
)


@dataclass(frozen=True)
class CostEstimate:
    per_role: dict[str, Fraction]

    @property
    def total(self) -> Fraction:
        return sum(self.per_role.values(), Fraction(0))

    def __add__(self, other: "CostEstimate") -> "CostEstimate":
        roles = set(self.per_role) | set(other.per_role)
        return CostEstimate(
            {r: self.per_role.get(r, Fraction(0)) + other.per_role.get(r, Fraction(0)) for r in sorted(roles)}
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "per_role": {r: f"{float(v):.4f}" for r, v in sorted(self.per_role.items())},
            "total": f"{float(self.total):.4f}",
        }


def estimate_cost(ledger: UsageLedger | Mapping[str, Mapping[str, int]], pricing: PricingTable) -> CostEstimate:
    """role cost = input * p_in / 1e6 + billable output * p_out / 1e6.

    Billable output drops reasoning tokens for roles priced as
    ``reasoning_excluded``. Accepts a ledger or a ``snapshot()`` mapping.
    """
    totals = ledger.snapshot() if isinstance(ledger, UsageLedger) else ledger
    per_role: dict[str, Fraction] = {}
    for role, t in sorted(totals.items()):
        if role not in pricing.roles:
            raise KeyError(f"no price configured for role {role!r}")
        price = pricing.roles[role]
        out = t["output_tokens"]
        if price.reasoning_excluded:
            out -= t.get("reasoning_tokens", 0)
        per_role[role] = (t["input_tokens"] * price.input_per_million + out * price.output_per_million) / MILLION
    return CostEstimate(per_role)


def write_json_atomic(path: str | Path, data: Any) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(data, fh, sort_keys=True, ensure_ascii=False, indent=1)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


class RunDirectory:
    """File layout of one optimization run."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    trace = property(lambda self: self.root / TRACE_FILE)
    calls = property(lambda self: self.root / CALLS_FILE)
    ledger = property(lambda self: self.root / LEDGER_FILE)
    best_prompt = property(lambda self: self.root / BEST_PROMPT_FILE)
    checkpoint = property(lambda self: self.root / CHECKPOINT_FILE)
    convergence = property(lambda self: self.root / CONVERGENCE_FILE)

    def reset(self) -> None:
        for p in (self.trace, self.calls, self.ledger, self.best_prompt, self.checkpoint):
            p.unlink(missing_ok=True)

    def append_event(self, record: Mapping[str, Any]) -> None:
        with open(self.trace, "a", encoding="utf-8") as fh:
            fh.write(dumps(record) + "\n")
            fh.flush()

    def rewrite_trace(self, records: Iterable[Mapping[str, Any]]) -> None:
        tmp = self.trace.with_suffix(".log.tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            for r in records:
                fh.write(dumps(r) + "\n")
        os.replace(tmp, self.trace)

    def read_trace(self) -> list[dict[str, Any]]:
        if not self.trace.exists():
            raise FileNotFoundError(f"no trace in {self.root}")
        events = []
        for lineno, line in enumerate(self.trace.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{self.trace}:{lineno}: corrupt trace record ({exc.msg})") from exc
            if not isinstance(rec, dict) or "kind" not in rec or "step" not in rec:
                raise ValueError(f"{self.trace}:{lineno}: trace record lacks step/kind")
            events.append(rec)
        return events

    def save_checkpoint(self, data: Mapping[str, Any]) -> None:
        write_json_atomic(self.checkpoint, data)

    def load_checkpoint(self) -> dict[str, Any]:
        return json.loads(self.checkpoint.read_text(encoding="utf-8"))

    def write_summary(self, ledger: UsageLedger, pricing: PricingTable | None) -> None:
        data: dict[str, Any] = {"totals": ledger.snapshot()}
        if pricing is not None:
            data["pricing"] = pricing.to_dict()
            data["cost"] = estimate_cost(ledger, pricing).to_dict()
        write_json_atomic(self.ledger, data)

    def write_best_prompt(self, text: str) -> None:
        self.best_prompt.write_text(text, encoding="utf-8")
