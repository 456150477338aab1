"""Rendering of every text the base and optimizer models see.

Templates use ``{current prompt}``, ``{correct string}`` and ``{error string}``
slots. Slots are filled in a single pass, so braces inside a prompt or a model
response are copied through untouched.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

from .dataset import Sample, TaskSpec

START_MARKER = "<START>"
END_MARKER = "</START>"

CURRENT_PROMPT = "{current prompt}"
CORRECT_STRING = "{correct string}"
ERROR_STRING = "{error string}"

EMPTY_BLOCK = "(none)"

ORIGINS = ("initial", "refined", "compressed")


class TemplateError(ValueError):
    """A meta-prompt template is missing a slot or repeats one."""


class ExtractionError(ValueError):
    """Optimizer output had no usable <START>...</START> span."""


@dataclass(frozen=True)
class PromptText:
    text: str
    origin: str = "initial"
    parent_step: int | None = None

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError("prompt text must be non-empty")
        if self.origin not in ORIGINS:
            raise ValueError(f"unknown prompt origin {self.origin!r}")

    def __str__(self) -> str:
        return self.text


@dataclass(frozen=True)
class CaseRecord:
    index: int
    question_input: str
    response: str
    label: str
    prediction: str

    def __post_init__(self) -> None:
        if self.index < 1:
            raise ValueError("case index starts at 1")


def _check_slots(template: str, slots: Sequence[str], name: str) -> None:
    for slot in slots:
        n = template.count(slot)
        if n != 1:
            raise TemplateError(f"{name} template must contain {slot} exactly once (found {n})")
    if f"{START_MARKER} and {END_MARKER}" not in template:
        raise TemplateError(f"{name} template must ask for output within {START_MARKER} and {END_MARKER}")


@dataclass(frozen=True)
class MetaPromptTemplates:
    refine_template: str
    compress_template: str

    def __post_init__(self) -> None:
        _check_slots(self.refine_template, (CURRENT_PROMPT, CORRECT_STRING, ERROR_STRING), "refine")
        _check_slots(self.compress_template, (CURRENT_PROMPT,), "compress")

    @classmethod
    def default(cls) -> "MetaPromptTemplates":
        assets = resources.files("grace") / "assets"
        return cls(
            refine_template=(assets / "refine.txt").read_text(encoding="utf-8"),
            compress_template=(assets / "compress.txt").read_text(encoding="utf-8"),
        )

    @classmethod
    def from_files(
        cls, refine_path: str | Path | None = None, compress_path: str | Path | None = None
    ) -> "MetaPromptTemplates":
        base = cls.default()
        return cls(
            refine_template=Path(refine_path).read_text(encoding="utf-8") if refine_path else base.refine_template,
            compress_template=Path(compress_path).read_text(encoding="utf-8") if compress_path else base.compress_template,
        )


def _fill(template: str, values: dict[str, str]) -> str:
    pattern = re.compile("|".join(re.escape(k) for k in values))
    return pattern.sub(lambda m: values[m.group(0)], template)


def render_options(options: Sequence[tuple[str, str]]) -> str:
    return "\n".join(f"({key}) {text}" for key, text in options)


def assemble_task_input(prompt: PromptText | str, sample: Sample, spec: TaskSpec) -> str:
    """Base-model input: prompt, question, optional task suffix, answer format.

    Blocks are separated by one blank line. An empty or missing suffix template
    drops the suffix block entirely.
    """
    blocks = [str(prompt), sample.question]
    suffix = spec.task_suffix_template
    if suffix and suffix.strip():
        if "{options}" in suffix:
            suffix = suffix.replace("{options}", render_options(sample.options or ()))
        blocks.append(suffix)
    blocks.append(spec.answer_format)
    return "\n\n".join(blocks)


def render_case_block(cases: Sequence[CaseRecord]) -> str:
    if not cases:
        raise ValueError("render_case_block needs at least one case")
    return "\n\n".join(
        f"<{c.index}>\n"
        f"The model's input is:\n{c.question_input}\n"
        f"The model's response (solution) is:\n{c.response}\n"
        f"The correct label is: {c.label}\n"
        f"The model's final prediction is: {c.prediction}."
        for c in cases
    )


def render_refine_prompt(
    current: PromptText | str,
    successes: Sequence[CaseRecord],
    failures: Sequence[CaseRecord],
    templates: MetaPromptTemplates | None = None,
) -> str:
    """Fill the refinement meta-prompt. An empty case list renders as ``(none)``."""
    templates = templates or MetaPromptTemplates.default()
    return _fill(
        templates.refine_template,
        {
            CURRENT_PROMPT: str(current),
            CORRECT_STRING: render_case_block(successes) if successes else EMPTY_BLOCK,
            ERROR_STRING: render_case_block(failures) if failures else EMPTY_BLOCK,
        },
    )


def render_compress_prompt(current: PromptText | str, templates: MetaPromptTemplates | None = None) -> str:
    if not str(current).strip():
        raise ValueError("prompt text must be non-empty")
    templates = templates or MetaPromptTemplates.default()
    return _fill(templates.compress_template, {CURRENT_PROMPT: str(current)})


def extract_candidate(
    optimizer_output: str, origin: str = "refined", parent_step: int | None = None
) -> PromptText:
    """Return the span between the last <START> and the next </START>, trimmed."""
    start = optimizer_output.rfind(START_MARKER)
    if start < 0:
        raise ExtractionError("no <START> marker in optimizer output")
    body_start = start + len(START_MARKER)
    end = optimizer_output.find(END_MARKER, body_start)
    if end < 0:
        raise ExtractionError("no </START> after the last <START>")
    body = optimizer_output[body_start:end].strip()
    if not body:
        raise ExtractionError("empty candidate between markers")
    return PromptText(body, origin=origin, parent_step=parent_step)
