import pytest
from hypothesis import given
from hypothesis import strategies as st

from grace.dataset import Sample, TaskSpec
from grace.prompts import (
    EMPTY_BLOCK,
    CaseRecord,
    ExtractionError,
    MetaPromptTemplates,
    PromptText,
    TemplateError,
    assemble_task_input,
    extract_candidate,
    render_case_block,
    render_compress_prompt,
    render_refine_prompt,
)

SPEC = TaskSpec(name="t", metric="accuracy", answer_format="Box it.", initial_prompt="Solve.")


def case(i, response="resp"):
    return CaseRecord(i, f"input {i}", response, "A", "B")


def test_no_suffix_gives_three_blocks():
    text = assemble_task_input(PromptText("Solve."), Sample(id="0", question="Q?", gold="a"), SPEC)
    assert text == "Solve.\n\nQ?\n\nBox it."


def test_empty_suffix_equals_no_suffix():
    sample = Sample(id="0", question="Q?", gold="a")
    with_empty = TaskSpec(name="t", metric="accuracy", answer_format="Box it.", initial_prompt="x", task_suffix_template="")
    assert assemble_task_input("Solve.", sample, with_empty) == assemble_task_input("Solve.", sample, SPEC)


def test_options_rendered_one_per_line():
    spec = TaskSpec(name="t", metric="accuracy", answer_format="Box it.", initial_prompt="x",
                    task_suffix_template="Options:\n{options}")
    sample = Sample(id="0", question="Q?", gold="B", options=(("A", "yes"), ("B", "no")))
    assert assemble_task_input("Solve.", sample, spec) == "Solve.\n\nQ?\n\nOptions:\n(A) yes\n(B) no\n\nBox it."


def test_case_block_single():
    assert render_case_block([case(1)]) == (
        "<1>\nThe model's input is:\ninput 1\nThe model's response (solution) is:\nresp\n"
        "The correct label is: A\nThe model's final prediction is: B."
    )


def test_case_block_order_and_multiline():
    text = render_case_block([case(1), case(2, "line one\nline two"), case(3)])
    assert [line for line in text.splitlines() if line.startswith("<")] == ["<1>", "<2>", "<3>"]
    assert "is:\nline one\nline two\nThe correct" in text


def test_case_block_empty_rejected():
    with pytest.raises(ValueError):
        render_case_block([])


def test_refine_inlines_blocks_and_sentinel():
    text = render_refine_prompt(PromptText("Do {x} now."), [], [case(1)])
    assert '"Do {x} now."' in text
    assert f"following examples:\n{EMPTY_BLOCK}\nIt failed" in text
    assert "<1>\nThe model's input is:\ninput 1" in text


def test_slot_text_in_prompt_not_reexpanded():
    text = render_refine_prompt(PromptText("Keep {error string} literal."), [case(1)], [case(2)])
    assert "Keep {error string} literal." in text
    assert text.count("<2>") == 1


def test_template_missing_slot():
    base = MetaPromptTemplates.default()
    with pytest.raises(TemplateError, match="error string"):
        MetaPromptTemplates(base.refine_template.replace("{error string}", ""), base.compress_template)


def test_template_files_override(tmp_path):
    refine = tmp_path / "r.txt"
    refine.write_text("P={current prompt} S={correct string} F={error string} within <START> and </START>.")
    templates = MetaPromptTemplates.from_files(refine_path=refine)
    assert render_refine_prompt("p", [case(1)], [case(2)], templates).startswith("P=p S=<1>")


def test_compress_render_pure_and_rejects_blank():
    assert render_compress_prompt("Be brief.") == render_compress_prompt("Be brief.")
    assert '"Be brief."' in render_compress_prompt("Be brief.")
    with pytest.raises(ValueError):
        render_compress_prompt("   ")
    with pytest.raises(ValueError):
        PromptText("  ")


def test_extract_simple_and_with_reasoning():
    assert extract_candidate("...<START>Do X carefully.</START>").text == "Do X carefully."
    out = extract_candidate("Let me think <about> it.\n<START>\n  Be exact.  \n</START>\nDone.", origin="compressed")
    assert out.text == "Be exact." and out.origin == "compressed"


def test_extract_last_pair():
    output = "<START>first</START> middle <START>second</START> tail"
    # manual slice of the last pair
    start = output.rindex("<START>") + len("<START>")
    assert extract_candidate(output).text == output[start : output.index("</START>", start)] == "second"


@pytest.mark.parametrize("bad", ["no markers", "<START>unclosed", "<START>   </START>", "</START>x<START>"])
def test_extract_failures(bad):
    with pytest.raises(ExtractionError):
        extract_candidate(bad)


@given(st.text(alphabet=st.characters(blacklist_characters="<>"), min_size=1).filter(str.strip), st.text(), st.text())
def test_extract_roundtrip(body, before, after):
    before = before.replace("<START>", "")
    assert extract_candidate(f"{before}<START>{body}</START>{after}").text == body.strip()
