# %% [markdown]
# # What the models see
#
# The base model receives the prompt, the question, an optional task suffix
# and the answer format, separated by blank lines.

# %%
from grace.dataset import Sample, TaskSpec
from grace.prompts import CaseRecord, assemble_task_input, extract_candidate, render_compress_prompt, render_refine_prompt

spec = TaskSpec(
    name="trec",
    metric="accuracy",
    answer_format="Put your answer option within \\boxed{}.",
    initial_prompt="Tag the text according to the primary topic of the question.",
    task_suffix_template="Options:\n{options}",
)
options = (("A", "Abbreviation"), ("B", "Entity"), ("C", "Description and abstract concept"),
           ("D", "Human being"), ("E", "Location"), ("F", "Numeric value"))
sample = Sample(id="0", question="Text: How far is it from Denver to Aspen?\nAssign a label for the preceding text",
                gold="F", options=options)
task_input = assemble_task_input(spec.initial_prompt, sample, spec)
print(task_input)

# %% [markdown]
# The refinement meta-prompt shows successful and failed cases side by side.

# %%
failure = CaseRecord(1, task_input, "Both are places.\n\\boxed{E}", "F", "E")
print(render_refine_prompt(spec.initial_prompt, [], [failure]))

# %% [markdown]
# The compression meta-prompt only needs the current prompt. Candidates are
# read from between the last pair of markers in the optimizer's reply.

# %%
print(render_compress_prompt(spec.initial_prompt))
reply = "Draft: <START>ignored</START>\nFinal: <START>Classify the question by its expected answer type.</START>"
print(extract_candidate(reply).text)
