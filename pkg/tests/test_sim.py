import math

from grace import EngineConfig, Gateway, GraceEngine
from grace.prompts import CaseRecord, extract_candidate, render_compress_prompt, render_refine_prompt
from grace.sim import DISTRACTORS, make_synthetic_task, synthetic_base_respond, synthetic_optimizer_respond

TASK = make_synthetic_task(n_keywords=6, n_samples=200, noise_seed=3)
ALL = " ".join(TASK.keyword_set)


def correct_count(prompt):
    return sum(f"\\boxed{{{s.gold}}}" in synthetic_base_respond(TASK, prompt, s) for s in TASK.samples)


def test_full_and_zero_coverage():
    assert correct_count(f"Answer using {ALL}.") == 200
    assert correct_count("Answer the question.") == 0


def test_half_coverage_binomial():
    prompt = "Answer with " + " ".join(TASK.keyword_set[:3])
    assert TASK.coverage(prompt) == 0.5
    # 3 sigma of Binomial(200, 1/2)
    assert abs(correct_count(prompt) - 100) <= 3 * math.sqrt(200 * 0.25)


def test_responses_deterministic():
    s = TASK.samples[0]
    assert synthetic_base_respond(TASK, "alpha", s) == synthetic_base_respond(TASK, "alpha", s)


def case(i):
    return CaseRecord(i, "in", "out", "yes", "no")


def test_refine_adds_missing_keyword():
    prompt = "Use " + " ".join(k for k in TASK.keyword_set if k != "alpha")
    out = synthetic_optimizer_respond(TASK, render_refine_prompt(prompt, [case(1)], [case(1)]))
    assert "alpha" in extract_candidate(out).text.split()


def test_compress_strips_distractors():
    prompt = f"basically Use alpha honestly bravo literally"
    out = extract_candidate(synthetic_optimizer_respond(TASK, render_compress_prompt(prompt))).text
    assert out == "Use alpha bravo"
    assert not set(out.split()) & set(DISTRACTORS)


def test_grace_run_improves_coverage():
    improved = 0
    for seed in range(20):
        task = make_synthetic_task(noise_seed=seed)
        config = EngineConfig(max_iters=40, seed=seed, eval_concurrency=1)
        result = GraceEngine(config, task.splits(40, 40), task.spec, Gateway(task.providers(seed))).run()
        final, initial = task.coverage(result.best_prompt.text), task.coverage(task.spec.initial_prompt)
        assert final >= initial
        improved += final > initial
    assert improved >= 19
