import csv
import json
from fractions import Fraction

import pytest
import yaml

from grace.cli import EXIT_ABORTED, EXIT_CONFIG, EXIT_OK, cmd_report, cmd_run, load_config, main
from grace.dataset import save_samples
from grace.sim import make_synthetic_task
from grace.telemetry import PricingTable, UsageLedger, estimate_cost

KEYWORDS = ["alpha", "bravo", "charlie", "delta", "echo", "foxtrot"]


def write_config(tmp_path, **changes):
    task = make_synthetic_task(noise_seed=2)
    save_samples(task.samples, tmp_path / "data.jsonl")
    cfg = {
        "task": {
            "name": "synthetic",
            "metric": "accuracy",
            "initial_prompt": "Answer the question.",
            "answer_format": "Put your answer within \\boxed{}.",
        },
        "dataset": {"path": "data.jsonl", "counts": [40, 40, 40], "seed": 1},
        "engine": {"max_iters": 10, "eval_concurrency": 2, "early_stop_window": None},
        "providers": {
            "base": {"kind": "synthetic", "keywords": KEYWORDS, "noise_seed": 2},
            "optimizer": {"kind": "synthetic", "keywords": KEYWORDS, "seed": 4},
        },
        "pricing": "deepseek-v3-r1",
        "output_dir": "run",
    }
    for key, value in changes.items():
        section, _, field = key.partition("__")
        if field:
            cfg[section][field] = value
        else:
            cfg[section] = value
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(cfg), encoding="utf-8")
    return path


ARTIFACTS = {"trace.log", "calls.log", "ledger.json", "best_prompt.txt", "checkpoint.json"}


def test_run_populates_run_dir(tmp_path, capsys):
    assert cmd_run(write_config(tmp_path)) == EXIT_OK
    assert ARTIFACTS <= {p.name for p in (tmp_path / "run").iterdir()}
    out = capsys.readouterr().out
    assert "best validation score:" in out and "test score of best prompt:" in out


def test_run_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir(), b.mkdir()
    assert cmd_run(write_config(a)) == cmd_run(write_config(b)) == EXIT_OK
    # calls.log line order follows thread scheduling; its totals do not
    for name in ("trace.log", "ledger.json", "best_prompt.txt"):
        assert (a / "run" / name).read_bytes() == (b / "run" / name).read_bytes()


def test_overrides_beat_config(tmp_path):
    path = write_config(tmp_path)
    assert main(["run", "--config", str(path), "--max-iters", "3", "--k", "1", "--seed", "5"]) == EXIT_OK
    checkpoint = json.loads((tmp_path / "run" / "checkpoint.json").read_text())
    assert checkpoint["step"] == 3
    assert checkpoint["config"]["compression_trigger"] == 1 and checkpoint["config"]["seed"] == 5


def test_missing_dataset_is_config_error_before_calls(tmp_path, capsys):
    path = write_config(tmp_path, dataset__path="nowhere.jsonl")
    assert cmd_run(path) == EXIT_CONFIG
    assert "dataset file not found" in capsys.readouterr().err
    assert not (tmp_path / "run").exists()


@pytest.mark.parametrize(
    "changes, message",
    [
        ({"engine": {"max_iters": 0}}, "max_iters"),
        ({"providers": {"base": {"kind": "synthetic", "keywords": KEYWORDS}}}, "role 'optimizer'"),
        ({"providers__base": {"kind": "carrier-pigeon"}}, "unknown provider kind"),
        ({"pricing": "free-lunch"}, "pricing preset"),
        ({"dataset__counts": [100, 100, 0]}, "only 120 available"),
    ],
)
def test_config_errors(tmp_path, changes, message):
    path = write_config(tmp_path, **changes)
    with pytest.raises(ValueError, match=message):
        load_config(path)


def test_dry_run_makes_no_calls(tmp_path, capsys):
    assert main(["run", "--config", str(write_config(tmp_path)), "--dry-run"]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.startswith("Your task is to optimize the current prompt")
    assert "<pending>" in out
    assert not (tmp_path / "run").exists()


def test_scripted_provider_and_abort_then_resume(tmp_path, capsys):
    script = [{"match": "*", "response": "<START>Answer with alpha.</START>"}]
    path = write_config(tmp_path, providers__optimizer={"kind": "scripted", "script": script})
    assert cmd_run(path) == EXIT_ABORTED
    assert "rerun with --resume" in capsys.readouterr().err
    checkpoint = json.loads((tmp_path / "run" / "checkpoint.json").read_text())
    assert checkpoint["step"] == 1

    # swap in a longer script, as an operator would after fixing the cause
    script_file = tmp_path / "script.yaml"
    script_file.write_text(yaml.safe_dump([{"match": None, "response": f"<START>Answer with alpha {w}.</START>"} for w in KEYWORDS * 2]))
    path = write_config(tmp_path, providers__optimizer={"kind": "scripted", "script_file": "script.yaml"})
    assert main(["run", "--config", str(path), "--resume"]) == EXIT_OK
    trace = [json.loads(line) for line in (tmp_path / "run" / "trace.log").read_text().splitlines()]
    assert [e["step"] for e in trace] == list(range(1, 11))


def test_report_series_counts_and_cost(tmp_path, capsys):
    # refinements echo the prompt back (a tie, so rejected); compression answers separately
    script = [{"match": "cleaner, more concise", "response": "<START>Answer with alpha.</START>"}] * 5
    script += [{"match": "*", "response": "<START>Answer the question.</START>"}] * 10
    path = write_config(
        tmp_path,
        engine={"max_iters": 10, "compression_trigger": 2, "early_stop_window": None},
        providers__optimizer={"kind": "scripted", "script": script},
    )
    assert cmd_run(path) == EXIT_OK
    capsys.readouterr()
    run_dir = tmp_path / "run"
    assert cmd_report(run_dir) == EXIT_OK
    out = capsys.readouterr().out

    rows = list(csv.DictReader((run_dir / "convergence.csv").open()))
    assert 1 <= len(rows) <= 10
    values = [Fraction(r["best_val_score_exact"]) for r in rows]
    assert values == sorted(values)

    trace = [json.loads(line) for line in (run_dir / "trace.log").read_text().splitlines()]
    n_compressed = sum(e["kind"] == "compressed" for e in trace)
    assert n_compressed >= 1 and f"compressed={n_compressed}" in out

    summary = json.loads((run_dir / "ledger.json").read_text())
    ledger = UsageLedger.from_log(run_dir / "calls.log")
    expected = estimate_cost(ledger, PricingTable.from_dict(summary["pricing"])).to_dict()
    assert f"  total: {expected['total']}" in out
    for role, dollars in expected["per_role"].items():
        assert f"  {role}: {dollars}" in out


def test_report_corrupt_trace(tmp_path, capsys):
    run_dir = tmp_path / "run"
    run_dir.mkdir()
    (run_dir / "trace.log").write_text('{"step": 1, "kind": "accepted"}\nnot json\n')
    assert cmd_report(run_dir) == EXIT_CONFIG
    assert "trace.log:2" in capsys.readouterr().err
