"""Command line entry point: ``grace run`` and ``grace report``.

Example config (YAML)::

    task:
      name: cb
      metric: accuracy
      initial_prompt: "Read carefully the following premise and hypothesis ..."
      task_suffix_template: "Options:\\n{options}"
      answer_format: "Put your answer option within \\\\boxed{}."
    dataset:
      path: cb.jsonl
      counts: [125, 65, 56]
      seed: 0
    engine:
      max_iters: 80
      compression_trigger: 5
    providers:
      base: {kind: http, model: deepseek-chat, base_url: https://api.deepseek.com, api_key_env: DEEPSEEK_API_KEY}
      optimizer: {kind: http, model: deepseek-reasoner, base_url: https://api.deepseek.com, api_key_env: DEEPSEEK_API_KEY}
    pricing: deepseek-v3-r1
    output_dir: runs/cb

Relative paths are resolved against the config file's directory.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Sequence

import yaml

from .dataset import DatasetError, DatasetSplits, TaskSpec, load_samples, make_splits
from .engine import EngineConfig, GraceEngine, RunAborted
from .gateway import Gateway, HTTPChatProvider, RetryPolicy, ScriptedProvider
from .prompts import CaseRecord, MetaPromptTemplates, PromptText, TemplateError, assemble_task_input, render_refine_prompt
from .sim import SyntheticTask
from .telemetry import DEEPSEEK_V3_R1, PricingTable, RunDirectory, estimate_cost

logger = logging.getLogger("grace")

PRICING_PRESETS = {"deepseek-v3-r1": DEEPSEEK_V3_R1}

EXIT_OK, EXIT_ABORTED, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass
class RunSetup:
    spec: TaskSpec
    splits: DatasetSplits
    engine: EngineConfig
    gateway: Gateway
    templates: MetaPromptTemplates
    pricing: PricingTable | None
    output_dir: Path


def _path(base: Path, value: str | None) -> Path | None:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


def _provider(role: str, cfg: dict[str, Any], base: Path, samples) -> Any:
    kind = cfg.get("kind")
    if kind == "http":
        for key in ("model", "base_url"):
            if key not in cfg:
                raise ConfigError(f"providers.{role}: http provider needs {key!r}")
        return HTTPChatProvider(
            cfg["model"],
            cfg["base_url"],
            cfg.get("api_key_env"),
            timeout=float(cfg.get("timeout", 120)),
            extra_body=cfg.get("extra_body"),
        )
    if kind == "scripted":
        entries = cfg.get("script")
        if entries is None and cfg.get("script_file"):
            path = _path(base, cfg["script_file"])
            if not path.exists():
                raise ConfigError(f"providers.{role}: script file not found: {path}")
            entries = yaml.safe_load(path.read_text(encoding="utf-8"))
        if not entries:
            raise ConfigError(f"providers.{role}: scripted provider needs a non-empty script")
        return ScriptedProvider([(e.get("match"), e["response"]) for e in entries], provider_id=f"scripted-{role}")
    if kind == "synthetic":
        keywords = cfg.get("keywords")
        if not keywords:
            raise ConfigError(f"providers.{role}: synthetic provider needs 'keywords'")
        task = SyntheticTask(
            tuple(keywords),
            list(samples),
            noise_seed=int(cfg.get("noise_seed", 0)),
            distractor_rate=float(cfg.get("distractor_rate", 0.3)),
            drift_rate=float(cfg.get("drift_rate", 0.5)),
        )
        return task.base_provider() if role == "base" else task.optimizer_provider(int(cfg.get("seed", 0)))
    raise ConfigError(f"providers.{role}: unknown provider kind {kind!r}")


def load_config(path: str | Path, overrides: dict[str, Any] | None = None) -> RunSetup:
    """Parse and validate a run config. Makes no model calls."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    base = path.parent
    for section in ("task", "dataset", "providers"):
        if section not in cfg:
            raise ConfigError(f"config is missing the {section!r} section")

    try:
        spec = TaskSpec.from_dict(cfg["task"])
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"task: {exc}") from exc
    try:
        templates = MetaPromptTemplates.from_files(
            _path(base, cfg["task"].get("refine_template")), _path(base, cfg["task"].get("compress_template"))
        )
    except (OSError, TemplateError) as exc:
        raise ConfigError(f"task templates: {exc}") from exc

    ds = cfg["dataset"]
    data_path = _path(base, ds.get("path"))
    if data_path is None or not data_path.exists():
        raise ConfigError(f"dataset file not found: {data_path}")
    try:
        samples = load_samples(data_path, ds.get("format"))
        splits = make_splits(
            samples,
            tuple(ds.get("counts", (0, 0, 0))),
            int(ds.get("seed", 0)),
            test_cap=ds.get("test_cap", 1000),
            cap_mode=ds.get("cap_mode", "head"),
        )
    except DatasetError as exc:
        raise ConfigError(f"dataset: {exc}") from exc

    engine_cfg = dict(cfg.get("engine") or {})
    engine_cfg.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if engine_cfg.get("early_stop_window") == 0:
        engine_cfg["early_stop_window"] = None
    try:
        engine = EngineConfig.from_dict(engine_cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"engine: {exc}") from exc

    providers_cfg = cfg["providers"]
    providers = {}
    for role in ("base", "optimizer"):
        if role not in providers_cfg:
            raise ConfigError(f"providers: no provider configured for role {role!r}")
        providers[role] = _provider(role, providers_cfg[role], base, samples)
    retry = RetryPolicy(**cfg.get("retry", {}))
    gateway = Gateway(providers, retry=retry, max_in_flight=int(cfg.get("max_in_flight", 8)))

    pricing_cfg = cfg.get("pricing")
    if pricing_cfg is None:
        pricing = None
    elif isinstance(pricing_cfg, str):
        if pricing_cfg not in PRICING_PRESETS:
            raise ConfigError(f"unknown pricing preset {pricing_cfg!r}")
        pricing = PRICING_PRESETS[pricing_cfg]
    else:
        try:
            pricing = PricingTable.from_dict(pricing_cfg)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"pricing: {exc}") from exc

    output_dir = _path(base, cfg.get("output_dir", "runs/latest"))
    return RunSetup(spec, splits, engine, gateway, templates, pricing, output_dir)


def dry_run_text(setup: RunSetup) -> str:
    """First refinement meta-prompt, filled with placeholder training cases."""
    p0 = PromptText(setup.spec.initial_prompt)
    train = setup.splits.train

    def placeholders(samples, start):
        return [
            CaseRecord(i, assemble_task_input(p0, s, setup.spec), "<not evaluated: dry run>", s.gold, "<pending>")
            for i, s in enumerate(samples, start=start)
        ]

    n_s, n_f = setup.engine.n_success, setup.engine.n_failure
    return render_refine_prompt(p0, placeholders(train[:n_s], 1), placeholders(train[n_s : n_s + n_f], 1), setup.templates)


def cmd_run(config_path: str | Path, overrides: dict[str, Any] | None = None, *,
            resume: bool = False, dry_run: bool = False, out=None) -> int:
    out = out or sys.stdout
    try:
        setup = load_config(config_path, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if dry_run:
        print(dry_run_text(setup), file=out)
        return EXIT_OK
    engine = GraceEngine(
        setup.engine, setup.splits, setup.spec, setup.gateway,
        templates=setup.templates, run_dir=setup.output_dir, pricing=setup.pricing,
    )
    try:
        result = engine.run(resume=resume, evaluate_test=True)
    except RunAborted as exc:
        print(f"run aborted at step {exc.step}: {exc.__cause__}", file=sys.stderr)
        print(f"checkpoint kept in {setup.output_dir}; rerun with --resume", file=sys.stderr)
        return EXIT_ABORTED
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"run directory: {setup.output_dir}", file=out)
    print(f"steps: {result.state.step} ({result.stop_reason}), optimizer generations: {result.state.generations}", file=out)
    print(f"best validation score: {result.best_score.display()} (step {result.best_step})", file=out)
    if result.test_score is not None:
        print(f"test score of best prompt: {result.test_score.display()}", file=out)
    return EXIT_OK


def convergence_series(events: Sequence[dict[str, Any]]) -> list[tuple[int, Fraction]]:
    """(prompts generated so far, best validation score) after each generation."""
    series = []
    for e in events:
        if e["kind"] == "skipped_no_failures":
            continue
        series.append((e["generations"], Fraction(e["best_val_score"]["value"])))
    return series


def cmd_report(run_dir: str | Path, out=None) -> int:
    out = out or sys.stdout
    rd = RunDirectory(run_dir)
    try:
        events = rd.read_trace()
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    series = convergence_series(events)
    with open(rd.convergence, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["prompts_generated", "best_val_score", "best_val_score_exact"])
        for gen, value in series:
            writer.writerow([gen, f"{float(value):.6f}", str(value)])
    print(format_report(events, rd), file=out)
    return EXIT_OK


def format_report(events: Sequence[dict[str, Any]], rd: RunDirectory) -> str:
    buf = io.StringIO()
    kinds = Counter(e["kind"] for e in events)
    last = events[-1] if events else None
    buf.write(f"steps: {len(events)}\n")
    buf.write("events: " + ", ".join(f"{k}={kinds[k]}" for k in sorted(kinds)) + "\n")
    if last is not None:
        best = Fraction(last["best_val_score"]["value"])
        buf.write(f"best validation score: {float(best) * 100:.1f} ({best}) at step {last['best_step']}\n")
        buf.write(f"optimizer generations: {last['generations']}\n")
    buf.write(f"convergence data: {rd.convergence}\n")
    if rd.ledger.exists():
        summary = json.loads(rd.ledger.read_text(encoding="utf-8"))
        buf.write("usage:\n")
        for role, t in sorted(summary["totals"].items()):
            buf.write(
                f"  {role}: calls={t['api_calls']} input_tokens={t['input_tokens']} "
                f"output_tokens={t['output_tokens']} estimated={t['estimated_flag_count']}\n"
            )
        if "pricing" in summary:
            cost = estimate_cost(summary["totals"], PricingTable.from_dict(summary["pricing"])).to_dict()
            buf.write("cost (USD):\n")
            for role, dollars in cost["per_role"].items():
                buf.write(f"  {role}: {dollars}\n")
            buf.write(f"  total: {cost['total']}\n")
    return buf.getvalue().rstrip("\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grace", description="Prompt optimization with gated refinement and adaptive compression")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="launch or resume an optimization run")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--max-iters", type=int)
    p_run.add_argument("--k", type=int, help="consecutive rejections that trigger compression")
    p_run.add_argument("--n-success", type=int)
    p_run.add_argument("--n-failure", type=int)
    p_run.add_argument("--early-stop", type=int, help="stagnant steps before stopping (0 disables)")
    p_run.add_argument("--resume", action="store_true")
    p_run.add_argument("--dry-run", action="store_true", help="validate config and print the first meta-prompt")

    p_report = sub.add_parser("report", help="summarize a run directory")
    p_report.add_argument("run_dir")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        overrides = {
            "seed": args.seed,
            "max_iters": args.max_iters,
            "compression_trigger": args.k,
            "n_success": args.n_success,
            "n_failure": args.n_failure,
            "early_stop_window": args.early_stop,
        }
        return cmd_run(args.config, overrides, resume=args.resume, dry_run=args.dry_run)
    return cmd_report(args.run_dir)


if __name__ == "__main__":
    sys.exit(main())
