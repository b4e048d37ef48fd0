"""Command-line entry point.

Subcommands: synth, build-dataset, forecast, evaluate, train-toy, judge,
advantages. Exit codes: 0 ok, 1 input error, 2 integrity violation,
3 endpoint exhaustion.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import os
import re
import sys
import uuid
from pathlib import Path
from typing import Mapping

import yaml

from . import __version__
from .dataset import (
    AdapterConfig,
    DatasetConfig,
    adapt_records,
    build_questions,
    chronological_split_check,
    read_news_jsonl,
    read_questions_jsonl,
    summarize,
    write_questions_jsonl,
)
from .errors import InputError, SupplycastError
from .forecasters import (
    ChatClient,
    EndpointConfig,
    Forecast,
    FeatureConfig,
    RemoteBackend,
    forecast_many,
    make_backend,
    read_forecasts_jsonl,
    write_forecasts_jsonl,
)
from .index_core import EntityId, MonthStamp, read_index_csv
from .judge import BEHAVIORS, RubricAnnotation, aggregate_rubric, check_judge_config, judge_many
from .metrics import eval_report, relative_change, write_plot_data_csv, write_reliability_csv
from .synth import SynthConfig, generate, write_outputs
from .training import Rollout, TrainConfig, export_advantage_batch, train_toy, write_curve_csv, write_jsonl

log = logging.getLogger("supplycast")

_ENV_REF = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")
_SECRET_KEY = re.compile(r"(api_key|token|secret)$", re.IGNORECASE)


# ---------------------------------------------------------------- config


def _interpolate_secrets(node, key=""):
    """Expand ``${VAR}`` from the environment, but only under secret-named keys."""
    if isinstance(node, dict):
        return {k: _interpolate_secrets(v, k) for k, v in node.items()}
    if isinstance(node, list):
        return [_interpolate_secrets(v, key) for v in node]
    if isinstance(node, str) and _SECRET_KEY.search(str(key)):
        def sub(m):
            if m.group(1) not in os.environ:
                raise InputError(f"environment variable {m.group(1)} is not set")
            return os.environ[m.group(1)]
        return _ENV_REF.sub(sub, node)
    return node


def _apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise InputError(f"--set expects key=value, got {assignment!r}")
    dotted, raw = assignment.split("=", 1)
    node = cfg
    keys = dotted.strip().split(".")
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = yaml.safe_load(raw)


def load_config(path: str | None, overrides=()) -> dict:
    cfg: dict = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                cfg = yaml.safe_load(fh) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise InputError(f"cannot read config {path}: {exc}") from None
        if not isinstance(cfg, dict):
            raise InputError(f"config {path} must be a mapping")
    for a in overrides or ():
        _apply_override(cfg, a)
    return _interpolate_secrets(cfg)


def _redact(node, key=""):
    if isinstance(node, dict):
        return {k: _redact(v, k) for k, v in node.items()}
    if isinstance(node, list):
        return [_redact(v, key) for v in node]
    if _SECRET_KEY.search(str(key)) and node:
        return "***"
    return node


# ---------------------------------------------------------------- manifest


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Owns an output directory and writes its single ``manifest.json``."""

    def __init__(self, command: str, out_dir, config: Mapping, inputs=()):
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = {
            "run_id": uuid.uuid4().hex,
            "command": command,
            "config": _redact(json.loads(json.dumps(config, default=str))),
            "inputs": {str(p): file_digest(p) for p in inputs},
            "started": dt.datetime.now(dt.timezone.utc).isoformat(),
            "tool_version": __version__,
        }

    def finish(self, **extra):
        self.manifest.update(extra)
        self.manifest["finished"] = dt.datetime.now(dt.timezone.utc).isoformat()
        (self.out / "manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        cfg["seed"] = args.seed
    synth_cfg = SynthConfig.from_dict(cfg)
    run = Run("synth", args.out, synth_cfg.to_dict(), [args.config] if args.config else [])
    meta = write_outputs(generate(synth_cfg), run.out)
    run.finish(boundary=meta["boundary"])
    print(json.dumps(meta["counts"], sort_keys=True))
    return 0


def _dataset_config(cfg: Mapping, args) -> DatasetConfig:
    dc = DatasetConfig()
    start = args.start or cfg.get("start")
    if start:
        dc.start = MonthStamp.parse(start)
    if args.max_articles is not None or "max_articles" in cfg:
        dc.max_articles = int(args.max_articles if args.max_articles is not None else cfg["max_articles"])
    dc.strict_threshold = bool(args.strict_threshold or cfg.get("strict_threshold", False))
    if cfg.get("sigma_start"):
        dc.sigma_start = MonthStamp.parse(cfg["sigma_start"])
    dc.require_news = bool(cfg.get("require_news", False))
    for rel in cfg.get("related", []) or []:
        src = EntityId.from_dict(rel["entity"])
        dc.related[src] = [EntityId.from_dict(e) for e in rel["related"]]
    return dc


def cmd_build_dataset(args) -> int:
    cfg = load_config(args.config, args.set)
    inputs = [p for p in (args.index, args.news, args.external, args.adapter, args.config) if p]
    run = Run("build-dataset", args.out, {**cfg, **{k: v for k, v in vars(args).items() if k != "func"}}, inputs)
    if args.external:
        if not args.adapter:
            raise InputError("--external requires --adapter")
        adapter = AdapterConfig.from_dict(load_config(args.adapter))
        if args.boundary:
            adapter.boundary = MonthStamp.parse(args.boundary)
        questions = adapt_records(_read_records(args.external), adapter)
    else:
        if not (args.index and args.news and args.boundary):
            raise InputError("build-dataset needs --index, --news and --boundary (or --external with --adapter)")
        boundary = MonthStamp.parse(args.boundary)
        questions = build_questions(
            read_index_csv(args.index), read_news_jsonl(args.news), boundary, _dataset_config(cfg, args)
        )
    report = chronological_split_check(questions)
    for w in report["warnings"]:
        print(f"warning: {w}", file=sys.stderr)
    write_questions_jsonl(questions, run.out / "questions.jsonl")
    _write_json(run.out / "split_report.json", report)
    summary = {"all": summarize(questions).to_dict(), **report["splits"]}
    _write_json(run.out / "summary.json", summary)
    run.finish(n_questions=len(questions))
    print(json.dumps({s: summary[s]["n_questions"] for s in summary}, sort_keys=True))
    return 0


def _read_records(path: str) -> list[dict]:
    if path.endswith(".csv"):
        import csv

        with open(path, newline="", encoding="utf-8") as fh:
            return list(csv.DictReader(fh))
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _select(questions, split: str):
    if split == "all":
        return questions
    return [q for q in questions if q.split == split]


def cmd_forecast(args) -> int:
    cfg = load_config(args.backend_config, args.set)
    representation = cfg.get("news_representation", "full")
    run = Run("forecast", args.out, {**cfg, "split": args.split, "news_representation": representation},
              [args.questions, args.backend_config])
    questions = _select(read_questions_jsonl(args.questions), args.split)
    out_path = run.out / "forecasts.jsonl"
    done = {f.question_id for f in read_forecasts_jsonl(out_path)} if out_path.exists() else set()
    todo = [q for q in questions if q.id not in done]
    if done:
        log.info("resuming: %d already forecast, %d to go", len(done), len(todo))

    backend = make_backend(cfg, transcript_path=run.out / "transcripts.jsonl")
    parallelism = backend.config.max_parallelism if isinstance(backend, RemoteBackend) else 1
    failures_path = run.out / "failures.jsonl"
    rollouts_path = run.out / "rollouts.jsonl"
    fh_out = open(out_path, "a", encoding="utf-8")

    def on_result(res):
        if isinstance(res, Forecast):
            fh_out.write(json.dumps(res.to_dict(), sort_keys=True) + "\n")
            fh_out.flush()
        else:
            with open(failures_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(res.__dict__, sort_keys=True) + "\n")
        outputs = getattr(backend, "rollouts", {}).pop(res.question_id, None)
        if outputs and len(outputs) > 1:
            with open(rollouts_path, "a", encoding="utf-8") as fh:
                for i, o in enumerate(outputs):
                    fh.write(json.dumps({"question_id": res.question_id, "rollout_index": i, "output": o},
                                        sort_keys=True) + "\n")

    try:
        _, failures = forecast_many(todo, backend, parallelism, representation, on_result)
    finally:
        fh_out.close()
        backend.close()
        # keep the file sorted and free of duplicates so reruns are byte-stable
        all_fc = {f.question_id: f for f in read_forecasts_jsonl(out_path)}
        write_forecasts_jsonl(list(all_fc.values()), out_path)
        run.finish(n_forecasts=len(all_fc), resumed_from=len(done))
    print(json.dumps({"forecasts": len(all_fc), "failures": len(failures), "skipped": len(done)}))
    return 0


def cmd_evaluate(args) -> int:
    run = Run("evaluate", args.out, {k: v for k, v in vars(args).items() if k != "func"},
              [args.questions, *args.forecasts])
    questions = read_questions_jsonl(args.questions)
    if args.baseline_rate is not None:
        baseline = args.baseline_rate
    else:
        train_labels = [q.label for q in questions if q.split == "train" and q.label is not None]
        if not train_labels:
            raise InputError("no labeled training questions; pass --baseline-rate")
        baseline = sum(train_labels) / len(train_labels)
    pool = {q.id: q for q in _select(questions, args.split) if q.label is not None}
    unresolved = {q.id for q in questions if q.label is None}
    reports = []
    for path in args.forecasts:
        all_fcs = read_forecasts_jsonl(path)
        n_open = sum(f.question_id in unresolved for f in all_fcs)
        if n_open:
            log.warning("%s: ignoring %d forecast(s) for unresolved questions", path, n_open)
        fcs = [f for f in all_fcs if f.question_id in pool]
        if len(fcs) < len(pool):
            log.warning("%s covers %d of %d resolved questions", path, len(fcs), len(pool))
        fcs.sort(key=lambda f: f.question_id)
        names = sorted({f.backend for f in fcs if f.backend})
        name = names[0] if len(names) == 1 else Path(path).stem
        rep = eval_report(
            [f.probability for f in fcs],
            [pool[f.question_id].label for f in fcs],
            baseline,
            n_bins=args.n_bins,
            frac=args.frac,
            ids=[f.question_id for f in fcs],
            backend=name,
        )
        reports.append(rep)
    doc = {
        "split": args.split,
        "baseline_rate": baseline,
        "n_bins": args.n_bins,
        "frac": args.frac,
        "models": [r.to_dict() for r in reports],
    }
    if len(reports) > 1:
        doc["ece_relative_change"] = {
            f"{a.backend} vs {b.backend}": relative_change(a.ece, b.ece)
            for a in reports for b in reports if a is not b and b.ece > 0
        }
    _write_json(run.out / "report.json", doc)
    for i, r in enumerate(reports):
        write_reliability_csv(r.reliability, run.out / ("reliability.csv" if i == 0 else f"reliability_{i}.csv"))
    write_plot_data_csv(reports, run.out / "plot_data.csv")
    run.finish()
    for r in reports:
        print(f"{r.backend}: n={r.n} brier={r.brier:.4f} bss={r.bss_percent} ece={r.ece:.4f} "
              f"p@{args.frac:g}={r.precision_at_frac:.4f} (k={r.k_used})")
    return 0


def cmd_train_toy(args) -> int:
    cfg = load_config(args.config, args.set)
    train_cfg = dict(cfg.get("train", cfg))
    feat_cfg = FeatureConfig.from_dict(cfg.get("features", {})) if "features" in cfg else FeatureConfig()
    train_cfg.pop("features", None)
    if args.seed is not None:
        train_cfg["seed"] = args.seed
    tc = TrainConfig.from_dict(train_cfg)
    run = Run("train-toy", args.out, {"train": tc.__dict__, "features": feat_cfg.to_dict()},
              [p for p in (args.questions, args.config) if p])
    questions = [q for q in read_questions_jsonl(args.questions) if q.split == "train"]
    policy, curve = train_toy(questions, tc, feat_cfg)
    policy.save(run.out / "policy.json")
    write_curve_csv(curve, run.out / "curve.csv")
    run.finish(final_mean_reward=curve[-1]["mean_reward"])
    print(json.dumps({"epochs": len(curve), "final_mean_reward": curve[-1]["mean_reward"]}))
    return 0


def _read_annotations(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def cmd_judge(args) -> int:
    if args.annotations:
        run = Run("judge", args.out, {"annotations": args.annotations}, [args.annotations])
        rows = _read_annotations(args.annotations)
    else:
        if not (args.forecasts and args.judge_config):
            raise InputError("judge needs --forecasts and --judge-config (or --annotations)")
        cfg = load_config(args.judge_config, args.set)
        endpoint = EndpointConfig.from_dict(cfg.get("endpoint", cfg))
        check_judge_config(endpoint)
        run = Run("judge", args.out, cfg, [args.forecasts, args.judge_config])
        forecasts = read_forecasts_jsonl(args.forecasts)
        traces = [(f.question_id, f.reasoning) for f in forecasts if f.reasoning.strip()]
        backend_of = {f.question_id: f.backend for f in forecasts}
        with ChatClient(endpoint, transcript_path=run.out / "transcripts.jsonl") as client:
            done, failed = judge_many(traces, client, endpoint.max_parallelism)
        rows = [{"question_id": k, "backend": backend_of[k], **a.to_dict()} for k, a in done]
        if failed:
            write_jsonl([{"question_id": k, "error": e} for k, e in failed], run.out / "failures.jsonl")
        write_jsonl(rows, run.out / "annotations.jsonl")
    groups: dict[str, list[RubricAnnotation]] = {}
    for r in rows:
        groups.setdefault(r.get("backend", ""), []).append(RubricAnnotation.from_dict(r))
    summary = {b: aggregate_rubric(a).to_dict() for b, a in sorted(groups.items())}
    _write_json(run.out / "summary.json", summary)
    run.finish()
    for b, s in summary.items():
        freqs = " ".join(f"{k}={s['frequencies'][k]:.2f}" for k in BEHAVIORS)
        print(f"{b or '(unnamed)'}: n={s['n_traces']} mean_score={s['mean_total_score']:.2f} {freqs}")
    return 0


def cmd_advantages(args) -> int:
    run = Run("advantages", args.out, {k: v for k, v in vars(args).items() if k != "func"},
              [args.rollouts, args.questions])
    labels = {q.id: q.label for q in read_questions_jsonl(args.questions)}
    with open(args.rollouts, encoding="utf-8") as fh:
        rollouts = [Rollout.from_dict(json.loads(line)) for line in fh if line.strip()]
    rows = export_advantage_batch(rollouts, labels, args.epsilon)
    write_jsonl(rows, run.out / "advantages.jsonl")
    run.finish(n_rows=len(rows))
    print(json.dumps({"rows": len(rows), "flagged": sum(r["unparseable"] for r in rows)}))
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="supplycast", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value (dotted keys allowed)")

    s = sub.add_parser("synth", help="generate a synthetic index + news corpus with an oracle table")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    common(s)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("build-dataset", help="build forecasting questions with a chronological split")
    s.add_argument("--index", help="index CSV")
    s.add_argument("--news", help="news JSONL")
    s.add_argument("--boundary", help="last training month, YYYY-MM")
    s.add_argument("--start", help="first prediction month (default 2022-01)")
    s.add_argument("--max-articles", type=int)
    s.add_argument("--strict-threshold", action="store_true", help="label with > instead of >=")
    s.add_argument("--external", help="external question table (JSONL or CSV)")
    s.add_argument("--adapter", help="YAML column mapping for --external")
    s.add_argument("--config")
    common(s)
    s.set_defaults(func=cmd_build_dataset)

    s = sub.add_parser("forecast", help="forecast questions with a backend (resumable)")
    s.add_argument("--questions", required=True)
    s.add_argument("--backend-config", required=True)
    s.add_argument("--split", default="test", choices=["train", "test", "unresolved", "all"])
    common(s)
    s.set_defaults(func=cmd_forecast)

    s = sub.add_parser("evaluate", help="score forecasts against resolved questions")
    s.add_argument("--questions", required=True)
    s.add_argument("--forecasts", required=True, nargs="+")
    s.add_argument("--split", default="test", choices=["train", "test", "all"])
    s.add_argument("--n-bins", type=int, default=10)
    s.add_argument("--frac", type=float, default=0.1)
    s.add_argument("--baseline-rate", type=float)
    common(s)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("train-toy", help="train the logistic toy policy on the log-score reward")
    s.add_argument("--questions", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    common(s)
    s.set_defaults(func=cmd_train_toy)

    s = sub.add_parser("judge", help="annotate reasoning traces with the six-behavior rubric")
    s.add_argument("--forecasts")
    s.add_argument("--judge-config")
    s.add_argument("--annotations", help="aggregate an existing annotation JSONL instead of calling a judge")
    common(s)
    s.set_defaults(func=cmd_judge)

    s = sub.add_parser("advantages", help="log-score rewards and group advantages for rollouts")
    s.add_argument("--rollouts", required=True)
    s.add_argument("--questions", required=True)
    s.add_argument("--epsilon", type=float, default=1e-4)
    common(s)
    s.set_defaults(func=cmd_advantages)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SupplycastError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
