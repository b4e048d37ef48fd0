"""End-to-end run on synthetic data with a known answer.

synth -> build-dataset -> train-toy -> forecast (constant, toy, Bayes oracle)
-> evaluate. The oracle forecasts the generator's true event probability, so
it bounds what any forecaster can reach on the same test split.

Usage: python3 scripts/synthetic_pipeline.py [--out runs/synthetic] [--seed 0] [--entities 200]
"""

import argparse
import json
from pathlib import Path

import yaml

from supplycast.cli import main as cli
from supplycast.forecasters import Forecast, write_forecasts_jsonl
from supplycast.synth import read_oracle_csv


def step(*argv) -> None:
    code = cli([str(a) for a in argv])
    if code:
        raise SystemExit(f"step {argv[0]} failed with exit code {code}")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/synthetic")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--entities", type=int, default=200)
    args = ap.parse_args()
    out = Path(args.out)

    step("synth", "--out", out / "synth", "--seed", args.seed, "--set", f"n_entities={args.entities}")
    boundary = json.loads((out / "synth" / "synth_meta.json").read_text())["boundary"]
    step("build-dataset", "--index", out / "synth" / "index.csv", "--news", out / "synth" / "news.jsonl",
         "--boundary", boundary, "--out", out / "dataset")
    questions = out / "dataset" / "questions.jsonl"
    step("train-toy", "--questions", questions, "--out", out / "toy", "--seed", args.seed)

    rate = json.loads((out / "dataset" / "summary.json").read_text())["train"]["event_rate"]
    configs = {
        "constant": {"backend": "constant", "rate": rate},
        "toy": {"backend": "toy", "policy": str(out / "toy" / "policy.json")},
    }
    for name, cfg in configs.items():
        path = out / f"{name}.yaml"
        path.write_text(yaml.safe_dump(cfg))
        step("forecast", "--questions", questions, "--backend-config", path, "--out", out / f"forecast_{name}")

    oracle = [Forecast(r.question_id, r.p_true, "", "bayes_oracle")
              for r in read_oracle_csv(out / "synth" / "oracle.csv")]
    (out / "forecast_oracle").mkdir(parents=True, exist_ok=True)
    write_forecasts_jsonl(oracle, out / "forecast_oracle" / "forecasts.jsonl")

    step("evaluate", "--questions", questions, "--out", out / "evaluation", "--forecasts",
         *(out / f"forecast_{n}" / "forecasts.jsonl" for n in ("constant", "toy", "oracle")))


if __name__ == "__main__":
    main()
