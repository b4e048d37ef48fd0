"""Acceptance criteria 1-11, each at its stated tolerance.

Every test records a PASS/FAIL/SKIP line that is printed in the terminal
summary, then asserts.
"""

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from supplycast.cli import main
from supplycast.dataset import read_questions_jsonl
from supplycast.forecasters import read_forecasts_jsonl, sigmoid
from supplycast.index_core import EntityId, write_index_csv
from supplycast.judge import BEHAVIORS, RubricAnnotation, aggregate_rubric
from supplycast.metrics import brier, brier_skill, ece, eval_report, precision_at, reliability_bins
from supplycast.training import TrainConfig, fit_logistic, log_score_reward, mean_reward, reward_gradient

from conftest import ACCEPTANCE, series_from

FIXTURES = Path(__file__).parent / "fixtures"


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE.setdefault(n, []).append(("PASS" if ok else "FAIL", detail))
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


# ---------------------------------------------------------------- 1


@pytest.mark.parametrize("n_events, n", [(104, 1000), (47, 452)])
def test_c01_baseline_brier(n_events, n):
    labels = np.r_[np.ones(n_events), np.zeros(n - n_events)]
    b = brier(np.full(n, 0.149), labels)
    record(1, abs(b - 0.0952) <= 0.0002, f"constant 0.149 on event rate {n_events / n:.4f}: Brier {b:.5f}")


# ---------------------------------------------------------------- 2


def test_c02_bss_consistency():
    expected = {0.0791: 16.9, 0.1203: -26.4, 0.1433: -50.5}
    got = {m: 100 * brier_skill(m, 0.0952) for m in expected}
    ok = all(abs(got[m] - pct) <= 0.1 for m, pct in expected.items())
    record(2, ok, ", ".join(f"{m} -> {got[m]:+.2f}%" for m in expected))


# ---------------------------------------------------------------- 3


def test_c03_precision_denominator():
    n = 452
    expected = {16: 0.3478, 4: 0.0870, 6: 0.1304}
    rng = np.random.default_rng(0)
    details, ok = [], True
    for hits, target in expected.items():
        p = rng.random(n)
        top = np.argsort(-p)[:46]
        y = np.zeros(n)
        y[top[:hits]] = 1
        rest = np.setdiff1d(np.arange(n), top)
        y[rng.choice(rest, 30, replace=False)] = 1  # events outside the top decile don't count
        prec, k = precision_at(p, y, 0.1, [f"q{i:03d}" for i in range(n)])
        ok &= k == 46 and round(prec, 4) == target
        details.append(f"{hits}/{k}={prec:.4f}")
    record(3, ok, ", ".join(details))


# ---------------------------------------------------------------- 4


def test_c04_released_forecasts():
    """Runs only when a released forecast file and question file are provided."""
    fc = os.environ.get("SUPPLYCAST_RELEASED_FORECASTS")
    qs = os.environ.get("SUPPLYCAST_RELEASED_QUESTIONS")
    if not (fc and qs):
        ACCEPTANCE.setdefault(4, []).append(("SKIP", "released model forecasts not available; trained-model row out of scope"))
        pytest.skip("set SUPPLYCAST_RELEASED_FORECASTS and SUPPLYCAST_RELEASED_QUESTIONS to run")
    labels = {q.id: q.label for q in read_questions_jsonl(qs) if q.label is not None}
    fcs = [f for f in read_forecasts_jsonl(fc) if f.question_id in labels]
    r = eval_report([f.probability for f in fcs], [labels[f.question_id] for f in fcs], 0.149,
                    ids=[f.question_id for f in fcs])
    ok = round(r.brier, 4) == 0.0791 and round(r.ece, 4) == 0.0525
    record(4, ok, f"Brier {r.brier:.4f}, ECE {r.ece:.4f}")


# ---------------------------------------------------------------- 5


def test_c05_properness():
    t0 = time.perf_counter()
    grid = np.round(np.arange(1001) * 0.001, 3)
    found = {}
    for q in (0.1, 0.5, 0.9):
        exp = q * log_score_reward(grid, 1) + (1 - q) * log_score_reward(grid, 0)
        found[q] = float(grid[np.argmax(exp)])
    dt = time.perf_counter() - t0
    ok = all(abs(found[q] - q) <= 0.001 for q in found) and dt < 1.0
    record(5, ok, f"argmax {found} in {dt:.3f}s")


# ---------------------------------------------------------------- 6


def test_c06_calibration_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    p = rng.random(100_000)
    y = (rng.random(100_000) < p).astype(float)
    e = ece(p, y, 10)
    worst = max(abs(b.mean_predicted - b.empirical_rate) for b in reliability_bins(p, y, 10))
    dt = time.perf_counter() - t0
    record(6, e < 0.01 and worst < 0.02 and dt < 10, f"ECE {e:.4f}, worst bin gap {worst:.4f}, {dt:.2f}s")


# ---------------------------------------------------------------- 7


def test_c07_toy_training_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(17)
    s = rng.normal(size=5000)
    y = (rng.random(5000) < sigmoid(2.0 * s)).astype(float)
    X = np.c_[s, np.ones_like(s)]
    w, _ = fit_logistic(X, y, TrainConfig(learning_rate=0.5, epochs=150, batch_size=256, seed=0))
    trained = brier(sigmoid(X @ w), y)
    const = brier(np.full_like(y, y.mean()), y)
    dt = time.perf_counter() - t0
    ok = abs(w[0] - 2.0) <= 0.2 and trained < const and dt < 30
    record(7, ok, f"w={w[0]:.3f}, Brier {trained:.4f} vs constant {const:.4f}, {dt:.2f}s")


# ---------------------------------------------------------------- 8


def test_c08_gradient_check():
    rng = np.random.default_rng(64)
    X = np.c_[rng.normal(size=(64, 11)), np.ones(64)]
    y = (rng.random(64) < 0.25).astype(float)
    w = rng.normal(scale=0.3, size=12)
    g = reward_gradient(w, X, y)
    h = 1e-6
    fd = np.array([(mean_reward(w + h * e, X, y) - mean_reward(w - h * e, X, y)) / (2 * h) for e in np.eye(12)])
    rel = float(np.linalg.norm(g - fd) / np.linalg.norm(fd))
    record(8, rel < 1e-4, f"relative error {rel:.2e}")


# ---------------------------------------------------------------- 9


def test_c09_leakage_guard(tmp_path, capsys):
    e = EntityId("country", "vietnam")
    write_index_csv([series_from([0.3, 0.5, 0.4, 0.9, 0.8, 1.4, 1.2, 1.3], e)], tmp_path / "index.csv")
    corpus = [
        {"id": "fine-01", "published": "2022-03-14", "title": "Port backlog eases", "text": "",
         "entities": [e.to_dict()]},
        {"id": "future-99", "published": "2022-06-02", "title": "Strike shuts port", "text": "",
         "entities": [e.to_dict()], "as_of": "2022-05"},
    ]
    (tmp_path / "news.jsonl").write_text("".join(json.dumps(a) + "\n" for a in corpus))
    code = main(["build-dataset", "--index", str(tmp_path / "index.csv"), "--news", str(tmp_path / "news.jsonl"),
                 "--boundary", "2022-06", "--start", "2022-02", "--out", str(tmp_path / "ds")])
    err = capsys.readouterr().err
    record(9, code == 2 and "future-99" in err, f"exit {code}; stderr: {err.strip()}")


# ---------------------------------------------------------------- 10


REFERENCE_RUBRIC = {
    "pretrained": ((0.09, 0.48, 0.25, 0.67, 0.94, 0.33), 2.76),
    "fine_tuned": ((0.50, 1.00, 0.96, 0.70, 1.00, 1.00), 5.17),
}


@pytest.mark.parametrize("model", sorted(REFERENCE_RUBRIC))
def test_c10_rubric_arithmetic(model):
    freqs, mean = REFERENCE_RUBRIC[model]
    with open(FIXTURES / f"rubric_{model}.jsonl") as fh:
        anns = [RubricAnnotation.from_dict(json.loads(line)) for line in fh]
    s = aggregate_rubric(anns)
    got = tuple(round(s.frequencies[b], 2) for b in BEHAVIORS)
    ok = got == freqs and abs(s.mean_total_score - mean) <= 0.01
    record(10, ok, f"{model}: frequencies {got}, mean score {s.mean_total_score:.4f}")


# ---------------------------------------------------------------- 11


def test_c11_determinism(tmp_path):
    def run(root):
        assert main(["synth", "--seed", "11", "--out", str(root / "synth"), "--set", "n_entities=8"]) == 0
        boundary = json.loads((root / "synth" / "synth_meta.json").read_text())["boundary"]
        assert main(["build-dataset", "--index", str(root / "synth" / "index.csv"), "--news",
                     str(root / "synth" / "news.jsonl"), "--boundary", boundary, "--out", str(root / "ds")]) == 0
        assert main(["train-toy", "--questions", str(root / "ds" / "questions.jsonl"), "--seed", "11",
                     "--out", str(root / "toy")]) == 0
        # manifests carry run ids and timestamps by design
        return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
                if p.is_file() and p.name != "manifest.json"}

    a, b = run(tmp_path / "a"), run(tmp_path / "b")
    differing = sorted(k for k in a if a.get(k) != b.get(k))
    record(11, bool(a) and a.keys() == b.keys() and not differing,
           f"{len(a)} files compared, differing: {differing or 'none'}")
