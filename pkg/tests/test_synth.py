import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from supplycast.dataset import DatasetConfig, build_questions, chronological_split_check
from supplycast.errors import InfeasibleConfig
from supplycast.forecasters import featurize
from supplycast.index_core import EntityId, MonthStamp, estimate_sigma
from supplycast.synth import SynthConfig, derived_seed, generate, read_oracle_csv, write_outputs


def test_deterministic():
    a, b = generate(SynthConfig(seed=5, n_entities=6)), generate(SynthConfig(seed=5, n_entities=6))
    assert a.indexes == b.indexes and a.corpus == b.corpus and a.oracle == b.oracle
    c = generate(SynthConfig(seed=6, n_entities=6))
    assert c.indexes != a.indexes


def test_entity_streams_do_not_depend_on_roster_size():
    small = generate(SynthConfig(seed=2, n_entities=4))
    large = generate(SynthConfig(seed=2, n_entities=10))
    by_entity = {s.entity: s for s in large.indexes}
    for s in small.indexes:
        assert by_entity[s.entity] == s


def test_derived_seed_is_stable():
    assert derived_seed(0, EntityId("product", "product_000")) == derived_seed(0, EntityId("product", "product_000"))
    assert derived_seed(0, EntityId("product", "product_000")) != derived_seed(1, EntityId("product", "product_000"))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_thresholds_and_labels_are_exact(seed):
    cfg = SynthConfig(seed=seed, n_entities=4)
    res = generate(cfg)
    for s in res.indexes:
        assert estimate_sigma(s, cfg.boundary).sigma == pytest.approx(res.thresholds[s.entity.key], rel=1e-9)
    qs = build_questions(res.indexes, res.corpus, cfg.boundary, DatasetConfig(start=cfg.start_month))
    chronological_split_check(qs)
    oracle = {r.question_id: r for r in res.oracle}
    labeled = [q for q in qs if q.label is not None]
    assert len(labeled) == len(oracle)
    for q in labeled:
        assert q.label == oracle[q.id].event


def test_conditional_rates_match_config():
    cfg = SynthConfig(seed=1, n_entities=300)
    res = generate(cfg)
    sig = np.array([r.signal for r in res.oracle])
    ev = np.array([r.event for r in res.oracle])
    n = len(sig)
    assert sig.mean() == pytest.approx(cfg.signal_rate, abs=4 * np.sqrt(0.2 * 0.8 / n))
    assert ev[sig == 1].mean() == pytest.approx(0.6, abs=0.03)
    assert ev[sig == 0].mean() == pytest.approx(0.05, abs=0.01)


def test_signal_articles_carry_keywords_in_their_month():
    cfg = SynthConfig(seed=3, n_entities=6)
    res = generate(cfg)
    qs = build_questions(res.indexes, res.corpus, cfg.boundary, DatasetConfig(start=cfg.start_month))
    oracle = {r.question_id: r for r in res.oracle}
    for q in qs:
        if q.id in oracle:
            assert (sum(featurize(q).news_signal_counts) > 0) == bool(oracle[q.id].signal)


def test_split_sizes():
    cfg = SynthConfig(seed=0, n_entities=5, n_months=20, n_train_months=15)
    res = generate(cfg)
    qs = build_questions(res.indexes, res.corpus, cfg.boundary, DatasetConfig(start=cfg.start_month))
    counts = {s: sum(q.split == s for q in qs) for s in ("train", "test", "unresolved")}
    assert counts == {"train": 75, "test": 25, "unresolved": 5}
    assert cfg.boundary == MonthStamp(2023, 3)


@pytest.mark.parametrize("bad", [dict(shock_probability_given_signal=1.2), dict(shock_magnitude_mean=1.0),
                                 dict(n_train_months=48), dict(signal_rate=1.0, shock_probability_given_signal=1.0,
                                                               shock_magnitude_mean=3.0),
                                 dict(shock_probability_given_signal=0.01)])
def test_infeasible_configs(bad):
    with pytest.raises(InfeasibleConfig):
        SynthConfig(**bad)


def test_write_outputs(tmp_path):
    res = generate(SynthConfig(seed=4, n_entities=3))
    meta = write_outputs(res, tmp_path)
    assert {p.name for p in tmp_path.iterdir()} == {"index.csv", "news.jsonl", "oracle.csv", "synth_meta.json"}
    assert read_oracle_csv(tmp_path / "oracle.csv") == res.oracle
    on_disk = json.loads((tmp_path / "synth_meta.json").read_text())
    assert on_disk["boundary"] == meta["boundary"] == str(res.boundary)
    assert on_disk["counts"]["train"] + on_disk["counts"]["test"] == len(res.oracle)


def test_heavy_shock_draw_is_redrawn_deterministically():
    # seed 433 hits an infeasible first draw for one of its entities
    a = generate(SynthConfig(seed=433, n_entities=4))
    b = generate(SynthConfig(seed=433, n_entities=4))
    assert a.indexes == b.indexes
