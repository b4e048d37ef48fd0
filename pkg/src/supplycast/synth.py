"""Synthetic index series and news with a known data-generating process.

Per entity-month t a signal article (containing one of the default keywords)
appears with probability ``signal_rate``. The next-month event happens with
``shock_probability_given_signal`` or ``shock_probability_no_signal``; the
next-month change is then drawn either from a shock distribution (at least
1.05 thresholds) or a calm one (below 0.95 thresholds).

The threshold is the population std of training-span changes, which depends
on the shocks themselves. To keep the construction exact, each series opens
with one pre-sample "anchor" change solved in closed form so that the
training-span std equals a chosen value S. Labels recomputed from the emitted
levels therefore match the generator's event flags exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .dataset import NewsArticle, write_news_jsonl
from .errors import InfeasibleConfig, InputError
from .forecasters import DEFAULT_KEYWORDS
from .index_core import EntityId, IndexSeries, MonthStamp, estimate_sigma, label_event, write_index_csv

CALM_FRACTION = 0.95  # calm changes stay below this multiple of the threshold
SHOCK_FLOOR = 1.05  # shocks are at least this multiple of the threshold

ORACLE_HEADER = ("entity_kind", "entity_name", "year", "month", "signal", "p_true", "event")


@dataclass
class SynthConfig:
    n_entities: int = 20
    n_months: int = 48
    base_volatility: float = 0.05
    shock_probability_given_signal: float = 0.6
    shock_probability_no_signal: float = 0.05
    signal_rate: float = 0.2
    shock_magnitude_mean: float = 1.5
    seed: int = 0
    start: str = "2022-01"
    n_history: int = 3
    n_train_months: int | None = None
    product_fraction: float = 0.5
    base_level: float = 0.5
    background_articles: int = 1
    keywords: list = field(default_factory=lambda: list(DEFAULT_KEYWORDS))

    def __post_init__(self):
        probs = (self.shock_probability_given_signal, self.shock_probability_no_signal, self.signal_rate,
                 self.product_fraction)
        if not all(0.0 <= p <= 1.0 for p in probs):
            raise InfeasibleConfig("probabilities must lie in [0, 1]")
        if self.shock_probability_given_signal < self.shock_probability_no_signal:
            raise InfeasibleConfig("shock probability given a signal must be >= the no-signal probability")
        if self.n_entities < 1 or self.n_months < 2 or self.n_history < 1:
            raise InfeasibleConfig("need n_entities >= 1, n_months >= 2, n_history >= 1")
        if not self.base_volatility > 0:
            raise InfeasibleConfig("base_volatility must be positive")
        if not self.shock_magnitude_mean > SHOCK_FLOOR:
            raise InfeasibleConfig(f"shock_magnitude_mean must exceed {SHOCK_FLOOR} thresholds")
        if not 1 <= self.train_months < self.n_months:
            raise InfeasibleConfig("n_train_months must be in [1, n_months)")
        if not self.keywords:
            raise InfeasibleConfig("need at least one signal keyword")
        MonthStamp.parse(self.start)
        self._check_expected_feasibility()

    @property
    def train_months(self) -> int:
        return self.n_train_months if self.n_train_months is not None else max(1, (4 * self.n_months) // 5)

    @property
    def start_month(self) -> MonthStamp:
        return MonthStamp.parse(self.start)

    @property
    def boundary(self) -> MonthStamp:
        return self.start_month.shift(self.train_months - 1)

    @property
    def event_rate(self) -> float:
        s = self.signal_rate
        return s * self.shock_probability_given_signal + (1 - s) * self.shock_probability_no_signal

    def _check_expected_feasibility(self):
        # Shocks scale with the threshold, so they alone must not push the std
        # above it: f*E[k^2] - (f*E[k])^2 < 1 with k the shock multiple.
        f = self.event_rate
        mu = self.shock_magnitude_mean
        ek2 = (mu - SHOCK_FLOOR) ** 2 + mu**2
        if f * ek2 - (f * mu) ** 2 >= 0.75:
            raise InfeasibleConfig(
                f"event rate {f:.3f} with mean shock {mu} thresholds cannot sit above a threshold set by the "
                "same changes; lower shock_magnitude_mean or the shock probabilities"
            )

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class OracleRow:
    entity: EntityId
    t: MonthStamp
    signal: int
    p_true: float
    event: int

    @property
    def question_id(self) -> str:
        return f"{self.entity.key}:{self.t}"


@dataclass
class SynthResult:
    config: SynthConfig
    indexes: list[IndexSeries]
    corpus: list[NewsArticle]
    oracle: list[OracleRow]
    thresholds: dict

    @property
    def boundary(self) -> MonthStamp:
        return self.config.boundary


MAX_REDRAWS = 16


def derived_seed(seed: int, entity: EntityId, redraw: int = 0) -> int:
    """sha256 of ``"{seed}:{entity.key}"`` (plus ``":{redraw}"`` for redraws), first 8 bytes."""
    material = f"{seed}:{entity.key}" + (f":{redraw}" if redraw else "")
    return int.from_bytes(hashlib.sha256(material.encode()).digest()[:8], "big")


def _entities(cfg: SynthConfig) -> list[EntityId]:
    n_prod = int(round(cfg.product_fraction * cfg.n_entities))
    out = [EntityId("product", f"product_{i:03d}") for i in range(n_prod)]
    out += [EntityId("country", f"country_{i:03d}") for i in range(cfg.n_entities - n_prod)]
    return out


class _Redraw(Exception):
    pass


def _solve_threshold(calm: np.ndarray, shock_mult: np.ndarray, floor: float) -> float:
    """Smallest usable S >= floor such that an extra value can make the population std exactly S.

    ``calm`` are fixed changes, ``shock_mult`` are shock changes in units of S.
    """
    m = calm.size + shock_mult.size
    n = m + 1
    sc, sc2 = calm.sum(), (calm**2).sum()
    sk, sk2 = shock_mult.sum(), (shock_mult**2).sum()
    a = 1.0 - (m / n) * (sk2 / m - (sk / m) ** 2)
    b = (m / n) * 2.0 * sc * sk / m**2
    c = (m / n) * (sc2 / m - (sc / m) ** 2)
    if a <= 1e-6:
        raise _Redraw()
    root = (-b + math.sqrt(b * b + 4 * a * c)) / (2 * a)
    return max(floor, 1.02 * root)


def _anchor_value(others: np.ndarray, target_sd: float) -> float:
    """Value x (the larger root) giving population std ``target_sd`` over ``others`` plus x."""
    n = others.size + 1
    t, q = others.sum(), (others**2).sum()
    disc = t * t - (n - 1) * (n * q - t * t - n * n * target_sd**2)
    if disc < 0:
        raise _Redraw()
    return (t + math.sqrt(disc)) / (n - 1)


def _generate_entity(cfg: SynthConfig, entity: EntityId):
    # A rare draw has shocks too heavy for any self-consistent threshold;
    # redraw the whole entity from the next derived seed.
    for redraw in range(MAX_REDRAWS):
        try:
            return _draw_entity(cfg, entity, np.random.default_rng(derived_seed(cfg.seed, entity, redraw)))
        except _Redraw:
            continue
    raise InfeasibleConfig(f"{entity}: no feasible draw in {MAX_REDRAWS} attempts; lower the shock rates")


def _draw_entity(cfg: SynthConfig, entity: EntityId, rng):
    H, N, n_train = cfg.n_history, cfg.n_months, cfg.train_months
    b = cfg.base_volatility
    first = cfg.start_month.shift(-H)
    months = [first.shift(j) for j in range(H + N + 1)]

    signal = rng.random(N) < cfg.signal_rate
    p_true = np.where(signal, cfg.shock_probability_given_signal, cfg.shock_probability_no_signal)
    event = rng.random(N) < p_true
    calm = b * rng.uniform(-1.0, 1.0, size=H + N + 1)
    shock_mult = SHOCK_FLOOR + rng.exponential(cfg.shock_magnitude_mean - SHOCK_FLOOR, size=N)
    signal_day = rng.random(N)
    keyword_idx = rng.integers(0, len(cfg.keywords), size=N)
    background_day = rng.random((N + 1, cfg.background_articles))

    # change index j is the move into months[j]; question i sits at months[H + i]
    # and its outcome is change j = H + i + 1. Training-span changes: j <= H + n_train - 1.
    is_shock = np.zeros(H + N + 1, dtype=bool)
    is_shock[H + 1 :] = event
    train_js = np.arange(2, H + n_train)
    S = _solve_threshold(
        calm[train_js[~is_shock[train_js]]],
        shock_mult[train_js[is_shock[train_js]] - H - 1],
        b / CALM_FRACTION,
    )
    changes = np.zeros(H + N + 1)
    for j in range(1, H + N + 1):
        changes[j] = shock_mult[j - H - 1] * S if is_shock[j] else calm[j]
    changes[1] = _anchor_value(changes[train_js], S)
    levels = cfg.base_level + np.cumsum(changes)
    series = IndexSeries(entity, tuple(zip(months, (float(v) for v in levels))))

    est = estimate_sigma(series, cfg.boundary)
    if not math.isclose(est.sigma, S, rel_tol=1e-9):
        raise InfeasibleConfig(f"{entity}: threshold construction drifted ({est.sigma} vs {S})")

    oracle, corpus = [], []
    for i in range(N):
        t = months[H + i]
        y = label_event(series.value(t), series.value(t.successor()), est.sigma)
        if y != int(event[i]):
            raise InfeasibleConfig(f"{entity} {t}: generated event flag disagrees with threshold labeling")
        oracle.append(OracleRow(entity, t, int(signal[i]), float(p_true[i]), y))
        n_days = t.last_day().day
        if signal[i]:
            kw = cfg.keywords[keyword_idx[i]]
            corpus.append(
                NewsArticle(
                    id=f"{entity.name}-{t}-signal",
                    published=t.first_day().replace(day=1 + int(signal_day[i] * n_days)),
                    title=f"{kw.capitalize()} threatens {entity.name} supply",
                    text=f"Analysts flag a {kw} that may affect {entity.name} trade flows next month.",
                    entities=frozenset({entity}),
                )
            )
    for i in range(N + 1):
        t = months[H + i]
        n_days = t.last_day().day
        for k in range(cfg.background_articles):
            corpus.append(
                NewsArticle(
                    id=f"{entity.name}-{t}-bg{k}",
                    published=t.first_day().replace(day=1 + int(background_day[i, k] * n_days)),
                    title=f"Routine update on {entity.name} trade flows",
                    text="No unusual developments were noted this month.",
                    entities=frozenset({entity}),
                )
            )
    return series, corpus, oracle, S


def generate(config: SynthConfig) -> SynthResult:
    """Deterministic given ``config.seed``; entities use derived seeds."""
    indexes, corpus, oracle, thresholds = [], [], [], {}
    for e in _entities(config):
        s, c, o, S = _generate_entity(config, e)
        indexes.append(s)
        corpus.extend(c)
        oracle.extend(o)
        thresholds[e.key] = S
    corpus.sort(key=lambda a: (a.published, a.id))
    return SynthResult(config, indexes, corpus, oracle, thresholds)


def write_oracle_csv(rows, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ORACLE_HEADER)
        for r in rows:
            w.writerow([r.entity.kind.value, r.entity.name, r.t.year, r.t.month, r.signal, repr(r.p_true), r.event])


def read_oracle_csv(path: str | Path) -> list[OracleRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            OracleRow(EntityId(r["entity_kind"], r["entity_name"]), MonthStamp(int(r["year"]), int(r["month"])),
                      int(r["signal"]), float(r["p_true"]), int(r["event"]))
            for r in csv.DictReader(fh)
        ]


def write_outputs(result: SynthResult, out_dir: str | Path) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_index_csv(result.indexes, out / "index.csv")
    write_news_jsonl(result.corpus, out / "news.jsonl")
    write_oracle_csv(result.oracle, out / "oracle.csv")
    train = [r for r in result.oracle if r.t <= result.boundary]
    test = [r for r in result.oracle if r.t > result.boundary]
    meta = {
        "config": result.config.to_dict(),
        "boundary": str(result.boundary),
        "thresholds": result.thresholds,
        "counts": {
            "train": len(train),
            "test": len(test),
            "train_events": sum(r.event for r in train),
            "test_events": sum(r.event for r in test),
        },
    }
    (out / "synth_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return meta
