"""Forecasting-question construction with a hard look-ahead guard.

News articles come from an offline JSONL corpus. An article may optionally
carry ``as_of`` (a prediction month it was retrieved for, the output of a
time-aware search); such articles are attached to that month's questions as
is and are therefore exactly where a leak can slip in, so every built
question passes through :func:`leakage_check` before it is emitted.
"""

from __future__ import annotations

import datetime as dt
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import (
    DegenerateThreshold,
    EmptyDataset,
    InputError,
    InsufficientHistory,
    LabelIntegrityError,
    LeakageDetected,
    LookAheadViolation,
)
from .index_core import (
    EntityId,
    IndexSeries,
    MonthStamp,
    estimate_sigma,
    label_event,
    monthly_change,
)

log = logging.getLogger(__name__)

SPLITS = ("train", "test", "unresolved")


@dataclass(frozen=True)
class NewsArticle:
    id: str
    published: dt.date
    title: str
    text: str
    entities: frozenset[EntityId] = frozenset()
    as_of: MonthStamp | None = None

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "published": self.published.isoformat(),
            "title": self.title,
            "text": self.text,
            "entities": [e.to_dict() for e in sorted(self.entities)],
        }
        if self.as_of is not None:
            d["as_of"] = str(self.as_of)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "NewsArticle":
        try:
            published = dt.date.fromisoformat(str(d["published"])[:10])
        except ValueError as exc:
            raise InputError(f"article {d.get('id')!r}: bad published date: {exc}") from None
        as_of = d.get("as_of")
        return cls(
            id=str(d["id"]),
            published=published,
            title=str(d.get("title", "")),
            text=str(d.get("text", d.get("summary", ""))),
            entities=frozenset(EntityId.from_dict(e) for e in d.get("entities", [])),
            as_of=MonthStamp.parse(as_of) if as_of else None,
        )


@dataclass
class ForecastingQuestion:
    entity: EntityId
    t: MonthStamp
    current_index: float
    prior_change: float
    sigma: float
    news: list[NewsArticle] = field(default_factory=list)
    label: int | None = None
    split: str = "unresolved"
    months_since_event: int | None = None

    @property
    def id(self) -> str:
        return f"{self.entity.key}:{self.t}"

    @property
    def next_month(self) -> MonthStamp:
        return self.t.successor()

    def sort_key(self):
        return (self.entity.name, self.entity.kind.value, self.t)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "entity": self.entity.to_dict(),
            "t": str(self.t),
            "current_index": self.current_index,
            "prior_change": self.prior_change,
            "sigma": self.sigma,
            "months_since_event": self.months_since_event,
            "label": self.label,
            "split": self.split,
            "news": [a.to_dict() for a in self.news],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ForecastingQuestion":
        label = d.get("label")
        q = cls(
            entity=EntityId.from_dict(d["entity"]),
            t=MonthStamp.parse(d["t"]),
            current_index=float(d["current_index"]),
            prior_change=float(d["prior_change"]),
            sigma=float(d["sigma"]),
            news=[NewsArticle.from_dict(a) for a in d.get("news", [])],
            label=None if label is None else int(label),
            split=d.get("split", "unresolved"),
            months_since_event=d.get("months_since_event"),
        )
        if q.split not in SPLITS:
            raise InputError(f"{q.id}: unknown split {q.split!r}")
        return q


@dataclass(frozen=True)
class DatasetSummary:
    n_questions: int
    n_countries: int
    n_products: int
    span: tuple[MonthStamp, MonthStamp] | None
    event_rate: float | None
    n_labeled: int = 0

    def to_dict(self) -> dict:
        return {
            "n_questions": self.n_questions,
            "n_countries": self.n_countries,
            "n_products": self.n_products,
            "span": None if self.span is None else [str(self.span[0]), str(self.span[1])],
            "event_rate": self.event_rate,
            "n_labeled": self.n_labeled,
        }


@dataclass
class DatasetConfig:
    start: MonthStamp = MonthStamp(2022, 1)
    max_articles: int = 8
    strict_threshold: bool = False
    sigma_start: MonthStamp | None = None
    related: dict[EntityId, list[EntityId]] = field(default_factory=dict)
    require_news: bool = False
    months_since_cap: int = 12


# ---------------------------------------------------------------- news


def attach_news_context(
    entity: EntityId,
    t: MonthStamp,
    corpus: Iterable[NewsArticle],
    max_articles: int = 8,
    related: Sequence[EntityId] = (),
) -> list[NewsArticle]:
    """Articles tagged with ``entity`` (or a related entity) visible at the end of month ``t``.

    Pooled articles are filtered to ``published <= last day of t``. Articles
    pre-retrieved for month ``t`` (``as_of == t``) are passed through untouched
    for the leakage guard to vet. Most recent first, ties by id.
    """
    wanted = {entity, *related}
    horizon = t.last_day()
    picked = []
    for a in corpus:
        if not (a.entities & wanted):
            continue
        if a.as_of is None:
            if a.published <= horizon:
                picked.append(a)
        elif a.as_of == t:
            picked.append(a)
    picked.sort(key=lambda a: (-a.published.toordinal(), a.id))
    return picked[:max_articles]


class _CorpusIndex:
    """Per-entity article lists so context lookup is not a full scan per question."""

    def __init__(self, corpus: Sequence[NewsArticle]):
        ids = set()
        self.by_entity: dict[EntityId, list[NewsArticle]] = defaultdict(list)
        for a in corpus:
            if a.id in ids:
                raise InputError(f"duplicate article id {a.id!r}")
            ids.add(a.id)
            for e in a.entities:
                self.by_entity[e].append(a)

    def candidates(self, entities: Iterable[EntityId]) -> list[NewsArticle]:
        seen, out = set(), []
        for e in entities:
            for a in self.by_entity.get(e, ()):
                if a.id not in seen:
                    seen.add(a.id)
                    out.append(a)
        return out


# ---------------------------------------------------------------- guards


def leakage_check(question: ForecastingQuestion, series: IndexSeries | None = None, strict: bool = False) -> None:
    """Raise if the question carries information from after month ``t``.

    With ``series`` supplied, also re-derives the label from I[t] and I[t+1]
    alone and checks it against the stored one.
    """
    horizon = question.t.last_day()
    for a in question.news:
        if a.published > horizon:
            raise LookAheadViolation(
                f"question {question.id}: article {a.id} published {a.published} after {horizon}",
                article_id=a.id,
                question_id=question.id,
            )
    if series is not None and question.label is not None:
        expected = label_event(series.value(question.t), series.value(question.next_month), question.sigma, strict)
        if expected != question.label:
            raise LabelIntegrityError(f"question {question.id}: stored label {question.label}, recomputed {expected}")


def summarize(questions: Sequence[ForecastingQuestion]) -> DatasetSummary:
    if not questions:
        return DatasetSummary(0, 0, 0, None, None, 0)
    ents = {q.entity for q in questions}
    labels = [q.label for q in questions if q.label is not None]
    months = [q.t for q in questions]
    return DatasetSummary(
        n_questions=len(questions),
        n_countries=sum(e.kind.value == "country" for e in ents),
        n_products=sum(e.kind.value == "product" for e in ents),
        span=(min(months), max(months)),
        event_rate=(sum(labels) / len(labels)) if labels else None,
        n_labeled=len(labels),
    )


def chronological_split_check(questions: Sequence[ForecastingQuestion]) -> dict:
    """Every train month must precede every test month. Returns per-split summaries."""
    by_split = {s: [q for q in questions if q.split == s] for s in SPLITS}
    train, test = by_split["train"], by_split["test"]
    warnings = []
    if train and test:
        max_train = max(q.t for q in train)
        bad = sorted(q.id for q in test if q.t <= max_train)
        if bad:
            raise LeakageDetected(
                f"{len(bad)} test question(s) at or before the last training month {max_train}: {', '.join(bad[:10])}",
                offending_ids=bad,
            )
    if not test:
        warnings.append("test split is empty")
        log.warning("test split is empty")
    if not train:
        warnings.append("train split is empty")
        log.warning("train split is empty")
    return {
        "ok": True,
        "warnings": warnings,
        "splits": {s: summarize(qs).to_dict() for s, qs in by_split.items()},
    }


# ---------------------------------------------------------------- build


def _months_since_event(series: IndexSeries, t: MonthStamp, sigma: float, cap: int, strict: bool) -> int:
    # Events known at t are changes ending at months <= t.
    for back in range(cap):
        m = t.shift(-back)
        if series.has(m) and series.has(m.predecessor()):
            if label_event(series.value(m.predecessor()), series.value(m), sigma, strict):
                return back
    return cap


def _questions_for_entity(
    series: IndexSeries,
    boundary: MonthStamp,
    corpus_index: _CorpusIndex,
    config: DatasetConfig,
) -> list[ForecastingQuestion]:
    entity = series.entity
    try:
        est = estimate_sigma(series, boundary, start=config.sigma_start)
    except InsufficientHistory as exc:
        log.warning("dropping %s: %s", entity, exc)
        return []
    if not est.sigma > 0:
        log.warning("dropping %s: zero volatility through %s", entity, boundary)
        return []
    related = config.related.get(entity, [])
    pool = corpus_index.candidates([entity, *related])
    months = series.months
    last = months[-1]
    out = []
    for t in months:
        if t < config.start or not series.has(t.predecessor()):
            continue
        nxt = t.successor()
        if series.has(nxt):
            label = label_event(series.value(t), series.value(nxt), est.sigma, config.strict_threshold)
            split = "train" if t <= boundary else "test"
        elif t == last:
            label, split = None, "unresolved"
        else:
            continue  # interior gap: outcome month missing
        news = attach_news_context(entity, t, pool, config.max_articles, related)
        if config.require_news and not news:
            continue
        out.append(
            ForecastingQuestion(
                entity=entity,
                t=t,
                current_index=series.value(t),
                prior_change=monthly_change(series, t),
                sigma=est.sigma,
                news=news,
                label=label,
                split=split,
                months_since_event=_months_since_event(
                    series, t, est.sigma, config.months_since_cap, config.strict_threshold
                ),
            )
        )
    return out


def build_questions(
    indexes: Sequence[IndexSeries],
    corpus: Sequence[NewsArticle],
    boundary: MonthStamp,
    config: DatasetConfig | None = None,
) -> list[ForecastingQuestion]:
    """One question per (entity, t) with I[t-1], I[t] observed and t >= config.start.

    Thresholds are estimated with cutoff ``boundary``; questions with t at or
    before ``boundary`` are train, later ones test, and the final observed
    month of a series (no I[t+1] yet) is emitted as unresolved.
    """
    config = config or DatasetConfig()
    all_months = [m for s in indexes for m in s.months]
    if all_months and not (min(all_months) <= boundary):
        raise InputError(f"boundary {boundary} precedes all observations")
    corpus_index = _CorpusIndex(corpus)
    by_entity = {s.entity: s for s in indexes}
    if len(by_entity) != len(indexes):
        raise InputError("duplicate entity in index input")

    questions = []
    for s in indexes:
        questions.extend(_questions_for_entity(s, boundary, corpus_index, config))
    questions.sort(key=ForecastingQuestion.sort_key)
    if not questions:
        raise EmptyDataset("no eligible (entity, month) pairs")

    for q in questions:
        leakage_check(q, by_entity[q.entity], config.strict_threshold)
    return questions


# ---------------------------------------------------------------- I/O


def read_news_jsonl(path: str | Path) -> list[NewsArticle]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(NewsArticle.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from None
    return out


def write_news_jsonl(corpus: Sequence[NewsArticle], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for a in corpus:
            fh.write(json.dumps(a.to_dict(), sort_keys=True) + "\n")


def write_questions_jsonl(questions: Sequence[ForecastingQuestion], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in questions:
            fh.write(json.dumps(q.to_dict(), sort_keys=True) + "\n")


def read_questions_jsonl(path: str | Path) -> list[ForecastingQuestion]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(ForecastingQuestion.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from None
    return out


# ---------------------------------------------------------------- external dataset adapter


@dataclass
class AdapterConfig:
    """Column mapping from an external question table to :class:`ForecastingQuestion`.

    Each ``*_col`` names a column in the source records. ``entity_kind`` may be
    given as a fixed value instead of a column. ``month_col`` accepts
    ``YYYY-MM`` or an ISO date. ``news_col`` may hold a list of article dicts
    or a plain string (stored as one undated article dated at the end of t).
    """

    entity_name_col: str
    month_col: str
    current_index_col: str
    prior_change_col: str
    sigma_col: str
    label_col: str | None = None
    entity_kind_col: str | None = None
    entity_kind: str = "product"
    news_col: str | None = None
    split_col: str | None = None
    boundary: MonthStamp | None = None

    @classmethod
    def from_dict(cls, d: Mapping) -> "AdapterConfig":
        d = dict(d)
        if d.get("boundary"):
            d["boundary"] = MonthStamp.parse(d["boundary"])
        return cls(**d)


def _adapt_month(v) -> MonthStamp:
    s = str(v)
    return MonthStamp.parse(s[:7])


def adapt_records(records: Iterable[Mapping], cfg: AdapterConfig) -> list[ForecastingQuestion]:
    out = []
    for i, r in enumerate(records):
        try:
            kind = r[cfg.entity_kind_col] if cfg.entity_kind_col else cfg.entity_kind
            entity = EntityId(str(kind).lower(), str(r[cfg.entity_name_col]))
            t = _adapt_month(r[cfg.month_col])
            news: list[NewsArticle] = []
            raw_news = r.get(cfg.news_col) if cfg.news_col else None
            if isinstance(raw_news, list):
                for j, a in enumerate(raw_news):
                    a = dict(a)
                    a.setdefault("id", f"{entity.key}:{t}:{j}")
                    a.setdefault("entities", [entity.to_dict()])
                    news.append(NewsArticle.from_dict(a))
            elif raw_news:
                news.append(NewsArticle(f"{entity.key}:{t}:context", t.last_day(), "", str(raw_news), frozenset({entity})))
            label = r.get(cfg.label_col) if cfg.label_col else None
            if label is not None and not (isinstance(label, float) and math.isnan(label)):
                label = int(label)
            else:
                label = None
            if cfg.split_col:
                split = str(r[cfg.split_col])
            elif label is None:
                split = "unresolved"
            elif cfg.boundary is not None:
                split = "train" if t <= cfg.boundary else "test"
            else:
                split = "test"
            q = ForecastingQuestion(
                entity=entity,
                t=t,
                current_index=float(r[cfg.current_index_col]),
                prior_change=float(r[cfg.prior_change_col]),
                sigma=float(r[cfg.sigma_col]),
                news=news,
                label=label,
                split=split,
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise InputError(f"record {i}: {exc}") from None
        if not q.sigma > 0:
            raise DegenerateThreshold(f"record {i} ({q.id}): sigma must be positive")
        leakage_check(q)
        out.append(q)
    out.sort(key=ForecastingQuestion.sort_key)
    return out
