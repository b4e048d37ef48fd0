"""Disruption-index series, per-entity volatility thresholds and event labels."""

from __future__ import annotations

import calendar
import csv
import datetime as dt
import enum
import logging
import math
import re
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateThreshold, InputError, InsufficientHistory, MissingMonth

log = logging.getLogger(__name__)

# Absolute slack when comparing a change to its threshold. Index values come
# from decimal CSV text, so a change that is "exactly" sigma in decimal can land
# one ulp below it in binary floating point.
THRESHOLD_ATOL = 1e-12

INDEX_CSV_HEADER = ("entity_kind", "entity_name", "year", "month", "value")


class EntityKind(str, enum.Enum):
    COUNTRY = "country"
    PRODUCT = "product"


_NAME_SEP = re.compile(r"[\s\-/]+")
_NAME_RUNS = re.compile(r"_+")


def normalize_name(name: str) -> str:
    """Lowercase token form: ``"Residues / Waste"`` -> ``"residues_waste"``."""
    token = _NAME_SEP.sub("_", name.strip().lower())
    return _NAME_RUNS.sub("_", token).strip("_")


@dataclass(frozen=True, order=True)
class EntityId:
    kind: EntityKind
    name: str

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", EntityKind(self.kind))
        except ValueError:
            raise InputError(f"entity kind must be country or product, got {self.kind!r}") from None
        object.__setattr__(self, "name", normalize_name(self.name))
        if not self.name:
            raise InputError("entity name is empty after normalization")

    @property
    def key(self) -> str:
        return f"{self.kind.value}:{self.name}"

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "name": self.name}

    @classmethod
    def from_dict(cls, d: dict) -> "EntityId":
        return cls(d["kind"], d["name"])

    def __str__(self):
        return self.key


@dataclass(frozen=True, order=True)
class MonthStamp:
    year: int
    month: int

    def __post_init__(self):
        if not 1 <= self.month <= 12:
            raise InputError(f"month out of range: {self.month}")

    @classmethod
    def parse(cls, text: str) -> "MonthStamp":
        m = re.fullmatch(r"\s*(\d{4})-(\d{1,2})\s*", str(text))
        if not m:
            raise InputError(f"expected YYYY-MM, got {text!r}")
        return cls(int(m.group(1)), int(m.group(2)))

    @classmethod
    def of(cls, day: dt.date) -> "MonthStamp":
        return cls(day.year, day.month)

    @property
    def ordinal(self) -> int:
        return self.year * 12 + (self.month - 1)

    @classmethod
    def from_ordinal(cls, n: int) -> "MonthStamp":
        return cls(n // 12, n % 12 + 1)

    def successor(self) -> "MonthStamp":
        return self.shift(1)

    def predecessor(self) -> "MonthStamp":
        return self.shift(-1)

    def shift(self, months: int) -> "MonthStamp":
        return MonthStamp.from_ordinal(self.ordinal + months)

    def __sub__(self, other: "MonthStamp") -> int:
        return self.ordinal - other.ordinal

    def first_day(self) -> dt.date:
        return dt.date(self.year, self.month, 1)

    def last_day(self) -> dt.date:
        return dt.date(self.year, self.month, calendar.monthrange(self.year, self.month)[1])

    def english(self) -> str:
        """``"October 2025"``."""
        return f"{calendar.month_name[self.month]} {self.year}"

    def __str__(self):
        return f"{self.year:04d}-{self.month:02d}"


@dataclass(frozen=True)
class IndexSeries:
    """Monthly index levels for one entity; months strictly increasing."""

    entity: EntityId
    observations: tuple[tuple[MonthStamp, float], ...]

    def __post_init__(self):
        obs = tuple((m, float(v)) for m, v in self.observations)
        for (a, _), (b, _) in zip(obs, obs[1:]):
            if not a < b:
                raise InputError(f"{self.entity}: months not strictly increasing at {a} -> {b}")
        for m, v in obs:
            if not math.isfinite(v):
                raise InputError(f"{self.entity}: non-finite value at {m}")
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "_lookup", dict(obs))

    @classmethod
    def from_unsorted(cls, entity: EntityId, observations: Iterable[tuple[MonthStamp, float]]) -> "IndexSeries":
        obs = sorted(observations, key=lambda o: o[0])
        seen = set()
        for m, _ in obs:
            if m in seen:
                raise InputError(f"{entity}: duplicate month {m}")
            seen.add(m)
        return cls(entity, tuple(obs))

    @property
    def months(self) -> list[MonthStamp]:
        return [m for m, _ in self.observations]

    def value(self, t: MonthStamp) -> float:
        try:
            return self._lookup[t]
        except KeyError:
            raise MissingMonth(f"{self.entity}: no observation for {t}") from None

    def has(self, t: MonthStamp) -> bool:
        return t in self._lookup

    def gaps(self) -> list[tuple[MonthStamp, MonthStamp]]:
        """Consecutive observed months that are more than one month apart."""
        ms = self.months
        return [(a, b) for a, b in zip(ms, ms[1:]) if b - a > 1]

    def shifted(self, offset: float) -> "IndexSeries":
        return IndexSeries(self.entity, tuple((m, v + offset) for m, v in self.observations))


@dataclass(frozen=True)
class SigmaEstimate:
    entity: EntityId
    sigma: float
    n_changes: int
    estimation_end: MonthStamp


def monthly_change(series: IndexSeries, t: MonthStamp) -> float:
    """I[t] - I[t-1]; raises MissingMonth when either side is unobserved."""
    return series.value(t) - series.value(t.predecessor())


def changes_through(series: IndexSeries, cutoff: MonthStamp, start: MonthStamp | None = None) -> list[float]:
    """All one-month changes ending at or before ``cutoff``; gap-spanning pairs skipped."""
    out = []
    for m in series.months:
        if m > cutoff:
            break
        if start is not None and m.predecessor() < start:
            continue
        if series.has(m.predecessor()):
            out.append(monthly_change(series, m))
    return out


def estimate_sigma(series: IndexSeries, cutoff: MonthStamp, start: MonthStamp | None = None) -> SigmaEstimate:
    """Population standard deviation of month-over-month changes up to ``cutoff``.

    Observations after ``cutoff`` are never read. ``start`` optionally drops
    changes whose earlier month precedes it.
    """
    changes = changes_through(series, cutoff, start)
    if len(changes) < 2:
        raise InsufficientHistory(
            f"{series.entity}: {len(changes)} usable changes through {cutoff}, need at least 2"
        )
    sigma = float(np.std(np.asarray(changes, dtype=float), ddof=0))
    return SigmaEstimate(series.entity, sigma, len(changes), cutoff)


def label_event(i_t: float, i_t1: float, sigma: float, strict: bool = False) -> int:
    """1 when the next-month increase reaches the entity threshold.

    Non-strict (``>=``) by default; ``strict=True`` switches to ``>``.
    """
    if not sigma > 0:
        raise DegenerateThreshold(f"threshold must be positive, got {sigma}")
    delta = i_t1 - i_t
    if strict:
        return int(delta > sigma + THRESHOLD_ATOL)
    return int(delta >= sigma - THRESHOLD_ATOL)


def gaussian_shock_probability(expected_change: float, sigma: float, threshold: float | None = None) -> float:
    """P(change > threshold) for change ~ Normal(expected_change, sigma).

    Reference heuristic for a volatility-based forecast; ``threshold``
    defaults to ``sigma`` (a one-standard-deviation shock).
    """
    if not sigma > 0:
        raise DegenerateThreshold(f"sigma must be positive, got {sigma}")
    thr = sigma if threshold is None else threshold
    z = (thr - expected_change) / sigma
    return 0.5 * math.erfc(z / math.sqrt(2.0))


# ---------------------------------------------------------------- CSV I/O


def read_index_csv(path: str | Path) -> list[IndexSeries]:
    """Parse the ``entity_kind,entity_name,year,month,value`` format."""
    rows: dict[EntityId, list[tuple[MonthStamp, float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(f.strip() for f in reader.fieldnames) != INDEX_CSV_HEADER:
            raise InputError(f"{path}: header must be {','.join(INDEX_CSV_HEADER)}, got {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            try:
                entity = EntityId(row["entity_kind"].strip(), row["entity_name"])
                month = MonthStamp(int(row["year"]), int(row["month"]))
                value = float(Decimal(row["value"].strip()))
            except (ValueError, InvalidOperation, KeyError, AttributeError) as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from None
            rows.setdefault(entity, []).append((month, value))
    series = [IndexSeries.from_unsorted(e, obs) for e, obs in sorted(rows.items())]
    for s in series:
        if s.gaps():
            log.info("%s: %d gap(s) in index series", s.entity, len(s.gaps()))
    return series


def write_index_csv(series: Sequence[IndexSeries], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INDEX_CSV_HEADER)
        for s in sorted(series, key=lambda s: s.entity):
            for m, v in s.observations:
                w.writerow([s.entity.kind.value, s.entity.name, m.year, m.month, repr(v)])
