from __future__ import annotations

import datetime as dt

import pytest

from supplycast.dataset import ForecastingQuestion, NewsArticle
from supplycast.index_core import EntityId, IndexSeries, MonthStamp


def series_from(values, entity=EntityId("product", "copper"), start="2022-01"):
    m0 = MonthStamp.parse(start)
    return IndexSeries(entity, tuple((m0.shift(i), v) for i, v in enumerate(values)))


def article(aid, day, entity=EntityId("product", "copper"), title="t", text="x", as_of=None):
    if isinstance(day, str):
        day = dt.date.fromisoformat(day)
    return NewsArticle(aid, day, title, text, frozenset({entity}), as_of)


def question(t="2024-03", label=0, split="test", news=(), sigma=0.46, entity=EntityId("country", "vietnam"),
             current_index=1.2, prior_change=0.2, months_since_event=3):
    return ForecastingQuestion(entity, MonthStamp.parse(t), current_index, prior_change, sigma, list(news),
                               label, split, months_since_event)


@pytest.fixture
def copper():
    return EntityId("product", "copper")


# criterion number -> [(status, detail), ...]; filled by test_acceptance.py
ACCEPTANCE: dict[int, list[tuple[str, str]]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        results = ACCEPTANCE[n]
        statuses = {st for st, _ in results}
        status = "FAIL" if "FAIL" in statuses else ("SKIP" if statuses == {"SKIP"} else "PASS")
        terminalreporter.write_line(f"criterion {n:>2}: {status:<4} {' | '.join(d for _, d in results)}")
