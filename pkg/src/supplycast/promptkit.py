"""Forecast prompt rendering and ``<answer>p</answer>`` extraction."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

from .dataset import ForecastingQuestion, NewsArticle
from .errors import MalformedNumber, NoAnswerTag, OutOfRange

EMPTY_CONTEXT = "No recent articles available."
CONTEXT_LEAD = "Recent news articles relevant to this question include:"
REPRESENTATIONS = ("full", "headline", "text")

_ANSWER_TAG = re.compile(r"<answer>(.*?)</answer>", re.DOTALL | re.IGNORECASE)
# Plain decimals only: no exponents, no percent signs.
_DECIMAL = re.compile(r"[+-]?(?:\d+(?:\.\d*)?|\.\d+)")


@dataclass(frozen=True)
class RenderedPrompt:
    question_id: str
    text: str

    @property
    def char_count(self) -> int:
        return len(self.text)

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ParsedAnswer:
    probability: float
    raw_span: str
    reasoning: str


@lru_cache(maxsize=None)
def _packaged_template(name: str) -> str:
    return resources.files("supplycast").joinpath("templates", name).read_text(encoding="utf-8")


def load_template(path: str | Path | None = None) -> str:
    if path is None:
        return _packaged_template("forecast_prompt.txt")
    return Path(path).read_text(encoding="utf-8")


def describe_change(delta: float) -> str:
    mag = f"{abs(delta):.2f}"
    if mag == "0.00":
        return "been unchanged"
    return f"{'increased' if delta > 0 else 'decreased'} by {mag}"


def _article_line(a: NewsArticle, representation: str) -> str:
    if representation == "headline" or not a.text:
        body = a.title
    elif representation == "text" or not a.title:
        body = a.text
    else:
        body = f"{a.title}: {a.text}"
    return f"- [{a.published.isoformat()}] {body.strip()}"


def render_context(news: list[NewsArticle], representation: str = "full") -> str:
    if representation not in REPRESENTATIONS:
        raise ValueError(f"unknown news representation {representation!r}")
    if not news:
        return EMPTY_CONTEXT
    return "\n".join([CONTEXT_LEAD, *(_article_line(a, representation) for a in news)])


def render_prompt(q: ForecastingQuestion, template: str | None = None, representation: str = "full") -> RenderedPrompt:
    """Fill the forecast template for one question. Deterministic."""
    template = load_template() if template is None else template
    text = template.format_map(
        {
            "entity": q.entity.name,
            "month": q.t.english(),
            "next_month": q.next_month.english(),
            "index": f"{q.current_index:.2f}",
            "delta": describe_change(q.prior_change),
            "sigma": f"{q.sigma:.2f}",
            "context": render_context(q.news, representation),
        }
    )
    return RenderedPrompt(q.id, text)


def parse_answer(model_output: str | bytes) -> ParsedAnswer:
    """Take the last ``<answer>...</answer>`` span as authoritative.

    Raises NoAnswerTag, MalformedNumber or OutOfRange; nothing else.
    """
    if isinstance(model_output, (bytes, bytearray)):
        model_output = bytes(model_output).decode("utf-8", errors="replace")
    if not isinstance(model_output, str):
        raise NoAnswerTag(f"expected text, got {type(model_output).__name__}")
    matches = list(_ANSWER_TAG.finditer(model_output))
    if not matches:
        raise NoAnswerTag("no <answer>...</answer> tag in output")
    m = matches[-1]
    inner = m.group(1).strip()
    if not _DECIMAL.fullmatch(inner):
        raise MalformedNumber(f"answer {inner[:50]!r} is not a plain decimal")
    p = float(inner)
    if not 0.0 <= p <= 1.0:
        raise OutOfRange(f"probability {p} outside [0, 1]")
    return ParsedAnswer(p, m.group(0), model_output[: m.start()].strip())
