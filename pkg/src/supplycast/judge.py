"""Rubric evaluator for reasoning traces.

A judge model flags six probabilistic-reasoning behaviors per trace; this
module renders its prompt, parses the JSON it returns and aggregates flags
into per-behavior frequencies.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .errors import EmptyTrace, InputError, JudgeConfigError, MissingKeys, NonBinaryValue
from .forecasters import ChatClient, EndpointConfig
from .promptkit import _packaged_template

log = logging.getLogger(__name__)

BEHAVIORS = (
    "base_rate",
    "statistical_model",
    "explicit_forecasting_model",
    "evidence_linkage",
    "probabilistic_synthesis",
    "uncertainty_refinement",
)

_TRACE_SLOT = "{trace}"


@dataclass(frozen=True)
class RubricAnnotation:
    base_rate: int
    statistical_model: int
    explicit_forecasting_model: int
    evidence_linkage: int
    probabilistic_synthesis: int
    uncertainty_refinement: int

    def __post_init__(self):
        for k in BEHAVIORS:
            if getattr(self, k) not in (0, 1):
                raise NonBinaryValue(f"{k} must be 0 or 1")

    @property
    def total(self) -> int:
        return sum(getattr(self, k) for k in BEHAVIORS)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in BEHAVIORS}

    @classmethod
    def from_dict(cls, d: Mapping) -> "RubricAnnotation":
        return cls(**{k: int(d[k]) for k in BEHAVIORS})


@dataclass(frozen=True)
class RubricSummary:
    frequencies: dict
    mean_total_score: float
    n_traces: int

    def to_dict(self) -> dict:
        return {"frequencies": dict(self.frequencies), "mean_total_score": self.mean_total_score,
                "n_traces": self.n_traces}


def render_judge_prompt(reasoning_trace: str) -> str:
    if not reasoning_trace or not reasoning_trace.strip():
        raise EmptyTrace("reasoning trace is empty")
    # plain substitution: traces may contain braces
    return _packaged_template("judge_prompt.txt").replace(_TRACE_SLOT, reasoning_trace.strip(), 1)


def _json_objects(text: str) -> Iterable[dict]:
    dec = json.JSONDecoder()
    i = text.find("{")
    while i != -1:
        try:
            obj, _ = dec.raw_decode(text, i)
        except json.JSONDecodeError:
            obj = None
        if isinstance(obj, dict):
            yield obj
        i = text.find("{", i + 1)


def _binary(key: str, v) -> int:
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, int) and v in (0, 1):
        return v
    raise NonBinaryValue(f"{key}: expected 0/1 or true/false, got {v!r}")


def parse_judge_json(text: str) -> RubricAnnotation:
    """First JSON object in ``text`` carrying all six behavior keys.

    Prose around the object is ignored. Key names are matched exactly;
    booleans are accepted for 0/1.
    """
    best_missing = set(BEHAVIORS)
    for obj in _json_objects(text or ""):
        missing = set(BEHAVIORS) - set(obj)
        if not missing:
            return RubricAnnotation(**{k: _binary(k, obj[k]) for k in BEHAVIORS})
        if len(missing) < len(best_missing):
            best_missing = missing
    raise MissingKeys(f"no JSON object with all rubric keys; missing {sorted(best_missing)}", best_missing)


def aggregate_rubric(annotations: Sequence[RubricAnnotation]) -> RubricSummary:
    if not annotations:
        raise InputError("no annotations to aggregate")
    n = len(annotations)
    freqs = {k: sum(getattr(a, k) for a in annotations) / n for k in BEHAVIORS}
    mean_total = sum(a.total for a in annotations) / n
    return RubricSummary(freqs, mean_total, n)


def check_judge_config(config: EndpointConfig) -> None:
    if config.temperature != 0:
        raise JudgeConfigError(f"judge decoding must be deterministic (temperature 0), got {config.temperature}")


def judge_trace(trace: str, client: ChatClient, tag: str = "") -> RubricAnnotation:
    check_judge_config(client.config)
    raw = client.complete(render_judge_prompt(trace), n=1, tag=tag)[0]
    return parse_judge_json(raw)


def judge_many(
    traces: Sequence[tuple[str, str]],
    client: ChatClient,
    parallelism: int = 1,
) -> tuple[list[tuple[str, RubricAnnotation]], list[tuple[str, str]]]:
    """Judge ``(key, trace)`` pairs independently, one request each.

    Returns annotated pairs and ``(key, error)`` failures, both in input order.
    """
    check_judge_config(client.config)

    def one(item):
        key, trace = item
        try:
            return key, judge_trace(trace, client, tag=key), None
        except (EmptyTrace, MissingKeys, NonBinaryValue) as exc:
            return key, None, f"{type(exc).__name__}: {exc}"

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(one, traces))
    else:
        results = [one(t) for t in traces]
    done = [(k, a) for k, a, err in results if a is not None]
    failed = [(k, err) for k, a, err in results if a is None]
    return done, failed
