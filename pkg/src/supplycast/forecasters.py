"""Forecasting backends behind one interface.

Three backends: a constant historical-rate baseline, a remote chat-completions
endpoint, and a small logistic policy over hand-built features that can be
trained on the log-score reward (see :mod:`supplycast.training`).
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import httpx
import numpy as np

from .dataset import ForecastingQuestion
from .errors import AnswerParseError, AnswerUnparseable, EndpointUnavailable, InputError
from .promptkit import RenderedPrompt, parse_answer, render_prompt

log = logging.getLogger(__name__)

DEFAULT_KEYWORDS = ("strike", "tariff", "sanction", "shortage", "flood", "port", "shutdown")


@dataclass
class Forecast:
    question_id: str
    probability: float
    reasoning: str = ""
    backend: str = ""
    latency_ms: int | None = None
    prompt_sha256: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"{self.question_id}: probability {self.probability} outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "Forecast":
        return cls(
            question_id=d["question_id"],
            probability=float(d["probability"]),
            reasoning=d.get("reasoning", "") or "",
            backend=d.get("backend", ""),
            latency_ms=d.get("latency_ms"),
            prompt_sha256=d.get("prompt_sha256"),
        )


# ---------------------------------------------------------------- constant


def constant_forecast(rate: float, q: ForecastingQuestion) -> Forecast:
    if not 0.0 <= rate <= 1.0:
        raise InputError(f"baseline rate {rate} outside [0, 1]")
    return Forecast(q.id, float(rate), "", "constant")


# ---------------------------------------------------------------- remote endpoint


@dataclass
class EndpointConfig:
    base_url: str
    model: str
    api_key_env: str | None = None
    max_parallelism: int = 4
    timeout: float = 60.0
    retry_cap: int = 4
    temperature: float = 0.0
    n_samples: int = 1
    max_tokens: int | None = None
    backoff_base: float = 1.0
    backoff_max: float = 30.0
    requests_per_second: float | None = None

    @classmethod
    def from_dict(cls, d: Mapping) -> "EndpointConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown endpoint config keys: {sorted(unknown)}")
        return cls(**d)

    def api_key(self) -> str | None:
        if not self.api_key_env:
            return None
        key = os.environ.get(self.api_key_env)
        if not key:
            raise InputError(f"environment variable {self.api_key_env} is not set")
        return key


class _RateLimiter:
    def __init__(self, per_second: float | None):
        self.interval = 1.0 / per_second if per_second else 0.0
        self._next = 0.0
        self._lock = threading.Lock()

    def wait(self, sleep=time.sleep):
        if not self.interval:
            return
        with self._lock:
            now = time.monotonic()
            start = max(now, self._next)
            self._next = start + self.interval
        if start > now:
            sleep(start - now)


class _Transient(Exception):
    pass


class ChatClient:
    """Minimal chat-completions client with retry, backoff and a rate limit.

    ``transport`` lets tests plug in :class:`httpx.MockTransport`;
    ``transcript_path`` appends one JSON line per attempt for audit.
    """

    def __init__(
        self,
        config: EndpointConfig,
        transport: httpx.BaseTransport | None = None,
        transcript_path: str | Path | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config
        headers = {"Content-Type": "application/json"}
        key = config.api_key()
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._http = httpx.Client(
            base_url=config.base_url.rstrip("/"), headers=headers, timeout=config.timeout, transport=transport
        )
        self._limiter = _RateLimiter(config.requests_per_second)
        self._sleep = sleep
        self._transcript_path = Path(transcript_path) if transcript_path else None
        self._transcript_lock = threading.Lock()

    def close(self):
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _record(self, entry: dict):
        if self._transcript_path is None:
            return
        with self._transcript_lock, open(self._transcript_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def _attempt(self, payload: dict) -> list[str]:
        self._limiter.wait(self._sleep)
        try:
            resp = self._http.post("/chat/completions", json=payload)
        except httpx.TransportError as exc:
            raise _Transient(f"transport error: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise _Transient(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise EndpointUnavailable(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
            contents = [c["message"]["content"] for c in body["choices"]]
        except (ValueError, KeyError, TypeError) as exc:
            raise _Transient(f"malformed response body: {exc}") from exc
        if not contents or not all(isinstance(c, str) for c in contents):
            raise _Transient("malformed response body: empty or non-text choices")
        return contents

    def complete(self, prompt: str, n: int = 1, tag: str = "", temperature: float | None = None) -> list[str]:
        """Return ``n`` completions of a single user message."""
        cfg = self.config
        payload = {
            "model": cfg.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": cfg.temperature if temperature is None else temperature,
        }
        if n > 1:
            payload["n"] = n
        if cfg.max_tokens:
            payload["max_tokens"] = cfg.max_tokens
        out: list[str] = []
        while len(out) < n:
            out.extend(self._complete_once(payload, tag))
        return out[:n]

    def _complete_once(self, payload: dict, tag: str) -> list[str]:
        cfg = self.config
        last_error = ""
        for attempt in range(cfg.retry_cap + 1):
            entry = {"tag": tag, "attempt": attempt, "model": cfg.model}
            try:
                contents = self._attempt(payload)
            except _Transient as exc:
                last_error = str(exc)
                self._record({**entry, "error": last_error})
                if attempt < cfg.retry_cap:
                    self._sleep(min(cfg.backoff_base * 2**attempt, cfg.backoff_max))
                continue
            except EndpointUnavailable as exc:
                self._record({**entry, "error": str(exc)})
                raise
            self._record({**entry, "prompt": payload["messages"][0]["content"], "outputs": contents})
            return contents
        raise EndpointUnavailable(f"{cfg.base_url}: gave up after {cfg.retry_cap + 1} attempts ({last_error})")


def remote_forecast(
    q: ForecastingQuestion,
    config: EndpointConfig,
    client: ChatClient | None = None,
    prompt: RenderedPrompt | None = None,
) -> Forecast:
    prompt = prompt or render_prompt(q)
    own = client is None
    client = client or ChatClient(config)
    try:
        t0 = time.perf_counter()
        raw = client.complete(prompt.text, n=1, tag=q.id)[0]
        latency = int(round((time.perf_counter() - t0) * 1000))
    finally:
        if own:
            client.close()
    try:
        parsed = parse_answer(raw)
    except AnswerParseError as exc:
        raise AnswerUnparseable(f"{q.id}: {exc}", raw_output=raw) from exc
    return Forecast(q.id, parsed.probability, parsed.reasoning, f"remote:{config.model}", latency, prompt.sha256)


def remote_rollouts(
    q: ForecastingQuestion, config: EndpointConfig, client: ChatClient, prompt: RenderedPrompt | None = None
) -> list[str]:
    """``config.n_samples`` raw completions for group-relative scoring."""
    prompt = prompt or render_prompt(q)
    return client.complete(prompt.text, n=config.n_samples, tag=q.id)


# ---------------------------------------------------------------- toy policy


@dataclass(frozen=True)
class FeatureConfig:
    keywords: tuple[str, ...] = DEFAULT_KEYWORDS
    months_since_cap: int = 12
    # keyword counts only look at articles published in the last N months up to t
    news_window_months: int = 1

    def to_dict(self) -> dict:
        return {"keywords": list(self.keywords), "months_since_cap": self.months_since_cap,
                "news_window_months": self.news_window_months}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureConfig":
        d = dict(d)
        if "keywords" in d:
            d["keywords"] = tuple(d["keywords"])
        return cls(**d)

    @property
    def names(self) -> list[str]:
        return ["current_level", "last_change", "change_over_sigma", "months_since_event",
                *(f"kw_{k}" for k in self.keywords), "bias"]


@dataclass(frozen=True)
class FeatureVector:
    current_level: float
    last_change: float
    change_over_sigma: float
    months_since_event: int
    news_signal_counts: tuple[int, ...]
    bias: float = 1.0

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.current_level, self.last_change, self.change_over_sigma, self.months_since_event,
             *self.news_signal_counts, self.bias],
            dtype=float,
        )


@lru_cache(maxsize=32)
def _keyword_patterns(keywords: tuple[str, ...]) -> list[re.Pattern]:
    return [re.compile(rf"\b{re.escape(k)}(?:s|es|ed|ing)?\b", re.IGNORECASE) for k in keywords]


def featurize(q: ForecastingQuestion, config: FeatureConfig = FeatureConfig()) -> FeatureVector:
    cap = config.months_since_cap
    since = cap if q.months_since_event is None else min(int(q.months_since_event), cap)
    earliest = q.t.shift(-(config.news_window_months - 1)).first_day()
    horizon = q.t.last_day()
    pats = _keyword_patterns(tuple(config.keywords))
    counts = [0] * len(pats)
    for a in q.news:
        if not earliest <= a.published <= horizon:
            continue
        blob = f"{a.title}\n{a.text}"
        for i, p in enumerate(pats):
            counts[i] += len(p.findall(blob))
    return FeatureVector(
        current_level=float(q.current_index),
        last_change=float(q.prior_change),
        change_over_sigma=float(q.prior_change) / float(q.sigma),
        months_since_event=since,
        news_signal_counts=tuple(counts),
    )


def sigmoid(z):
    """Overflow-safe logistic function for scalars or arrays."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


@dataclass
class ToyPolicy:
    weights: np.ndarray
    feature_names: list[str] = field(default_factory=list)
    feature_config: FeatureConfig = field(default_factory=FeatureConfig)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if not np.all(np.isfinite(self.weights)):
            raise InputError("policy weights must be finite")

    def to_dict(self) -> dict:
        return {
            "weights": [float(w) for w in self.weights],
            "feature_names": list(self.feature_names),
            "feature_config": self.feature_config.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ToyPolicy":
        return cls(np.asarray(d["weights"], dtype=float), list(d.get("feature_names", [])),
                   FeatureConfig.from_dict(d.get("feature_config", {})))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ToyPolicy":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def toy_forecast(policy: ToyPolicy, x: FeatureVector | np.ndarray) -> float:
    """p = 1 / (1 + exp(-w.x))."""
    arr = x.as_array() if isinstance(x, FeatureVector) else np.asarray(x, dtype=float)
    if arr.shape != policy.weights.shape:
        raise InputError(f"feature dimension {arr.shape} does not match weights {policy.weights.shape}")
    return float(sigmoid(float(arr @ policy.weights)))


# ---------------------------------------------------------------- backends


class Backend:
    name = "backend"

    def forecast(self, q: ForecastingQuestion, prompt: RenderedPrompt) -> Forecast:
        raise NotImplementedError

    def close(self):
        pass


class ConstantBackend(Backend):
    def __init__(self, rate: float):
        self.rate = float(rate)
        self.name = "constant"

    def forecast(self, q, prompt):
        f = constant_forecast(self.rate, q)
        f.prompt_sha256 = prompt.sha256
        return f


class ToyBackend(Backend):
    def __init__(self, policy: ToyPolicy):
        self.policy = policy
        self.name = "toy"

    def forecast(self, q, prompt):
        x = featurize(q, self.policy.feature_config)
        p = toy_forecast(self.policy, x)
        logit = float(x.as_array() @ self.policy.weights)
        return Forecast(q.id, p, f"logistic policy score {logit:+.4f}", self.name, None, prompt.sha256)


class RemoteBackend(Backend):
    def __init__(self, config: EndpointConfig, client: ChatClient | None = None, transcript_path=None):
        self.config = config
        self.client = client or ChatClient(config, transcript_path=transcript_path)
        self.name = f"remote:{config.model}"

        # raw samples per question when n_samples > 1, drained by the caller
        self.rollouts: dict[str, list[str]] = {}
        self._lock = threading.Lock()

    def forecast(self, q, prompt):
        if self.config.n_samples <= 1:
            return remote_forecast(q, self.config, self.client, prompt)
        t0 = time.perf_counter()
        outputs = remote_rollouts(q, self.config, self.client, prompt)
        latency = int(round((time.perf_counter() - t0) * 1000))
        with self._lock:
            self.rollouts[q.id] = outputs
        # the reported forecast is the first sample that parses
        for raw in outputs:
            try:
                parsed = parse_answer(raw)
            except AnswerParseError:
                continue
            return Forecast(q.id, parsed.probability, parsed.reasoning, self.name, latency, prompt.sha256)
        raise AnswerUnparseable(f"{q.id}: none of {len(outputs)} samples parsed", raw_output=outputs[0] if outputs else "")

    def close(self):
        self.client.close()


def make_backend(spec: Mapping, transcript_path=None) -> Backend:
    """Build a backend from a config mapping with a ``backend`` key."""
    kind = spec.get("backend")
    if kind == "constant":
        return ConstantBackend(spec["rate"])
    if kind == "toy":
        return ToyBackend(ToyPolicy.load(spec["policy"]))
    if kind == "remote":
        return RemoteBackend(EndpointConfig.from_dict(spec["endpoint"]), transcript_path=transcript_path)
    raise InputError(f"unknown backend {kind!r}; expected constant, toy or remote")


@dataclass
class ForecastFailure:
    question_id: str
    error: str
    raw_output: str = ""


def forecast_many(
    questions: Iterable[ForecastingQuestion],
    backend: Backend,
    parallelism: int = 1,
    representation: str = "full",
    on_result: Callable[[Forecast | ForecastFailure], None] | None = None,
) -> tuple[list[Forecast], list[ForecastFailure]]:
    """Forecast every question; results come back sorted by question id.

    Unparseable answers become :class:`ForecastFailure` records. Endpoint
    exhaustion propagates after in-flight work finishes, so partial results
    already passed to ``on_result`` survive for a resumed run.
    """
    forecasts: list[Forecast] = []
    failures: list[ForecastFailure] = []

    def one(q):
        prompt = render_prompt(q, representation=representation)
        try:
            return backend.forecast(q, prompt)
        except AnswerUnparseable as exc:
            return ForecastFailure(q.id, str(exc), exc.raw_output)

    def collect(res):
        (forecasts if isinstance(res, Forecast) else failures).append(res)
        if on_result is not None:
            on_result(res)

    questions = list(questions)
    if parallelism <= 1:
        for q in questions:
            collect(one(q))
    else:
        fatal = None
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            futures = [pool.submit(one, q) for q in questions]
            for fut in as_completed(futures):
                try:
                    collect(fut.result())
                except EndpointUnavailable as exc:
                    if fatal is None:
                        fatal = exc
                        for f in futures:
                            f.cancel()
        if fatal is not None:
            raise fatal
    forecasts.sort(key=lambda f: f.question_id)
    failures.sort(key=lambda f: f.question_id)
    return forecasts, failures


def read_forecasts_jsonl(path: str | Path) -> list[Forecast]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    out.append(Forecast.from_dict(json.loads(line)))
                except (json.JSONDecodeError, KeyError, ValueError) as exc:
                    raise InputError(f"{path}:{lineno}: {exc}") from None
    return out


def write_forecasts_jsonl(forecasts: Sequence[Forecast], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f in sorted(forecasts, key=lambda f: f.question_id):
            fh.write(json.dumps(f.to_dict(), sort_keys=True) + "\n")

