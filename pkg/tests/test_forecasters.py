import json

import httpx
import numpy as np
import pytest
from hypothesis import given, strategies as st

from supplycast.errors import AnswerUnparseable, EndpointUnavailable, InputError
from supplycast.forecasters import (
    ChatClient,
    ConstantBackend,
    EndpointConfig,
    FeatureConfig,
    Forecast,
    RemoteBackend,
    ToyBackend,
    ToyPolicy,
    constant_forecast,
    featurize,
    forecast_many,
    make_backend,
    read_forecasts_jsonl,
    remote_forecast,
    sigmoid,
    toy_forecast,
    write_forecasts_jsonl,
)
from supplycast.index_core import EntityId
from supplycast.promptkit import render_prompt

from conftest import article, question

VN = EntityId("country", "vietnam")


def _reply(*contents, status=200):
    return httpx.Response(status, json={"choices": [{"message": {"content": c}} for c in contents]})


class Scripted:
    """Mock endpoint replaying a fixed list of responses, recording requests."""

    def __init__(self, responses):
        self.responses = list(responses)
        self.requests = []

    def __call__(self, request):
        self.requests.append(json.loads(request.content))
        r = self.responses.pop(0)
        if isinstance(r, Exception):
            raise r
        return r


def _client(script, tmp_path=None, **cfg):
    conf = EndpointConfig(base_url="http://mock/v1", model="m", retry_cap=cfg.pop("retry_cap", 3), **cfg)
    sleeps = []
    c = ChatClient(conf, transport=httpx.MockTransport(script),
                   transcript_path=None if tmp_path is None else tmp_path / "t.jsonl", sleep=sleeps.append)
    return c, sleeps


# ---------------------------------------------------------------- client


def test_retry_on_malformed_then_valid(tmp_path):
    script = Scripted([httpx.Response(200, text="not json"), httpx.Response(200, json={"choices": []}),
                       _reply("fine <answer>0.4</answer>")])
    c, sleeps = _client(script, tmp_path)
    f = remote_forecast(question(), c.config, c)
    assert f.probability == 0.4
    assert len(script.requests) == 3
    assert sleeps == [1.0, 2.0]
    lines = [json.loads(x) for x in (tmp_path / "t.jsonl").read_text().splitlines()]
    assert [("error" in x) for x in lines] == [True, True, False]


def test_retries_429_and_5xx_then_gives_up():
    script = Scripted([httpx.Response(429), httpx.Response(503), httpx.ConnectError("down"),
                       httpx.Response(500)])
    c, sleeps = _client(script)
    with pytest.raises(EndpointUnavailable):
        c.complete("hi")
    assert len(script.requests) == 4
    assert sleeps == [1.0, 2.0, 4.0]


def test_backoff_is_capped():
    script = Scripted([httpx.Response(500)] * 6)
    c, sleeps = _client(script, retry_cap=5, backoff_max=3.0)
    with pytest.raises(EndpointUnavailable):
        c.complete("hi")
    assert sleeps == [1.0, 2.0, 3.0, 3.0, 3.0]


def test_client_error_is_not_retried():
    script = Scripted([httpx.Response(401, text="bad key")])
    c, _ = _client(script)
    with pytest.raises(EndpointUnavailable, match="401"):
        c.complete("hi")
    assert len(script.requests) == 1


def test_request_payload(monkeypatch):
    monkeypatch.setenv("TEST_KEY", "sekrit")
    seen = {}

    def handler(req):
        seen["auth"] = req.headers.get("authorization")
        seen["url"] = str(req.url)
        seen["body"] = json.loads(req.content)
        return _reply("a", "b", "c")

    conf = EndpointConfig(base_url="http://mock/v1/", model="m", api_key_env="TEST_KEY", max_tokens=64)
    out = ChatClient(conf, transport=httpx.MockTransport(handler)).complete("hello", n=3, temperature=0.7)
    assert out == ["a", "b", "c"]
    assert seen["auth"] == "Bearer sekrit"
    assert seen["url"] == "http://mock/v1/chat/completions"
    assert seen["body"] == {"model": "m", "messages": [{"role": "user", "content": "hello"}],
                            "temperature": 0.7, "n": 3, "max_tokens": 64}


def test_n_samples_topped_up_when_server_ignores_n():
    script = Scripted([_reply("x"), _reply("y")])
    c, _ = _client(script)
    assert c.complete("hi", n=2) == ["x", "y"]


def test_missing_api_key_env(monkeypatch):
    monkeypatch.delenv("NOPE_KEY", raising=False)
    with pytest.raises(InputError):
        EndpointConfig(base_url="http://x", model="m", api_key_env="NOPE_KEY").api_key()


def test_endpoint_config_rejects_unknown_keys():
    with pytest.raises(InputError):
        EndpointConfig.from_dict({"base_url": "x", "model": "m", "temprature": 0})


def test_unparseable_answer_keeps_raw_output():
    c, _ = _client(Scripted([_reply("I think maybe 30%")]))
    with pytest.raises(AnswerUnparseable) as exc:
        remote_forecast(question(), c.config, c)
    assert exc.value.raw_output == "I think maybe 30%"


def test_remote_backend_first_parseable_sample():
    conf = EndpointConfig(base_url="http://mock", model="m", n_samples=3)
    script = Scripted([_reply("junk", "r <answer>0.2</answer>", "<answer>0.9</answer>")])
    b = RemoteBackend(conf, ChatClient(conf, transport=httpx.MockTransport(script)))
    q = question()
    f = b.forecast(q, render_prompt(q))
    assert f.probability == 0.2
    assert len(b.rollouts[q.id]) == 3


# ---------------------------------------------------------------- batch


def test_forecast_many_collects_failures_and_sorts():
    outputs = {"country:vietnam:2024-01": "<answer>0.1</answer>", "country:vietnam:2024-02": "nope",
               "country:vietnam:2024-03": "<answer>0.3</answer>"}

    def handler(req):
        prompt = json.loads(req.content)["messages"][0]["content"]
        month = [m for m in ("January", "February", "March") if f"As of {m} 2024" in prompt][0]
        qid = {"January": "2024-01", "February": "2024-02", "March": "2024-03"}[month]
        return _reply(outputs[f"country:vietnam:{qid}"])

    conf = EndpointConfig(base_url="http://mock", model="m")
    backend = RemoteBackend(conf, ChatClient(conf, transport=httpx.MockTransport(handler)))
    qs = [question(t) for t in ("2024-03", "2024-01", "2024-02")]
    seen = []
    fcs, fails = forecast_many(qs, backend, parallelism=3, on_result=seen.append)
    assert [f.question_id for f in fcs] == ["country:vietnam:2024-01", "country:vietnam:2024-03"]
    assert [f.question_id for f in fails] == ["country:vietnam:2024-02"]
    assert fails[0].raw_output == "nope"
    assert len(seen) == 3


def test_forecast_many_propagates_exhaustion():
    conf = EndpointConfig(base_url="http://mock", model="m", retry_cap=0)
    backend = RemoteBackend(conf, ChatClient(conf, transport=httpx.MockTransport(lambda r: httpx.Response(503)),
                                             sleep=lambda s: None))
    with pytest.raises(EndpointUnavailable):
        forecast_many([question()], backend, parallelism=2)


def test_constant_backend_and_io(tmp_path):
    qs = [question("2024-02"), question("2024-01")]
    fcs, _ = forecast_many(qs, ConstantBackend(0.149))
    assert [f.probability for f in fcs] == [0.149, 0.149]
    write_forecasts_jsonl(fcs, tmp_path / "f.jsonl")
    assert read_forecasts_jsonl(tmp_path / "f.jsonl") == fcs
    with pytest.raises(InputError):
        constant_forecast(1.5, qs[0])
    with pytest.raises(ValueError):
        Forecast("x", 1.01)


def test_make_backend(tmp_path):
    ToyPolicy(np.zeros(12), FeatureConfig().names).save(tmp_path / "p.json")
    assert isinstance(make_backend({"backend": "toy", "policy": str(tmp_path / "p.json")}), ToyBackend)
    assert isinstance(make_backend({"backend": "constant", "rate": 0.1}), ConstantBackend)
    with pytest.raises(InputError):
        make_backend({"backend": "oracle"})


# ---------------------------------------------------------------- toy policy


def test_featurize_counts_keywords_inside_window():
    news = [
        article("a", "2024-03-10", VN, "Port strike", "Strikes spread to ports; tariffs loom"),
        article("b", "2024-02-10", VN, "Old strike", "strike"),
    ]
    q = question("2024-03", news=news, current_index=1.5, prior_change=0.23, sigma=0.46, months_since_event=20)
    x = featurize(q)
    kw = dict(zip(FeatureConfig().keywords, x.news_signal_counts))
    assert kw["strike"] == 2 and kw["port"] == 2 and kw["tariff"] == 1 and kw["flood"] == 0
    assert x.change_over_sigma == pytest.approx(0.5)
    assert x.months_since_event == 12
    wide = featurize(q, FeatureConfig(news_window_months=2))
    assert dict(zip(FeatureConfig().keywords, wide.news_signal_counts))["strike"] == 4
    assert len(x.as_array()) == len(FeatureConfig().names)


def test_keyword_match_is_word_bounded():
    q = question(news=[article("a", "2024-03-10", VN, "Airport passport", "sporty")])
    assert sum(featurize(q).news_signal_counts) == 0


@given(st.floats(-800, 800))
def test_sigmoid_stable_and_symmetric(z):
    s = sigmoid(z)
    assert 0.0 <= s <= 1.0
    assert s + sigmoid(-z) == pytest.approx(1.0)


def test_toy_policy_roundtrip_and_forecast(tmp_path):
    w = np.arange(12) / 10.0
    pol = ToyPolicy(w, FeatureConfig().names)
    pol.save(tmp_path / "p.json")
    back = ToyPolicy.load(tmp_path / "p.json")
    x = featurize(question())
    assert toy_forecast(back, x) == pytest.approx(1 / (1 + np.exp(-x.as_array() @ w)))
    with pytest.raises(InputError):
        toy_forecast(pol, np.ones(3))
