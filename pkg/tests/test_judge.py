import json

import httpx
import pytest
from hypothesis import given, strategies as st

from supplycast.errors import EmptyTrace, InputError, JudgeConfigError, MissingKeys, NonBinaryValue
from supplycast.forecasters import ChatClient, EndpointConfig
from supplycast.judge import (
    BEHAVIORS,
    RubricAnnotation,
    aggregate_rubric,
    check_judge_config,
    judge_many,
    parse_judge_json,
    render_judge_prompt,
)

ALL_ON = {b: 1 for b in BEHAVIORS}

# raw judge replies in the shapes seen from chat models
TRANSCRIPTS = {
    "bare": json.dumps(ALL_ON),
    "fenced": "Here is my assessment:\n```json\n" + json.dumps({**ALL_ON, "base_rate": 0}, indent=2) + "\n```\n",
    "bools": "{" + ", ".join(f'"{b}": {"true" if i % 2 else "false"}' for i, b in enumerate(BEHAVIORS)) + "}",
    "preamble_with_braces": "The trace uses {curly} notation. " + json.dumps({**ALL_ON, "evidence_linkage": 0}),
    "partial_then_full": '{"base_rate": 1} then the full answer ' + json.dumps(ALL_ON),
}


def test_prompt_embeds_trace_verbatim():
    trace = 'Base rate is {0.15}; model says {"x": 1}.'
    text = render_judge_prompt(trace)
    assert trace in text
    assert text.index("Be strict and literal.") < text.index(trace)
    for b in BEHAVIORS:
        assert f'"{b}"' in text


def test_empty_trace():
    with pytest.raises(EmptyTrace):
        render_judge_prompt("  \n")


@pytest.mark.parametrize("name, expected_total", [("bare", 6), ("fenced", 5), ("bools", 3),
                                                  ("preamble_with_braces", 5), ("partial_then_full", 6)])
def test_parse_transcripts(name, expected_total):
    assert parse_judge_json(TRANSCRIPTS[name]).total == expected_total


def test_missing_keys_are_named():
    with pytest.raises(MissingKeys) as exc:
        parse_judge_json(json.dumps({b: 1 for b in BEHAVIORS[:4]}))
    assert exc.value.missing == sorted(BEHAVIORS[4:])
    with pytest.raises(MissingKeys):
        parse_judge_json("no json at all")


@pytest.mark.parametrize("bad", [2, "yes", 0.5, None, -1])
def test_non_binary_values(bad):
    with pytest.raises(NonBinaryValue):
        parse_judge_json(json.dumps({**ALL_ON, "base_rate": bad}))


@given(st.lists(st.tuples(*[st.sampled_from([0, 1])] * 6), min_size=1, max_size=40))
def test_aggregate_matches_counts(rows):
    anns = [RubricAnnotation(*r) for r in rows]
    s = aggregate_rubric(anns)
    for k, b in enumerate(BEHAVIORS):
        assert s.frequencies[b] == sum(r[k] for r in rows) / len(rows)
    assert s.mean_total_score == pytest.approx(sum(s.frequencies.values()))
    assert 0 <= s.mean_total_score <= 6


def test_aggregate_empty():
    with pytest.raises(InputError):
        aggregate_rubric([])


def test_judge_requires_temperature_zero():
    with pytest.raises(JudgeConfigError):
        check_judge_config(EndpointConfig(base_url="http://x", model="j", temperature=0.3))


def test_judge_many_with_mock_endpoint():
    def handler(req):
        prompt = json.loads(req.content)["messages"][0]["content"]
        body = TRANSCRIPTS["fenced"] if "trace-A" in prompt else "I refuse to output JSON"
        assert json.loads(req.content)["temperature"] == 0
        return httpx.Response(200, json={"choices": [{"message": {"content": body}}]})

    conf = EndpointConfig(base_url="http://mock", model="judge")
    client = ChatClient(conf, transport=httpx.MockTransport(handler))
    done, failed = judge_many([("a", "trace-A reasoning"), ("b", "trace-B reasoning")], client, parallelism=2)
    assert [(k, a.total) for k, a in done] == [("a", 5)]
    assert failed[0][0] == "b" and "MissingKeys" in failed[0][1]
