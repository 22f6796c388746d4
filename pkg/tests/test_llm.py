import json

import httpx
import pytest
from hypothesis import given
from hypothesis import strategies as st

from covclose import llm
from covclose.llm import OpenAIBackend, ProviderError, ScriptedBackend, ScriptError, Usage
from covclose.messages import Message

SYS = [Message("system", "be helpful", tag="system_prompt")]


def script(n):
    return llm.parse_script(
        [
            {
                "assistant_text": f"turn {i}",
                "tool_calls": [{"name": "list_directory", "arguments": {"path": "."}}] if i % 2 else [],
                "usage": {"input": 100 * i, "output": 10, "reasoning": 5},
            }
            for i in range(n)
        ]
    )


def chat(backend, messages=SYS):
    return backend.chat(messages, [], temperature=0.4, model_id="m")


def test_usage_total():
    assert Usage(1000, 200, 300).total == 1500


def test_usage_missing_component_recorded_as_zero():
    u = Usage.from_dict({"input": 10, "output": 3})
    assert u.reasoning_tokens == 0 and u.missing == ("reasoning",)
    assert Usage.from_dict(u.to_dict()) == u


def test_replay_is_deterministic():
    a, b = ScriptedBackend(script(3)), ScriptedBackend(script(3))
    ra = [chat(a) for _ in range(3)]
    rb = [chat(b) for _ in range(3)]
    assert ra == rb
    assert ra[1][0].tool_calls[0].id == "call_2_1"


def test_empty_script_is_an_error():
    with pytest.raises(ScriptError):
        ScriptedBackend([])


def test_exhausted_script_is_an_error():
    backend = ScriptedBackend(script(1))
    chat(backend)
    with pytest.raises(ScriptError):
        chat(backend)


def test_load_script_file(tmp_path):
    path = tmp_path / "s.json"
    path.write_text(json.dumps([{"assistant_text": "hi", "usage": {"input": 1, "output": 2, "reasoning": 3}}]))
    (turn,) = llm.load_script(path)
    assert turn.usage.total == 6 and turn.tool_calls == ()


def test_estimate_tokens():
    assert llm.estimate_tokens("") == 0
    assert llm.estimate_tokens("abcd") == 1
    assert llm.estimate_tokens("abcde") == 2


@given(st.lists(st.integers(0, 10_000), min_size=1, max_size=8), st.integers(0, 100_000))
def test_largest_remainder_is_exact(weights, total):
    parts = llm.largest_remainder(weights, total)
    assert sum(parts) == total
    assert all(p >= 0 for p in parts)
    s = sum(weights)
    if s:
        for w, p in zip(weights, parts):
            assert abs(p - total * w / s) < 1
            if w == 0:
                assert p == 0


def test_largest_remainder_examples():
    assert llm.largest_remainder([70, 30], 1000) == [700, 300]
    assert llm.largest_remainder([1, 1, 1], 2) == [1, 1, 0]
    assert llm.largest_remainder([0, 0], 5) == [0, 5]


# -- live provider, against a mock transport --


def completion(content="ok", tool_calls=None, usage=None):
    msg = {"role": "assistant", "content": content}
    if tool_calls:
        msg["tool_calls"] = tool_calls
    return {
        "choices": [{"message": msg}],
        "usage": usage
        if usage is not None
        else {"prompt_tokens": 120, "completion_tokens": 50, "completion_tokens_details": {"reasoning_tokens": 30}},
    }


def backend_with(responses, sleeps=None):
    queue = list(responses)
    seen = []

    def handler(request):
        seen.append(json.loads(request.content))
        status, body = queue.pop(0)
        return httpx.Response(status, json=body)

    client = httpx.Client(transport=httpx.MockTransport(handler))
    sleeps = sleeps if sleeps is not None else []
    return OpenAIBackend("http://x/v1", api_key="k", client=client, sleep=sleeps.append), seen


def test_openai_usage_split():
    backend, seen = backend_with([(200, completion())])
    msg, usage = chat(backend)
    assert msg.content == "ok"
    assert (usage.input_tokens, usage.output_tokens, usage.reasoning_tokens) == (120, 20, 30)
    assert seen[0]["model"] == "m" and seen[0]["temperature"] == 0.4


def test_openai_tool_calls_and_malformed_arguments():
    calls = [
        {"id": "a", "type": "function", "function": {"name": "read_file", "arguments": '{"path": "x"}'}},
        {"id": "b", "type": "function", "function": {"name": "read_file", "arguments": "{not json"}},
    ]
    backend, _ = backend_with([(200, completion("", calls))])
    msg, _ = chat(backend)
    assert msg.tool_calls[0].arguments == {"path": "x"}
    assert "_malformed_arguments" in msg.tool_calls[1].arguments


def test_openai_missing_usage_flagged():
    backend, _ = backend_with([(200, completion(usage={"prompt_tokens": 5}))])
    _, usage = chat(backend)
    assert usage.input_tokens == 5 and set(usage.missing) == {"output", "reasoning"}


def test_openai_retries_transient_with_backoff():
    sleeps = []
    backend, seen = backend_with([(503, {}), (429, {"error": "slow down"}), (200, completion())], sleeps)
    chat(backend)
    assert len(seen) == 3 and sleeps == [1.0, 2.0]


def test_openai_gives_up_after_three_retries():
    sleeps = []
    backend, seen = backend_with([(500, {})] * 4, sleeps)
    with pytest.raises(ProviderError, match="3 retries"):
        chat(backend)
    assert len(seen) == 4 and sleeps == [1.0, 2.0, 4.0]


@pytest.mark.parametrize(
    "status, body", [(401, {"error": "bad key"}), (403, {}), (429, {"error": {"code": "insufficient_quota"}})]
)
def test_openai_fatal_errors_not_retried(status, body):
    backend, seen = backend_with([(status, body)])
    with pytest.raises(ProviderError):
        chat(backend)
    assert len(seen) == 1


def test_openai_needs_api_key(monkeypatch):
    monkeypatch.delenv("OPENAI_API_KEY", raising=False)
    with pytest.raises(ProviderError, match="OPENAI_API_KEY"):
        OpenAIBackend()


def test_openai_request_shape():
    backend, seen = backend_with([(200, completion())])
    history = SYS + [
        Message("assistant", "", tool_calls=[llm.ToolCall("c1", "read_file", {"path": "a"})]),
        Message("tool", "text", tool_call_id="c1"),
    ]
    backend.chat(history, [{"name": "read_file", "parameters": {}}], temperature=0.0, model_id="m")
    body = seen[0]
    assert body["tools"][0]["type"] == "function"
    assert body["messages"][1]["tool_calls"][0]["function"]["arguments"] == '{"path": "a"}'
    assert body["messages"][2]["tool_call_id"] == "c1"
