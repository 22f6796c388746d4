"""Model back ends and per-call token usage.

Provider-reported usage is authoritative. :func:`estimate_tokens` exists only
to apportion a call's reported input total across the tagged messages that
made up the request.
"""

from __future__ import annotations

import json
import logging
import os
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol

import httpx

from .messages import Message, ToolCall

log = logging.getLogger(__name__)

API_KEY_ENV = "OPENAI_API_KEY"
DEFAULT_ENDPOINT = "https://api.openai.com/v1"
MAX_RETRIES = 3


class ProviderError(RuntimeError):
    """Fatal provider failure (auth, quota, or retries exhausted)."""


class ScriptError(RuntimeError):
    """The scripted backend cannot serve the request (empty or exhausted script)."""


@dataclass(frozen=True)
class Usage:
    input_tokens: int = 0
    output_tokens: int = 0
    reasoning_tokens: int = 0
    # components the provider did not report (recorded as 0)
    missing: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if min(self.input_tokens, self.output_tokens, self.reasoning_tokens) < 0:
            raise ValueError("token counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.input_tokens + self.output_tokens + self.reasoning_tokens

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "input": self.input_tokens,
            "output": self.output_tokens,
            "reasoning": self.reasoning_tokens,
        }
        if self.missing:
            d["missing"] = list(self.missing)
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Usage:
        missing = tuple(k for k in ("input", "output", "reasoning") if data.get(k) is None)
        missing = tuple(sorted(set(missing) | set(data.get("missing", ()))))
        return cls(
            int(data.get("input") or 0),
            int(data.get("output") or 0),
            int(data.get("reasoning") or 0),
            missing,
        )


@dataclass
class CallRecord:
    """One model call, with the request facts needed to attribute its tokens.

    ``request`` holds ``(tag, estimated_tokens)`` for each message sent;
    ``context`` holds booleans describing what the call did (see
    :func:`call_context`).
    """

    index: int
    usage: Usage
    phase: str
    request: list[tuple[str, int]] = field(default_factory=list)
    tool_schemas_size: int = 0
    produced_tool_calls: list[str] = field(default_factory=list)
    context: dict[str, bool] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "phase": self.phase,
            "usage": self.usage.to_dict(),
            "request": [[tag, size] for tag, size in self.request],
            "tool_schemas_size": self.tool_schemas_size,
            "produced_tool_calls": list(self.produced_tool_calls),
            "context": dict(sorted(self.context.items())),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> CallRecord:
        return cls(
            index=int(data["index"]),
            usage=Usage.from_dict(data["usage"]),
            phase=data["phase"],
            request=[(str(t), int(n)) for t, n in data.get("request", [])],
            tool_schemas_size=int(data.get("tool_schemas_size", 0)),
            produced_tool_calls=list(data.get("produced_tool_calls", [])),
            context={k: bool(v) for k, v in data.get("context", {}).items()},
        )


def estimate_tokens(text: str) -> int:
    """Approximate token count: one token per four UTF-8 bytes, rounded up.

    Deterministic and monotone under concatenation; not a real tokenizer.
    """
    return (len(text.encode("utf-8")) + 3) // 4


def estimate_message(message: Message) -> int:
    size = estimate_tokens(message.content) + 4
    for call in message.tool_calls:
        size += estimate_tokens(call.name) + estimate_tokens(json.dumps(call.arguments, sort_keys=True))
    return size


def largest_remainder(weights: Sequence[int | float], total: int) -> list[int]:
    """Split ``total`` proportionally to ``weights`` into integers summing to ``total``.

    Leftover units go to the largest fractional remainders; ties go to the
    earlier entry. All-zero weights put everything in the last slot.
    """
    if total < 0:
        raise ValueError("total must be nonnegative")
    if not weights:
        if total:
            raise ValueError("cannot split a nonzero total over no weights")
        return []
    wsum = sum(weights)
    if wsum <= 0:
        return [0] * (len(weights) - 1) + [total]
    # exact integer arithmetic when weights are ints
    shares = []
    for w in weights:
        num = w * total
        q = int(num // wsum)
        shares.append((q, num - q * wsum))
    parts = [q for q, _ in shares]
    leftover = total - sum(parts)
    order = sorted(range(len(weights)), key=lambda i: (-shares[i][1], i))
    for i in order[:leftover]:
        parts[i] += 1
    return parts


# -- back ends ---------------------------------------------------------------


class LlmBackend(Protocol):
    def chat(
        self,
        messages: Sequence[Message],
        tool_schemas: Sequence[Mapping[str, Any]],
        *,
        temperature: float,
        model_id: str,
    ) -> tuple[Message, Usage]: ...


def _check_request(messages: Sequence[Message]) -> None:
    if not messages:
        raise ValueError("chat needs at least one message")
    if messages[0].role != "system":
        raise ValueError("first message must be the system prompt")


@dataclass(frozen=True)
class ScriptTurn:
    assistant_text: str
    tool_calls: tuple[ToolCall, ...]
    usage: Usage


def load_script(path: str | Path) -> list[ScriptTurn]:
    """Read a ``*.script.json`` array of ``{assistant_text, tool_calls, usage}``."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, list):
        raise ScriptError(f"{path}: script must be a JSON array of turns")
    return parse_script(data)


def parse_script(data: Sequence[Mapping[str, Any]]) -> list[ScriptTurn]:
    turns = []
    for n, entry in enumerate(data, start=1):
        calls = tuple(
            ToolCall(
                id=c.get("id") or f"call_{n}_{j}",
                name=c["name"],
                arguments=dict(c.get("arguments") or {}),
            )
            for j, c in enumerate(entry.get("tool_calls") or [], start=1)
        )
        turns.append(
            ScriptTurn(
                assistant_text=entry.get("assistant_text") or "",
                tool_calls=calls,
                usage=Usage.from_dict(entry.get("usage") or {}),
            )
        )
    return turns


def scripted_chat(script: Sequence[ScriptTurn], cursor: int) -> tuple[Message, Usage]:
    if not script:
        raise ScriptError("script is empty")
    if cursor >= len(script):
        raise ScriptError(f"script exhausted after {len(script)} turns")
    turn = script[cursor]
    msg = Message("assistant", turn.assistant_text, tool_calls=list(turn.tool_calls))
    return msg, turn.usage


class ScriptedBackend:
    """Replays a fixed script verbatim, including its usage numbers."""

    def __init__(self, script: Sequence[ScriptTurn]) -> None:
        if not script:
            raise ScriptError("script is empty")
        self.script = list(script)
        self.cursor = 0

    @classmethod
    def from_file(cls, path: str | Path) -> ScriptedBackend:
        return cls(load_script(path))

    def chat(self, messages, tool_schemas, *, temperature: float, model_id: str) -> tuple[Message, Usage]:
        _check_request(messages)
        msg, usage = scripted_chat(self.script, self.cursor)
        self.cursor += 1
        return msg, usage


class OpenAIBackend:
    """Chat-completions client for OpenAI-compatible endpoints.

    Transient failures (network errors, 5xx, rate limiting) are retried up
    to :data:`MAX_RETRIES` times with exponential backoff; auth and quota
    errors are fatal.
    """

    def __init__(
        self,
        endpoint: str = DEFAULT_ENDPOINT,
        api_key: str | None = None,
        *,
        client: httpx.Client | None = None,
        timeout: float = 300.0,
        backoff: float = 1.0,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        if not key:
            raise ProviderError(f"no API key: set {API_KEY_ENV}")
        self.endpoint = endpoint.rstrip("/")
        self.client = client or httpx.Client(timeout=timeout)
        self.headers = {"Authorization": f"Bearer {key}"}
        self.backoff = backoff
        self.sleep = sleep

    def chat(self, messages, tool_schemas, *, temperature: float, model_id: str) -> tuple[Message, Usage]:
        _check_request(messages)
        body: dict[str, Any] = {
            "model": model_id,
            "temperature": temperature,
            "messages": [to_openai_message(m) for m in messages],
        }
        if tool_schemas:
            body["tools"] = [{"type": "function", "function": dict(s)} for s in tool_schemas]
        data = self._post(body)
        return parse_openai_response(data)

    def _post(self, body: dict[str, Any]) -> dict[str, Any]:
        url = f"{self.endpoint}/chat/completions"
        attempt = 0
        while True:
            try:
                resp = self.client.post(url, json=body, headers=self.headers)
            except httpx.TransportError as exc:
                reason = f"transport error: {exc}"
            else:
                if resp.status_code == 200:
                    return resp.json()
                if resp.status_code in (401, 403):
                    raise ProviderError(f"authentication failed ({resp.status_code}): {resp.text[:500]}")
                if resp.status_code == 429 and "insufficient_quota" in resp.text:
                    raise ProviderError(f"quota exhausted: {resp.text[:500]}")
                if resp.status_code != 429 and resp.status_code < 500:
                    raise ProviderError(f"request rejected ({resp.status_code}): {resp.text[:500]}")
                reason = f"HTTP {resp.status_code}"
            if attempt >= MAX_RETRIES:
                raise ProviderError(f"provider unavailable after {MAX_RETRIES} retries ({reason})")
            delay = self.backoff * (2**attempt)
            log.warning("transient provider failure (%s); retrying in %.1fs", reason, delay)
            self.sleep(delay)
            attempt += 1


def to_openai_message(m: Message) -> dict[str, Any]:
    out: dict[str, Any] = {"role": m.role, "content": m.content}
    if m.tool_calls:
        out["tool_calls"] = [
            {
                "id": c.id,
                "type": "function",
                "function": {"name": c.name, "arguments": json.dumps(c.arguments)},
            }
            for c in m.tool_calls
        ]
    if m.tool_call_id:
        out["tool_call_id"] = m.tool_call_id
    return out


def parse_openai_response(data: Mapping[str, Any]) -> tuple[Message, Usage]:
    choice = data["choices"][0]["message"]
    calls = []
    for j, raw in enumerate(choice.get("tool_calls") or [], start=1):
        fn = raw.get("function", {})
        try:
            args = json.loads(fn.get("arguments") or "{}")
            if not isinstance(args, dict):
                raise ValueError("arguments are not an object")
        except ValueError:
            # the toolkit reports unexpected arguments as a structured error
            args = {"_malformed_arguments": fn.get("arguments")}
        calls.append(ToolCall(id=raw.get("id") or f"call_{j}", name=fn.get("name", ""), arguments=args))
    msg = Message("assistant", choice.get("content") or "", tool_calls=calls)

    usage = data.get("usage") or {}
    missing = []
    prompt = usage.get("prompt_tokens")
    completion = usage.get("completion_tokens")
    reasoning = (usage.get("completion_tokens_details") or {}).get("reasoning_tokens")
    if prompt is None:
        missing.append("input")
    if completion is None:
        missing.append("output")
    if reasoning is None:
        missing.append("reasoning")
    # completion_tokens already includes reasoning tokens
    output = max((completion or 0) - (reasoning or 0), 0)
    if missing:
        log.warning("provider usage incomplete; missing %s recorded as 0", ", ".join(missing))
    return msg, Usage(prompt or 0, output, reasoning or 0, tuple(missing))
