"""Six-node state graph driving the coverage-closure loop.

Initialize -> (Agent -> Tools -> UpdateState -> PruneContext -> route)* -> Finalize

The state is checkpointed to ``<workspace>/state.json`` after every node and
each node entry/exit is appended to ``logs/trace.ndjson``.
"""

from __future__ import annotations

import json
import logging
import os
import time
from collections.abc import Iterator, Mapping, Sequence
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from . import coverage as cov
from .llm import CallRecord, LlmBackend, estimate_message, estimate_tokens
from .messages import Message
from .state import (
    AgentState,
    FailureRecord,
    RunConfig,
    StateError,
    ToolOutcome,
    new_state,
    save_checkpoint,
)
from .taxonomy import HOLE_CATEGORIES
from .toolkit import TOOL_SCHEMAS, WORKSPACE_DIRS, Toolkit, top_module_name

log = logging.getLogger(__name__)

NODES = ("Initialize", "Agent", "Tools", "UpdateState", "PruneContext", "Finalize")
PRUNED_PLACEHOLDER = "[error log removed; a newer error log supersedes it]"


class SetupError(RuntimeError):
    pass


@dataclass(frozen=True)
class RouteDecision:
    next: str  # "Agent" or "Finalize"
    injected: Message | None = None

    def __post_init__(self) -> None:
        if self.next not in ("Agent", "Finalize"):
            raise ValueError(f"route cannot lead to {self.next!r}")


# -- prompts -------------------------------------------------------------------

_MOCK_FORMAT = """\
Testbench format (stimulus script, one directive per line):
- `drive <input>=<value> [<input>=<value> ...]` applies one input vector; inputs not listed hold their previous value (all start at 0).
- `random <count>` applies <count> vectors with every input drawn from the seeded random generator.
- Lines starting with `//` or `#` are comments.
Consecutive `drive` lines are consecutive clock cycles, so multi-step sequences must be driven on adjacent lines."""


def system_prompt(config: RunConfig) -> str:
    top = top_module_name(config.top_module_header) or "the top module"
    designs = "\n".join(f"- {p}" for p in config.design_paths)
    parts = [
        "You are an expert hardware verification engineer. Your goal is coverage closure: "
        f"drive {top} to {config.coverage_target:g}% of its coverage model using top-level stimulus only.",
        f"Specification: {config.spec_path}\nDesign files:\n{designs}",
        f"Top module header (verbatim):\n{config.top_module_header}",
        "Stimulus constraints:\n"
        "- Drive the design only through its top-level ports.\n"
        "- Never use force or release, never reference signals hierarchically inside the design, "
        f"and never instantiate any module other than {top}. Testbenches that do are rejected.",
        "Testbench requirements:\n"
        "- Declare every signal connected to a port with the port's exact name and width; keep inputs defined from time zero.\n"
        "- Apply a reset sequence before functional stimulus when the design has a reset.\n"
        "- Use constrained randomization for broad exploration and directed sequences for specific coverage points; "
        f"every testbench runs with {config.seeds_per_iteration} seeds and coverage is merged across seeds and iterations.",
    ]
    if config.simulator == "mock":
        parts.append(_MOCK_FORMAT)
    parts += [
        "Workflow:\n"
        "1. Read the specification and design files with read_file.\n"
        "2. Call run_verification_cycle with a complete testbench; it writes, compiles, simulates every seed, "
        "and merges coverage in one step.\n"
        "3. Study the coverage feedback you receive and submit a refined complete testbench.",
        "Coverage improvement strategies:\n"
        "- Attack the largest uncovered groups first.\n"
        "- Hit boundary values (zero, maximum, wrap-around) explicitly.\n"
        "- For handshakes and protocol sequences, drive each step on consecutive cycles in the required order.\n"
        "- Keep stimulus that already covers points and append new directed segments rather than starting over.\n"
        "- If a point looks unreachable from the top-level ports, stop spending iterations on it and say so.",
    ]
    return "\n\n".join(parts)


_REASON_TEXT = {
    "target_reached": "the coverage target was reached",
    "iteration_limit": "the iteration limit was reached",
    "token_budget": "the token budget was exhausted",
    "agent_declared": "you stopped making progress",
}


def termination_message(state: AgentState, source_index: Mapping[str, Any] | None = None) -> Message:
    db = state.cumulative_coverage
    residual = db.uncovered
    lines = [
        f"Coverage closure has ended: {_REASON_TEXT.get(state.termination_reason, state.termination_reason)}. "
        f"Final cumulative coverage: {db.percentage:.2f}% ({db.covered_count}/{db.total} points).",
        "",
        "Write the final report. For each residual uncovered point below, reason about why it remains uncovered: "
        "unreachable from top-level ports, excludable (dead or defensive code), a potential bug, or needs more effort. "
        "Then assign exactly one category:",
    ]
    for cat in HOLE_CATEGORIES.values():
        lines.append(f"- {cat.id} {cat.name} ({cat.tag.lower()}): {cat.description}")
    lines += [
        "",
        "End your answer with a fenced ```json block holding an array of "
        '{"point_id": ..., "category": "M1".."R3", "rationale": ...} objects, one per residual point.',
        "",
        "Residual points:" if residual else "Residual points: none.",
    ]
    for p in residual:
        lines.append(f"- {p.kind} {p.id} | {cov.annotate(p, source_index)}")
    return Message("user", "\n".join(lines), tag="termination")


def feedback_message(state: AgentState, source_index: Mapping[str, Any] | None = None) -> Message:
    config = state.config
    header = (
        f"Verification cycle {state.iteration} of at most {config.max_iterations} complete "
        f"({config.seeds_per_iteration} seeds merged into cumulative coverage)."
    )
    body = cov.feedback(state.cumulative_coverage, source_index, config.feedback_limit)
    open_failures = [f for f in state.failure_tracker if not f.resolved]
    tail = "Refine the stimulus to hit the uncovered points above and call run_verification_cycle with the complete revised testbench."
    if open_failures:
        tail = f"{len(open_failures)} tool failure(s) remain unresolved. " + tail
    return Message("user", f"{header}\n{body}{tail}", tag="coverage_feedback")


# -- tracing -------------------------------------------------------------------


class Trace:
    def __init__(self, path: Path) -> None:
        self.path = path
        path.parent.mkdir(parents=True, exist_ok=True)

    def event(self, event: str, node: str, state: AgentState, **extra: Any) -> None:
        record = {
            "event": event,
            "node": node,
            "time": time.time(),
            "iteration": state.iteration,
            "tokens": state.ledger.total_tokens,
            **extra,
        }
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


@contextmanager
def _node(name: str, state: AgentState, trace: Trace | None) -> Iterator[None]:
    if trace:
        trace.event("enter", name, state)
    try:
        yield
    except BaseException as exc:
        if trace:
            trace.event("error", name, state, error=repr(exc))
        raise
    finally:
        save_checkpoint(state)
        if trace:
            trace.event("exit", name, state)


# -- nodes ---------------------------------------------------------------------


def initialize(state: AgentState) -> AgentState:
    if state.messages or state.iteration:
        raise StateError("initialize requires a fresh state")
    ws = state.workspace
    try:
        for sub in WORKSPACE_DIRS:
            (ws / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise SetupError(f"cannot create workspace {ws}: {exc}") from None
    if not os.access(ws, os.W_OK):
        raise SetupError(f"workspace {ws} is not writable")
    state.messages.append(Message("system", system_prompt(state.config), tag="system_prompt"))
    return state


def _is_tb_path(path: Any) -> bool:
    if not isinstance(path, str):
        return False
    parts = Path(path).parts
    return bool(parts) and (parts[0] == "tb" or (len(parts) > 1 and parts[0] == "." and parts[1] == "tb"))


def call_context(messages: Sequence[Message], reply: Message, toolkit: Toolkit | None) -> dict[str, bool]:
    """Facts about a call used later to attribute its tokens."""
    last_assistant = max((i for i, m in enumerate(messages) if m.role == "assistant"), default=-1)
    recent = messages[last_assistant + 1 :]
    is_design = toolkit.is_design_path if toolkit is not None else (lambda p: False)
    wrote_tb = any(
        c.name == "run_verification_cycle" or (c.name == "write_file" and _is_tb_path(c.arguments.get("path")))
        for c in reply.tool_calls
    )
    read_design = any(
        c.name in ("read_file", "list_directory") and is_design(c.arguments.get("path", "."))
        for c in reply.tool_calls
    )
    return {
        "after_error": any(m.tag == "error_log" for m in recent),
        "wrote_testbench": wrote_tb,
        "read_design": read_design,
        "design_newest": bool(messages) and messages[-1].tag == "design_content",
    }


def _llm_call(state: AgentState, llm: LlmBackend, phase: str, schemas: list, toolkit: Toolkit | None) -> Message:
    request = list(state.messages)
    reply, usage = llm.chat(
        request, schemas, temperature=state.config.temperature, model_id=state.config.model_id
    )
    if usage.missing:
        log.warning("call %d: usage components %s missing, recorded as 0", state.ledger.next_index(), usage.missing)
    record = CallRecord(
        index=state.ledger.next_index(),
        usage=usage,
        phase=phase,
        request=[(m.tag or m.role, estimate_message(m)) for m in request],
        tool_schemas_size=estimate_tokens(json.dumps(schemas, sort_keys=True)) if schemas else 0,
        produced_tool_calls=[c.name for c in reply.tool_calls],
        context=call_context(request, reply, toolkit),
    )
    state.ledger.append(record)
    return reply


def agent_step(state: AgentState, llm: LlmBackend, toolkit: Toolkit | None = None) -> AgentState:
    if state.terminated:
        raise StateError("agent_step on a terminated run")
    schemas = toolkit.schemas() if toolkit is not None else [dict(s) for s in TOOL_SCHEMAS]
    reply = _llm_call(state, llm, "Agent", schemas, toolkit)
    state.messages.append(reply)
    state.no_tool_streak = 0 if reply.tool_calls else state.no_tool_streak + 1
    return state


def tools_step(state: AgentState, toolkit: Toolkit) -> AgentState:
    last = state.messages[-1] if state.messages else None
    if last is None or last.role != "assistant" or not last.tool_calls:
        raise StateError("tools_step needs a preceding assistant message with tool calls")
    toolkit.iteration = state.iteration + 1
    for call in last.tool_calls:
        k = toolkit.iteration
        result = toolkit.execute(call)
        if not result.ok:
            tag = "error_log"
        elif result.category_hint == "design_content":
            tag = "design_content"
        else:
            tag = "other"
        state.messages.append(Message("tool", result.payload, tool_call_id=call.id, tag=tag))
        state.pending.append(
            ToolOutcome(
                tool=call.name,
                ok=result.ok,
                iteration=k,
                merged_path=result.merged_path,
                error="" if result.ok else result.payload,
            )
        )
    return state


def update_state(state: AgentState) -> AgentState:
    config = state.config
    cycle_ran = False
    for outcome in state.pending:
        if outcome.ok:
            for f in state.failure_tracker:
                if f.tool == outcome.tool:
                    f.resolved = True
        else:
            lines = outcome.error.splitlines()[: config.error_excerpt_lines]
            state.failure_tracker.append(FailureRecord(outcome.tool, outcome.iteration, "\n".join(lines)))
        if outcome.tool == "run_verification_cycle" and outcome.ok and outcome.merged_path:
            db = cov.load_snapshot(state.workspace / outcome.merged_path)
            state.per_iteration_coverage.append(db)
            state.iteration += 1
            cycle_ran = True
    state.pending.clear()
    if cycle_ran:
        state.cumulative_coverage = state.recomputed_cumulative()
        cov.snapshot(state.cumulative_coverage, state.workspace / "cov" / "cumulative.covdb")
    state.ledger.sample(state.coverage_percent, after_cycle=cycle_ran)

    if state.termination_reason is None:
        db = state.cumulative_coverage
        if db.total and db.percentage >= config.coverage_target - 1e-9:
            state.termination_reason = "target_reached"
        elif state.iteration >= config.max_iterations:
            state.termination_reason = "iteration_limit"
        elif state.ledger.total_tokens >= config.token_budget:
            state.termination_reason = "token_budget"
        elif state.no_tool_streak >= 2:
            state.termination_reason = "agent_declared"
    state.check_invariants()
    return state


def prune_context(state: AgentState) -> AgentState:
    logs = [i for i, m in enumerate(state.messages) if m.tag == "error_log"]
    for i in logs[:-1]:
        m = state.messages[i]
        if len(m.content) > len(PRUNED_PLACEHOLDER):
            m.content = PRUNED_PLACEHOLDER
    return state


def route(state: AgentState, source_index: Mapping[str, Any] | None = None) -> RouteDecision:
    if state.termination_reason is not None:
        return RouteDecision("Finalize", termination_message(state, source_index))
    if state.iteration > state.last_feedback_iteration and state.cumulative_coverage.total:
        return RouteDecision("Agent", feedback_message(state, source_index))
    return RouteDecision("Agent")


def apply_route(state: AgentState, decision: RouteDecision) -> AgentState:
    if decision.injected is not None:
        state.messages.append(decision.injected)
        if decision.injected.tag == "coverage_feedback":
            state.last_feedback_iteration = state.iteration
    return state


def finalize(
    state: AgentState,
    llm: LlmBackend,
    toolkit: Toolkit | None = None,
    source_index: Mapping[str, Any] | None = None,
) -> AgentState:
    if state.termination_reason is None:
        raise StateError("finalize before a termination condition was met")
    if state.terminated:
        raise StateError("run already finalized")
    cov.snapshot(state.cumulative_coverage, state.workspace / "cov" / "final.covdb")
    if not state.messages or state.messages[-1].tag != "termination":
        state.messages.append(termination_message(state, source_index))
    reply = _llm_call(state, llm, "Finalize", [], toolkit)
    state.messages.append(reply)
    state.final_analysis = reply.content
    state.ledger.sample(state.coverage_percent)
    state.terminated = True
    return state


def run(config: RunConfig, llm: LlmBackend, toolkit: Toolkit | None = None) -> AgentState:
    state = new_state(config)
    toolkit = toolkit or Toolkit.from_config(config)
    config.workspace_dir.mkdir(parents=True, exist_ok=True)
    trace = Trace(config.workspace_dir / "logs" / "trace.ndjson")
    index = toolkit.source_index()

    with _node("Initialize", state, trace):
        initialize(state)
    while True:
        with _node("Agent", state, trace):
            agent_step(state, llm, toolkit)
        if state.messages[-1].tool_calls:
            with _node("Tools", state, trace):
                tools_step(state, toolkit)
        with _node("UpdateState", state, trace):
            update_state(state)
        with _node("PruneContext", state, trace):
            prune_context(state)
        decision = route(state, index)
        apply_route(state, decision)
        if decision.next == "Finalize":
            break
    with _node("Finalize", state, trace):
        finalize(state, llm, toolkit, index)
    return state
