import json

import pytest

from covclose import coverage as cov
from covclose.messages import Message, ToolCall
from covclose.state import (
    AgentState,
    ConfigError,
    RunConfig,
    StateError,
    load_checkpoint,
    new_state,
    save_checkpoint,
)


def test_message_validation():
    with pytest.raises(ValueError):
        Message("robot", "x")
    with pytest.raises(ValueError):
        Message("tool", "x")
    with pytest.raises(ValueError):
        Message("user", "x", tool_calls=[ToolCall("1", "read_file")])
    with pytest.raises(ValueError):
        Message("user", "x", tag="gossip")
    m = Message("assistant", "", tool_calls=[ToolCall("1", "read_file", {"path": "a"})])
    assert Message.from_dict(m.to_dict()) == m


def test_valid_config_gives_empty_state(handshake_config):
    state = new_state(handshake_config)
    assert state.iteration == 0
    assert state.coverage_percent == 0.0 and state.cumulative_coverage.total == 0
    assert state.config.seeds_per_iteration == 5


def test_defaults():
    c = RunConfig("s", ["d"], "module t;", "ws")
    assert (c.seeds_per_iteration, c.max_iterations, c.token_budget, c.temperature) == (5, 25, 500_000, 0.4)
    assert c.coverage_target == 100.0


@pytest.mark.parametrize(
    "field, value",
    [("seeds_per_iteration", 0), ("coverage_target", 0), ("coverage_target", 100.5), ("simulator", "vcs")],
)
def test_config_validation(field, value):
    with pytest.raises(ConfigError):
        RunConfig("s", ["d"], "module t;", "ws", **{field: value})


def test_missing_spec_is_config_error(handshake_config, tmp_path):
    handshake_config.spec_path = tmp_path / "nope.md"
    with pytest.raises(ConfigError, match="nope.md"):
        new_state(handshake_config)


def test_subprocess_needs_commands(handshake_config):
    handshake_config.simulator = "subprocess"
    with pytest.raises(ConfigError, match="compile_cmd"):
        new_state(handshake_config)


def test_config_load_resolves_relative_and_overrides(handshake):
    c = RunConfig.load(handshake / "config.json", max_iterations=7, model_id=None)
    assert c.max_iterations == 7 and c.model_id == "gpt-5.2"
    assert c.spec_path == handshake.resolve() / "spec.md"
    assert c.manifest == handshake.resolve() / "handshake.manifest.json"


def test_config_unknown_key(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"spec_path": "s", "design_paths": [], "top_module_header": "", "workspace_dir": "w", "colour": 1}))
    with pytest.raises(ConfigError, match="colour"):
        RunConfig.load(path)


def test_invariants(handshake_config):
    state = new_state(handshake_config)
    db = cov.CoverageDatabase.from_points([cov.CoveragePoint("a", "line", 1)])
    state.per_iteration_coverage.append(db)
    with pytest.raises(StateError):
        state.check_invariants()
    state.cumulative_coverage = state.recomputed_cumulative()
    state.check_invariants()
    state.iteration = handshake_config.max_iterations + 1
    with pytest.raises(StateError):
        state.check_invariants()


def test_checkpoint_round_trip(handshake_config):
    state = new_state(handshake_config)
    state.messages.append(Message("system", "hello", tag="system_prompt"))
    db = cov.CoverageDatabase.from_points([cov.CoveragePoint("a", "line", 2)], [(1, 1)])
    state.per_iteration_coverage.append(db)
    state.cumulative_coverage = db
    state.iteration = 1
    path = save_checkpoint(state)
    assert path.name == "state.json"
    restored = load_checkpoint(path.parent)
    assert restored.to_dict() == state.to_dict()
    assert isinstance(restored, AgentState)
