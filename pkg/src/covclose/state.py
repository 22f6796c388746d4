"""Run configuration and the mutable agent state threaded through the graph."""

from __future__ import annotations

import json
import os
from collections.abc import Mapping
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from . import coverage as cov
from .ledger import PricingTable, TokenLedger
from .llm import DEFAULT_ENDPOINT
from .messages import Message

TERMINATION_REASONS = ("target_reached", "iteration_limit", "token_budget", "agent_declared")
CHECKPOINT_NAME = "state.json"


class ConfigError(ValueError):
    pass


class StateError(RuntimeError):
    """A graph node was entered with its precondition unmet."""


_PATH_FIELDS = ("spec_path", "workspace_dir", "manifest_path")


@dataclass
class RunConfig:
    spec_path: Path
    design_paths: list[Path]
    top_module_header: str
    workspace_dir: Path
    seeds_per_iteration: int = 5
    max_iterations: int = 25
    token_budget: int = 500_000
    coverage_target: float = 100.0
    temperature: float = 0.4
    pricing: PricingTable = field(default_factory=PricingTable)
    model_id: str = "gpt-5.2"
    feedback_limit: int = 10
    endpoint: str = DEFAULT_ENDPOINT
    # "mock" evaluates manifest_path; "subprocess" runs compile_cmd/sim_cmd
    simulator: str = "subprocess"
    manifest_path: Path | None = None
    compile_cmd: str = ""
    sim_cmd: str = ""
    coverage_format: str = "canonical"
    sim_timeout: float = 60.0
    tool_result_cap: int = 4000
    read_cap: int = 200_000
    error_excerpt_lines: int = 20

    def __post_init__(self) -> None:
        self.spec_path = Path(self.spec_path)
        self.design_paths = [Path(p) for p in self.design_paths]
        self.workspace_dir = Path(self.workspace_dir)
        if self.manifest_path is not None:
            self.manifest_path = Path(self.manifest_path)
        if isinstance(self.pricing, Mapping):
            self.pricing = PricingTable.from_dict(self.pricing)
        checks = [
            (self.seeds_per_iteration >= 1, "seeds_per_iteration must be >= 1"),
            (self.max_iterations >= 1, "max_iterations must be >= 1"),
            (self.token_budget >= 1, "token_budget must be >= 1"),
            (0 < self.coverage_target <= 100, "coverage_target must be in (0, 100]"),
            (0 <= self.temperature <= 2, "temperature must be in [0, 2]"),
            (self.feedback_limit >= 1, "feedback_limit must be >= 1"),
            (self.simulator in ("mock", "subprocess"), "simulator must be 'mock' or 'subprocess'"),
            (self.coverage_format in cov.FORMATS, f"coverage_format must be one of {cov.FORMATS}"),
            (self.tool_result_cap >= 200, "tool_result_cap must be >= 200"),
            (self.read_cap >= 1, "read_cap must be >= 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    @property
    def manifest(self) -> Path | None:
        """Manifest used by the mock simulator: explicit, else the first ``*.json`` design file."""
        if self.manifest_path is not None:
            return self.manifest_path
        for p in self.design_paths:
            if p.suffix == ".json":
                return p
        return None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Path):
                value = str(value)
            elif f.name == "design_paths":
                value = [str(p) for p in value]
            elif isinstance(value, PricingTable):
                value = value.to_dict()
            out[f.name] = value
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], base_dir: Path | None = None) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values = dict(data)

        def resolve(p: Any) -> Path:
            path = Path(p).expanduser()
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            return path

        try:
            for name in _PATH_FIELDS:
                if values.get(name) is not None:
                    values[name] = resolve(values[name])
            values["design_paths"] = [resolve(p) for p in values.get("design_paths", [])]
            return cls(**values)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path, **overrides: Any) -> RunConfig:
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data, base_dir=path.resolve().parent)


@dataclass
class FailureRecord:
    tool: str
    iteration: int
    excerpt: str
    resolved: bool = False

    def __post_init__(self) -> None:
        if not self.excerpt:
            self.excerpt = "<no error output>"


@dataclass
class ToolOutcome:
    """What Update State needs from one executed tool call."""

    tool: str
    ok: bool
    iteration: int
    merged_path: str | None = None
    error: str = ""


@dataclass
class AgentState:
    config: RunConfig
    messages: list[Message] = field(default_factory=list)
    iteration: int = 0
    cumulative_coverage: cov.CoverageDatabase = field(default_factory=cov.CoverageDatabase)
    per_iteration_coverage: list[cov.CoverageDatabase] = field(default_factory=list)
    failure_tracker: list[FailureRecord] = field(default_factory=list)
    ledger: TokenLedger = field(default_factory=TokenLedger)
    terminated: bool = False
    termination_reason: str | None = None
    # bookkeeping between nodes
    pending: list[ToolOutcome] = field(default_factory=list)
    no_tool_streak: int = 0
    last_feedback_iteration: int = 0
    final_analysis: str | None = None

    @property
    def workspace(self) -> Path:
        return self.config.workspace_dir

    @property
    def coverage_percent(self) -> float:
        return self.cumulative_coverage.percentage

    def recomputed_cumulative(self) -> cov.CoverageDatabase:
        return cov.merge_all(self.per_iteration_coverage)

    def check_invariants(self) -> None:
        if self.iteration > self.config.max_iterations:
            raise StateError(f"iteration {self.iteration} exceeds max_iterations {self.config.max_iterations}")
        if self.recomputed_cumulative() != self.cumulative_coverage:
            raise StateError("cumulative coverage disagrees with per-iteration databases")
        if self.termination_reason is not None and self.termination_reason not in TERMINATION_REASONS:
            raise StateError(f"unknown termination reason {self.termination_reason!r}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "config": self.config.to_dict(),
            "messages": [m.to_dict() for m in self.messages],
            "iteration": self.iteration,
            "cumulative_coverage": self.cumulative_coverage.to_dict(),
            "per_iteration_coverage": [db.to_dict() for db in self.per_iteration_coverage],
            "failure_tracker": [vars(f) for f in self.failure_tracker],
            "ledger": self.ledger.to_dict(),
            "terminated": self.terminated,
            "termination_reason": self.termination_reason,
            "pending": [vars(p) for p in self.pending],
            "no_tool_streak": self.no_tool_streak,
            "last_feedback_iteration": self.last_feedback_iteration,
            "final_analysis": self.final_analysis,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> AgentState:
        return cls(
            config=RunConfig.from_dict(data["config"]),
            messages=[Message.from_dict(m) for m in data.get("messages", [])],
            iteration=int(data.get("iteration", 0)),
            cumulative_coverage=cov.CoverageDatabase.from_dict(data["cumulative_coverage"]),
            per_iteration_coverage=[
                cov.CoverageDatabase.from_dict(d) for d in data.get("per_iteration_coverage", [])
            ],
            failure_tracker=[FailureRecord(**f) for f in data.get("failure_tracker", [])],
            ledger=TokenLedger.from_dict(data.get("ledger", {})),
            terminated=bool(data.get("terminated", False)),
            termination_reason=data.get("termination_reason"),
            pending=[ToolOutcome(**p) for p in data.get("pending", [])],
            no_tool_streak=int(data.get("no_tool_streak", 0)),
            last_feedback_iteration=int(data.get("last_feedback_iteration", 0)),
            final_analysis=data.get("final_analysis"),
        )


def _check_readable(path: Path, what: str) -> None:
    if not path.exists():
        raise ConfigError(f"{what} does not exist: {path}")
    if not os.access(path, os.R_OK):
        raise ConfigError(f"{what} is not readable: {path}")


def new_state(config: RunConfig) -> AgentState:
    _check_readable(config.spec_path, "spec_path")
    if not config.design_paths:
        raise ConfigError("design_paths is empty")
    for p in config.design_paths:
        _check_readable(p, "design path")
    if config.simulator == "mock":
        manifest = config.manifest
        if manifest is None:
            raise ConfigError("mock simulator needs manifest_path or a *.json design file")
        _check_readable(manifest, "manifest_path")
    elif not (config.compile_cmd and config.sim_cmd):
        raise ConfigError("subprocess simulator needs compile_cmd and sim_cmd")
    return AgentState(config=config)


def save_checkpoint(state: AgentState, path: Path | None = None) -> Path:
    path = path or state.workspace / CHECKPOINT_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(state.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path) -> AgentState:
    path = Path(path)
    if path.is_dir():
        path = path / CHECKPOINT_NAME
    return AgentState.from_dict(json.loads(path.read_text(encoding="utf-8")))
