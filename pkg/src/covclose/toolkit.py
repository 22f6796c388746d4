"""The seven tools exposed to the model, with workspace sandboxing and stimulus lint."""

from __future__ import annotations

import logging
import re
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from . import coverage as cov
from .messages import TOOL_NAMES, ToolCall
from .sim import (
    DesignManifest,
    MockSimulator,
    Simulator,
    SimulatorMissingError,
    SubprocessSimulator,
)
from .state import RunConfig

log = logging.getLogger(__name__)

WORKSPACE_DIRS = ("tb", "cov", "logs", "reports")
_RESERVED_WRITE = ("cov", "logs", "reports", "state.json", "build")
HDL_SUFFIXES = (".v", ".sv", ".vh", ".svh", ".vhd", ".vhdl")


class SandboxError(PermissionError):
    pass


# -- stimulus lint -------------------------------------------------------------

_SV_KEYWORDS = frozenset(
    """
    module endmodule macromodule program endprogram interface endinterface package endpackage
    class endclass function endfunction task endtask begin end fork join join_any join_none
    input output inout ref const var wire reg logic bit byte shortint int longint integer real
    shortreal realtime time string chandle event signed unsigned void static automatic virtual
    local protected rand randc typedef struct union enum packed parameter localparam defparam
    genvar generate endgenerate initial final always always_ff always_comb always_latch assign
    deassign if else case casex casez endcase default for foreach forever repeat while do break
    continue return wait disable import export extends implements new null this super
    constraint covergroup endgroup coverpoint cross property endproperty sequence endsequence
    assert assume cover expect clocking endclocking modport posedge negedge edge or and nand nor
    xor xnor not buf bufif0 bufif1 notif0 notif1 tri tri0 tri1 supply0 supply1 unique priority
    let with inside dist solve before timeunit timeprecision specify endspecify primitive
    endprimitive table endtable config endconfig
    """.split()
)

_FORCE = re.compile(r"\b(force|release)\b")
_CHAIN = re.compile(r"(?<![\w$.'])[A-Za-z_]\w*(?:\s*\.\s*[A-Za-z_]\w*){2,}")
_ROOT = re.compile(r"\$root\s*\.")
_INSTANCE = re.compile(
    r"(?m)^[ \t]*([A-Za-z_]\w*)\b\s*(?:#\s*\((?:[^()]|\([^()]*\))*\)\s*)?([A-Za-z_]\w*)\s*(?:\[[^\]]*\]\s*)?\("
)


@dataclass(frozen=True)
class LintViolation:
    rule: str  # force | release | hierarchical | instantiation
    lineno: int
    line: str

    def __str__(self) -> str:
        return f"line {self.lineno}: {self.rule} not allowed in stimulus: {self.line.strip()}"


def _strip_comments_and_strings(text: str) -> str:
    """Blank out comments and string literals, keeping offsets and newlines."""

    def blank(m: re.Match[str]) -> str:
        return "".join("\n" if ch == "\n" else " " for ch in m.group(0))

    return re.sub(r'/\*.*?\*/|//[^\n]*|"(?:\\.|[^"\\\n])*"', blank, text, flags=re.S)


def top_module_name(header: str) -> str | None:
    m = re.search(r"\bmodule\s+([A-Za-z_]\w*)", header or "")
    return m.group(1) if m else None


def lint_testbench(text: str, top_module: str | None = None) -> list[LintViolation]:
    """Token-level scan for the three banned stimulus constructs.

    Rejects ``force``/``release``, hierarchical references into the DUT
    (through the DUT instance, the top module name, ``$root`` or any
    identifier chain with two or more dots), and instantiation of any module
    other than the top module.
    """
    code = _strip_comments_and_strings(text)
    lines = text.splitlines()
    line_starts = [0]
    for m in re.finditer(r"\n", code):
        line_starts.append(m.end())

    def lineno(offset: int) -> int:
        lo, hi = 0, len(line_starts) - 1
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if line_starts[mid] <= offset:
                lo = mid
            else:
                hi = mid - 1
        return lo + 1

    found: dict[tuple[str, int], LintViolation] = {}

    def add(rule: str, offset: int) -> None:
        n = lineno(offset)
        src = lines[n - 1] if n - 1 < len(lines) else ""
        found.setdefault((rule, n), LintViolation(rule, n, src))

    for m in _FORCE.finditer(code):
        add(m.group(1), m.start())

    dut_names = set()
    for m in _INSTANCE.finditer(code):
        kind, name = m.group(1), m.group(2)
        if kind in _SV_KEYWORDS or name in _SV_KEYWORDS:
            continue
        if top_module and kind == top_module:
            dut_names.add(name)
        else:
            add("instantiation", m.start(1))

    for m in _ROOT.finditer(code):
        add("hierarchical", m.start())
    for m in _CHAIN.finditer(code):
        add("hierarchical", m.start())
    for name in dut_names | ({top_module} if top_module else set()):
        for m in re.finditer(rf"(?<![\w$.]){re.escape(name)}\s*\.\s*[A-Za-z_]", code):
            add("hierarchical", m.start())

    return sorted(found.values(), key=lambda v: (v.lineno, v.rule))


# -- results -------------------------------------------------------------------


@dataclass
class ToolResult:
    call_id: str
    ok: bool
    payload: str
    category_hint: str = "other"  # design_content | error_log | coverage_result | other
    merged_path: str | None = None
    stage: str | None = None

    def __post_init__(self) -> None:
        if not self.ok and not self.payload:
            self.payload = "error: tool failed without output"


def excerpt(text: str, cap: int) -> str:
    """Keep the head and tail of ``text`` within ``cap`` characters."""
    if len(text) <= cap:
        return text
    marker = "\n... [{} characters omitted] ...\n"
    room = cap - len(marker.format(len(text)))
    head = room // 2
    tail = room - head
    return text[:head] + marker.format(len(text) - room) + text[len(text) - tail :]


class _ToolError(Exception):
    def __init__(self, message: str, stage: str | None = None) -> None:
        super().__init__(message)
        self.stage = stage


TOOL_SCHEMAS: list[dict[str, Any]] = [
    {
        "name": "read_file",
        "description": "Read a text file from the workspace or the specification/design files.",
        "parameters": {
            "type": "object",
            "properties": {"path": {"type": "string", "description": "File path"}},
            "required": ["path"],
        },
    },
    {
        "name": "write_file",
        "description": (
            "Write a file inside the workspace. Files under tb/ must be top-level stimulus only: "
            "no force/release, no hierarchical references, no submodule instantiation."
        ),
        "parameters": {
            "type": "object",
            "properties": {
                "path": {"type": "string", "description": "Workspace-relative path"},
                "content": {"type": "string", "description": "Full file contents"},
            },
            "required": ["path", "content"],
        },
    },
    {
        "name": "list_directory",
        "description": "List a directory in the workspace; directories end with '/'.",
        "parameters": {
            "type": "object",
            "properties": {"path": {"type": "string", "description": "Directory path", "default": "."}},
        },
    },
    {
        "name": "compile_design",
        "description": "Compile the design with coverage instrumentation together with a testbench file.",
        "parameters": {
            "type": "object",
            "properties": {"tb_path": {"type": "string", "description": "Workspace path of the testbench"}},
            "required": ["tb_path"],
        },
    },
    {
        "name": "run_simulation",
        "description": "Simulate the last compiled testbench with one random seed and record coverage.",
        "parameters": {
            "type": "object",
            "properties": {"seed": {"type": "integer", "description": "Random seed"}},
            "required": ["seed"],
        },
    },
    {
        "name": "parse_coverage",
        "description": "Summarise a coverage database: totals, percentage and top uncovered groups.",
        "parameters": {
            "type": "object",
            "properties": {"cov_path": {"type": "string", "description": "Workspace path of a coverage file"}},
            "required": ["cov_path"],
        },
    },
    {
        "name": "run_verification_cycle",
        "description": (
            "Write the testbench, compile, simulate every seed, parse and merge coverage in one "
            "atomic step. Returns per-seed and merged coverage."
        ),
        "parameters": {
            "type": "object",
            "properties": {"tb_content": {"type": "string", "description": "Complete testbench source"}},
            "required": ["tb_content"],
        },
    },
]


class Toolkit:
    """Executes tool calls against one workspace.

    ``iteration`` is the number of the next verification cycle; the graph
    sets it before each tool batch and successful cycles advance it.
    """

    def __init__(self, config: RunConfig, simulator: Simulator, manifest: DesignManifest | None = None) -> None:
        self.config = config
        self.simulator = simulator
        self.manifest = manifest
        self.iteration = 1
        self.top_module = top_module_name(config.top_module_header)
        self._attempts: dict[int, int] = {}
        self._roots = [p.resolve() for p in [config.spec_path, *config.design_paths]]
        if manifest is not None and config.manifest is not None:
            self._roots.append(config.manifest.resolve())

    @classmethod
    def from_config(cls, config: RunConfig) -> Toolkit:
        if config.simulator == "mock":
            manifest = DesignManifest.load(config.manifest)
            return cls(config, MockSimulator(manifest, timeout=config.sim_timeout), manifest)
        sim = SubprocessSimulator(
            compile_cmd=config.compile_cmd,
            sim_cmd=config.sim_cmd,
            design_paths=list(config.design_paths),
            build_dir=config.workspace_dir / "build",
            coverage_format=config.coverage_format,
            timeout=config.sim_timeout,
        )
        return cls(config, sim)

    @property
    def workspace(self) -> Path:
        return self.config.workspace_dir

    def schemas(self) -> list[dict[str, Any]]:
        return [dict(s) for s in TOOL_SCHEMAS]

    # -- sandbox --

    def _resolve(self, raw: Any, *, write: bool = False, workspace_only: bool = False) -> Path:
        if not isinstance(raw, str) or not raw.strip():
            raise SandboxError(f"invalid path {raw!r}")
        if "\x00" in raw:
            raise SandboxError("path contains a NUL byte")
        ws = self.workspace.resolve()
        candidate = Path(raw)
        if not candidate.is_absolute():
            candidate = ws / candidate
        resolved = candidate.resolve()
        readable = not (write or workspace_only)
        if resolved == ws or ws in resolved.parents:
            # relative reads that miss the workspace may name a design input
            if readable and not Path(raw).is_absolute() and not resolved.exists():
                for base in self._input_dirs():
                    alt = (base / raw).resolve()
                    if alt.exists() and self._in_roots(alt):
                        return alt
            return resolved
        if readable and self._in_roots(resolved):
            return resolved
        where = "the workspace" if (write or workspace_only) else "the workspace or design inputs"
        raise SandboxError(f"path {raw!r} resolves outside {where}")

    def _in_roots(self, resolved: Path) -> bool:
        return any(resolved == r or (r.is_dir() and r in resolved.parents) for r in self._roots)

    def _input_dirs(self) -> list[Path]:
        dirs: list[Path] = []
        for r in self._roots:
            d = r if r.is_dir() else r.parent
            if d not in dirs:
                dirs.append(d)
        return dirs

    def _rel(self, path: Path) -> str:
        ws = self.workspace.resolve()
        try:
            return path.relative_to(ws).as_posix()
        except ValueError:
            return str(path)

    def is_design_path(self, raw: Any) -> bool:
        try:
            resolved = self._resolve(raw)
        except SandboxError:
            return False
        return any(resolved == r or r in resolved.parents or resolved in r.parents for r in self._roots)

    def source_index(self) -> dict[str, Any]:
        if self.manifest is not None:
            return self.manifest.source_index()
        index: dict[str, Any] = {}
        files: list[Path] = []
        for p in self.config.design_paths:
            if p.is_dir():
                files += sorted(f for f in p.rglob("*") if f.suffix in HDL_SUFFIXES)
            elif p.is_file():
                files.append(p)
        for f in files:
            try:
                lines = f.read_text(encoding="utf-8", errors="replace").splitlines()
            except OSError:
                continue
            index.setdefault(f.name, lines)
            index[str(f)] = lines
        return index

    # -- dispatch --

    def execute(self, call: ToolCall) -> ToolResult:
        handler = getattr(self, call.name, None) if call.name in TOOL_NAMES else None
        if handler is None:
            return ToolResult(
                call.id,
                False,
                f"error: unknown tool {call.name!r}; available tools: {', '.join(TOOL_NAMES)}",
                "error_log",
            )
        try:
            result = handler(**call.arguments)
        except TypeError as exc:
            return ToolResult(call.id, False, f"error: invalid arguments for {call.name}: {exc}", "error_log")
        except SandboxError as exc:
            return ToolResult(call.id, False, f"sandbox error: {exc}", "error_log")
        except FileNotFoundError as exc:
            return ToolResult(call.id, False, f"not found: {exc.filename or exc}", "error_log")
        except IsADirectoryError as exc:
            return ToolResult(call.id, False, f"error: is a directory: {exc.filename or exc}", "error_log")
        except SimulatorMissingError as exc:
            return ToolResult(call.id, False, f"environment error: {exc}", "error_log")
        except _ToolError as exc:
            payload = f"stage '{exc.stage}' failed: {exc}" if exc.stage else f"error: {exc}"
            return ToolResult(
                call.id, False, excerpt(payload, self.config.tool_result_cap), "error_log", stage=exc.stage
            )
        result.call_id = call.id
        if call.name != "read_file":
            result.payload = excerpt(result.payload, self.config.tool_result_cap)
        return result

    # -- filesystem tools --

    def read_file(self, path: str) -> ToolResult:
        resolved = self._resolve(path)
        text = resolved.read_text(encoding="utf-8", errors="replace")
        cap = self.config.read_cap
        if len(text) > cap:
            text = text[:cap] + f"\n[truncated: file has {len(text)} characters; showing the first {cap}]"
        hint = "design_content" if self.is_design_path(path) else "other"
        return ToolResult("", True, text, hint)

    def write_file(self, path: str, content: str) -> ToolResult:
        resolved = self._resolve(path, write=True)
        rel = self._rel(resolved)
        if rel == "." or rel.split("/", 1)[0] in _RESERVED_WRITE:
            raise SandboxError(f"{rel} is managed by the harness and cannot be written")
        if not isinstance(content, str):
            raise TypeError("content must be a string")
        if rel.startswith("tb/"):
            violations = lint_testbench(content, self.top_module)
            if violations:
                raise _ToolError(
                    "testbench rejected by stimulus lint:\n" + "\n".join(str(v) for v in violations)
                )
        resolved.parent.mkdir(parents=True, exist_ok=True)
        resolved.write_bytes(content.encode("utf-8"))
        return ToolResult("", True, f"wrote {len(content.encode('utf-8'))} bytes to {rel}")

    def list_directory(self, path: str = ".") -> ToolResult:
        resolved = self._resolve(path, workspace_only=not self.is_design_path(path))
        if not resolved.is_dir():
            if not resolved.exists():
                raise FileNotFoundError(2, "No such directory", path)
            raise _ToolError(f"{path} is not a directory")
        entries = []
        for child in sorted(resolved.iterdir(), key=lambda c: c.name):
            if child.is_symlink():
                entries.append(child.name + "@")
            elif child.is_dir():
                entries.append(child.name + "/")
            else:
                entries.append(child.name)
        return ToolResult("", True, "\n".join(entries) if entries else "<empty directory>")

    # -- simulator tools --

    def _log_dir(self, k: int) -> Path:
        d = self.workspace / "logs" / f"iter{k}"
        d.mkdir(parents=True, exist_ok=True)
        return d

    def _compile(self, tb: Path, log_prefix: Path) -> None:
        text = tb.read_text(encoding="utf-8", errors="replace")
        violations = lint_testbench(text, self.top_module)
        if violations:
            raise _ToolError(
                "testbench rejected by stimulus lint:\n" + "\n".join(str(v) for v in violations), "lint"
            )
        result = self.simulator.compile(tb)
        Path(f"{log_prefix}_compile.log").write_text(result.log, encoding="utf-8")
        if not result.ok:
            raise _ToolError(result.log or "compilation failed", "compile")

    def compile_design(self, tb_path: str) -> ToolResult:
        tb = self._resolve(tb_path, workspace_only=True)
        if not tb.is_file():
            raise FileNotFoundError(2, "No such file", tb_path)
        k = self.iteration
        self._compile(tb, self._log_dir(k) / f"a{self._next_attempt(k)}")
        return ToolResult("", True, f"compiled {self._rel(tb)} with coverage instrumentation")

    def _seed_path(self, k: int, seed: int) -> Path:
        return self.workspace / "cov" / f"iter{k}_seed{seed}.covdb"

    def run_simulation(self, seed: int) -> ToolResult:
        if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
            raise TypeError(f"seed must be a nonnegative integer, got {seed!r}")
        k = self.iteration
        out = self._seed_path(k, seed)
        out.parent.mkdir(parents=True, exist_ok=True)
        result = self.simulator.simulate(seed, out, k)
        (self._log_dir(k) / f"seed{seed}.log").write_text(result.log, encoding="utf-8")
        if not result.ok:
            raise _ToolError(result.log, "simulate")
        tail = "\n".join(result.log.splitlines()[-20:])
        return ToolResult("", True, f"{tail}\ncoverage written to {self._rel(out)}", "coverage_result")

    def parse_coverage(self, cov_path: str) -> ToolResult:
        path = self._resolve(cov_path, workspace_only=True)
        try:
            db = cov.parse(path)
        except cov.CoverageParseError as exc:
            raise _ToolError(str(exc), "parse") from None
        return ToolResult("", True, cov.summary(db), "coverage_result")

    def _next_attempt(self, k: int) -> int:
        self._attempts[k] = self._attempts.get(k, 0) + 1
        return self._attempts[k]

    def run_verification_cycle(self, tb_content: str) -> ToolResult:
        if not isinstance(tb_content, str):
            raise TypeError("tb_content must be a string")
        k = self.iteration
        if k > self.config.max_iterations:
            raise _ToolError(f"iteration limit of {self.config.max_iterations} cycles reached", "setup")
        violations = lint_testbench(tb_content, self.top_module)
        if violations:
            raise _ToolError(
                "testbench rejected by stimulus lint:\n" + "\n".join(str(v) for v in violations), "lint"
            )
        prefix = self._log_dir(k) / f"a{self._next_attempt(k)}"
        tb = self.workspace / "tb" / f"iter{k}.sv"
        tb.parent.mkdir(parents=True, exist_ok=True)
        tb.write_bytes(tb_content.encode("utf-8"))

        self._compile(tb, prefix)

        seed_dbs = []
        for seed in range(1, self.config.seeds_per_iteration + 1):
            out = self._seed_path(k, seed)
            out.parent.mkdir(parents=True, exist_ok=True)
            result = self.simulator.simulate(seed, out, k)
            Path(f"{prefix}_seed{seed}.log").write_text(result.log, encoding="utf-8")
            if not result.ok:
                raise _ToolError(f"seed {seed}: {result.log}", "simulate")
            try:
                seed_dbs.append(cov.parse(out))
            except (OSError, cov.CoverageParseError) as exc:
                raise _ToolError(f"seed {seed}: {exc}", "parse") from None

        try:
            merged = cov.merge_all(seed_dbs)
        except cov.MergeError as exc:
            raise _ToolError(str(exc), "merge") from None
        merged_path = cov.snapshot(merged, self.workspace / "cov" / f"iter{k}_merged.covdb")
        self.iteration = k + 1

        lines = [f"iteration {k}: {len(seed_dbs)} seeds simulated"]
        for seed, db in enumerate(seed_dbs, start=1):
            lines.append(f"  seed {seed}: {db.covered_count}/{db.total} ({db.percentage:.2f}%)")
        lines.append(f"merged (this iteration): {merged.covered_count}/{merged.total} ({merged.percentage:.2f}%)")
        lines.append(cov.summary(merged))
        return ToolResult("", True, "\n".join(lines), "coverage_result", merged_path=self._rel(merged_path))


def tool_summary(arguments: Mapping[str, Any]) -> str:
    """Short human-readable rendering of tool arguments for traces."""
    parts = []
    for key, value in arguments.items():
        text = str(value)
        parts.append(f"{key}={text[:40]!r}" if len(text) > 40 else f"{key}={text!r}")
    return ", ".join(parts)
