"""Simulator back ends.

Two implementations share one small interface (``compile`` then
``simulate(seed, out_path)``):

* :class:`MockSimulator` evaluates a JSON design manifest against a plain
  text stimulus script. It needs no HDL tooling and is fully deterministic.
* :class:`SubprocessSimulator` shells out to user-configured compile and
  simulate command templates for a real EDA flow.
"""

from __future__ import annotations

import json
import logging
import shlex
import shutil
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Protocol

from . import coverage as cov

log = logging.getLogger(__name__)

LCG_MULTIPLIER = 6364136223846793005
LCG_INCREMENT = 1442695040888963407
_MASK64 = (1 << 64) - 1
MAX_WIDTH = 64
DEFAULT_TIMEOUT = 60.0


class SimulatorMissingError(RuntimeError):
    """The configured simulator binary cannot be found (environment, not design, problem)."""


class ManifestError(ValueError):
    pass


class Lcg:
    """64-bit linear congruential generator; the state starts at the seed."""

    def __init__(self, seed: int) -> None:
        self.state = seed & _MASK64

    def next(self) -> int:
        self.state = (LCG_MULTIPLIER * self.state + LCG_INCREMENT) & _MASK64
        return self.state

    def draw(self, width: int) -> int:
        return self.next() & ((1 << width) - 1)


# -- manifest ----------------------------------------------------------------


@dataclass(frozen=True)
class Predicate:
    op: str  # eq | range | seq
    signal: str = ""
    value: int = 0
    lo: int = 0
    hi: int = 0
    steps: tuple[tuple[str, int], ...] = ()

    @property
    def signals(self) -> list[str]:
        if self.op == "seq":
            return [s for s, _ in self.steps]
        return [self.signal]

    def describe(self) -> str:
        if self.op == "eq":
            return f"{self.signal} == {self.value}"
        if self.op == "range":
            return f"{self.lo} <= {self.signal} <= {self.hi}"
        return " then ".join(f"{s} == {v}" for s, v in self.steps) + " (consecutive vectors)"

    def to_dict(self) -> dict[str, Any]:
        if self.op == "eq":
            return {"op": "eq", "signal": self.signal, "value": self.value}
        if self.op == "range":
            return {"op": "range", "signal": self.signal, "lo": self.lo, "hi": self.hi}
        return {"op": "seq", "steps": [[s, v] for s, v in self.steps]}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Predicate:
        op = data.get("op")
        if op == "eq":
            return cls("eq", signal=data["signal"], value=int(data["value"]))
        if op == "range":
            return cls("range", signal=data["signal"], lo=int(data["lo"]), hi=int(data["hi"]))
        if op == "seq":
            steps = tuple((str(s), int(v)) for s, v in data["steps"])
            return cls("seq", steps=steps)
        raise ManifestError(f"unknown predicate op {op!r}")


@dataclass(frozen=True)
class ManifestPoint:
    id: str
    kind: str
    predicate: Predicate
    tags: tuple[str, ...] = ()


@dataclass(frozen=True)
class DesignManifest:
    """Desk-scale design description for the mock simulator.

    ``inputs`` are top-level ports the stimulus may drive. ``tied`` signals
    are internal and hard-wired to a constant. ``counters`` are internal
    free-running counters whose value at vector ``k`` is ``k mod 2**width``.
    """

    name: str
    inputs: tuple[tuple[str, int], ...]
    points: tuple[ManifestPoint, ...]
    tied: tuple[tuple[str, int, int], ...] = ()
    counters: tuple[tuple[str, int], ...] = ()
    top: str = ""

    def __post_init__(self) -> None:
        widths: dict[str, int] = {}
        for sig, width in list(self.inputs) + [(s, w) for s, w, _ in self.tied] + list(self.counters):
            if sig in widths:
                raise ManifestError(f"signal {sig!r} declared twice")
            if not 1 <= width <= MAX_WIDTH:
                raise ManifestError(f"signal {sig!r} has width {width}; expected 1..{MAX_WIDTH}")
            widths[sig] = width
        seen: set[str] = set()
        for p in self.points:
            if p.id in seen:
                raise ManifestError(f"duplicate point id {p.id!r}")
            seen.add(p.id)
            if p.kind not in cov.KINDS:
                raise ManifestError(f"point {p.id!r} has unknown kind {p.kind!r}")
            for sig in p.predicate.signals:
                if sig not in widths:
                    raise ManifestError(f"point {p.id!r} references undeclared signal {sig!r}")
            if p.predicate.op == "range" and p.predicate.lo > p.predicate.hi:
                raise ManifestError(f"point {p.id!r} has empty range")
            if p.predicate.op == "seq" and not p.predicate.steps:
                raise ManifestError(f"point {p.id!r} has an empty sequence")

    @property
    def widths(self) -> dict[str, int]:
        table = dict(self.inputs)
        table.update({s: w for s, w, _ in self.tied})
        table.update(dict(self.counters))
        return table

    @property
    def input_names(self) -> list[str]:
        return [s for s, _ in self.inputs]

    def point(self, point_id: str) -> ManifestPoint:
        for p in self.points:
            if p.id == point_id:
                return p
        raise KeyError(point_id)

    def source_index(self) -> dict[str, str]:
        return {p.id: p.predicate.describe() for p in self.points}

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "top": self.top,
            "inputs": [{"signal": s, "width": w} for s, w in self.inputs],
            "tied": [{"signal": s, "width": w, "value": v} for s, w, v in self.tied],
            "counters": [{"signal": s, "width": w} for s, w in self.counters],
            "points": [
                {"id": p.id, "kind": p.kind, "predicate": p.predicate.to_dict(), "tags": list(p.tags)}
                for p in self.points
            ],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> DesignManifest:
        try:
            return cls(
                name=data["name"],
                top=data.get("top", ""),
                inputs=tuple((d["signal"], int(d["width"])) for d in data.get("inputs", [])),
                tied=tuple((d["signal"], int(d["width"]), int(d["value"])) for d in data.get("tied", [])),
                counters=tuple((d["signal"], int(d["width"])) for d in data.get("counters", [])),
                points=tuple(
                    ManifestPoint(
                        id=d["id"],
                        kind=d.get("kind", "functional"),
                        predicate=Predicate.from_dict(d["predicate"]),
                        tags=tuple(d.get("tags", ())),
                    )
                    for d in data.get("points", [])
                ),
            )
        except KeyError as exc:
            raise ManifestError(f"manifest missing field {exc.args[0]!r}") from None

    @classmethod
    def load(cls, path: str | Path) -> DesignManifest:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: {exc}") from None
        return cls.from_dict(data)


# -- stimulus ----------------------------------------------------------------


@dataclass(frozen=True)
class Drive:
    values: tuple[tuple[str, int], ...]


@dataclass(frozen=True)
class Random:
    count: int


class StimulusError(ValueError):
    def __init__(self, lineno: int, reason: str) -> None:
        super().__init__(f"line {lineno}: {reason}")
        self.lineno = lineno


def parse_stimulus(text: str, manifest: DesignManifest) -> list[Drive | Random]:
    """Validate a stimulus script against the manifest.

    Directives are ``drive sig=value [sig=value ...]`` (one vector) and
    ``random <count>``. ``//`` and ``#`` start comments.
    """
    widths = dict(manifest.inputs)
    internal = {s for s, _, _ in manifest.tied} | {s for s, _ in manifest.counters}
    directives: list[Drive | Random] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("//", 1)[0].split("#", 1)[0].strip()
        if not line:
            continue
        word, _, rest = line.partition(" ")
        if word == "drive":
            pairs = []
            for item in rest.split():
                sig, eq, value_text = item.partition("=")
                if not eq:
                    raise StimulusError(lineno, f"expected <signal>=<value>, got {item!r}")
                if sig in internal:
                    raise StimulusError(lineno, f"{sig!r} is an internal signal, not a top-level input")
                if sig not in widths:
                    raise StimulusError(lineno, f"unknown input {sig!r}")
                try:
                    value = int(value_text, 0)
                except ValueError:
                    raise StimulusError(lineno, f"bad value {value_text!r} for {sig}") from None
                if value < 0:
                    raise StimulusError(lineno, f"negative value for {sig}")
                pairs.append((sig, value & ((1 << widths[sig]) - 1)))
            if not pairs:
                raise StimulusError(lineno, "drive needs at least one assignment")
            directives.append(Drive(tuple(pairs)))
        elif word == "random":
            try:
                count = int(rest.strip())
            except ValueError:
                raise StimulusError(lineno, f"bad random count {rest.strip()!r}") from None
            if count < 0:
                raise StimulusError(lineno, "random count must be nonnegative")
            directives.append(Random(count))
        else:
            raise StimulusError(lineno, f"unknown directive {word!r}")
    return directives


def vectors(
    manifest: DesignManifest, directives: list[Drive | Random], seed: int
) -> Iterator[dict[str, int]]:
    """Expand directives into full signal vectors (inputs, tied, counters)."""
    rng = Lcg(seed)
    held = {s: 0 for s, _ in manifest.inputs}
    fixed = {s: v & ((1 << w) - 1) for s, w, v in manifest.tied}
    counters = manifest.counters
    k = 0

    def emit() -> dict[str, int]:
        vec = dict(held)
        vec.update(fixed)
        for sig, width in counters:
            vec[sig] = k & ((1 << width) - 1)
        return vec

    for d in directives:
        if isinstance(d, Drive):
            held.update(d.values)
            yield emit()
            k += 1
        else:
            for _ in range(d.count):
                for sig, width in manifest.inputs:
                    held[sig] = rng.draw(width)
                yield emit()
                k += 1


def _satisfies(pred: Predicate, vec: dict[str, int]) -> bool:
    if pred.op == "eq":
        return vec[pred.signal] == pred.value
    return pred.lo <= vec[pred.signal] <= pred.hi


class _SeqMatcher:
    """Counts matches of a consecutive-vector sequence ending at each vector."""

    def __init__(self, steps: tuple[tuple[str, int], ...]) -> None:
        self.steps = steps
        self.window: list[dict[str, int]] = []

    def feed(self, vec: dict[str, int]) -> bool:
        self.window.append(vec)
        n = len(self.steps)
        if len(self.window) > n:
            self.window.pop(0)
        if len(self.window) < n:
            return False
        return all(self.window[i][s] == v for i, (s, v) in enumerate(self.steps))


def evaluate(
    manifest: DesignManifest,
    directives: list[Drive | Random],
    seed: int,
    deadline: float | None = None,
) -> dict[str, int]:
    """Hit count per point over the vector stream for one seed."""
    hits = {p.id: 0 for p in manifest.points}
    simple = [(p.id, p.predicate) for p in manifest.points if p.predicate.op != "seq"]
    seqs = [(p.id, _SeqMatcher(p.predicate.steps)) for p in manifest.points if p.predicate.op == "seq"]
    for k, vec in enumerate(vectors(manifest, directives, seed)):
        if deadline is not None and k % 1024 == 0 and time.monotonic() > deadline:
            raise TimeoutError(f"simulation exceeded wall-clock cap after {k} vectors")
        for pid, pred in simple:
            if _satisfies(pred, vec):
                hits[pid] += 1
        for pid, matcher in seqs:
            if matcher.feed(vec):
                hits[pid] += 1
    return hits


# -- simulator interface ------------------------------------------------------


@dataclass
class CompileResult:
    ok: bool
    log: str


@dataclass
class SimResult:
    ok: bool
    log: str
    coverage_path: Path | None
    seed: int


class Simulator(Protocol):
    def compile(self, tb_path: Path) -> CompileResult: ...

    def simulate(self, seed: int, out_path: Path, iteration: int = 0) -> SimResult: ...


@dataclass
class MockSimulator:
    manifest: DesignManifest
    timeout: float = DEFAULT_TIMEOUT
    _program: list[Drive | Random] | None = field(default=None, init=False, repr=False)

    def compile(self, tb_path: Path) -> CompileResult:
        self._program = None
        try:
            text = Path(tb_path).read_text(encoding="utf-8")
        except OSError as exc:
            return CompileResult(False, f"error: cannot read testbench: {exc}")
        try:
            program = parse_stimulus(text, self.manifest)
        except StimulusError as exc:
            return CompileResult(False, f"{Path(tb_path).name}: error: {exc}")
        self._program = program
        count = sum(1 if isinstance(d, Drive) else d.count for d in program)
        return CompileResult(True, f"compiled {len(program)} directives ({count} vectors) against {self.manifest.name}")

    def simulate(self, seed: int, out_path: Path, iteration: int = 0) -> SimResult:
        if self._program is None:
            return SimResult(False, "error: no successfully compiled testbench", None, seed)
        deadline = time.monotonic() + self.timeout if self.timeout else None
        try:
            hits = evaluate(self.manifest, self._program, seed, deadline)
        except TimeoutError as exc:
            return SimResult(False, f"timeout: {exc}", None, seed)
        db = cov.CoverageDatabase.from_points(
            (cov.CoveragePoint(p.id, p.kind, hits[p.id]) for p in self.manifest.points),
            [(iteration, seed)],
        )
        cov.snapshot(db, out_path)
        return SimResult(
            True,
            f"seed {seed}: {db.covered_count}/{db.total} points hit ({db.percentage:.2f}%)",
            Path(out_path),
            seed,
        )


@dataclass
class SubprocessSimulator:
    """Drives an external simulator through command templates.

    Templates may use ``{tb}``, ``{design}``, ``{seed}`` and ``{out}``. The
    simulate command must write raw coverage to ``{out}`` in
    ``coverage_format``; it is normalised to canonical form afterwards.
    """

    compile_cmd: str
    sim_cmd: str
    design_paths: list[Path]
    build_dir: Path
    coverage_format: str = "canonical"
    timeout: float = DEFAULT_TIMEOUT
    _tb: Path | None = field(default=None, init=False, repr=False)

    def _render(self, template: str, **values: Any) -> list[str]:
        quoted = {k: shlex.quote(str(v)) for k, v in values.items()}
        quoted["design"] = " ".join(shlex.quote(str(p)) for p in self.design_paths)
        argv = shlex.split(template.format(**quoted))
        if not argv:
            raise ValueError("empty command template")
        if shutil.which(argv[0]) is None:
            raise SimulatorMissingError(f"simulator executable not found: {argv[0]}")
        return argv

    def _exec(self, argv: list[str]) -> tuple[int | None, str]:
        try:
            proc = subprocess.run(
                argv,
                capture_output=True,
                text=True,
                timeout=self.timeout,
                cwd=self.build_dir,
            )
        except subprocess.TimeoutExpired as exc:
            out = (exc.stdout or "") if isinstance(exc.stdout, str) else ""
            return None, out + f"\ntimeout: exceeded {self.timeout:g}s wall-clock cap"
        return proc.returncode, proc.stdout + proc.stderr

    def compile(self, tb_path: Path) -> CompileResult:
        self._tb = None
        self.build_dir.mkdir(parents=True, exist_ok=True)
        argv = self._render(self.compile_cmd, tb=tb_path, out=self.build_dir, seed=0)
        code, output = self._exec(argv)
        if code != 0:
            return CompileResult(False, output or f"compile exited with status {code}")
        self._tb = Path(tb_path)
        return CompileResult(True, output)

    def simulate(self, seed: int, out_path: Path, iteration: int = 0) -> SimResult:
        if self._tb is None:
            return SimResult(False, "error: no successfully compiled testbench", None, seed)
        out_path = Path(out_path)
        raw = out_path if self.coverage_format == "canonical" else out_path.with_suffix(".raw")
        argv = self._render(self.sim_cmd, tb=self._tb, out=raw, seed=seed)
        code, output = self._exec(argv)
        if code != 0:
            return SimResult(False, output or f"simulation exited with status {code}", None, seed)
        try:
            db = cov.parse(raw, self.coverage_format)
        except (OSError, ValueError) as exc:
            return SimResult(False, output + f"\nerror: unusable coverage output: {exc}", None, seed)
        cov.snapshot(cov.CoverageDatabase(db.points, ((iteration, seed),)), out_path)
        return SimResult(True, output, out_path, seed)


def run_seeds(sim: Simulator, n: int, out_path_for, iteration: int = 0) -> list[SimResult]:
    """Simulate seeds ``1..n``; ``out_path_for(seed)`` names each output file."""
    if n < 1:
        raise ValueError("need at least one seed")
    return [sim.simulate(seed, out_path_for(seed), iteration) for seed in range(1, n + 1)]
