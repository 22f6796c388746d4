"""Coverage databases: canonical text format, adapters, merging and feedback.

The canonical ``.covdb`` format is one point per line::

    #!provenance 1 3
    line top.sv:12 3
    functional ctrl.handshake 0

``#`` starts a comment; ``#!provenance <iteration> <seed>`` header lines
record where the hits came from.
"""

from __future__ import annotations

import json
import re
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from functools import reduce
from pathlib import Path
from typing import Any

KINDS = ("line", "branch", "toggle", "fsm", "functional")
FORMATS = ("canonical", "info", "mock-result")

_FILE_LINE = re.compile(r"^(?P<file>[^:]+):(?P<line>\d+)(?::.*)?$")


class CoverageParseError(ValueError):
    def __init__(self, path: str | Path, lineno: int, reason: str) -> None:
        super().__init__(f"{path}:{lineno}: {reason}")
        self.path = str(path)
        self.lineno = lineno
        self.reason = reason


class MergeError(ValueError):
    """Raised when two databases do not share a point universe."""

    def __init__(self, only_left: Iterable[str], only_right: Iterable[str]) -> None:
        self.only_left = sorted(only_left)
        self.only_right = sorted(only_right)
        lines = ["coverage universes differ:"]
        lines += [f"  only in first:  {pid}" for pid in self.only_left]
        lines += [f"  only in second: {pid}" for pid in self.only_right]
        super().__init__("\n".join(lines))


@dataclass(frozen=True)
class CoveragePoint:
    id: str
    kind: str
    hits: int = 0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown coverage kind {self.kind!r}")
        if self.hits < 0:
            raise ValueError(f"negative hit count for {self.id}")
        if not self.id or any(ch.isspace() for ch in self.id):
            raise ValueError(f"invalid point id {self.id!r}")

    @property
    def covered(self) -> bool:
        return self.hits >= 1

    @property
    def location(self) -> tuple[str, int] | str:
        """``(file, line)`` for source-anchored ids, otherwise a group name."""
        m = _FILE_LINE.match(self.id)
        if m:
            return m.group("file"), int(m.group("line"))
        return self.group

    @property
    def group(self) -> str:
        m = _FILE_LINE.match(self.id)
        if m:
            return m.group("file")
        if "/" in self.id:
            return self.id.rsplit("/", 1)[0]
        if "." in self.id:
            return self.id.split(".", 1)[0]
        return self.kind


@dataclass(frozen=True)
class CoverageDatabase:
    """Immutable map of point id to :class:`CoveragePoint`."""

    points: Mapping[str, CoveragePoint] = field(default_factory=dict)
    provenance: tuple[tuple[int, int], ...] = ()

    @classmethod
    def from_points(
        cls, points: Iterable[CoveragePoint], provenance: Iterable[tuple[int, int]] = ()
    ) -> CoverageDatabase:
        table: dict[str, CoveragePoint] = {}
        for p in points:
            if p.id in table:
                raise ValueError(f"duplicate coverage point {p.id}")
            table[p.id] = p
        return cls(dict(sorted(table.items())), tuple((int(i), int(s)) for i, s in provenance))

    @property
    def universe(self) -> frozenset[str]:
        return frozenset(self.points)

    @property
    def covered_set(self) -> frozenset[str]:
        return frozenset(pid for pid, p in self.points.items() if p.covered)

    @property
    def uncovered(self) -> list[CoveragePoint]:
        return [p for p in self.points.values() if not p.covered]

    @property
    def total(self) -> int:
        return len(self.points)

    @property
    def covered_count(self) -> int:
        return sum(1 for p in self.points.values() if p.covered)

    @property
    def percentage(self) -> float:
        if not self.points:
            return 0.0
        return 100.0 * self.covered_count / len(self.points)

    def to_dict(self) -> dict[str, Any]:
        return {
            "points": [[p.kind, p.id, p.hits] for p in self.points.values()],
            "provenance": [list(pair) for pair in self.provenance],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> CoverageDatabase:
        return cls.from_points(
            (CoveragePoint(id=pid, kind=kind, hits=int(hits)) for kind, pid, hits in data["points"]),
            (tuple(pair) for pair in data.get("provenance", ())),
        )


def merge(a: CoverageDatabase, b: CoverageDatabase) -> CoverageDatabase:
    """Sum hits point-by-point over a shared universe.

    A database with no points at all is the identity element, which lets
    cumulative coverage start from nothing.
    """
    if not a.points:
        return CoverageDatabase(b.points, a.provenance + b.provenance)
    if not b.points:
        return CoverageDatabase(a.points, a.provenance + b.provenance)
    if a.universe != b.universe:
        raise MergeError(a.universe - b.universe, b.universe - a.universe)
    points = {}
    for pid, p in a.points.items():
        q = b.points[pid]
        if p.kind != q.kind:
            raise ValueError(f"point {pid} has kind {p.kind} in one database and {q.kind} in the other")
        points[pid] = CoveragePoint(pid, p.kind, p.hits + q.hits)
    return CoverageDatabase(points, a.provenance + b.provenance)


def merge_all(dbs: Iterable[CoverageDatabase]) -> CoverageDatabase:
    return reduce(merge, dbs, CoverageDatabase())


# -- parsing -----------------------------------------------------------------


def parse_canonical(text: str, path: str | Path = "<string>") -> CoverageDatabase:
    points: dict[str, CoveragePoint] = {}
    provenance: list[tuple[int, int]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("#!provenance"):
            fields = line.split()
            if len(fields) != 3:
                raise CoverageParseError(path, lineno, "malformed provenance header")
            try:
                provenance.append((int(fields[1]), int(fields[2])))
            except ValueError:
                raise CoverageParseError(path, lineno, "malformed provenance header") from None
            continue
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 3:
            raise CoverageParseError(path, lineno, f"expected '<kind> <id> <hits>', got {raw!r}")
        kind, pid, hits_text = fields
        if kind not in KINDS:
            raise CoverageParseError(path, lineno, f"unknown kind {kind!r}")
        if pid in points:
            raise CoverageParseError(path, lineno, f"duplicate point id {pid!r}")
        try:
            hits = int(hits_text)
        except ValueError:
            raise CoverageParseError(path, lineno, f"bad hit count {hits_text!r}") from None
        if hits < 0:
            raise CoverageParseError(path, lineno, f"negative hit count {hits}")
        points[pid] = CoveragePoint(pid, kind, hits)
    return CoverageDatabase(dict(sorted(points.items())), tuple(provenance))


def parse_info(text: str, path: str | Path = "<string>") -> CoverageDatabase:
    """Read lcov-style ``.info`` records (``SF``/``DA``/``BRDA``)."""
    current: str | None = None
    points: list[CoveragePoint] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition(":")
        if key == "SF":
            current = value.replace(" ", "_")
        elif key == "end_of_record":
            current = None
        elif key in ("DA", "BRDA"):
            if current is None:
                raise CoverageParseError(path, lineno, f"{key} record outside SF block")
            parts = value.split(",")
            try:
                if key == "DA":
                    pid, kind, hits = f"{current}:{int(parts[0])}", "line", int(parts[1])
                else:
                    pid = f"{current}:{int(parts[0])}:{parts[1]}.{parts[2]}"
                    kind = "branch"
                    hits = 0 if parts[3] == "-" else int(parts[3])
            except (IndexError, ValueError):
                raise CoverageParseError(path, lineno, f"malformed {key} record") from None
            if pid in seen:
                raise CoverageParseError(path, lineno, f"duplicate point id {pid!r}")
            seen.add(pid)
            points.append(CoveragePoint(pid, kind, hits))
    return CoverageDatabase.from_points(points)


def parse_mock_result(text: str, path: str | Path = "<string>") -> CoverageDatabase:
    """Read the JSON result form: ``{"points": [{"id", "kind", "hits"}], "provenance": [...]}``."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CoverageParseError(path, exc.lineno, exc.msg) from None
    points: dict[str, CoveragePoint] = {}
    for index, entry in enumerate(doc.get("points", []), start=1):
        pid = entry.get("id")
        if pid in points:
            raise CoverageParseError(path, index, f"duplicate point id {pid!r}")
        if entry.get("kind") not in KINDS:
            raise CoverageParseError(path, index, f"unknown kind {entry.get('kind')!r}")
        points[pid] = CoveragePoint(pid, entry["kind"], int(entry.get("hits", 0)))
    prov = [tuple(p) for p in doc.get("provenance", [])]
    return CoverageDatabase(dict(sorted(points.items())), tuple(prov))


_PARSERS = {"canonical": parse_canonical, "info": parse_info, "mock-result": parse_mock_result}


def guess_format(path: str | Path) -> str:
    suffix = Path(path).suffix
    if suffix == ".info":
        return "info"
    if suffix == ".json":
        return "mock-result"
    return "canonical"


def parse(path: str | Path, format: str | None = None) -> CoverageDatabase:
    fmt = format or guess_format(path)
    if fmt not in _PARSERS:
        raise ValueError(f"unknown coverage format {fmt!r}; expected one of {FORMATS}")
    text = Path(path).read_text(encoding="utf-8")
    return _PARSERS[fmt](text, path)


def dumps(db: CoverageDatabase) -> str:
    lines = [f"#!provenance {it} {seed}" for it, seed in db.provenance]
    lines += [f"{p.kind} {p.id} {p.hits}" for p in sorted(db.points.values(), key=lambda p: p.id)]
    return "".join(line + "\n" for line in lines)


def snapshot(db: CoverageDatabase, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(db), encoding="utf-8")
    return path


def load_snapshot(path: str | Path) -> CoverageDatabase:
    return parse(path, "canonical")


# -- feedback ----------------------------------------------------------------

SourceIndex = Mapping[str, "str | Sequence[str]"]


def annotate(point: CoveragePoint, source_index: SourceIndex | None) -> str:
    """Source text for a point, or ``<source unavailable>``.

    ``source_index`` maps file names to their lines (for ``file:line`` ids)
    or point ids to a one-line description.
    """
    if source_index:
        loc = point.location
        if isinstance(loc, tuple):
            lines = source_index.get(loc[0])
            if lines is not None and not isinstance(lines, str) and 1 <= loc[1] <= len(lines):
                return lines[loc[1] - 1].strip() or "<blank line>"
        text = source_index.get(point.id)
        if isinstance(text, str):
            return text
    return "<source unavailable>"


def _location_key(point: CoveragePoint) -> tuple[str, int, str]:
    loc = point.location
    if isinstance(loc, tuple):
        return loc[0], loc[1], point.id
    return loc, 0, point.id


def uncovered_groups(db: CoverageDatabase) -> list[tuple[str, list[CoveragePoint]]]:
    """Uncovered points grouped by file/module, largest group first."""
    groups: dict[str, list[CoveragePoint]] = {}
    for p in db.uncovered:
        groups.setdefault(p.group, []).append(p)
    ordered = sorted(groups.items(), key=lambda kv: (-len(kv[1]), kv[0]))
    return [(name, sorted(pts, key=_location_key)) for name, pts in ordered]


def feedback(db: CoverageDatabase, source_index: SourceIndex | None = None, limit: int = 10) -> str:
    if not db.points:
        raise ValueError("cannot build feedback for an empty coverage database")
    lines = [f"Cumulative coverage: {db.percentage:.2f}% ({db.covered_count}/{db.total} points covered)"]
    groups = uncovered_groups(db)
    if not groups:
        lines.append("Coverage target reached: no uncovered points remain.")
        return "\n".join(lines) + "\n"
    missing = db.total - db.covered_count
    lines.append(f"Uncovered: {missing} points in {len(groups)} groups (largest first)")
    for name, pts in groups:
        lines.append(f"[{name}] {len(pts)} uncovered")
        for p in pts[:limit]:
            loc = p.location
            where = f"{loc[0]}:{loc[1]}" if isinstance(loc, tuple) else loc
            lines.append(f"  - {p.kind} {p.id} @ {where} | {annotate(p, source_index)}")
        if len(pts) > limit:
            lines.append(f"  +{len(pts) - limit} more")
    return "\n".join(lines) + "\n"


def summary(db: CoverageDatabase, top_groups: int = 5) -> str:
    """Compact structured summary used in tool payloads."""
    lines = [
        f"points: {db.total}",
        f"covered: {db.covered_count}",
        f"percentage: {db.percentage:.2f}",
    ]
    groups = uncovered_groups(db)
    if groups:
        lines.append("top uncovered groups:")
        for name, pts in groups[:top_groups]:
            ids = ", ".join(p.id for p in pts[:5])
            more = f", +{len(pts) - 5} more" if len(pts) > 5 else ""
            lines.append(f"  {name}: {len(pts)} ({ids}{more})")
    return "\n".join(lines)
