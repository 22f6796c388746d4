"""Residual coverage-hole classification, exclusion lists and the run report.

Ceiling holes (M1-M3) cannot be closed by better stimulus and are exclusion
candidates. Frontier holes (R1-R3) are closable in principle and go to an
escalation list instead.
"""

from __future__ import annotations

import json
import logging
import re
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

from . import coverage as cov
from . import ledger as ledger_mod
from .sim import DesignManifest, Predicate
from .state import AgentState
from .toolkit import top_module_name

log = logging.getLogger(__name__)

CEILING = "Ceiling"
FRONTIER = "Frontier"
INFEASIBLE_VECTORS = 2**32
SOURCES = ("agent", "rule", "human-override")


@dataclass(frozen=True)
class HoleCategory:
    id: str
    name: str
    description: str

    @property
    def tag(self) -> str:
        return CEILING if self.id.startswith("M") else FRONTIER


HOLE_CATEGORIES: dict[str, HoleCategory] = {
    c.id: c
    for c in (
        HoleCategory("M1", "Integration Tied-Off Hardware", "internal signals hard-wired to constants at integration"),
        HoleCategory("M2", "Infeasible Boundaries", "needs an impractically large number of simulation cycles"),
        HoleCategory("M3", "Defensive/Dead Code", "FSM defaults, debug paths, redundant conditions"),
        HoleCategory("R1", "Protocol Sequencing Complexity", "multi-step handshakes needing a bus functional model"),
        HoleCategory("R2", "Multi-Module Pipeline Warm-up", "deep pipelines needing coordinated activation"),
        HoleCategory("R3", "Narrow Timing & Rare Input", "cycle-precise alignment or sparse numerical conditions"),
    )
}


@dataclass(frozen=True)
class HoleClassification:
    point_id: str
    category: str
    rationale: str
    source: str
    defaulted: bool = False

    def __post_init__(self) -> None:
        if self.category not in HOLE_CATEGORIES:
            raise ValueError(f"unknown hole category {self.category!r}")
        if self.source not in SOURCES:
            raise ValueError(f"unknown classification source {self.source!r}")

    @property
    def tag(self) -> str:
        return HOLE_CATEGORIES[self.category].tag


_FENCE = re.compile(r"```[ \t]*(?:json)?[ \t]*\n(.*?)```", re.S | re.I)
_CATEGORY_ID = re.compile(r"^\s*([MR][1-3])\b", re.I)


def parse_agent_analysis(text: str | None, residual_ids: Iterable[str] | None = None) -> list[HoleClassification]:
    """Extract classifications from a fenced JSON block in the model's final answer.

    Entries naming unknown points or categories are dropped with a warning.
    Returns an empty list when no block parses.
    """
    if not text:
        return []
    allowed = set(residual_ids) if residual_ids is not None else None
    entries = None
    for block in _FENCE.findall(text):
        try:
            doc = json.loads(block)
        except json.JSONDecodeError:
            continue
        if isinstance(doc, dict):
            doc = doc.get("classifications")
        if isinstance(doc, list):
            entries = doc
            break
    if entries is None:
        log.warning("final analysis contains no parseable classification block")
        return []

    out: list[HoleClassification] = []
    seen: set[str] = set()
    for entry in entries:
        if not isinstance(entry, dict):
            log.warning("dropping non-object classification entry %r", entry)
            continue
        pid = entry.get("point_id")
        m = _CATEGORY_ID.match(str(entry.get("category", "")))
        if not isinstance(pid, str) or (allowed is not None and pid not in allowed):
            log.warning("dropping classification for unknown point %r", pid)
            continue
        if m is None:
            log.warning("dropping classification of %s with unknown category %r", pid, entry.get("category"))
            continue
        if pid in seen:
            log.warning("duplicate classification for %s ignored", pid)
            continue
        seen.add(pid)
        rationale = " ".join(str(entry.get("rationale", "")).split()) or "no rationale given"
        out.append(HoleClassification(pid, m.group(1).upper(), rationale, "agent"))
    return out


def _min_vectors(pred: Predicate, manifest: DesignManifest) -> float:
    """Fewest vectors after reset before ``pred`` can possibly hold."""
    counters = dict(manifest.counters)

    def step_min(signal: str, lo: int, hi: int) -> float:
        if signal in counters:
            if lo >= 2 ** counters[signal]:
                return float("inf")
            return lo + 1
        return 1

    if pred.op == "eq":
        return step_min(pred.signal, pred.value, pred.value)
    if pred.op == "range":
        return step_min(pred.signal, pred.lo, pred.hi)
    start = 0.0
    for i, (signal, value) in enumerate(pred.steps):
        start = max(start, step_min(signal, value, value) - 1 - i)
    return start + len(pred.steps)


def _tied_blocks(pred: Predicate, manifest: DesignManifest) -> bool:
    tied = {s: v for s, _, v in manifest.tied}
    if pred.op == "eq":
        return pred.signal in tied and tied[pred.signal] != pred.value
    if pred.op == "range":
        return pred.signal in tied and not pred.lo <= tied[pred.signal] <= pred.hi
    return any(s in tied and tied[s] != v for s, v in pred.steps)


def rule_classify(
    point_id: str, manifest: DesignManifest, db: cov.CoverageDatabase | None = None
) -> HoleClassification | None:
    """Classify a residual point from the manifest alone, or return None.

    Only ceiling categories can be derived mechanically: a predicate blocked
    by a tied-off signal (M1), one needing at least 2**32 vectors or tagged
    ``infeasible`` (M2), or a point tagged ``dead``/``default`` (M3).
    """
    if db is not None and point_id in db.points and db.points[point_id].covered:
        raise ValueError(f"{point_id} is covered; only residual points are classified")
    try:
        point = manifest.point(point_id)
    except KeyError:
        return None
    pred = point.predicate
    if _tied_blocks(pred, manifest):
        tied = sorted(set(pred.signals) & {s for s, _, _ in manifest.tied})
        return HoleClassification(
            point_id, "M1", f"depends on tied-off internal signal {', '.join(tied)}; not reachable from top-level ports", "rule"
        )
    needed = _min_vectors(pred, manifest)
    if needed >= INFEASIBLE_VECTORS or "infeasible" in point.tags:
        if needed == float("inf"):
            detail = "counter never reaches this value"
        elif needed >= INFEASIBLE_VECTORS:
            detail = f"needs at least {int(needed)} simulation vectors"
        else:
            detail = "marked infeasible in the coverage model"
        return HoleClassification(point_id, "M2", f"{pred.describe()}: {detail}", "rule")
    if {"dead", "default"} & set(point.tags):
        return HoleClassification(point_id, "M3", "marked as defensive/dead code in the coverage model", "rule")
    return None


@dataclass(frozen=True)
class Conflict:
    point_id: str
    chosen: str
    chosen_source: str
    other: str
    other_source: str


def classify_holes(
    residual: Sequence[str],
    analysis_text: str | None = None,
    manifest: DesignManifest | None = None,
    overrides: Sequence[HoleClassification] = (),
) -> tuple[list[HoleClassification], list[Conflict]]:
    """Give every residual point exactly one category.

    Precedence: human override, then agent, then rules. Points nobody
    classifies default to R2 and are flagged ``defaulted``.
    """
    agent = {c.point_id: c for c in parse_agent_analysis(analysis_text, residual)}
    human = {c.point_id: c for c in overrides}
    result: list[HoleClassification] = []
    conflicts: list[Conflict] = []
    for pid in sorted(residual):
        rule = rule_classify(pid, manifest) if manifest is not None else None
        candidates = [c for c in (human.get(pid), agent.get(pid), rule) if c is not None]
        if not candidates:
            result.append(HoleClassification(pid, "R2", "agent abstained", "rule", defaulted=True))
            continue
        chosen = candidates[0]
        for other in candidates[1:]:
            if other.category != chosen.category:
                log.warning(
                    "classification conflict for %s: %s (%s) over %s (%s)",
                    pid, chosen.category, chosen.source, other.category, other.source,
                )
                conflicts.append(Conflict(pid, chosen.category, chosen.source, other.category, other.source))
        result.append(chosen)
    return result, conflicts


def taxonomy_table(classifications: Sequence[HoleClassification]) -> dict[str, Any]:
    n = len(classifications)
    rows = []
    if n:
        for cat in HOLE_CATEGORIES.values():
            count = sum(1 for c in classifications if c.category == cat.id)
            rows.append(
                {
                    "id": cat.id,
                    "category": cat.name,
                    "tag": cat.tag,
                    "count": count,
                    "percent": round(100.0 * count / n, 2),
                }
            )
    return {
        "rows": rows,
        "residual": n,
        "ceiling": sum(1 for c in classifications if c.tag == CEILING),
        "frontier": sum(1 for c in classifications if c.tag == FRONTIER),
    }


def _one_line(text: str) -> str:
    return " ".join(text.split())


def exclusion_list(classifications: Sequence[HoleClassification]) -> str:
    ordered = sorted(classifications, key=lambda c: (c.category, c.point_id))
    lines = ["# Coverage exclusion candidates (ceiling holes only); review before adding to regression."]
    lines += [
        f"exclude {c.point_id} # {c.category} {_one_line(c.rationale)}" for c in ordered if c.tag == CEILING
    ]
    frontier = [c for c in ordered if c.tag == FRONTIER]
    lines.append("# Escalation: frontier holes are never excluded.")
    lines += [f"# escalate {c.point_id} # {c.category} {_one_line(c.rationale)}" for c in frontier]
    return "\n".join(lines) + "\n"


def parse_exclusions(text: str) -> list[str]:
    return [line.split()[1] for line in text.splitlines() if line.startswith("exclude ")]


def load_overrides(path: str | Path) -> list[HoleClassification]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return [
        HoleClassification(d["point_id"], d["category"], d.get("rationale", "human override"), "human-override")
        for d in data
    ]


def residual_points(state: AgentState, manifest: DesignManifest | None) -> list[str]:
    db = state.cumulative_coverage
    if not db.points and manifest is not None:
        return sorted(p.id for p in manifest.points)
    return sorted(p.id for p in db.uncovered)


def final_report(
    state: AgentState,
    manifest: DesignManifest | None = None,
    overrides: Sequence[HoleClassification] = (),
) -> dict[str, Any]:
    return _build_report(state, manifest, overrides)[0]


def _build_report(
    state: AgentState,
    manifest: DesignManifest | None,
    overrides: Sequence[HoleClassification],
) -> tuple[dict[str, Any], list[HoleClassification]]:
    if not state.terminated:
        raise ValueError("final report needs a terminated run")
    config = state.config
    db = state.cumulative_coverage
    classifications, conflicts = classify_holes(
        residual_points(state, manifest), state.final_analysis, manifest, overrides
    )
    table = taxonomy_table(classifications)
    tokens = ledger_mod.totals(state.ledger)
    design = manifest.name if manifest is not None else top_module_name(config.top_module_header)
    report = {
        "run": {
            "design": design or "",
            "model_id": config.model_id,
            "temperature": config.temperature,
            "seeds_per_iteration": config.seeds_per_iteration,
            "max_iterations": config.max_iterations,
            "token_budget": config.token_budget,
            "coverage_target": config.coverage_target,
            "termination_reason": state.termination_reason,
        },
        "coverage": {
            "final_percent": round(db.percentage, 4),
            "covered": db.covered_count,
            "total": db.total,
            "iterations": state.iteration,
            "per_iteration_percent": [round(d.percentage, 4) for d in state.per_iteration_coverage],
        },
        "taxonomy": table,
        "classifications": [asdict(c) | {"tag": c.tag} for c in classifications],
        "defaulted": [c.point_id for c in classifications if c.defaulted],
        "conflicts": [asdict(c) for c in conflicts],
        "tokens": {
            "total": tokens["total"],
            "allocation": tokens["categories"],
            "efficiency": ledger_mod.efficiency(state.ledger, db.percentage),
        },
        "cost_usd": round(ledger_mod.cost(state.ledger, config.pricing), 9),
        "curve": "reports/curve.csv",
        "exclusions": "reports/exclusions.txt",
        "escalation": [
            {"point_id": c.point_id, "category": c.category, "rationale": c.rationale}
            for c in classifications
            if c.tag == FRONTIER
        ],
    }
    return report, classifications


def render_text(report: Mapping[str, Any]) -> str:
    run, covd, tax = report["run"], report["coverage"], report["taxonomy"]
    out = [
        f"Coverage closure report: {run['design']}",
        f"model {run['model_id']}, temperature {run['temperature']}, {run['seeds_per_iteration']} seeds/iteration",
        f"terminated: {run['termination_reason']}",
        f"final coverage: {covd['final_percent']:.2f}% ({covd['covered']}/{covd['total']}) after {covd['iterations']} iterations",
        "",
        "Residual coverage holes",
    ]
    if tax["rows"]:
        out.append(f"  {'ID':<4}{'Category':<34}{'Tag':<10}{'Count':>6}{'%':>8}")
        for row in tax["rows"]:
            out.append(f"  {row['id']:<4}{row['category']:<34}{row['tag']:<10}{row['count']:>6}{row['percent']:>8.1f}")
        out.append(f"  ceiling:frontier = {tax['ceiling']}:{tax['frontier']}")
    else:
        out.append("  none")
    if report["defaulted"]:
        out.append(f"  unclassified (defaulted to R2): {', '.join(report['defaulted'])}")
    out += ["", "Token allocation"]
    for row in report["tokens"]["allocation"]:
        out.append(
            f"  {row['category']:<22}{row['total']:>10}  {row['share']:>6.2f}%"
            f"  (in {row['input']}, out {row['output']}, reasoning {row['reasoning']})"
        )
    out.append(f"  total billed tokens: {report['tokens']['total']}")
    out.append(f"  cost: ${report['cost_usd']:.6f}")
    out += ["", f"Curve: {report['curve']}", f"Exclusions: {report['exclusions']}", "", "Escalation"]
    if report["escalation"]:
        for e in report["escalation"]:
            out.append(f"  {e['point_id']} [{e['category']}] {_one_line(e['rationale'])}")
    else:
        out.append("  none")
    return "\n".join(out) + "\n"


def write_reports(
    state: AgentState,
    manifest: DesignManifest | None = None,
    overrides: Sequence[HoleClassification] = (),
    reports_dir: Path | None = None,
) -> dict[str, Any]:
    """Write report.json, report.txt, exclusions.txt, tokens.json and curve.csv."""
    reports_dir = reports_dir or state.workspace / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    report, classifications = _build_report(state, manifest, overrides)
    (reports_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (reports_dir / "report.txt").write_text(render_text(report), encoding="utf-8")
    (reports_dir / "exclusions.txt").write_text(exclusion_list(classifications), encoding="utf-8")
    ledger_mod.write_reports(state.ledger, state.config.pricing, state.coverage_percent, reports_dir)
    return report
