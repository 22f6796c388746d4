"""Inference-time token accounting.

Every token of every call lands in exactly one of six categories. Input
tokens are apportioned across the tagged request messages; reasoning and
output tokens go whole-call to the category of the call's dominant action.
"""

from __future__ import annotations

import csv
import io
import json
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .llm import CallRecord, largest_remainder

SYSTEM_PROMPT = "SystemPrompt"
DESIGN_COMPREHENSION = "DesignComprehension"
STIMULUS_GENERATION = "StimulusGeneration"
COVERAGE_FEEDBACK = "CoverageFeedback"
ERROR_RECOVERY = "ErrorRecovery"
AGENTIC_OVERHEAD = "AgenticOverhead"

CATEGORIES = (
    SYSTEM_PROMPT,
    DESIGN_COMPREHENSION,
    STIMULUS_GENERATION,
    COVERAGE_FEEDBACK,
    ERROR_RECOVERY,
    AGENTIC_OVERHEAD,
)
COMPONENTS = ("input", "output", "reasoning")

# which usage components each category may receive
ALLOWED_COMPONENTS = {
    SYSTEM_PROMPT: frozenset({"input"}),
    DESIGN_COMPREHENSION: frozenset(COMPONENTS),
    STIMULUS_GENERATION: frozenset({"reasoning", "output"}),
    COVERAGE_FEEDBACK: frozenset({"input"}),
    ERROR_RECOVERY: frozenset(COMPONENTS),
    AGENTIC_OVERHEAD: frozenset(COMPONENTS),
}

_TAG_CATEGORY = {
    "system_prompt": SYSTEM_PROMPT,
    "design_content": DESIGN_COMPREHENSION,
    "coverage_feedback": COVERAGE_FEEDBACK,
    "error_log": ERROR_RECOVERY,
}


@dataclass(frozen=True)
class PricingTable:
    """Dollars per million tokens for each usage component."""

    input_price: float = 0.0
    output_price: float = 0.0
    reasoning_price: float = 0.0

    def __post_init__(self) -> None:
        if min(self.input_price, self.output_price, self.reasoning_price) < 0:
            raise ValueError("prices must be nonnegative")

    def to_dict(self) -> dict[str, float]:
        return {
            "input_price": self.input_price,
            "output_price": self.output_price,
            "reasoning_price": self.reasoning_price,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> PricingTable:
        return cls(
            float(data.get("input_price", 0.0)),
            float(data.get("output_price", 0.0)),
            float(data.get("reasoning_price", 0.0)),
        )


@dataclass
class TokenLedger:
    records: list[CallRecord] = field(default_factory=list)
    # (cumulative billed tokens, cumulative coverage %) after each state update
    samples: list[tuple[int, float]] = field(default_factory=list)
    # indices into ``samples`` taken right after a successful verification cycle
    cycle_marks: list[int] = field(default_factory=list)

    @property
    def total_tokens(self) -> int:
        return sum(r.usage.total for r in self.records)

    def next_index(self) -> int:
        return self.records[-1].index + 1 if self.records else 0

    def append(self, record: CallRecord) -> None:
        if self.records and record.index <= self.records[-1].index:
            raise ValueError("call record indices must strictly increase")
        self.records.append(record)

    def sample(self, coverage_percent: float, after_cycle: bool = False) -> None:
        point = (self.total_tokens, float(coverage_percent))
        if self.samples:
            last_t, last_c = self.samples[-1]
            if point[0] < last_t or point[1] < last_c:
                raise ValueError(f"curve must be nondecreasing: {self.samples[-1]} -> {point}")
        self.samples.append(point)
        if after_cycle:
            self.cycle_marks.append(len(self.samples) - 1)

    @property
    def category_totals(self) -> dict[str, dict[str, int]]:
        table = {c: dict.fromkeys(COMPONENTS, 0) for c in CATEGORIES}
        for record in self.records:
            for category, component, count in classify(record):
                table[category][component] += count
        return table

    def to_dict(self) -> dict[str, Any]:
        return {
            "records": [r.to_dict() for r in self.records],
            "samples": [[t, c] for t, c in self.samples],
            "cycle_marks": list(self.cycle_marks),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> TokenLedger:
        return cls(
            records=[CallRecord.from_dict(r) for r in data.get("records", [])],
            samples=[(int(t), float(c)) for t, c in data.get("samples", [])],
            cycle_marks=[int(i) for i in data.get("cycle_marks", [])],
        )


def action_category(record: CallRecord) -> str:
    """Category receiving a call's reasoning and output tokens.

    Priority: finalize analysis, then recovery from an error, then testbench
    authoring, then design reading, otherwise overhead.
    """
    ctx = record.context
    if record.phase == "Finalize":
        return AGENTIC_OVERHEAD
    if ctx.get("after_error"):
        return ERROR_RECOVERY
    if ctx.get("wrote_testbench"):
        return STIMULUS_GENERATION
    if ctx.get("read_design") or (not record.produced_tool_calls and ctx.get("design_newest")):
        return DESIGN_COMPREHENSION
    return AGENTIC_OVERHEAD


def classify(record: CallRecord) -> list[tuple[str, str, int]]:
    """Attribute every token of ``record`` to a (category, component) pair.

    Returns nonzero entries only; per component the counts sum exactly to
    the record's usage.
    """
    weights = dict.fromkeys(CATEGORIES, 0)
    for tag, size in record.request:
        weights[_TAG_CATEGORY.get(tag, AGENTIC_OVERHEAD)] += size
    weights[AGENTIC_OVERHEAD] += record.tool_schemas_size
    split = largest_remainder([weights[c] for c in CATEGORIES], record.usage.input_tokens)

    out = [(c, "input", n) for c, n in zip(CATEGORIES, split) if n]
    target = action_category(record)
    if record.usage.reasoning_tokens:
        out.append((target, "reasoning", record.usage.reasoning_tokens))
    if record.usage.output_tokens:
        out.append((target, "output", record.usage.output_tokens))
    return out


def totals(ledger: TokenLedger) -> dict[str, Any]:
    """Per-category component sums and percentage shares of all billed tokens."""
    table = ledger.category_totals
    grand = sum(sum(v.values()) for v in table.values())
    rows = []
    for c in CATEGORIES:
        comp = table[c]
        total = sum(comp.values())
        rows.append(
            {
                "category": c,
                **comp,
                "total": total,
                "share": round(100.0 * total / grand, 2) if grand else 0.0,
            }
        )
    return {"categories": rows, "total": grand}


def curve(ledger: TokenLedger) -> list[tuple[int, float]]:
    """The coverage-vs-tokens series, starting from the origin."""
    return [(0, 0.0)] + list(ledger.samples)


def cost(ledger: TokenLedger, pricing: PricingTable) -> float:
    inp = sum(r.usage.input_tokens for r in ledger.records)
    out = sum(r.usage.output_tokens for r in ledger.records)
    rea = sum(r.usage.reasoning_tokens for r in ledger.records)
    return usage_cost(inp, out, rea, pricing)


def usage_cost(input_tokens: int, output_tokens: int, reasoning_tokens: int, pricing: PricingTable) -> float:
    return (
        input_tokens * pricing.input_price
        + output_tokens * pricing.output_price
        + reasoning_tokens * pricing.reasoning_price
    ) / 1_000_000


def efficiency(ledger: TokenLedger, final_coverage: float) -> dict[str, float | None]:
    table = ledger.category_totals[STIMULUS_GENERATION]
    sg = table["reasoning"] + table["output"]
    grand = ledger.total_tokens
    return {
        "stimulus_tokens": sg,
        "stimulus_tokens_per_coverage_percent": sg / final_coverage if final_coverage > 0 else None,
        "stimulus_output_share": 100.0 * table["output"] / grand if grand else 0.0,
    }


# -- report files --------------------------------------------------------------


def tokens_document(ledger: TokenLedger, pricing: PricingTable, final_coverage: float) -> dict[str, Any]:
    return {
        "allocation": totals(ledger),
        "cost_usd": round(cost(ledger, pricing), 9),
        "efficiency": efficiency(ledger, final_coverage),
        "records": [r.to_dict() for r in ledger.records],
    }


def curve_csv(ledger: TokenLedger) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["cumulative_tokens", "coverage_percent"])
    for tokens, pct in curve(ledger):
        writer.writerow([tokens, f"{pct:.4f}"])
    return buf.getvalue()


def write_reports(
    ledger: TokenLedger, pricing: PricingTable, final_coverage: float, reports_dir: Path
) -> tuple[Path, Path]:
    reports_dir.mkdir(parents=True, exist_ok=True)
    tokens_path = reports_dir / "tokens.json"
    tokens_path.write_text(
        json.dumps(tokens_document(ledger, pricing, final_coverage), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    curve_path = reports_dir / "curve.csv"
    curve_path.write_text(curve_csv(ledger), encoding="utf-8")
    return tokens_path, curve_path


def plot(ledger: TokenLedger, path: Path) -> Path:
    """Render the coverage curve and category allocation to an SVG file."""
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "covclose"
    import matplotlib.pyplot as plt

    series = curve(ledger)
    table = totals(ledger)["categories"]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(11, 4))
    ax1.step([t for t, _ in series], [c for _, c in series], where="post")
    ax1.set_xlabel("cumulative tokens")
    ax1.set_ylabel("coverage (%)")
    ax1.set_ylim(0, 100)
    ax1.set_title("Coverage vs. tokens")
    names = [row["category"] for row in table]
    bottoms = [0] * len(names)
    for comp in COMPONENTS:
        values = [row[comp] for row in table]
        ax2.barh(names, values, left=bottoms, label=comp)
        bottoms = [b + v for b, v in zip(bottoms, values)]
    ax2.set_xlabel("tokens")
    ax2.set_title("Token allocation")
    ax2.legend()
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path
