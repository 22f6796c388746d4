"""Command-line entry point: ``covclose <verb> ...``.

Exit status: 0 when the coverage target was reached (or a utility verb
succeeded), 2 when a run terminated below target, 1 on any error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from collections.abc import Sequence
from pathlib import Path

from . import coverage as cov
from . import graph
from . import ledger as ledger_mod
from . import taxonomy
from .llm import OpenAIBackend, ProviderError, ScriptedBackend, ScriptError
from .sim import DesignManifest, ManifestError
from .state import AgentState, ConfigError, RunConfig, StateError, load_checkpoint
from .toolkit import Toolkit

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_BELOW_TARGET = 2

log = logging.getLogger("covclose")


def _config(args: argparse.Namespace) -> RunConfig:
    overrides = {
        "model_id": getattr(args, "model", None),
        "token_budget": getattr(args, "budget", None),
        "max_iterations": getattr(args, "max_iter", None),
        "workspace_dir": getattr(args, "workspace", None),
    }
    if getattr(args, "mock_sim", False):
        overrides["simulator"] = "mock"
    return RunConfig.load(args.config, **overrides)


def _manifest(config: RunConfig) -> DesignManifest | None:
    path = config.manifest
    if config.simulator != "mock" or path is None or not path.exists():
        return None
    return DesignManifest.load(path)


def _finish(state: AgentState, manifest: DesignManifest | None, overrides_path: str | None = None) -> int:
    overrides = taxonomy.load_overrides(overrides_path) if overrides_path else ()
    report = taxonomy.write_reports(state, manifest, overrides)
    print(taxonomy.render_text(report), end="")
    print(f"reports written to {state.workspace / 'reports'}")
    return EXIT_OK if state.termination_reason == "target_reached" else EXIT_BELOW_TARGET


def cmd_run(args: argparse.Namespace) -> int:
    config = _config(args)
    llm = OpenAIBackend(config.endpoint)
    toolkit = Toolkit.from_config(config)
    state = graph.run(config, llm, toolkit)
    return _finish(state, toolkit.manifest)


def cmd_replay(args: argparse.Namespace) -> int:
    config = _config(args)
    llm = ScriptedBackend.from_file(args.script)
    toolkit = Toolkit.from_config(config)
    state = graph.run(config, llm, toolkit)
    return _finish(state, toolkit.manifest)


def _reports_dir(args: argparse.Namespace, state: AgentState) -> Path:
    return Path(args.out) if getattr(args, "out", None) else state.workspace / "reports"


def cmd_profile(args: argparse.Namespace) -> int:
    state = load_checkpoint(args.state)
    out = _reports_dir(args, state)
    ledger_mod.write_reports(state.ledger, state.config.pricing, state.coverage_percent, out)
    if args.plot:
        ledger_mod.plot(state.ledger, out / "curve.svg")
    table = ledger_mod.totals(state.ledger)
    for row in table["categories"]:
        print(f"{row['category']:<22}{row['total']:>10}  {row['share']:>6.2f}%")
    print(f"{'total':<22}{table['total']:>10}")
    print(f"cost: ${ledger_mod.cost(state.ledger, state.config.pricing):.6f}")
    return EXIT_OK


def cmd_classify(args: argparse.Namespace) -> int:
    state = load_checkpoint(args.state)
    if not state.terminated:
        raise StateError("checkpoint is from an unfinished run; nothing to classify yet")
    overrides = taxonomy.load_overrides(args.overrides) if args.overrides else ()
    out = _reports_dir(args, state)
    report = taxonomy.write_reports(state, _manifest(state.config), overrides, out)
    print(taxonomy.render_text(report), end="")
    return EXIT_OK


def cmd_merge(args: argparse.Namespace) -> int:
    dbs = [cov.parse(p) for p in args.covdb]
    try:
        merged = cov.merge_all(dbs)
    except cov.MergeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for pid in exc.only_left:
            print(f"  only in earlier inputs: {pid}", file=sys.stderr)
        for pid in exc.only_right:
            print(f"  only in later input: {pid}", file=sys.stderr)
        return EXIT_ERROR
    if args.out:
        cov.snapshot(merged, args.out)
    print(f"{merged.percentage:.2f}% ({merged.covered_count}/{merged.total})")
    return EXIT_OK


def cmd_curve(args: argparse.Namespace) -> int:
    state = load_checkpoint(args.state)
    text = ledger_mod.curve_csv(state.ledger)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        print(text, end="")
    if args.plot:
        ledger_mod.plot(state.ledger, Path(args.plot))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="covclose", description="Agentic coverage closure with token accounting.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="verb", required=True)

    def run_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="run configuration (JSON)")
        p.add_argument("--mock-sim", action="store_true", help="use the manifest-driven mock simulator")
        p.add_argument("--model", help="model identifier")
        p.add_argument("--budget", type=int, help="token budget")
        p.add_argument("--max-iter", type=int, help="maximum verification cycles")
        p.add_argument("--workspace", help="workspace directory")

    p = sub.add_parser("run", help="run closure against the live provider")
    run_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("replay", help="run closure offline from a scripted LLM transcript")
    run_flags(p)
    p.add_argument("--script", required=True, help="LLM script (JSON array of turns)")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("profile", help="recompute token allocation from a checkpoint")
    p.add_argument("--state", required=True, help="state.json or its workspace")
    p.add_argument("--plot", action="store_true", help="also write curve.svg")
    p.add_argument("--out", help="output directory (default: <workspace>/reports)")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("classify", help="rebuild the hole taxonomy from a checkpoint")
    p.add_argument("--state", required=True)
    p.add_argument("--overrides", help="JSON list of human classifications")
    p.add_argument("--out", help="output directory (default: <workspace>/reports)")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("merge", help="merge coverage databases")
    p.add_argument("--out", help="write the merged canonical database here")
    p.add_argument("covdb", nargs="+")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("curve", help="print the coverage-vs-tokens series")
    p.add_argument("--state", required=True)
    p.add_argument("--out", help="write CSV here instead of stdout")
    p.add_argument("--plot", help="also render an SVG to this path")
    p.set_defaults(func=cmd_curve)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (
        ConfigError,
        StateError,
        ProviderError,
        ScriptError,
        ManifestError,
        graph.SetupError,
        cov.CoverageParseError,
        OSError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
