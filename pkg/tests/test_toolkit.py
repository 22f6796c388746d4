import pytest

from covclose import coverage as cov
from covclose.messages import ToolCall
from covclose.toolkit import SandboxError, Toolkit, excerpt, lint_testbench, top_module_name

STIM = (
    "drive req=0 ack=0 mode=0 data=0\n"
    "drive req=1 ack=0 mode=3 data=255\n"
    "drive req=1 ack=1 data=100\n"
    "random 8\n"
)


@pytest.fixture
def kit(handshake_config):
    handshake_config.workspace_dir.mkdir(parents=True)
    return Toolkit.from_config(handshake_config)


def call(kit, name, **args):
    return kit.execute(ToolCall("c1", name, args))


# -- lint --


def rules(text, top="handshake_unit"):
    return {v.rule for v in lint_testbench(text, top)}


def test_force_with_hierarchy_is_rejected_naming_force():
    violations = lint_testbench("initial begin\n  force dut.core.reg_x = 1;\nend\n", "handshake_unit")
    assert {"force", "hierarchical"} <= {v.rule for v in violations}
    assert any("force dut.core.reg_x" in str(v) for v in violations)
    assert violations[0].lineno == 2


def test_plain_stimulus_passes():
    assert lint_testbench(STIM, "handshake_unit") == []


def test_submodule_instantiation_rejected():
    assert rules("fifo_ctrl u_fifo (.clk(clk), .rst_n(rst_n));") == {"instantiation"}


def test_top_module_instance_allowed_but_not_probed():
    tb = "handshake_unit #(.W(8)) dut (.clk(clk), .req(req));\ninitial $display(dut.state);\n"
    assert rules(tb) == {"hierarchical"}
    assert rules(tb.splitlines()[0]) == set()


def test_comments_and_strings_ignored():
    tb = '// force x = 1;\n/* release y;\n a.b.c */\ninitial $display("dut.u0.q force");\n'
    assert rules(tb) == set()


def test_keyword_forms_not_mistaken_for_instances():
    tb = "module tb;\n  logic [7:0] data;\n  initial begin\n    repeat (4) @(posedge clk);\n    if (req) data = 8'hff;\n  end\nendmodule\n"
    assert rules(tb) == set()


def test_root_reference_rejected():
    assert rules("initial $root.tb.x = 0;") == {"hierarchical"}


def test_top_module_name():
    assert top_module_name("module handshake_unit #(parameter W=8) (input clk);") == "handshake_unit"
    assert top_module_name("") is None


# -- result shaping --


def test_excerpt_keeps_head_and_tail():
    text = "H" * 3000 + "T" * 3000
    out = excerpt(text, 1000)
    assert len(out) <= 1000
    assert out.startswith("H") and out.endswith("T") and "omitted" in out
    assert excerpt("short", 1000) == "short"


# -- filesystem tools --


def test_read_spec_is_design_content(kit, handshake_config):
    res = call(kit, "read_file", path=str(handshake_config.spec_path))
    assert res.ok and res.category_hint == "design_content"
    assert "handshake_unit" in res.payload


def test_read_design_by_relative_name(kit):
    res = call(kit, "read_file", path="handshake.manifest.json")
    assert res.ok and res.category_hint == "design_content"


def test_read_escape_is_sandbox_error(kit):
    res = call(kit, "read_file", path="../../etc/hosts")
    assert not res.ok and res.payload.startswith("sandbox error")


def test_read_truncates_large_file(kit):
    big = kit.workspace / "big.v"
    big.write_text("x" * 2_000_000)
    res = call(kit, "read_file", path="big.v")
    assert res.ok
    assert res.payload.startswith("x" * 200_000)
    assert "[truncated: file has 2000000 characters" in res.payload
    assert len(res.payload) < 200_200


def test_write_file_and_list(kit):
    res = call(kit, "write_file", path="notes/plan.txt", content="hello")
    assert res.ok and (kit.workspace / "notes" / "plan.txt").read_text() == "hello"
    (kit.workspace / "tb").mkdir()
    listing = call(kit, "list_directory", path=".").payload.splitlines()
    assert listing == ["notes/", "tb/"]


def test_write_tb_is_linted(kit):
    res = call(kit, "write_file", path="tb/bad.sv", content="initial force dut.x = 1;\n")
    assert not res.ok and "force" in res.payload
    assert not (kit.workspace / "tb" / "bad.sv").exists()


@pytest.mark.parametrize("path", ["cov/iter1_merged.covdb", "state.json", "logs/x.log", "reports/report.json"])
def test_write_to_harness_paths_refused(kit, path):
    res = call(kit, "write_file", path=path, content="x")
    assert not res.ok and "managed by the harness" in res.payload


def test_unknown_tool_and_bad_arguments(kit):
    assert "unknown tool" in call(kit, "rm_rf").payload
    res = call(kit, "read_file", nope="x")
    assert not res.ok and "invalid arguments" in res.payload
    res = call(kit, "run_simulation", seed="one")
    assert not res.ok


def test_missing_file(kit):
    res = call(kit, "read_file", path="absent.txt")
    assert not res.ok and res.payload.startswith("not found")


def test_sandbox_resolve_rejects_symlink_escape(kit, tmp_path):
    outside = tmp_path / "outside"
    outside.mkdir()
    (kit.workspace / "link").symlink_to(outside)
    with pytest.raises(SandboxError):
        kit._resolve("link/x")


# -- simulator tools --


def test_composite_cycle(kit):
    res = call(kit, "run_verification_cycle", tb_content=STIM)
    assert res.ok, res.payload
    assert res.merged_path == "cov/iter1_merged.covdb"
    merged = cov.load_snapshot(kit.workspace / res.merged_path)
    seeds = [cov.load_snapshot(kit.workspace / f"cov/iter1_seed{s}.covdb") for s in range(1, 6)]
    assert merged.covered_set == frozenset().union(*(d.covered_set for d in seeds))
    assert merged.provenance == tuple((1, s) for s in range(1, 6))
    assert "merged (this iteration)" in res.payload
    assert kit.iteration == 2
    assert (kit.workspace / "tb" / "iter1.sv").read_text() == STIM


def test_composite_compile_failure_runs_no_simulation(kit):
    res = call(kit, "run_verification_cycle", tb_content="drive bogus=1\n")
    assert not res.ok and res.stage == "compile"
    assert not list(kit.workspace.glob("cov/*.covdb"))
    assert kit.iteration == 1


def test_composite_lint_failure(kit):
    res = call(kit, "run_verification_cycle", tb_content="force req = 1;\n")
    assert not res.ok and res.stage == "lint"


def test_composite_respects_iteration_limit(kit):
    kit.iteration = kit.config.max_iterations + 1
    res = call(kit, "run_verification_cycle", tb_content=STIM)
    assert not res.ok and res.stage == "setup"


def test_manual_tools(kit):
    assert call(kit, "write_file", path="tb/t.sv", content=STIM).ok
    assert call(kit, "compile_design", tb_path="tb/t.sv").ok
    res = call(kit, "run_simulation", seed=3)
    assert res.ok and "cov/iter1_seed3.covdb" in res.payload
    summary = call(kit, "parse_coverage", cov_path="cov/iter1_seed3.covdb")
    assert summary.ok and "points: 12" in summary.payload


def test_simulate_before_compile_fails(kit):
    res = call(kit, "run_simulation", seed=1)
    assert not res.ok and res.stage == "simulate"


def test_tool_payloads_capped(kit):
    kit.config.tool_result_cap = 300
    big = "// " + "pad " * 400 + "\n" + STIM
    res = call(kit, "run_verification_cycle", tb_content=big)
    assert res.ok and len(res.payload) <= 300
