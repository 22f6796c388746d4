import json

import pytest

from covclose import coverage as cov
from covclose.cli import main


@pytest.fixture
def replayed(handshake, tmp_path, capsys):
    ws = tmp_path / "ws"
    code = main(["replay", "--config", str(handshake / "config.json"), "--script", str(handshake / "script.json")])
    capsys.readouterr()
    return code, ws


def test_replay_exit_code_below_target(replayed):
    code, ws = replayed
    assert code == 2
    assert (ws / "reports" / "report.json").exists()


def test_merge_single_file_identity(replayed, capsys, tmp_path):
    _, ws = replayed
    seed = ws / "cov" / "iter1_seed1.covdb"
    out = tmp_path / "m.covdb"
    assert main(["merge", "--out", str(out), str(seed)]) == 0
    db = cov.load_snapshot(seed)
    assert cov.load_snapshot(out).covered_set == db.covered_set
    assert f"{db.percentage:.2f}%" in capsys.readouterr().out


def test_merge_seed_files_matches_cycle_summary(replayed, capsys):
    _, ws = replayed
    seeds = [str(ws / "cov" / f"iter1_seed{s}.covdb") for s in range(1, 6)]
    assert main(["merge", *seeds]) == 0
    printed = capsys.readouterr().out
    merged = cov.load_snapshot(ws / "cov" / "iter1_merged.covdb")
    assert printed.startswith(f"{merged.percentage:.2f}%")


def test_merge_mismatch_exit_one(tmp_path, capsys):
    a, b = tmp_path / "a.covdb", tmp_path / "b.covdb"
    a.write_text("line x 1\nline y 0\n")
    b.write_text("line y 1\nline z 0\n")
    assert main(["merge", str(a), str(b)]) == 1
    err = capsys.readouterr().err
    assert "only in earlier inputs: x" in err and "only in later input: z" in err


def test_profile_and_curve_do_not_touch_checkpoint(replayed, tmp_path, capsys):
    _, ws = replayed
    before = (ws / "state.json").read_bytes()
    out = tmp_path / "prof"
    assert main(["profile", "--state", str(ws), "--plot", "--out", str(out)]) == 0
    assert (out / "tokens.json").exists() and (out / "curve.svg").exists()
    assert "SystemPrompt" in capsys.readouterr().out
    assert main(["curve", "--state", str(ws / "state.json")]) == 0
    assert capsys.readouterr().out.startswith("cumulative_tokens,coverage_percent\n0,0.0000\n")
    assert (ws / "state.json").read_bytes() == before


def test_classify_matches_run_and_honours_overrides(replayed, tmp_path, capsys):
    _, ws = replayed
    original = (ws / "reports" / "report.json").read_text()
    out = tmp_path / "again"
    assert main(["classify", "--state", str(ws), "--out", str(out)]) == 0
    assert (out / "report.json").read_text() == original
    overrides = tmp_path / "o.json"
    overrides.write_text(json.dumps([{"point_id": "timer.wrap", "category": "R3", "rationale": "try a preload"}]))
    assert main(["classify", "--state", str(ws), "--overrides", str(overrides), "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert [e["point_id"] for e in report["escalation"]] == ["timer.wrap"]
    assert report["conflicts"][0]["other"] == "M2"


def test_run_without_credentials_fails(handshake, monkeypatch, capsys):
    monkeypatch.delenv("OPENAI_API_KEY", raising=False)
    assert main(["run", "--config", str(handshake / "config.json"), "--mock-sim"]) == 1
    assert "OPENAI_API_KEY" in capsys.readouterr().err


def test_bad_config_exit_one(tmp_path, capsys):
    assert main(["replay", "--config", str(tmp_path / "none.json"), "--script", "x"]) == 1
    assert "error:" in capsys.readouterr().err


def test_flag_overrides(handshake, tmp_path, capsys):
    ws = tmp_path / "other"
    code = main(
        [
            "replay", "--config", str(handshake / "config.json"), "--script", str(handshake / "script.json"),
            "--workspace", str(ws), "--model", "small-model", "--budget", "90000", "--max-iter", "1",
        ]
    )
    assert code == 2
    state = json.loads((ws / "state.json").read_text())
    assert state["config"]["model_id"] == "small-model" and state["config"]["token_budget"] == 90000


def test_verb_required(capsys):
    with pytest.raises(SystemExit):
        main([])
