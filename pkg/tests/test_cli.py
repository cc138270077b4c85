from __future__ import annotations

import json
import sys
from pathlib import Path

import pytest

from conftest import FIXTURES
from txlens.cli import main

CASE = str(FIXTURES / "case_study.fixture.json")
STUB = str(Path(__file__).with_name("stub_backend.py"))


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_decode(capsys):
    code, out, _ = run(capsys, "decode", CASE, "--offline")
    doc = json.loads(out)
    assert code == 0
    assert len(doc["edges"]) == 3 and len(doc["macroActions"]) == 1
    assert {n["delta"] for n in doc["netBalances"]} == {"-10000000000000000000", "4300000000"}
    assert doc["groupingRule"]


def test_profile(capsys):
    code, out, _ = run(capsys, "profile", CASE, "--offline")
    doc = json.loads(out)
    assert code == 0 and doc["confidence"] == "high"
    assert sorted(doc["classifiedFlows"].values()) == ["swap_in", "swap_in", "swap_out"]


def test_explain_text(capsys, tmp_path):
    board = tmp_path / "board.json"
    code, out, _ = run(capsys, "explain", CASE, "--offline", "--cache-dir", str(tmp_path), "--dump-board", str(board))
    assert code == 0
    assert out.startswith("You swapped 10 WETH for a total of 4,300 USDC.")
    assert "verdict: pass (iteration 1)" in out
    assert json.loads(board.read_text())


def test_explain_unresolved_exit_code(capsys, tmp_path):
    code, out, _ = run(
        capsys, "explain", CASE, "--offline", "--cache-dir", str(tmp_path), "--format", "json",
        "--backend", "external", "--backend-cmd", f"{sys.executable} {STUB}", "--max-refine", "2",
    )
    doc = json.loads(out)
    assert code == 2 and doc["verdict"] == "unresolved"
    assert all(line.startswith("UNVERIFIED:") for line in doc["unverified"])


def test_external_without_command(capsys, tmp_path):
    code, _, err = run(capsys, "explain", CASE, "--offline", "--backend", "external")
    assert code == 1 and "backend" in err


def test_missing_file(capsys):
    code, _, err = run(capsys, "decode", "/nonexistent/x.fixture.json", "--offline")
    assert code == 1 and err.startswith("txlens: error:")


def test_hash_offline_fails_cleanly(capsys):
    code, _, err = run(capsys, "decode", "0x" + "ab" * 32, "--offline")
    assert code == 1 and "txlens: error:" in err


def test_eval_text_and_out(capsys, tmp_path):
    out_file = tmp_path / "report.json"
    code, _, _ = run(capsys, "eval", str(FIXTURES), "--offline", "--cache-dir", str(tmp_path), "--out", str(out_file))
    assert code == 0
    doc = json.loads(out_file.read_text())
    assert doc["aggregate"]["action_type_accuracy"] == 1.0
    code, out, _ = run(capsys, "eval", str(FIXTURES), "--offline", "--cache-dir", str(tmp_path), "--format", "text")
    assert code == 0 and out.splitlines()[0].split()[0] == "name"
    assert out.splitlines()[-1].startswith("mean:")


def test_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
