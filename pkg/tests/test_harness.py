from __future__ import annotations

import dataclasses
import json
import shutil
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import FIXTURE_NAMES, USER
from helpers import addr, erc20, fixture, offline_cfg, simple_bundle
from txlens.auditor import AuditReport, FinalExplanation, Verdict, run_pipeline
from txlens.errors import MismatchedFixtureError, SchemaError
from txlens.harness import (
    METRICS,
    EvalRow,
    GoldAnnotation,
    aggregate,
    build_report,
    comparison_view,
    emit_report,
    load_corpus,
    parse_gold,
    score_action_types,
    score_explanation,
)
from txlens.knowledge import CardStore, SelectorDB
from txlens.model import ActionType, EvidenceBoard
from txlens.profiler import profile
from txlens.synthesizer import AttributedClaim, ExplanationDraft, StepAnnotation


def _step(refs, kind):
    return StepAnnotation(tuple(refs), kind, "i", "m", ("p",), "r")


def test_corpus_loads(fixtures_dir):
    pairs = load_corpus(fixtures_dir)
    assert [p[1].fixture_path.rsplit("/", 1)[-1] for p in pairs] == [f"{n}.fixture.json" for n in FIXTURE_NAMES]
    for bundle, gold in pairs:
        assert set(gold.gold_types()) == set(bundle.log_indices)


def test_empty_corpus(tmp_path):
    assert load_corpus(tmp_path) == []


def _copy(fixtures_dir, tmp_path, name="simple_transfer"):
    for suffix in (".fixture.json", ".gold.json"):
        shutil.copy(fixtures_dir / f"{name}{suffix}", tmp_path / f"{name}{suffix}")
    return tmp_path / f"{name}.gold.json"


def test_bad_flow_ref(fixtures_dir, tmp_path):
    gold = _copy(fixtures_dir, tmp_path)
    doc = json.loads(gold.read_text())
    doc["steps"][0]["flowRefs"] = [7]
    gold.write_text(json.dumps(doc))
    with pytest.raises(SchemaError) as err:
        load_corpus(tmp_path)
    assert "flowRefs" in str(err.value)


@pytest.mark.parametrize(
    "edit",
    [
        lambda d: d.pop("summary"),
        lambda d: d.update(summary="Only one sentence."),
        lambda d: d["steps"][0].update(actionType="teleport"),
        lambda d: d.update(fixture="other.fixture.json"),
    ],
)
def test_schema_errors(fixtures_dir, tmp_path, edit):
    gold = _copy(fixtures_dir, tmp_path)
    doc = json.loads(gold.read_text())
    edit(doc)
    gold.write_text(json.dumps(doc))
    with pytest.raises(SchemaError):
        load_corpus(tmp_path)


def test_missing_gold(fixtures_dir, tmp_path):
    _copy(fixtures_dir, tmp_path).unlink()
    with pytest.raises(SchemaError):
        load_corpus(tmp_path)


def _gold(kinds):
    return GoldAnnotation("", tuple(_step([i], k) for i, k in enumerate(kinds)), (), "A. B.")


def test_action_type_scores():
    gold = _gold([ActionType.SWAP_OUT, ActionType.SWAP_IN, ActionType.SWAP_IN])
    exact = {0: ActionType.SWAP_OUT, 1: ActionType.SWAP_IN, 2: ActionType.SWAP_IN}
    assert score_action_types(exact, gold) == 1
    assert score_action_types({i: ActionType.UNKNOWN for i in range(3)}, gold) == 0
    assert score_action_types({**exact, 2: ActionType.TRANSFER}, gold) == Fraction(2, 3)


def _five_flow_final(covered):
    tok = addr(0x70)
    bundle = simple_bundle([erc20(tok, USER, addr(i + 1), 1, i) for i in range(5)])
    board = EvidenceBoard.new(bundle)
    profile(board, SelectorDB.builtin(), CardStore.builtin())
    draft = ExplanationDraft((AttributedClaim("A."), AttributedClaim("B.")), (_step(covered, ActionType.TRANSFER),))
    return FinalExplanation(draft, AuditReport(Verdict.REVISE, (), 1, 4, 1, 0, 0), board)


def test_flow_coverage_and_rates():
    row = score_explanation(_five_flow_final([0, 1, 2, 3]), _gold([ActionType.UNKNOWN] * 5))
    assert row.flow_coverage == Fraction(4, 5)
    assert row.number_grounding_rate == Fraction(3, 4)
    assert row.entity_grounding_rate == 1
    assert row.flows == 5 and row.audit_verdict == "revise"


def test_mismatched_fixture(tmp_path, fixtures_dir):
    pairs = dict((g.fixture_path.rsplit("/", 1)[-1], g) for _, g in load_corpus(fixtures_dir))
    final = run_pipeline(fixture("simple_transfer"), offline_cfg(tmp_path))
    with pytest.raises(MismatchedFixtureError):
        score_explanation(final, pairs["case_study.fixture.json"])
    stray = GoldAnnotation("", (_step([4], ActionType.TRANSFER),), (), "A. B.")
    with pytest.raises(MismatchedFixtureError):
        score_explanation(final, stray)


def test_corpus_scores(tmp_path, fixtures_dir):
    rows = [score_explanation(run_pipeline(b, offline_cfg(tmp_path)), g) for b, g in load_corpus(fixtures_dir)]
    agg = aggregate(rows)
    assert all(agg[m] == 1 for m in METRICS)
    assert agg["verdicts"] == {"pass": 10}
    unknown = next(r for r in rows if r.name == "unknown_contract")
    assert {"unknown_selector", "unverified_contract"} <= set(unknown.flags)


def _row(i, values):
    return EvalRow(f"0x{i:064x}", *values, audit_verdict="pass", name=f"tx{i}", flows=1)


fractions = st.fractions(min_value=0, max_value=1, max_denominator=50)


@given(st.lists(st.tuples(fractions, fractions, fractions, fractions), max_size=8))
def test_emit_report_properties(values):
    rows = [_row(i, v) for i, v in enumerate(values)]
    report = build_report(rows)
    out = emit_report(report, "json")
    assert out == emit_report(build_report(rows), "json")
    doc = json.loads(out)
    for m in METRICS:
        agg = doc["aggregate"][m]
        if not rows:
            assert agg is None
            continue
        assert 0 <= agg <= 1
        per = [Fraction(r["exact"][m]) for r in doc["perTx"]]
        assert Fraction(doc["aggregate"]["exact"][m]) == sum(per) / len(per)
    text = emit_report(report, "text")
    assert len(text.splitlines()) == (len(rows) + 2 if rows else 1)


def test_empty_text_report_is_header_only():
    assert emit_report(build_report([]), "text").split() == [
        "name", "flows", "types", "coverage", "numbers", "entities", "verdict"
    ]


def test_unknown_format():
    with pytest.raises(ValueError):
        emit_report(build_report([]), "xml")


def test_comparison_view(tmp_path, fixtures_dir):
    bundle, gold = load_corpus(fixtures_dir)[FIXTURE_NAMES.index("simple_transfer")]
    view = comparison_view(run_pipeline(bundle, offline_cfg(tmp_path)), gold)
    assert "gold summary: You sent 250 USDC" in view
    assert "step 0 intent:" in view


def test_parse_gold_root_must_be_object(case_study):
    with pytest.raises(SchemaError):
        parse_gold([], "x.gold.json", case_study)
