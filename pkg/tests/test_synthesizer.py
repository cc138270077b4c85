from __future__ import annotations

import dataclasses
import json
import sys
from decimal import Decimal, localcontext
from pathlib import Path

import httpx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import FIXTURE_NAMES
from helpers import fixture, profiled_board, template_draft
from stub_backend import respond
from txlens.auditor import AuditFinding, AuditReport, FindingKind, Verdict, macro_actions_for
from txlens.errors import BackendProtocolError, PreconditionError
from txlens.model import EntryKind, TokenInfo
from txlens.synthesizer import (
    FORBIDDEN_PHRASES,
    Backend,
    BackendConfig,
    board_digest,
    parse_backend_response,
    render_amount,
    revise,
    synthesize,
)

STUB = str(Path(__file__).with_name("stub_backend.py"))
USDC_INFO = TokenInfo("0x" + "a" * 40, "USDC", 6)
WETH_INFO = TokenInfo("0x" + "b" * 40, "WETH", 18)


@pytest.mark.parametrize(
    "value,info,expected",
    [
        (4_300_000_000, USDC_INFO, "4,300"),
        (10 * 10**18, WETH_INFO, "10"),
        (24_700_000_000_000_000, WETH_INFO, "0.0247"),
        (1, WETH_INFO, "0.000000000000000001"),
        (-250_000_000, USDC_INFO, "-250"),
        (1_234_567_891, USDC_INFO, "1,234.567891"),
        (1_000_000_000_000_000_123, WETH_INFO, "1"),
    ],
)
def test_render_amount_examples(value, info, expected):
    assert render_amount(value, info) == expected


def _oracle(value: int, decimals: int) -> str:
    # Independent route: Decimal arithmetic and format(), no divmod.
    with localcontext() as ctx:
        ctx.prec = 80
        exact = Decimal(value).scaleb(-decimals)
    text = format(exact, "f")
    whole, _, frac = text.partition(".")
    frac = frac.rstrip("0")
    return f"{int(whole):,}" + (f".{frac}" if frac else "")


@settings(max_examples=300, deadline=None)
@given(st.integers(min_value=0, max_value=10**30), st.integers(min_value=0, max_value=24))
def test_render_full_precision_matches_oracle(value, decimals):
    info = TokenInfo("0x" + "c" * 40, "X", decimals)
    assert render_amount(value, info, None) == _oracle(value, decimals)


@settings(max_examples=300, deadline=None)
@given(st.integers(min_value=1, max_value=10**30), st.integers(min_value=0, max_value=24))
def test_truncated_render_is_close_and_nonzero(value, decimals):
    info = TokenInfo("0x" + "c" * 40, "X", decimals)
    with localcontext() as ctx:
        ctx.prec = 80
        shown = Decimal(render_amount(value, info).replace(",", ""))
        exact = Decimal(value).scaleb(-decimals)
        assert shown > 0
        assert shown <= exact
        assert exact - shown < Decimal(1).scaleb(-6) or shown == exact


def test_case_study_claims():
    _, _, draft = template_draft("case_study")
    texts = [c.text for c in draft.summary]
    assert texts == [
        "You swapped 10 WETH for a total of 4,300 USDC.",
        "The trade was split between Uniswap V3 (2,500 USDC) and SushiSwap (1,800 USDC).",
    ]
    assert draft.summary[1].citations
    assert [s.flow_refs for s in draft.steps] == [(0,), (1,), (2,)]
    assert draft.backend is Backend.TEMPLATE and draft.iteration == 1


def test_simple_transfer_shape():
    _, _, draft = template_draft("simple_transfer")
    assert len(draft.summary) == 2 and len(draft.steps) == 1
    assert draft.steps[0].result == "User sends 250 USDC"


@pytest.mark.parametrize("name", FIXTURE_NAMES)
def test_template_invariants(name):
    board, macros, draft = template_draft(name)
    covered = sorted({li for s in draft.steps for li in s.flow_refs})
    assert covered == board.bundle.log_indices
    assert 2 <= len(draft.summary) <= 3
    text = " ".join([draft.summary_text()] + [f"{s.intent} {s.mechanism} {s.result}" for s in draft.steps]).lower()
    for phrase in FORBIDDEN_PHRASES:
        assert phrase not in text
    assert board.latest(EntryKind.DRAFT).payload == draft
    again = synthesize(profiled_board(fixture(name)), macros)
    assert again == draft


def _stub_cfg(*args: str) -> BackendConfig:
    return BackendConfig(Backend.EXTERNAL, command=(sys.executable, STUB, *args))


def test_external_subprocess_backend(case_study):
    board = profiled_board(case_study)
    draft = synthesize(board, macro_actions_for(board), _stub_cfg())
    assert draft.backend is Backend.EXTERNAL
    assert draft.summary[0].text == "You earned 999 ETH."
    assert sorted(li for s in draft.steps for li in s.flow_refs) == [0, 1, 2]


def test_external_four_sentences_rejected(case_study):
    board = profiled_board(case_study)
    with pytest.raises(BackendProtocolError):
        synthesize(board, macro_actions_for(board), _stub_cfg("four"))


def test_external_http_backend(case_study):
    seen = {}

    def handler(request: httpx.Request) -> httpx.Response:
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json=respond(seen["body"]))

    board = profiled_board(case_study)
    client = httpx.Client(transport=httpx.MockTransport(handler))
    cfg = BackendConfig(Backend.EXTERNAL, url="http://backend.test/draft")
    draft = synthesize(board, macro_actions_for(board), cfg, client)
    assert draft.summary[0].text.startswith("You earned")
    assert seen["body"]["constraints"] == {"maxSentences": 3}
    assert len(seen["body"]["boardDigest"]["flows"]) == 3


def test_external_http_error():
    board = profiled_board(fixture("simple_transfer"))
    client = httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(500)))
    cfg = BackendConfig(Backend.EXTERNAL, url="http://backend.test/draft")
    with pytest.raises(BackendProtocolError):
        synthesize(board, macro_actions_for(board), cfg, client)


@pytest.mark.parametrize(
    "mutate",
    [
        lambda d: d.update(summary=[{"text": "one"}]),
        lambda d: d.update(steps=[]),
        lambda d: d["steps"][0].update(flowRefs=[99]),
        lambda d: d["steps"][0].update(actionType="teleport"),
        lambda d: d["steps"][0].update(preconditions=[]),
        lambda d: d["summary"][0].update(text=""),
    ],
)
def test_backend_response_validation(case_study, mutate):
    doc = respond({"boardDigest": {"flows": [{"logIndex": i} for i in range(3)]}})
    mutate(doc)
    with pytest.raises(BackendProtocolError):
        parse_backend_response(doc, case_study, 1)


def test_digest_cap(case_study):
    board = profiled_board(case_study)
    full = board_digest(board)
    assert len(full["flows"]) == 3 and "truncatedFlows" not in full
    size = len(json.dumps(full))
    small = board_digest(board, limit=size - 1)
    assert len(json.dumps(small)) <= size - 1
    assert all("input" not in c for c in small["calls"])
    # Drop calls and one trailing flow: a limit just above that size keeps two flows.
    two = board_digest(board, limit=10**9)
    for c in two["calls"]:
        c.pop("input")
    two["calls"] = two["calls"][:1]
    two["flows"].pop()
    two["truncatedFlows"] = 1
    limit = len(json.dumps(two))
    cut = board_digest(board, limit=limit)
    assert cut == two
    # The fixed fields are never dropped, so a tiny limit leaves no flows at all.
    tiny = board_digest(board, limit=100)
    assert tiny["flows"] == [] and tiny["truncatedFlows"] == 3


def _report(verdict, findings, iteration):
    return AuditReport(verdict, tuple(findings), iteration)


def test_revise_requires_revise_verdict():
    board, macros, draft = template_draft("case_study")
    with pytest.raises(PreconditionError):
        revise(board, draft, _report(Verdict.PASS, [], 1), macros)


def test_revise_repairs_mutated_number():
    board, macros, draft = template_draft("case_study")
    bad = dataclasses.replace(
        draft,
        summary=(dataclasses.replace(draft.summary[0], text=draft.summary[0].text.replace("4,300", "4,400"), grounded_numbers=()),)
        + draft.summary[1:],
        iteration=3,
    )
    finding = AuditFinding(FindingKind.UNGROUNDED_NUMBER, "summary[0]", "4,400 USDC matches no flow amount or aggregate")
    fixed = revise(board, bad, _report(Verdict.REVISE, [finding], 3), macros)
    assert fixed.iteration == 4
    assert fixed.summary[0].text == "You swapped 10 WETH for a total of 4,300 USDC."
    usdc = next(n for n in fixed.summary[0].grounded_numbers if n.literal == "4,300")
    assert usdc.value == macros[0].aggregate_in[usdc.token]
    assert fixed.summary[1:] == draft.summary[1:]
    assert board.latest(EntryKind.DRAFT).payload == fixed


def test_revise_restores_coverage():
    board, macros, draft = template_draft("case_study")
    bad = dataclasses.replace(draft, steps=draft.steps[:2])
    finding = AuditFinding(FindingKind.UNCOVERED_FLOW, "steps", "flow 2 is in no step")
    fixed = revise(board, bad, _report(Verdict.REVISE, [finding], 1), macros)
    assert fixed.steps == draft.steps
