"""Bundle builders and pipeline shortcuts shared by the test modules."""

from __future__ import annotations

import dataclasses
import re
from pathlib import Path

from txlens.auditor import PipelineConfig, macro_actions_for
from txlens.ingestion import EndpointConfig, load_fixture
from txlens.knowledge import CardStore, ResponseCache, SelectorDB, investigate
from txlens.model import (
    CallKind,
    CallNode,
    EntryKind,
    EvidenceBoard,
    Stage,
    TokenInfo,
    TokenStandard,
    TokenTransfer,
    TransactionBundle,
    TxMetadata,
    TxStatus,
)
from txlens.profiler import profile
from txlens.synthesizer import render_amount, synthesize

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"
USER = "0x5a52e96bacdabb82fd05763e25335261b270efcb"


def addr(n: int) -> str:
    return "0x" + format(n, "040x")


def meta(sender: str = USER, recipient: str | None = None, n: int = 1) -> TxMetadata:
    return TxMetadata(
        hash="0x" + format(n, "064x"),
        block_number=100,
        timestamp=1_700_000_000,
        sender=sender,
        recipient=recipient or addr(0xBEEF),
        eth_value=0,
        status=TxStatus.SUCCESS,
    )


def erc20(token: str, frm: str, to: str, amount: int, li: int) -> TokenTransfer:
    return TokenTransfer(token, TokenStandard.ERC20, frm, to, amount, li)


def simple_bundle(transfers, tokens=None, root=None, declared=None, sender=USER) -> TransactionBundle:
    transfers = tuple(transfers)
    if tokens is None:
        tokens = {t.token: TokenInfo(t.token, f"T{i}", 18) for i, t in enumerate(transfers)}
    if root is None:
        root = CallNode(sender, addr(0xBEEF), CallKind.CALL, None, None, 0, (), ())
    return TransactionBundle(meta(sender, root.callee), root, transfers, tokens, declared)


def fixture(name: str) -> TransactionBundle:
    return load_fixture(FIXTURES / f"{name}.fixture.json")


def profiled_board(bundle: TransactionBundle, tmp_cache: Path | str = "/nonexistent-cache"):
    db, store = SelectorDB.builtin(), CardStore.builtin()
    board = EvidenceBoard.new(bundle)
    hyp = profile(board, db, store)
    investigate(board, list(hyp.flags), EndpointConfig(offline=True), db, store, ResponseCache(tmp_cache))
    return board


def template_draft(name: str):
    board = profiled_board(fixture(name))
    macros = macro_actions_for(board)
    draft = synthesize(board, macros)
    return board, macros, draft


def offline_cfg(tmp_path: Path, **kw) -> PipelineConfig:
    return PipelineConfig(endpoint=EndpointConfig(offline=True), cache_dir=tmp_path / "cache", **kw)


def append_draft(board: EvidenceBoard, draft):
    board.append(EntryKind.DRAFT, draft, Stage.SYNTHESIZER, "test edit")
    return draft


def grounded_sites(draft):
    """(section, index, GroundedNumber) for every declared numeral with a value."""
    sites = []
    for i, claim in enumerate(draft.summary):
        sites += [("summary", i, n) for n in claim.grounded_numbers if n.value is not None]
    for i, step in enumerate(draft.steps):
        sites += [("steps", i, n) for n in step.grounded_numbers if n.value is not None]
    return sites


def mutate_numeral(draft, bundle, site, delta: int):
    """Shift one grounded numeral by ``delta`` base units, shown at full precision.

    The declaration is dropped so the auditor has to parse the new literal.
    """
    section, index, num = site
    info = bundle.tokens[num.token]
    sign = num.literal[0] if num.literal[0] in "+-" else ""
    new_literal = sign + render_amount(num.value + delta, info, None)
    if section == "summary":
        claim = draft.summary[index]
        keep = list(claim.grounded_numbers)
        keep.remove(num)
        edited = dataclasses.replace(
            claim, text=_replace_token(claim.text, num.literal, new_literal), grounded_numbers=tuple(keep)
        )
        summary = draft.summary[:index] + (edited,) + draft.summary[index + 1 :]
        return dataclasses.replace(draft, summary=summary), new_literal
    step = draft.steps[index]
    keep = list(step.grounded_numbers)
    keep.remove(num)
    edited = dataclasses.replace(
        step, result=_replace_token(step.result, num.literal, new_literal), grounded_numbers=tuple(keep)
    )
    return dataclasses.replace(draft, steps=draft.steps[:index] + (edited,) + draft.steps[index + 1 :]), new_literal


def _replace_token(text: str, old: str, new: str) -> str:
    pattern = re.compile(r"(?<![\w.,])" + re.escape(old) + r"(?![\w]|,\d|\.\d)")
    result, count = pattern.subn(new, text, count=1)
    assert count == 1, (text, old)
    return result
