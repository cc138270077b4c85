"""Grounding checks on explanation drafts and the bounded refine loop.

Checks run in a fixed order: numbers, entities, flow coverage, then
direction contradictions. A draft passes only with zero findings.
"""

from __future__ import annotations

import enum
import json
import re
from collections import defaultdict
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from pathlib import Path

import httpx

from txlens.errors import PreconditionError
from txlens.flows import (
    MacroAction,
    aggregates_for,
    build_flow_graph,
    compute_net_balances,
    counterparty,
    group_macro_actions,
)
from txlens.ingestion import EndpointConfig
from txlens.knowledge import CardStore, ResponseCache, SelectorDB, investigate
from txlens.model import EntryKind, EvidenceBoard, Stage, TransactionBundle, to_wire
from txlens.profiler import Hypothesis, ProfilerConfig, profile
from txlens.synthesizer import BackendConfig, ExplanationDraft, GroundedNumber, render_amount, revise, synthesize

# Optional sign, digits with optional comma grouping, optional fraction. A
# numeral glued to letters (V3, 1inch) is part of a name, not a quantity.
NUMBER_RE = re.compile(r"(?<![\w.,])[+-]?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?(?![\w]|,\d|\.\d)")
HEX_RE = re.compile(r"0x[0-9a-fA-F]*(?:…[0-9a-fA-F]+)?")
SYMBOL_RE = re.compile(r"[A-Za-z0-9$][A-Za-z0-9.$_-]*")

# Protocol names that should never appear in prose without board evidence.
WELL_KNOWN_NAMES = (
    "Uniswap",
    "SushiSwap",
    "Sushi",
    "Curve",
    "Balancer",
    "Aave",
    "Compound",
    "Lido",
    "1inch",
    "MetaMask",
    "0x Protocol",
    "Pendle",
    "MakerDAO",
    "Yearn",
    "PancakeSwap",
    "Kyber",
    "Paraswap",
    "CoW Swap",
    "Convex",
    "Frax",
)

RECEIVE_RE = re.compile(r"\breceiv(?:e|es|ed|ing)\b", re.IGNORECASE)
SEND_RE = re.compile(r"\b(?:send|sends|sent|sending)\b", re.IGNORECASE)


class FindingKind(str, enum.Enum):
    UNGROUNDED_NUMBER = "ungrounded_number"
    UNGROUNDED_ENTITY = "ungrounded_entity"
    UNCOVERED_FLOW = "uncovered_flow"
    CONTRADICTION = "contradiction"


class Verdict(str, enum.Enum):
    PASS = "pass"
    REVISE = "revise"
    UNRESOLVED = "unresolved"


@dataclass(frozen=True)
class AuditFinding:
    kind: FindingKind
    locus: str
    detail: str


@dataclass(frozen=True)
class AuditReport:
    verdict: Verdict
    findings: tuple[AuditFinding, ...]
    iteration: int
    numbers_checked: int = 0
    numbers_violated: int = 0
    entities_checked: int = 0
    entities_violated: int = 0


@dataclass(frozen=True)
class FinalExplanation:
    draft: ExplanationDraft
    report: AuditReport
    board: EvidenceBoard


# --------------------------------------------------------------------------
# Grounded values

def macro_actions_for(board: EvidenceBoard) -> list[MacroAction]:
    hyp = board.latest(EntryKind.HYPOTHESIS)
    if hyp is None:
        raise PreconditionError("board has no profiler hypothesis")
    bundle = board.bundle
    return group_macro_actions(bundle, build_flow_graph(bundle), hyp.payload.classified_flows)


def grounded_values(board: EvidenceBoard, macros: list[MacroAction]) -> dict[str, set[int]]:
    """Every base-unit quantity a draft may cite, per token.

    Transfer amounts, net-balance magnitudes, macro aggregates, and the
    aggregates of each macro's per-counterparty and per-kind subgroups.
    """
    bundle = board.bundle
    hyp: Hypothesis = board.latest(EntryKind.HYPOTHESIS).payload
    values: dict[str, set[int]] = defaultdict(set)
    for t in bundle.transfers:
        values[t.token].add(t.amount)
    for nb in compute_net_balances(bundle.transfers, bundle.user):
        values[nb.token].add(abs(nb.delta))

    def add(agg_in: dict[str, int], agg_out: dict[str, int]) -> None:
        for agg in (agg_in, agg_out):
            for token, v in agg.items():
                values[token].add(v)

    for m in macros:
        add(m.aggregate_in, m.aggregate_out)
        by_party: dict[object, list[int]] = defaultdict(list)
        by_step: dict[object, list[int]] = defaultdict(list)
        for li in m.member_flows:
            party = counterparty(bundle.transfer(li), bundle.user)
            by_party[party].append(li)
            by_step[(hyp.classified_flows[li], party)].append(li)
        for refs in list(by_party.values()) + list(by_step.values()):
            add(*aggregates_for(bundle, refs))
    return values


# --------------------------------------------------------------------------
# Text scanning

def _mask(text: str) -> str:
    return HEX_RE.sub(lambda m: " " * len(m.group()), text)


def find_numbers(text: str) -> list[tuple[int, int, str]]:
    masked = _mask(text)
    return [(m.start(), m.end(), m.group()) for m in NUMBER_RE.finditer(masked)]


def nearest_symbol_after(text: str, end: int, symbols: set[str]) -> str | None:
    for m in SYMBOL_RE.finditer(_mask(text), end):
        word = m.group().rstrip(".")
        if word in symbols:
            return word
    return None


def parse_literal(literal: str) -> Decimal:
    return abs(Decimal(literal.replace(",", "")))


def scaled(literal: str, decimals: int) -> int | None:
    try:
        value = parse_literal(literal) * (Decimal(10) ** decimals)
    except InvalidOperation:
        return None
    return int(value) if value == value.to_integral_value() else None


class _Checker:
    def __init__(self, board: EvidenceBoard, macros: list[MacroAction]) -> None:
        self.board = board
        self.bundle: TransactionBundle = board.bundle
        self.values = grounded_values(board, macros)
        self.by_symbol: dict[str, list[str]] = defaultdict(list)
        for address, info in sorted(self.bundle.tokens.items()):
            self.by_symbol[info.symbol].append(address)
        self.symbols = set(self.by_symbol)
        self.findings: list[AuditFinding] = []
        self.numbers_checked = self.numbers_violated = 0
        self.entities_checked = self.entities_violated = 0

        hyp: Hypothesis = board.latest(EntryKind.HYPOTHESIS).payload
        cards = list(hyp.cards)
        labels = {c.source_label for c in cards}
        names: set[str] = set()
        for c in cards:
            names |= {c.name, c.protocol}
        for entry in board.query(EntryKind.PATCH):
            patch = entry.payload
            if patch.claim != "unresolved":
                labels.add(patch.source_label)
            structured = patch.structured
            if structured is not None and hasattr(structured, "protocol"):
                names |= {structured.name, structured.protocol}
                labels.add(structured.source_label)
        self.labels = labels
        self.names = names
        lexicon = set(WELL_KNOWN_NAMES) | names
        for card in CardStore.builtin():
            lexicon |= {card.name, card.protocol}
        self.lexicon = sorted((n for n in lexicon if n), key=lambda n: (-len(n), n))

    # -- numbers ------------------------------------------------------------
    def _grounded(self, literal: str, symbol: str | None) -> bool:
        if symbol is None:
            if "." in literal:
                return False
            raw = int(parse_literal(literal))
            return any(raw in vals for vals in self.values.values())
        for token in self.by_symbol[symbol]:
            value = scaled(literal, self.bundle.tokens[token].decimals)
            if value is not None and value in self.values.get(token, ()):
                return True
        return False

    def _declared_ok(self, num: GroundedNumber, literal: str, symbol: str | None) -> bool:
        if num.value is None:
            return True
        if num.token not in self.bundle.tokens:
            return False
        info = self.bundle.tokens[num.token]
        return (
            symbol == info.symbol
            and num.value in self.values.get(num.token, ())
            and render_amount(num.value, info) == literal.lstrip("+-")
        )

    def numbers(self, locus: str, text: str, declared: tuple[GroundedNumber, ...]) -> None:
        pool = list(declared)
        for _, end, literal in find_numbers(text):
            self.numbers_checked += 1
            symbol = nearest_symbol_after(text, end, self.symbols)
            claim = next((n for n in pool if n.literal == literal), None)
            if claim is not None:
                pool.remove(claim)
                ok = self._declared_ok(claim, literal, symbol)
            else:
                ok = self._grounded(literal, symbol)
            if not ok:
                self.numbers_violated += 1
                where = f" {symbol}" if symbol else ""
                self.findings.append(
                    AuditFinding(FindingKind.UNGROUNDED_NUMBER, locus, f"{literal}{where} matches no flow amount or aggregate")
                )

    # -- entities -----------------------------------------------------------
    def entities(self, locus: str, text: str, citations: tuple[str, ...] = (), need_citation: bool = False) -> None:
        masked = _mask(text)
        for start, end, _ in find_numbers(masked):
            m = SYMBOL_RE.match(masked, end + 1) if masked[end : end + 1] == " " else None
            if m is None:
                continue
            word = m.group().rstrip(".,;:")
            if word.lower() == word:
                continue
            self.entities_checked += 1
            if word not in self.symbols:
                self.entities_violated += 1
                self.findings.append(
                    AuditFinding(FindingKind.UNGROUNDED_ENTITY, locus, f"token symbol {word!r} is not in the transaction")
                )
        named = False
        for name in self.lexicon:
            pattern = re.compile(r"(?<!\w)" + re.escape(name) + r"(?!\w)")
            hits = list(pattern.finditer(masked))
            if not hits:
                continue
            named = True
            masked = pattern.sub(lambda m: " " * len(m.group()), masked)
            self.entities_checked += 1
            if not any(name in grounded for grounded in self.names):
                self.entities_violated += 1
                self.findings.append(
                    AuditFinding(FindingKind.UNGROUNDED_ENTITY, locus, f"name {name!r} has no card or patch on the board")
                )
        for label in citations:
            self.entities_checked += 1
            if label not in self.labels:
                self.entities_violated += 1
                self.findings.append(
                    AuditFinding(FindingKind.UNGROUNDED_ENTITY, locus, f"citation {label!r} matches no board source")
                )
        if need_citation and named and not citations:
            self.entities_checked += 1
            self.entities_violated += 1
            self.findings.append(
                AuditFinding(FindingKind.UNGROUNDED_ENTITY, locus, "names a protocol without a source citation")
            )

    # -- coverage and direction --------------------------------------------
    def coverage(self, draft: ExplanationDraft) -> None:
        covered = {li for step in draft.steps for li in step.flow_refs}
        for li in self.bundle.log_indices:
            if li not in covered:
                self.findings.append(AuditFinding(FindingKind.UNCOVERED_FLOW, "steps", f"flow {li} is in no step"))

    def contradictions(self, draft: ExplanationDraft) -> None:
        valid = set(self.bundle.log_indices)
        for i, step in enumerate(draft.steps):
            agg_in, agg_out = aggregates_for(self.bundle, [li for li in step.flow_refs if li in valid])
            if RECEIVE_RE.search(step.result) and not agg_in:
                self.findings.append(
                    AuditFinding(FindingKind.CONTRADICTION, f"steps[{i}]", "result says the user receives but its flows carry no inflow")
                )
            if SEND_RE.search(step.result) and not agg_out:
                self.findings.append(
                    AuditFinding(FindingKind.CONTRADICTION, f"steps[{i}]", "result says the user sends but its flows carry no outflow")
                )


def audit(board: EvidenceBoard, draft: ExplanationDraft, macros: list[MacroAction] | None = None) -> AuditReport:
    """Check ``draft`` against the board and append the report."""
    latest = board.latest(EntryKind.DRAFT)
    if latest is None or latest.payload != draft:
        raise PreconditionError("audit expects the board's latest draft")
    checker = _Checker(board, macros if macros is not None else macro_actions_for(board))
    for i, claim in enumerate(draft.summary):
        checker.numbers(f"summary[{i}]", claim.text, claim.grounded_numbers)
    for i, step in enumerate(draft.steps):
        checker.numbers(f"steps[{i}]", step.result, step.grounded_numbers)
    for i, claim in enumerate(draft.summary):
        checker.entities(f"summary[{i}]", claim.text, claim.citations, need_citation=True)
    for i, step in enumerate(draft.steps):
        checker.entities(f"steps[{i}]", " ".join((step.intent, step.mechanism, step.result)))
    checker.coverage(draft)
    checker.contradictions(draft)
    findings = tuple(checker.findings)
    report = AuditReport(
        verdict=Verdict.REVISE if findings else Verdict.PASS,
        findings=findings,
        iteration=draft.iteration,
        numbers_checked=checker.numbers_checked,
        numbers_violated=checker.numbers_violated,
        entities_checked=checker.entities_checked,
        entities_violated=checker.entities_violated,
    )
    board.append(EntryKind.AUDIT, report, Stage.AUDITOR, f"grounding audit, iteration {draft.iteration}")
    return report


# --------------------------------------------------------------------------
# Pipeline

@dataclass
class PipelineConfig:
    backend: BackendConfig = field(default_factory=BackendConfig)
    max_refine: int = 3
    endpoint: EndpointConfig = field(default_factory=lambda: EndpointConfig(offline=True))
    cache_dir: str | Path = ".txlens-cache"
    cards_dir: str | Path | None = None
    refresh: bool = False
    profiler: ProfilerConfig = field(default_factory=ProfilerConfig)
    db: SelectorDB | None = None
    store: CardStore | None = None
    http_client: httpx.Client | None = None


def run_pipeline(bundle: TransactionBundle, cfg: PipelineConfig | None = None) -> FinalExplanation:
    cfg = cfg or PipelineConfig()
    if cfg.max_refine < 1:
        raise PreconditionError("max_refine must be at least 1")
    db = cfg.db or SelectorDB.builtin()
    store = cfg.store or CardStore.builtin()
    if cfg.cards_dir is not None:
        store.load_dir(cfg.cards_dir)
    board = EvidenceBoard.new(bundle)
    hyp = profile(board, db, store, cfg.profiler)
    investigate(board, list(hyp.flags), cfg.endpoint, db, store, ResponseCache(cfg.cache_dir, cfg.refresh), cfg.http_client)
    macros = macro_actions_for(board)
    draft = synthesize(board, macros, cfg.backend, cfg.http_client)
    report = audit(board, draft, macros)
    audits = 1
    while report.verdict is Verdict.REVISE and audits < cfg.max_refine:
        draft = revise(board, draft, report, macros, cfg.backend, cfg.http_client)
        report = audit(board, draft, macros)
        audits += 1
    if report.verdict is Verdict.REVISE:
        report = AuditReport(
            Verdict.UNRESOLVED,
            report.findings,
            report.iteration,
            report.numbers_checked,
            report.numbers_violated,
            report.entities_checked,
            report.entities_violated,
        )
        board.append(EntryKind.AUDIT, report, Stage.AUDITOR, f"refine bound {cfg.max_refine} reached")
    return FinalExplanation(draft, report, board)


# --------------------------------------------------------------------------
# Rendering

UNVERIFIED = "UNVERIFIED:"


def _finding_line(f: AuditFinding) -> str:
    return f"{UNVERIFIED} {f.kind.value} at {f.locus}: {f.detail}"


def render_text(final: FinalExplanation) -> str:
    draft, report = final.draft, final.report
    lines = [draft.summary_text(), ""]
    for i, step in enumerate(draft.steps, 1):
        refs = ", ".join(str(r) for r in step.flow_refs)
        lines.append(f"Step {i} [{step.action_type.value}] flows {refs}")
        lines.append(f"  intent: {step.intent}")
        lines.append(f"  mechanism: {step.mechanism}")
        lines.append(f"  preconditions: {'; '.join(step.preconditions)}")
        lines.append(f"  result: {step.result}")
    lines.append("")
    lines.append(f"verdict: {report.verdict.value} (iteration {report.iteration})")
    if report.verdict is Verdict.UNRESOLVED:
        lines.extend(_finding_line(f) for f in report.findings)
    return "\n".join(lines) + "\n"


def _strip_retrieved(value):
    if isinstance(value, dict):
        return {k: _strip_retrieved(v) for k, v in value.items() if k != "retrievedAt"}
    if isinstance(value, list):
        return [_strip_retrieved(v) for v in value]
    return value


def render_json(final: FinalExplanation) -> str:
    bundle = final.board.bundle
    hyp = final.board.latest(EntryKind.HYPOTHESIS).payload
    doc = {
        "txHash": bundle.metadata.hash,
        "verdict": final.report.verdict.value,
        "iteration": final.report.iteration,
        "summary": final.draft.summary_text(),
        "claims": to_wire(list(final.draft.summary)),
        "steps": to_wire(list(final.draft.steps)),
        "netBalances": [
            {"token": nb.token, "symbol": bundle.symbol(nb.token), "delta": str(nb.delta)}
            for nb in compute_net_balances(bundle.transfers, bundle.user)
        ],
        "flags": to_wire(list(hyp.flags)),
        "findings": to_wire(list(final.report.findings)),
        "patches": _strip_retrieved([to_wire(e.payload) for e in final.board.query(EntryKind.PATCH)]),
    }
    if final.report.verdict is Verdict.UNRESOLVED:
        doc["unverified"] = [_finding_line(f) for f in final.report.findings]
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"
