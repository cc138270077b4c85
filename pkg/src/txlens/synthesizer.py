"""Rendering the board into an attributed explanation draft.

The template backend builds every sentence from board facts, so each number
it prints is a transfer amount, a net change, or a sum over flows. The
external backend hands a digest of the board to another program and accepts
its answer only if it satisfies the same draft invariants.
"""

from __future__ import annotations

import enum
import json
import subprocess
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources
from typing import Any

import httpx

from txlens.errors import BackendProtocolError, CoverageError, PreconditionError
from txlens.flows import APPROVAL_SELECTORS, MacroAction, aggregates_for, compute_net_balances, counterparty, flow_anchors
from txlens.model import (
    ActionType,
    EntryKind,
    EvidenceBoard,
    Stage,
    TokenInfo,
    TransactionBundle,
    short_address,
    to_wire,
)

DIGEST_CHAR_LIMIT = 200_000
MAX_DISPLAY_FRACTION = 6

# Evaluative or speculative wording the templates must never produce.
FORBIDDEN_PHRASES = (
    "best price",
    "slippage protection",
    "optimal",
    "cheapest",
    "profitable",
    "guaranteed",
    "safe",
    "wanted",
    "intended to",
)


class Backend(str, enum.Enum):
    TEMPLATE = "template"
    EXTERNAL = "external"


@dataclass(frozen=True)
class GroundedNumber:
    """A literal the renderer vouches for; ``value is None`` marks scaffolding."""

    literal: str
    value: int | None = field(default=None, metadata={"decimal": True})
    token: str | None = None


@dataclass(frozen=True)
class AttributedClaim:
    text: str
    citations: tuple[str, ...] = ()
    grounded_numbers: tuple[GroundedNumber, ...] = ()

    def rendered(self) -> str:
        return self.text + "".join(f" [Source: {c}]" for c in self.citations)


@dataclass(frozen=True)
class StepAnnotation:
    flow_refs: tuple[int, ...]
    action_type: ActionType
    intent: str
    mechanism: str
    preconditions: tuple[str, ...]
    result: str
    grounded_numbers: tuple[GroundedNumber, ...] = ()


@dataclass(frozen=True)
class ExplanationDraft:
    summary: tuple[AttributedClaim, ...]
    steps: tuple[StepAnnotation, ...]
    iteration: int = 1
    backend: Backend = Backend.TEMPLATE

    def summary_text(self) -> str:
        return " ".join(c.rendered() for c in self.summary)


@dataclass(frozen=True)
class BackendConfig:
    kind: Backend = Backend.TEMPLATE
    command: tuple[str, ...] | None = None
    url: str | None = None
    timeout: float = 60.0


def render_amount(value: int, token: TokenInfo, max_fraction: int | None = MAX_DISPLAY_FRACTION) -> str:
    """Scale base units for display: ``4300000000`` USDC -> ``4,300``.

    At most ``max_fraction`` fractional digits are shown (truncated);
    ``None`` shows full precision. A nonzero value never displays as 0.
    """
    sign = "-" if value < 0 else ""
    magnitude = abs(value)
    scale = 10**token.decimals
    whole, frac = divmod(magnitude, scale)
    frac_text = str(frac).rjust(token.decimals, "0") if token.decimals else ""
    if max_fraction is not None and len(frac_text) > max_fraction:
        shown = frac_text[:max_fraction]
        if whole == 0 and magnitude and not shown.strip("0"):
            shown = frac_text
        frac_text = shown
    frac_text = frac_text.rstrip("0")
    text = f"{whole:,}" + (f".{frac_text}" if frac_text else "")
    return sign + text


@lru_cache(maxsize=1)
def templates() -> dict:
    return json.loads(resources.files("txlens").joinpath("data/templates.json").read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# Template backend

class _Renderer:
    def __init__(self, board: EvidenceBoard, macros: Sequence[MacroAction]) -> None:
        self.board = board
        self.bundle: TransactionBundle = board.bundle
        hyp = board.latest(EntryKind.HYPOTHESIS)
        if hyp is None:
            raise PreconditionError("board has no profiler hypothesis")
        self.hyp = hyp.payload
        self.macros = list(macros)
        self.user = self.bundle.user
        self.anchors = flow_anchors(self.bundle)
        self.t = templates()
        self.cards = {c.address: c for c in self.hyp.cards}
        self.functions = dict(getattr(self.hyp, "functions", {}) or {})
        for entry in board.query(EntryKind.PATCH):
            patch = entry.payload
            structured = patch.structured
            if structured is None:
                continue
            if hasattr(structured, "canonical_signature"):
                self.functions.setdefault(structured.selector, structured.canonical_signature)
            elif hasattr(structured, "protocol"):
                self.cards.setdefault(structured.address, structured)

    # -- naming -------------------------------------------------------------
    def amount(self, token: str, value: int, signed: bool = False) -> tuple[str, GroundedNumber]:
        info = self.bundle.tokens[token]
        literal = render_amount(abs(value), info)
        if signed:
            literal = ("-" if value < 0 else "+") + literal
        return f"{literal} {info.symbol}", GroundedNumber(literal, abs(value), token)

    def amounts(self, agg: dict[str, int]) -> tuple[str, list[GroundedNumber]]:
        parts, nums = [], []
        for token, value in agg.items():
            text, num = self.amount(token, value)
            parts.append(text)
            nums.append(num)
        return " and ".join(parts), nums

    def party(self, address: str | None) -> tuple[str, list[str]]:
        """Name for an address and the citations the name needs."""
        if address is None:
            return "an unknown party", []
        card = self.cards.get(address)
        if card is not None:
            return card.name, [card.source_label]
        if address in self.bundle.tokens:
            return f"the {self.bundle.symbol(address)} token contract", []
        return short_address(address), []

    def venue_labels(self, addresses: list[str]) -> dict[str, tuple[str, list[str]]]:
        labels = {}
        protocols = [self.cards[a].protocol for a in addresses if a in self.cards]
        for a in addresses:
            card = self.cards.get(a)
            if card is not None:
                label = card.protocol if protocols.count(card.protocol) == 1 else card.name
                labels[a] = (label, [card.source_label])
            else:
                labels[a] = self.party(a)
        return labels

    def function_name(self, selector: str | None) -> str | None:
        if selector is None:
            return None
        sig = self.functions.get(selector)
        return sig.split("(", 1)[0] if sig else selector

    # -- steps --------------------------------------------------------------
    def step_groups(self, macro: MacroAction) -> list[tuple[ActionType, str | None, list[int]]]:
        groups: dict[tuple[ActionType, str | None], list[int]] = {}
        for li in macro.member_flows:
            t = self.bundle.transfer(li)
            key = (ActionType(self.hyp.classified_flows[li]), counterparty(t, self.user))
            groups.setdefault(key, []).append(li)
        return [(k, cp, refs) for (k, cp), refs in groups.items()]

    def mechanism(self, kind: ActionType, cp: str | None, refs: list[int]) -> str:
        root = self.bundle.root_call
        path = self.anchors[refs[0]]
        call = root
        if cp is not None:
            for depth in range(len(path), -1, -1):
                node = root.find(path[:depth])
                if node is not None and node.callee == cp:
                    call = node
                    break
        name, _ = self.party(call.callee)
        fn = self.function_name(call.selector)
        if fn is None:
            return self.t["mechanism"]["value"].format(name=name)
        return self.t["mechanism"]["call"].format(fn=fn, name=name)

    def approval_before(self, refs: list[int]) -> bool:
        order = [c.trace_path for c in self.bundle.root_call.walk()]
        first = min(order.index(self.anchors[li]) for li in refs)
        return any(
            c.selector in APPROVAL_SELECTORS for c in list(self.bundle.root_call.walk())[:first]
        )

    def step(self, macro: MacroAction, kind: ActionType, cp: str | None, refs: list[int]) -> StepAnnotation:
        agg_in, agg_out = aggregates_for(self.bundle, refs)
        m_in, m_out = macro.aggregate_in, macro.aggregate_out
        sym = lambda agg: " and ".join(self.bundle.symbol(t) for t in agg)  # noqa: E731
        party, _ = self.party(cp)
        first = self.bundle.transfer(refs[0])
        intents = self.t["intent"]
        if kind in (ActionType.SWAP_IN, ActionType.SWAP_OUT):
            intent = intents["swap"].format(sym_out=sym(m_out) or "tokens", sym_in=sym(m_in) or "tokens")
        elif kind is ActionType.TRANSFER:
            key = "transfer_out" if first.sender == self.user else "transfer_in"
            intent = intents[key].format(sym=self.bundle.symbol(first.token), party=party)
        elif kind in (ActionType.MINT, ActionType.BURN, ActionType.FEE):
            intent = intents[kind.value].format(sym=self.bundle.symbol(first.token))
        elif kind is ActionType.UNKNOWN:
            intent = intents["unknown"].format(party=party)
        else:
            intent = intents[kind.value].format(
                sym_out=sym(m_out) or "tokens", sym_in=sym(m_in) or "tokens", party=party
            )

        pre = []
        for token, value in agg_out.items():
            text, _ = self.amount(token, value)
            pre.append(self.t["precondition"]["balance"].format(amount=text))
        if agg_out and self.approval_before(refs):
            pre.append(self.t["precondition"]["allowance"])
        if kind is ActionType.SWAP_IN:
            pre.append(self.t["precondition"]["liquidity"].format(party=party))
        if not pre:
            pre.append(self.t["precondition"]["success"])

        nums: list[GroundedNumber] = []
        r = self.t["result"]
        if agg_in or agg_out:
            out_text, out_nums = self.amounts(agg_out)
            in_text, in_nums = self.amounts(agg_in)
            nums = out_nums + in_nums
            if agg_in and agg_out:
                result = r["both"].format(out=out_text, **{"in": in_text})
            elif agg_in:
                result = r["receive"].format(**{"in": in_text})
            else:
                result = r["send"].format(out=out_text)
        else:
            parts = []
            for li in refs:
                t = self.bundle.transfer(li)
                text, num = self.amount(t.token, t.amount)
                nums.append(num)
                parts.append(
                    r["moved"].format(amount=text, src=self.party(t.sender)[0], dst=self.party(t.receiver)[0])
                )
            result = "; ".join(parts)
        return StepAnnotation(
            flow_refs=tuple(refs),
            action_type=kind,
            intent=intent,
            mechanism=self.mechanism(kind, cp, refs),
            preconditions=tuple(pre),
            result=result,
            grounded_numbers=tuple(nums),
        )

    # -- summary ------------------------------------------------------------
    def macro_sentences(self, macro: MacroAction) -> list[AttributedClaim]:
        s = self.t["summary"]
        out_text, out_nums = self.amounts(macro.aggregate_out)
        in_text, in_nums = self.amounts(macro.aggregate_in)
        nums = tuple(out_nums + in_nums)
        members = [self.bundle.transfer(li) for li in macro.member_flows]
        parties = [p for p in (counterparty(t, self.user) for t in members) if p is not None]
        party, cites = self.party(parties[0] if parties else None)
        kind = macro.kind
        fill = {"out": out_text, "in": in_text, "party": party}

        if kind is ActionType.SWAP:
            if macro.aggregate_out and macro.aggregate_in:
                claims = [AttributedClaim(s["swap"].format(**fill), (), nums)]
            elif macro.aggregate_in:
                claims = [AttributedClaim(s["swap_in_only"].format(**fill), (), nums)]
            else:
                claims = [AttributedClaim(s["swap_out_only"].format(**fill), (), nums)]
            venues: dict[str, list[int]] = {}
            for t in members:
                if self.hyp.classified_flows[t.log_index] is ActionType.SWAP_IN:
                    venues.setdefault(t.sender, []).append(t.log_index)
            labels = self.venue_labels(list(venues))
            if len(venues) >= 2:
                parts, vnums, vcites = [], [], []
                for address, refs in venues.items():
                    agg_in, _ = aggregates_for(self.bundle, refs)
                    text, n = self.amounts(agg_in)
                    label, c = labels[address]
                    parts.append(f"{label} ({text})")
                    vnums += n
                    vcites += [x for x in c if x not in vcites]
                joined = ", ".join(parts[:-1]) + (", and " if len(parts) > 2 else " and ") + parts[-1]
                claims.append(AttributedClaim(s["venue_split"].format(venues=joined), tuple(vcites), tuple(vnums)))
            elif len(venues) == 1:
                label, c = labels[next(iter(venues))]
                claims.append(AttributedClaim(s["venue_single"].format(venue=label), tuple(c)))
            return claims

        if kind is ActionType.TRANSFER:
            key = "transfer_out" if macro.aggregate_out else "transfer_in"
            return [AttributedClaim(s[key].format(**fill), tuple(cites), nums)]
        if kind is ActionType.UNKNOWN:
            if macro.aggregate_out and macro.aggregate_in:
                key = "unknown"
            elif macro.aggregate_out:
                key = "unknown_out"
            elif macro.aggregate_in:
                key = "unknown_in"
            else:
                moves, mnums = [], []
                for t in members:
                    text, n = self.amount(t.token, t.amount)
                    moves.append(f"{text} from {self.party(t.sender)[0]} to {self.party(t.receiver)[0]}")
                    mnums.append(n)
                return [AttributedClaim(s["unknown_other"].format(moves="; ".join(moves)), (), tuple(mnums))]
            return [AttributedClaim(s[key].format(**fill), tuple(cites), nums)]
        if kind is ActionType.FEE:
            fill["party"], cites = self.party(members[0].receiver)
        template = s[kind.value]
        return [AttributedClaim(template.format(**fill), tuple(cites) if "{party}" in template else (), nums)]

    def net_claim(self) -> AttributedClaim:
        net = compute_net_balances(self.bundle.transfers, self.user)
        if not net:
            return AttributedClaim(self.t["summary"]["net_none"])
        parts, nums = [], []
        for nb in net:
            text, num = self.amount(nb.token, nb.delta, signed=True)
            parts.append(text)
            nums.append(num)
        return AttributedClaim(self.t["summary"]["net"].format(changes=", ".join(parts)), (), tuple(nums))

    def summary(self) -> tuple[AttributedClaim, ...]:
        claims: list[AttributedClaim] = []
        for macro in self.macros:
            claims += self.macro_sentences(macro)
        if len(claims) < 2:
            claims.append(self.net_claim())
        if len(claims) > 3:
            rest = claims[2:]
            pieces = []
            for c in rest:
                text = c.text.rstrip(".")
                pieces.append(text[:1].lower() + text[1:] if text.startswith("You ") else text)
            cites: list[str] = []
            for c in rest:
                cites += [x for x in c.citations if x not in cites]
            merged = AttributedClaim(
                self.t["summary"]["overflow"].format(rest="; ".join(pieces)),
                tuple(cites),
                tuple(n for c in rest for n in c.grounded_numbers),
            )
            claims = claims[:2] + [merged]
        return tuple(claims)

    def draft(self, iteration: int = 1) -> ExplanationDraft:
        steps = []
        for macro in self.macros:
            for kind, cp, refs in self.step_groups(macro):
                steps.append(self.step(macro, kind, cp, refs))
        covered = {li for s in steps for li in s.flow_refs}
        missing = [li for m in self.macros for li in m.member_flows if li not in covered]
        if missing or set(self.bundle.log_indices) - covered:
            raise CoverageError(f"steps miss flows {sorted(set(self.bundle.log_indices) - covered)}")
        return ExplanationDraft(self.summary(), tuple(steps), iteration, Backend.TEMPLATE)


# --------------------------------------------------------------------------
# External backend

def board_digest(board: EvidenceBoard, limit: int = DIGEST_CHAR_LIMIT) -> dict:
    """Board facts only, capped at ``limit`` characters of JSON.

    Over the cap, raw call input goes first, then nested calls, then
    trailing flows.
    """
    bundle = board.bundle
    hyp = board.latest(EntryKind.HYPOTHESIS)
    net = compute_net_balances(bundle.transfers, bundle.user)
    calls = [
        {
            "tracePath": list(c.trace_path),
            "from": c.caller,
            "to": c.callee,
            "callType": c.call_kind.value,
            "selector": c.selector,
            "input": c.input_data,
            "value": str(c.eth_value),
        }
        for c in bundle.root_call.walk()
    ]
    flows = [
        {
            "logIndex": t.log_index,
            "token": t.token,
            "symbol": bundle.symbol(t.token),
            "from": t.sender,
            "to": t.receiver,
            "amount": str(t.amount),
            "display": render_amount(t.amount, bundle.tokens[t.token], None),
        }
        for t in bundle.transfers
    ]
    digest: dict[str, Any] = {
        "txHash": bundle.metadata.hash,
        "user": bundle.user,
        "metadata": to_wire(bundle.metadata),
        "tokens": {a: {"symbol": i.symbol, "decimals": i.decimals} for a, i in sorted(bundle.tokens.items())},
        "calls": calls,
        "flows": flows,
        "netBalances": [
            {"token": nb.token, "symbol": bundle.symbol(nb.token), "delta": str(nb.delta)} for nb in net
        ],
        "hypothesis": to_wire(hyp.payload) if hyp else None,
        "patches": [to_wire(e.payload) for e in board.query(EntryKind.PATCH)],
    }

    def size() -> int:
        return len(json.dumps(digest))

    if size() > limit:
        for c in digest["calls"]:
            c.pop("input", None)
    if size() > limit:
        digest["calls"] = digest["calls"][:1]
    while size() > limit and digest["flows"]:
        digest["flows"].pop()
        digest["truncatedFlows"] = len(bundle.transfers) - len(digest["flows"])
    return digest


def _request(board: EvidenceBoard, macros: Sequence[MacroAction], prior=None, findings=None) -> dict:
    req: dict[str, Any] = {
        "boardDigest": board_digest(board),
        "macroActions": to_wire(list(macros)),
        "constraints": {"maxSentences": 3},
    }
    if prior is not None:
        req["priorDraft"] = to_wire(prior)
    if findings is not None:
        req["auditFindings"] = to_wire(list(findings))
    return req


def _exchange(cfg: BackendConfig, request: dict, client: httpx.Client | None = None) -> Any:
    body = json.dumps(request)
    if cfg.command:
        try:
            proc = subprocess.run(
                list(cfg.command), input=body, capture_output=True, text=True, timeout=cfg.timeout, check=False
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise BackendProtocolError(f"backend command failed: {exc}") from exc
        if proc.returncode != 0:
            raise BackendProtocolError(f"backend exited {proc.returncode}: {proc.stderr.strip()[:200]}")
        raw = proc.stdout
    elif cfg.url:
        http = client or httpx.Client(timeout=cfg.timeout)
        try:
            response = http.post(cfg.url, content=body, headers={"content-type": "application/json"})
            response.raise_for_status()
        except httpx.HTTPError as exc:
            raise BackendProtocolError(f"backend request failed: {exc}") from exc
        raw = response.text
    else:
        raise BackendProtocolError("external backend needs a command or a URL")
    try:
        return json.loads(raw)
    except ValueError as exc:
        raise BackendProtocolError(f"backend response is not JSON: {exc}") from exc


def _nonempty(value: Any, where: str) -> str:
    if not isinstance(value, str) or not value.strip():
        raise BackendProtocolError(f"{where} must be a non-empty string")
    return value


def parse_backend_response(doc: Any, bundle: TransactionBundle, iteration: int) -> ExplanationDraft:
    if not isinstance(doc, dict):
        raise BackendProtocolError("response must be an object")
    summary = doc.get("summary")
    if not isinstance(summary, list) or not 2 <= len(summary) <= 3:
        raise BackendProtocolError(f"summary must hold 2-3 sentences, got {summary!r:.80}")
    claims = []
    for i, item in enumerate(summary):
        if not isinstance(item, dict):
            raise BackendProtocolError(f"summary[{i}] must be an object")
        cites = item.get("citations", [])
        if not isinstance(cites, list) or not all(isinstance(c, str) and c for c in cites):
            raise BackendProtocolError(f"summary[{i}].citations must be a list of labels")
        claims.append(AttributedClaim(_nonempty(item.get("text"), f"summary[{i}].text"), tuple(cites)))
    raw_steps = doc.get("steps")
    if not isinstance(raw_steps, list):
        raise BackendProtocolError("steps must be a list")
    valid_refs = set(bundle.log_indices)
    steps = []
    for i, item in enumerate(raw_steps):
        where = f"steps[{i}]"
        if not isinstance(item, dict):
            raise BackendProtocolError(f"{where} must be an object")
        refs = item.get("flowRefs")
        if not isinstance(refs, list) or not refs or not all(isinstance(r, int) and r in valid_refs for r in refs):
            raise BackendProtocolError(f"{where}.flowRefs must list this transaction's log indices")
        try:
            action = ActionType(item.get("actionType"))
        except ValueError:
            raise BackendProtocolError(f"{where}.actionType {item.get('actionType')!r} unknown") from None
        pre = item.get("preconditions")
        if not isinstance(pre, list) or not pre:
            raise BackendProtocolError(f"{where}.preconditions must be a non-empty list")
        steps.append(
            StepAnnotation(
                flow_refs=tuple(refs),
                action_type=action,
                intent=_nonempty(item.get("intent"), f"{where}.intent"),
                mechanism=_nonempty(item.get("mechanism"), f"{where}.mechanism"),
                preconditions=tuple(_nonempty(p, f"{where}.preconditions") for p in pre),
                result=_nonempty(item.get("result"), f"{where}.result"),
            )
        )
    if not steps:
        raise BackendProtocolError("steps must not be empty")
    return ExplanationDraft(tuple(claims), tuple(steps), iteration, Backend.EXTERNAL)


# --------------------------------------------------------------------------
# Stage entry points

def _append(board: EvidenceBoard, draft: ExplanationDraft) -> ExplanationDraft:
    board.append(EntryKind.DRAFT, draft, Stage.SYNTHESIZER, f"{draft.backend.value} backend, iteration {draft.iteration}")
    return draft


def synthesize(
    board: EvidenceBoard,
    macro_actions: Sequence[MacroAction],
    backend_cfg: BackendConfig | None = None,
    client: httpx.Client | None = None,
) -> ExplanationDraft:
    cfg = backend_cfg or BackendConfig()
    if cfg.kind is Backend.TEMPLATE:
        return _append(board, _Renderer(board, macro_actions).draft(1))
    doc = _exchange(cfg, _request(board, macro_actions), client)
    return _append(board, parse_backend_response(doc, board.bundle, 1))


def _locus(finding: Any) -> tuple[str, int] | None:
    text = str(getattr(finding, "locus", ""))
    name, _, rest = text.partition("[")
    if not rest.endswith("]") or not rest[:-1].isdigit():
        return None
    return name, int(rest[:-1])


def revise(
    board: EvidenceBoard,
    prior_draft: ExplanationDraft,
    audit_report: Any,
    macro_actions: Sequence[MacroAction],
    backend_cfg: BackendConfig | None = None,
    client: httpx.Client | None = None,
) -> ExplanationDraft:
    """Produce the next draft from audit findings.

    The template backend re-renders each flagged claim or step from board
    facts, which restores grounded numbers and drops ungrounded names.
    """
    if getattr(audit_report.verdict, "value", audit_report.verdict) != "revise":
        raise PreconditionError("revise needs an audit verdict of revise")
    cfg = backend_cfg or BackendConfig()
    iteration = prior_draft.iteration + 1
    if cfg.kind is Backend.EXTERNAL:
        doc = _exchange(cfg, _request(board, macro_actions, prior_draft, audit_report.findings), client)
        return _append(board, parse_backend_response(doc, board.bundle, iteration))

    fresh = _Renderer(board, macro_actions).draft(iteration)
    summary = list(prior_draft.summary)
    steps = list(prior_draft.steps)
    replace_steps = False
    for finding in audit_report.findings:
        where = _locus(finding)
        if getattr(finding.kind, "value", finding.kind) == "uncovered_flow" or where is None:
            replace_steps = True
            continue
        name, index = where
        if name == "summary":
            if index < len(summary) and index < len(fresh.summary):
                summary[index] = fresh.summary[index]
            else:
                summary = list(fresh.summary)
        elif name == "steps":
            match = _matching_step(fresh.steps, steps[index].flow_refs if index < len(steps) else ())
            if match is not None and index < len(steps):
                steps[index] = match
            else:
                replace_steps = True
    if replace_steps or prior_draft.backend is Backend.EXTERNAL:
        steps = list(fresh.steps)
    if not 2 <= len(summary) <= 3 or prior_draft.backend is Backend.EXTERNAL:
        summary = list(fresh.summary)
    return _append(board, replace(fresh, summary=tuple(summary), steps=tuple(steps)))


def _matching_step(steps: Iterable[StepAnnotation], refs: tuple[int, ...]) -> StepAnnotation | None:
    for step in steps:
        if step.flow_refs == refs:
            return step
    return None

