"""Fast first pass: per-flow action types, a narrative skeleton, and flags.

Classification uses a fixed, ordered rule set. A flow no rule matches stays
``unknown`` and gets an ``unmatched_transfer`` flag; the profiler never
guesses.

    P2 mint/burn    counterparty is the zero address
    P3 wrap/unwrap  native flow paired with an equal wrapped-native flow
    P7 fee          small user outflow beside a large same-token flow
    P4 swap         user outflow of one token against inflow of another
    P5 deposit      outflow to a contract that pays back its own receipt token
    P6 stake/...    P5 topology refined by the counterparty's card kind
    P1 transfer     lone user flow in its subtree
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from fractions import Fraction

from txlens.flows import counterparty, flow_anchors, subtree_key, verify_conservation
from txlens.knowledge import CardKind, CardStore, KnowledgeCard, SelectorDB
from txlens.model import (
    ZERO_ADDRESS,
    ActionType,
    CallKind,
    EntryKind,
    EvidenceBoard,
    Stage,
    TokenStandard,
    TokenTransfer,
    TransactionBundle,
    short_address,
)
from txlens.synthesizer import render_amount

WETH = "0xc02aaa39b223fe8d0a0e5c4f27ead9083c756cc2"


class FlagKind(str, enum.Enum):
    UNKNOWN_SELECTOR = "unknown_selector"
    UNVERIFIED_CONTRACT = "unverified_contract"
    UNMATCHED_TRANSFER = "unmatched_transfer"
    ANOMALOUS_FLOW = "anomalous_flow"


class Confidence(str, enum.Enum):
    HIGH = "high"
    MEDIUM = "medium"
    LOW = "low"


@dataclass(frozen=True)
class UncertaintyFlag:
    kind: FlagKind
    subject: str
    trace_path: tuple[int, ...]
    description: str
    log_index: int | None = None


@dataclass(frozen=True)
class Hypothesis:
    classified_flows: dict[int, ActionType]
    narrative_skeleton: tuple[str, ...]
    flags: tuple[UncertaintyFlag, ...]
    confidence: Confidence
    matched_rules: dict[int, str] = field(default_factory=dict)
    cards: tuple[KnowledgeCard, ...] = ()
    functions: dict[str, str] = field(default_factory=dict)

    def card_for(self, address: str | None) -> KnowledgeCard | None:
        for card in self.cards:
            if card.address == address:
                return card
        return None


@dataclass(frozen=True)
class ProfilerConfig:
    fee_threshold: Fraction = Fraction(5, 100)
    wrapped_native: frozenset[str] = frozenset({WETH})


class _Rules:
    def __init__(self, bundle: TransactionBundle, store: CardStore, cfg: ProfilerConfig) -> None:
        self.bundle = bundle
        self.store = store
        self.cfg = cfg
        self.user = bundle.user
        self.flows = list(bundle.transfers)
        anchors = flow_anchors(bundle)
        self.key = {t.log_index: subtree_key(bundle, anchors[t.log_index]) for t in self.flows}
        self.kind: dict[int, ActionType] = {}
        self.rule: dict[int, str] = {}
        self.closed: set[int] = set()

    def siblings(self, f: TokenTransfer) -> list[TokenTransfer]:
        return [g for g in self.flows if g.log_index != f.log_index and self.key[g.log_index] == self.key[f.log_index]]

    def open_siblings(self, f: TokenTransfer) -> list[TokenTransfer]:
        # Flows claimed by a more specific rule no longer count as partners.
        return [g for g in self.siblings(f) if g.log_index not in self.closed]

    def outflow(self, t: TokenTransfer) -> bool:
        return t.sender == self.user and t.receiver != self.user

    def inflow(self, t: TokenTransfer) -> bool:
        return t.receiver == self.user and t.sender != self.user

    def assign(self, f: TokenTransfer, kind: ActionType, rule: str) -> None:
        self.kind[f.log_index] = kind
        self.rule[f.log_index] = rule

    def run(self) -> None:
        for rule in (self.p2, self.p3, self.p7, self.p4, self.p5_p6, self.p1):
            self.closed = set(self.kind)
            for f in self.flows:
                if f.log_index not in self.kind:
                    rule(f)

    def p2(self, f: TokenTransfer) -> None:
        if f.sender == ZERO_ADDRESS and f.receiver == self.user:
            self.assign(f, ActionType.MINT, "P2")
        elif f.receiver == ZERO_ADDRESS and f.sender == self.user:
            self.assign(f, ActionType.BURN, "P2")

    def _wrap_direction(self, native: TokenTransfer, wrapped: TokenTransfer) -> ActionType | None:
        # The wrapped-token contract itself is the strongest signal.
        if native.receiver == wrapped.token:
            return ActionType.WRAP
        if native.sender == wrapped.token:
            return ActionType.UNWRAP
        if native.sender == wrapped.receiver:
            return ActionType.WRAP
        if native.receiver == wrapped.sender:
            return ActionType.UNWRAP
        return None

    def p3(self, f: TokenTransfer) -> None:
        if f.standard is TokenStandard.NATIVE:
            partners = [
                (f, g) for g in self.siblings(f) if g.token in self.cfg.wrapped_native and g.amount == f.amount
            ]
        elif f.token in self.cfg.wrapped_native:
            partners = [
                (g, f) for g in self.siblings(f) if g.standard is TokenStandard.NATIVE and g.amount == f.amount
            ]
        else:
            return
        for native, wrapped in partners:
            direction = self._wrap_direction(native, wrapped)
            if direction is not None:
                self.assign(f, direction, "P3")
                return

    def p7(self, f: TokenTransfer) -> None:
        if not self.outflow(f):
            return
        larger = [
            g for g in self.siblings(f) if g.token == f.token and f.amount < self.cfg.fee_threshold * g.amount
        ]
        if not larger:
            return
        main = max(larger, key=lambda g: (g.amount, -g.log_index))
        main_party = counterparty(main, self.user) or main.receiver
        if f.receiver != main_party:
            self.assign(f, ActionType.FEE, "P7")

    @staticmethod
    def receipt_pair(out: TokenTransfer, inn: TokenTransfer) -> ActionType | None:
        """deposit when the receiving contract pays out its own token, withdraw for the inverse."""
        if inn.sender != out.receiver:
            return None
        if inn.token == out.receiver:
            return ActionType.DEPOSIT
        if out.token == out.receiver:
            return ActionType.WITHDRAW
        return None

    def p4(self, f: TokenTransfer) -> None:
        others = self.open_siblings(f)
        if self.outflow(f):
            hit = any(self.inflow(g) and g.token != f.token and not self.receipt_pair(f, g) for g in others)
            if hit:
                self.assign(f, ActionType.SWAP_OUT, "P4")
        elif self.inflow(f):
            hit = any(self.outflow(g) and g.token != f.token and not self.receipt_pair(g, f) for g in others)
            if hit:
                self.assign(f, ActionType.SWAP_IN, "P4")

    def p5_p6(self, f: TokenTransfer) -> None:
        others = self.open_siblings(f)
        if self.outflow(f):
            pairs = [(f, g) for g in others if self.inflow(g)]
        elif self.inflow(f):
            pairs = [(g, f) for g in others if self.outflow(g)]
        else:
            return
        for out, inn in pairs:
            base = self.receipt_pair(out, inn)
            if base is None:
                continue
            card = self.store.lookup(out.receiver)
            kind, rule = base, "P5"
            if card is not None and card.kind is CardKind.STAKING:
                kind = ActionType.STAKE if base is ActionType.DEPOSIT else ActionType.UNSTAKE
                rule = "P6"
            elif card is not None and card.kind is CardKind.LENDING_POOL:
                prior_borrow = any(
                    h.sender == out.receiver and self.inflow(h) and h.token == out.token and h.log_index < out.log_index
                    for h in self.flows
                )
                if inn.log_index < out.log_index:
                    kind, rule = ActionType.BORROW, "P6"
                elif prior_borrow:
                    kind, rule = ActionType.REPAY, "P6"
            self.assign(f, kind, rule)
            return

    def p1(self, f: TokenTransfer) -> None:
        if (self.outflow(f) or self.inflow(f)) and not self.siblings(f):
            self.assign(f, ActionType.TRANSFER, "P1")


def _clause(bundle: TransactionBundle, t: TokenTransfer, kind: ActionType) -> str:
    user = bundle.user
    amount = f"{render_amount(t.amount, bundle.tokens[t.token])} {bundle.symbol(t.token)}"
    who = lambda a: "user" if a == user else short_address(a)  # noqa: E731
    if kind is ActionType.TRANSFER:
        if t.sender == user:
            return f"user sent {amount} to {who(t.receiver)}"
        return f"user received {amount} from {who(t.sender)}"
    return f"{kind.value}: {amount} from {who(t.sender)} to {who(t.receiver)}"


def profile(
    board: EvidenceBoard, db: SelectorDB, store: CardStore, cfg: ProfilerConfig | None = None
) -> Hypothesis:
    """Classify every flow, raise flags, and append the hypothesis to the board."""
    cfg = cfg or ProfilerConfig()
    bundle = board.bundle
    rules = _Rules(bundle, store, cfg)
    rules.run()

    flags: list[UncertaintyFlag] = []
    seen_contracts: set[str] = set()
    cards: dict[str, KnowledgeCard] = {}
    functions: dict[str, str] = {}
    for call in bundle.root_call.walk():
        entry = db.lookup(call.selector) if call.selector is not None else None
        if entry is not None:
            functions[call.selector] = entry.canonical_signature
        elif call.selector is not None:
            flags.append(
                UncertaintyFlag(
                    FlagKind.UNKNOWN_SELECTOR,
                    call.selector,
                    call.trace_path,
                    f"unknown function at {call.selector}",
                )
            )
        if call.input_data is None or call.call_kind is CallKind.CREATE:
            continue
        card = store.lookup(call.callee)
        if card is not None:
            cards[card.address] = card
        elif call.callee not in bundle.tokens and call.callee not in seen_contracts:
            seen_contracts.add(call.callee)
            flags.append(
                UncertaintyFlag(
                    FlagKind.UNVERIFIED_CONTRACT,
                    call.callee,
                    call.trace_path,
                    f"no knowledge card or token metadata for contract {call.callee}",
                )
            )

    anchors = flow_anchors(bundle)
    classified: dict[int, ActionType] = {}
    skeleton = []
    for t in bundle.transfers:
        for party in (t.sender, t.receiver):
            card = store.lookup(party)
            if card is not None:
                cards[card.address] = card
        kind = rules.kind.get(t.log_index, ActionType.UNKNOWN)
        classified[t.log_index] = kind
        skeleton.append(_clause(bundle, t, kind))
        if kind is ActionType.UNKNOWN:
            subject = counterparty(t, bundle.user) or t.sender
            flags.append(
                UncertaintyFlag(
                    FlagKind.UNMATCHED_TRANSFER,
                    subject,
                    anchors[t.log_index],
                    f"no pattern explains flow {t.log_index} ({bundle.symbol(t.token)} "
                    f"{t.sender} -> {t.receiver})",
                    t.log_index,
                )
            )

    if bundle.declared_net_balances is not None:
        report = verify_conservation(bundle)
        for row in report.mismatches:
            flags.append(
                UncertaintyFlag(
                    FlagKind.ANOMALOUS_FLOW,
                    row.token,
                    (),
                    f"declared net change {row.declared} for {row.holder} disagrees with transfers ({row.recomputed})",
                )
            )

    unknown = sum(1 for k in classified.values() if k is ActionType.UNKNOWN)
    if not flags:
        confidence = Confidence.HIGH
    elif unknown * 2 > len(classified):
        confidence = Confidence.LOW
    else:
        confidence = Confidence.MEDIUM

    hypothesis = Hypothesis(
        classified_flows=classified,
        narrative_skeleton=tuple(skeleton),
        flags=tuple(flags),
        confidence=confidence,
        matched_rules=dict(rules.rule),
        cards=tuple(cards[a] for a in sorted(cards)),
        functions=dict(sorted(functions.items())),
    )
    board.append(EntryKind.HYPOTHESIS, hypothesis, Stage.PROFILER, "pattern rules P1-P7")
    for flag in flags:
        board.append(EntryKind.FLAG, flag, Stage.PROFILER, "profiler")
    return hypothesis

