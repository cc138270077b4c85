"""Token-flow reconstruction, net balances, conservation and macro-actions."""

from __future__ import annotations

from collections import defaultdict
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field

from txlens.errors import PreconditionError
from txlens.hashing import selector_of
from txlens.model import (
    ActionType,
    CallKind,
    NetBalanceChange,
    TokenStandard,
    TokenTransfer,
    TransactionBundle,
)

GROUPING_RULE = "subtree-anchor heuristic"

# Root functions that dispatch independent actions; their children are
# treated as separate top-level subtrees.
BATCH_SELECTORS = frozenset(
    selector_of(sig)
    for sig in (
        "multicall(bytes[])",
        "multicall(uint256,bytes[])",
        "multicall(bytes32,bytes[])",
        "aggregate((address,bytes)[])",
        "aggregate3((address,bool,bytes)[])",
        "tryAggregate(bool,(address,bytes)[])",
    )
)

APPROVAL_SELECTORS = frozenset(
    selector_of(sig)
    for sig in (
        "approve(address,uint256)",
        "permit(address,address,uint256,uint256,uint8,bytes32,bytes32)",
        "permit(address,address,uint256,uint256,bool,uint8,bytes32,bytes32)",
    )
)

# Token calls that never emit a Transfer log: approvals, and the
# wrapped-native deposit/withdraw pair (those log Deposit/Withdrawal).
NON_TRANSFER_SELECTORS = APPROVAL_SELECTORS | {selector_of("deposit()"), selector_of("withdraw(uint256)")}


def compute_net_balances(transfers: Iterable[TokenTransfer], holder: str) -> list[NetBalanceChange]:
    deltas: dict[str, int] = defaultdict(int)
    for t in transfers:
        if t.receiver == holder:
            deltas[t.token] += t.amount
        if t.sender == holder:
            deltas[t.token] -= t.amount
    return [
        NetBalanceChange(holder=holder, token=token, delta=delta)
        for token, delta in sorted(deltas.items())
        if delta != 0
    ]


@dataclass(frozen=True)
class FlowEdge:
    log_index: int
    sender: str
    receiver: str
    token: str
    amount: int = field(metadata={"decimal": True})


@dataclass(frozen=True)
class TokenFlowGraph:
    nodes: frozenset[str]
    edges: tuple[FlowEdge, ...]


def build_flow_graph(bundle: TransactionBundle) -> TokenFlowGraph:
    edges = tuple(
        FlowEdge(t.log_index, t.sender, t.receiver, t.token, t.amount)
        for t in sorted(bundle.transfers, key=lambda t: t.log_index)
    )
    nodes = frozenset(a for e in edges for a in (e.sender, e.receiver))
    return TokenFlowGraph(nodes=nodes, edges=edges)


@dataclass(frozen=True)
class ConservationRow:
    holder: str
    token: str
    declared: int
    recomputed: int

    @property
    def ok(self) -> bool:
        return self.declared == self.recomputed


@dataclass(frozen=True)
class ConservationReport:
    rows: tuple[ConservationRow, ...]

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.rows)

    @property
    def status(self) -> str:
        return "ok" if self.ok else "mismatch"

    @property
    def mismatches(self) -> list[ConservationRow]:
        return [r for r in self.rows if not r.ok]


def verify_conservation(bundle: TransactionBundle) -> ConservationReport:
    """Compare declared net balances with a recomputation from the transfers."""
    if bundle.declared_net_balances is None:
        raise PreconditionError("bundle declares no net balances to verify")
    declared: dict[tuple[str, str], int] = defaultdict(int)
    for nb in bundle.declared_net_balances:
        declared[(nb.holder, nb.token)] += nb.delta
    # The user is always checked, even when every declared row for them was omitted as zero.
    holders = sorted({holder for holder, _ in declared} | {bundle.user})
    recomputed: dict[tuple[str, str], int] = {}
    for holder in holders:
        for nb in compute_net_balances(bundle.transfers, holder):
            recomputed[(holder, nb.token)] = nb.delta
    keys = sorted(set(declared) | set(recomputed))
    return ConservationReport(
        rows=tuple(ConservationRow(h, t, declared.get((h, t), 0), recomputed.get((h, t), 0)) for h, t in keys)
    )


# --------------------------------------------------------------------------
# Call-tree placement of flows

def flow_anchors(bundle: TransactionBundle) -> dict[int, tuple[int, ...]]:
    """Trace path of the call that emitted each flow.

    A token's k-th Transfer log belongs to its k-th state-changing call in
    depth-first order, skipping calls that never log a Transfer; a native flow belongs to the first unused call with
    matching endpoints and value. Flows that cannot be placed sit at the root.
    """
    calls = [c for c in bundle.root_call.walk() if c.call_kind is not CallKind.STATICCALL]
    by_callee: dict[str, list[tuple[int, ...]]] = defaultdict(list)
    for c in calls:
        if c.selector not in NON_TRANSFER_SELECTORS:
            by_callee[c.callee].append(c.trace_path)
    used_native: set[tuple[int, ...]] = set()
    next_slot: dict[str, int] = defaultdict(int)
    anchors: dict[int, tuple[int, ...]] = {}
    for t in bundle.transfers:
        if t.standard is TokenStandard.NATIVE:
            anchors[t.log_index] = ()
            for c in calls:
                if (
                    c.trace_path not in used_native
                    and c.eth_value == t.amount
                    and c.caller == t.sender
                    and c.callee == t.receiver
                ):
                    used_native.add(c.trace_path)
                    anchors[t.log_index] = c.trace_path
                    break
            continue
        slots = by_callee.get(t.token, [])
        k = next_slot[t.token]
        anchors[t.log_index] = slots[k] if k < len(slots) else ()
        next_slot[t.token] = k + 1
    return anchors


def common_prefix(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    n = 0
    while n < len(a) and n < len(b) and a[n] == b[n]:
        n += 1
    return a[:n]


def subtree_key(bundle: TransactionBundle, path: tuple[int, ...]) -> tuple[int, ...]:
    """Top-level call subtree a call path belongs to.

    A plain top-level call is one subtree. A batch dispatcher at the root
    (multicall and friends) starts a separate subtree per dispatched child.
    """
    if bundle.root_call.selector in BATCH_SELECTORS:
        return path[:1]
    return ()


def counterparty(t: TokenTransfer, user: str) -> str | None:
    if t.sender == user and t.receiver != user:
        return t.receiver
    if t.receiver == user and t.sender != user:
        return t.sender
    return None


# --------------------------------------------------------------------------
# Macro-actions

@dataclass(frozen=True)
class MacroAction:
    id: int
    kind: ActionType
    member_flows: tuple[int, ...]
    call_anchor: tuple[int, ...]
    aggregate_in: dict[str, int] = field(metadata={"decimal": True})
    aggregate_out: dict[str, int] = field(metadata={"decimal": True})


SWAP_FAMILY = frozenset({ActionType.SWAP_IN, ActionType.SWAP_OUT})
PAIRED_KINDS = frozenset(
    {
        ActionType.WRAP,
        ActionType.UNWRAP,
        ActionType.DEPOSIT,
        ActionType.WITHDRAW,
        ActionType.STAKE,
        ActionType.UNSTAKE,
        ActionType.BORROW,
        ActionType.REPAY,
    }
)


def _compatible(members: list[tuple[TokenTransfer, ActionType]], flow: TokenTransfer, kind: ActionType) -> bool:
    kinds = {k for _, k in members}
    tokens = {t.token for t, _ in members} | {flow.token}
    if kind in SWAP_FAMILY:
        if not kinds <= SWAP_FAMILY:
            return False
        both = members + [(flow, kind)]
        outs = {t.token for t, k in both if k is ActionType.SWAP_OUT}
        ins = {t.token for t, k in both if k is ActionType.SWAP_IN}
        return len(outs) <= 1 and len(ins) <= 1 and not (outs & ins)
    if kind in PAIRED_KINDS:
        # Asset plus its counterpart (wrapped or receipt token).
        return kinds == {kind} and len(tokens) <= 2
    return kinds == {kind} and len(tokens) == 1


def _aggregates(flows: Iterable[TokenTransfer], user: str) -> tuple[dict[str, int], dict[str, int]]:
    agg_in: dict[str, int] = defaultdict(int)
    agg_out: dict[str, int] = defaultdict(int)
    for t in flows:
        if t.receiver == user and t.sender != user:
            agg_in[t.token] += t.amount
        elif t.sender == user and t.receiver != user:
            agg_out[t.token] += t.amount
    return dict(sorted(agg_in.items())), dict(sorted(agg_out.items()))


def group_macro_actions(
    bundle: TransactionBundle,
    graph: TokenFlowGraph,
    classified: Mapping[int, ActionType],
) -> list[MacroAction]:
    """Merge classified flows into economic operations.

    Two flows merge when they share a top-level call subtree and their kinds
    pair up: one swap_out token against swap_in flows of a single other
    token, a wrap/deposit-style asset with its counterpart token, or the
    same kind on the same token. A flow with several candidate groups joins
    the one with the deepest common anchor, then the lowest id.
    """
    missing = [e.log_index for e in graph.edges if e.log_index not in classified]
    if missing:
        raise PreconditionError(f"flows without a classification: {missing}")
    anchors = flow_anchors(bundle)
    user = bundle.user
    groups: list[dict] = []
    for edge in graph.edges:
        flow = bundle.transfer(edge.log_index)
        kind = ActionType(classified[edge.log_index])
        path = anchors[edge.log_index]
        key = subtree_key(bundle, path)
        best = None
        for g in groups:
            if g["key"] != key or not _compatible(g["members"], flow, kind):
                continue
            depth = len(common_prefix(g["anchor"], path))
            if best is None or depth > best[0]:
                best = (depth, g)
        if best is None:
            groups.append({"key": key, "anchor": path, "members": [(flow, kind)]})
        else:
            g = best[1]
            g["members"].append((flow, kind))
            g["anchor"] = common_prefix(g["anchor"], path)

    actions = []
    for gid, g in enumerate(groups):
        kinds = {k for _, k in g["members"]}
        macro_kind = ActionType.SWAP if kinds <= SWAP_FAMILY else next(iter(kinds))
        agg_in, agg_out = _aggregates((t for t, _ in g["members"]), user)
        actions.append(
            MacroAction(
                id=gid,
                kind=macro_kind,
                member_flows=tuple(t.log_index for t, _ in g["members"]),
                call_anchor=g["anchor"],
                aggregate_in=agg_in,
                aggregate_out=agg_out,
            )
        )
    return actions


def aggregates_for(bundle: TransactionBundle, log_indices: Iterable[int]) -> tuple[dict[str, int], dict[str, int]]:
    """User inflow and outflow totals per token over the given flows."""
    return _aggregates((bundle.transfer(i) for i in log_indices), bundle.user)
