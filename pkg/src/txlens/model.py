"""Shared domain types and the Evidence Board.

Every pipeline stage reads the board and appends typed entries to it. The
board is append-only; entry ids are dense and start at 0 with the bundle.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import re
import types
import typing
from collections.abc import Iterator
from dataclasses import dataclass
from typing import Any

from txlens.errors import DuplicateBundleError, InvalidBundleError, ParseError

NATIVE_TOKEN = "0x" + "e" * 40
ZERO_ADDRESS = "0x" + "0" * 40

ADDRESS_RE = re.compile(r"^0x[0-9a-f]{40}$")
HASH_RE = re.compile(r"^0x[0-9a-f]{64}$")
SELECTOR_RE = re.compile(r"^0x[0-9a-f]{8}$")
HEX_RE = re.compile(r"^0x(?:[0-9a-f]{2})*$")


def is_address(value: object) -> bool:
    return isinstance(value, str) and ADDRESS_RE.match(value) is not None


def short_address(address: str) -> str:
    """Display form used in prose, e.g. ``0x7a25…488d``."""
    return f"{address[:6]}…{address[-4:]}"


class TxStatus(str, enum.Enum):
    SUCCESS = "success"
    FAILURE = "failure"


class CallKind(str, enum.Enum):
    CALL = "call"
    DELEGATECALL = "delegatecall"
    STATICCALL = "staticcall"
    CREATE = "create"


class TokenStandard(str, enum.Enum):
    ERC20 = "erc20"
    ERC721 = "erc721"
    NATIVE = "native"


class ActionType(str, enum.Enum):
    TRANSFER = "transfer"
    SWAP_IN = "swap_in"
    SWAP_OUT = "swap_out"
    DEPOSIT = "deposit"
    WITHDRAW = "withdraw"
    MINT = "mint"
    BURN = "burn"
    STAKE = "stake"
    UNSTAKE = "unstake"
    BORROW = "borrow"
    REPAY = "repay"
    FEE = "fee"
    WRAP = "wrap"
    UNWRAP = "unwrap"
    UNKNOWN = "unknown"
    # Macro-level kind only: a swap_out/swap_in group. Never assigned to a flow.
    SWAP = "swap"


class EntryKind(str, enum.Enum):
    BUNDLE = "bundle"
    HYPOTHESIS = "hypothesis"
    FLAG = "flag"
    PATCH = "patch"
    DRAFT = "draft"
    AUDIT = "audit"


class Stage(str, enum.Enum):
    INGESTION = "ingestion"
    PROFILER = "profiler"
    INVESTIGATOR = "investigator"
    SYNTHESIZER = "synthesizer"
    AUDITOR = "auditor"


@dataclass(frozen=True)
class TxMetadata:
    hash: str
    block_number: int
    timestamp: int
    sender: str
    recipient: str | None
    eth_value: int
    status: TxStatus = TxStatus.SUCCESS


@dataclass(frozen=True)
class CallNode:
    caller: str
    callee: str
    call_kind: CallKind
    selector: str | None = None
    input_data: str | None = None
    eth_value: int = 0
    trace_path: tuple[int, ...] = ()
    children: tuple[CallNode, ...] = ()

    def walk(self) -> Iterator[CallNode]:
        """Depth-first pre-order traversal, self first."""
        yield self
        for child in self.children:
            yield from child.walk()

    def find(self, path: tuple[int, ...]) -> CallNode | None:
        node = self
        for index in path:
            if index >= len(node.children):
                return None
            node = node.children[index]
        return node


@dataclass(frozen=True)
class TokenTransfer:
    token: str
    standard: TokenStandard
    sender: str
    receiver: str
    amount: int
    log_index: int
    token_id: int | None = None


@dataclass(frozen=True)
class TokenInfo:
    address: str
    symbol: str
    decimals: int


@dataclass(frozen=True)
class NetBalanceChange:
    holder: str
    token: str
    delta: int


@dataclass(frozen=True)
class TransactionBundle:
    metadata: TxMetadata
    root_call: CallNode
    transfers: tuple[TokenTransfer, ...]
    tokens: dict[str, TokenInfo]
    declared_net_balances: tuple[NetBalanceChange, ...] | None = None

    @property
    def user(self) -> str:
        return self.metadata.sender

    @property
    def log_indices(self) -> list[int]:
        return [t.log_index for t in self.transfers]

    def transfer(self, log_index: int) -> TokenTransfer:
        for t in self.transfers:
            if t.log_index == log_index:
                return t
        raise KeyError(log_index)

    def symbol(self, token: str) -> str:
        return self.tokens[token].symbol

    def validate(self) -> None:
        """Raise InvalidBundleError naming the first violated invariant."""
        md = self.metadata
        if not isinstance(md.hash, str) or not HASH_RE.match(md.hash):
            raise InvalidBundleError("metadata.hash", f"expected 0x + 64 lowercase hex, got {md.hash!r}")
        if md.block_number < 0:
            raise InvalidBundleError("metadata.blockNumber", "negative")
        if md.timestamp < 0:
            raise InvalidBundleError("metadata.timestamp", "negative")
        if not is_address(md.sender):
            raise InvalidBundleError("metadata.from", f"bad address {md.sender!r}")
        if md.recipient is None:
            if self.root_call.call_kind is not CallKind.CREATE:
                raise InvalidBundleError("metadata.to", "absent but root call is not a contract creation")
        elif not is_address(md.recipient):
            raise InvalidBundleError("metadata.to", f"bad address {md.recipient!r}")
        if md.eth_value < 0:
            raise InvalidBundleError("metadata.value", "negative")
        _validate_call(self.root_call, (), "calls")

        seen: set[int] = set()
        previous = -1
        for i, t in enumerate(self.transfers):
            where = f"transfers[{i}]"
            for name, addr in (("token", t.token), ("from", t.sender), ("to", t.receiver)):
                if not is_address(addr):
                    raise InvalidBundleError(f"{where}.{name}", f"bad address {addr!r}")
            if t.amount < 0:
                raise InvalidBundleError(f"{where}.amount", "negative")
            if t.log_index in seen:
                raise InvalidBundleError(f"{where}.logIndex", f"duplicate log index {t.log_index}")
            if t.log_index < previous:
                raise InvalidBundleError(f"{where}.logIndex", "transfers not ordered by log index")
            seen.add(t.log_index)
            previous = t.log_index
            if t.standard is TokenStandard.ERC721:
                if t.amount != 1 or t.token_id is None:
                    raise InvalidBundleError(where, "erc721 transfer needs amount 1 and a tokenId")
            elif t.token_id is not None:
                raise InvalidBundleError(f"{where}.tokenId", "only erc721 transfers carry a tokenId")
            if (t.standard is TokenStandard.NATIVE) != (t.token == NATIVE_TOKEN):
                raise InvalidBundleError(f"{where}.token", "native transfers use the sentinel address and only they do")
            if t.token not in self.tokens:
                raise InvalidBundleError(f"tokens.{t.token}", "transferred token has no token info")

        for addr, info in self.tokens.items():
            if not is_address(addr) or info.address != addr:
                raise InvalidBundleError(f"tokens.{addr}", "key must equal the lowercase token address")
            if not 0 <= info.decimals <= 36:
                raise InvalidBundleError(f"tokens.{addr}.decimals", f"{info.decimals} outside [0, 36]")
            if not info.symbol or len(info.symbol) > 32 or any(c.isspace() for c in info.symbol):
                raise InvalidBundleError(f"tokens.{addr}.symbol", f"bad symbol {info.symbol!r}")

        for i, nb in enumerate(self.declared_net_balances or ()):
            if not is_address(nb.holder) or not is_address(nb.token):
                raise InvalidBundleError(f"netBalances[{i}]", "bad address")
            if nb.delta == 0:
                raise InvalidBundleError(f"netBalances[{i}].delta", "zero deltas must be dropped")


def _validate_call(node: CallNode, path: tuple[int, ...], where: str) -> None:
    if node.trace_path != path:
        raise InvalidBundleError(f"{where}.tracePath", f"expected {list(path)}, got {list(node.trace_path)}")
    if not is_address(node.caller):
        raise InvalidBundleError(f"{where}.from", f"bad address {node.caller!r}")
    if not is_address(node.callee):
        raise InvalidBundleError(f"{where}.to", f"bad address {node.callee!r}")
    if node.eth_value < 0:
        raise InvalidBundleError(f"{where}.value", "negative")
    if node.input_data is not None and not HEX_RE.match(node.input_data):
        raise InvalidBundleError(f"{where}.input", "not lowercase even-length hex")
    long_input = node.input_data is not None and len(node.input_data) >= 10
    if long_input != (node.selector is not None):
        raise InvalidBundleError(f"{where}.selector", "selector present iff input has at least 4 bytes")
    if node.selector is not None:
        if not SELECTOR_RE.match(node.selector) or node.selector != node.input_data[:10]:
            raise InvalidBundleError(f"{where}.selector", "selector must equal the first 4 input bytes")
    for i, child in enumerate(node.children):
        _validate_call(child, path + (i,), f"{where}.children[{i}]")


# --------------------------------------------------------------------------
# Fixture wire format for bundles

def _dec(value: Any, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (str, int)):
        raise ParseError(where, "expected a decimal string")
    text = str(value)
    if not re.fullmatch(r"-?\d+", text):
        raise ParseError(where, f"not a decimal integer: {text!r}")
    return int(text)


def _addr(value: Any, where: str) -> str:
    if not isinstance(value, str):
        raise ParseError(where, "expected an address string")
    return value.lower()


def _require(obj: dict, key: str, where: str) -> Any:
    if not isinstance(obj, dict):
        raise ParseError(where, "expected an object")
    if key not in obj:
        raise ParseError(f"{where}.{key}", "missing field")
    return obj[key]


def _enum(cls: type[enum.Enum], value: Any, where: str) -> Any:
    try:
        return cls(value)
    except ValueError:
        raise ParseError(where, f"unknown {cls.__name__} {value!r}") from None


def call_from_json(obj: dict, path: tuple[int, ...] = (), where: str = "calls") -> CallNode:
    raw_input = obj.get("input") if isinstance(obj, dict) else None
    input_data = raw_input.lower() if isinstance(raw_input, str) else None
    selector = obj.get("selector") if isinstance(obj, dict) else None
    if selector is None and input_data is not None and len(input_data) >= 10:
        selector = input_data[:10]
    children_raw = obj.get("children", []) if isinstance(obj, dict) else []
    if not isinstance(children_raw, list):
        raise ParseError(f"{where}.children", "expected a list")
    children = tuple(
        call_from_json(c, path + (i,), f"{where}.children[{i}]") for i, c in enumerate(children_raw)
    )
    return CallNode(
        caller=_addr(_require(obj, "from", where), f"{where}.from"),
        callee=_addr(_require(obj, "to", where), f"{where}.to"),
        call_kind=_enum(CallKind, str(_require(obj, "callType", where)).lower(), f"{where}.callType"),
        selector=selector.lower() if isinstance(selector, str) else None,
        input_data=input_data,
        eth_value=_dec(obj.get("value", "0"), f"{where}.value"),
        trace_path=path,
        children=children,
    )


def call_to_json(node: CallNode) -> dict:
    out: dict[str, Any] = {"from": node.caller, "to": node.callee, "callType": node.call_kind.value}
    if node.selector is not None:
        out["selector"] = node.selector
    if node.input_data is not None:
        out["input"] = node.input_data
    out["value"] = str(node.eth_value)
    out["children"] = [call_to_json(c) for c in node.children]
    return out


def transfer_from_json(obj: dict, where: str) -> TokenTransfer:
    token_id = obj.get("tokenId") if isinstance(obj, dict) else None
    return TokenTransfer(
        token=_addr(_require(obj, "token", where), f"{where}.token"),
        standard=_enum(TokenStandard, _require(obj, "standard", where), f"{where}.standard"),
        sender=_addr(_require(obj, "from", where), f"{where}.from"),
        receiver=_addr(_require(obj, "to", where), f"{where}.to"),
        amount=_dec(_require(obj, "amount", where), f"{where}.amount"),
        log_index=_dec(_require(obj, "logIndex", where), f"{where}.logIndex"),
        token_id=None if token_id is None else _dec(token_id, f"{where}.tokenId"),
    )


def transfer_to_json(t: TokenTransfer) -> dict:
    out: dict[str, Any] = {
        "token": t.token,
        "standard": t.standard.value,
        "from": t.sender,
        "to": t.receiver,
        "amount": str(t.amount),
    }
    if t.token_id is not None:
        out["tokenId"] = str(t.token_id)
    out["logIndex"] = t.log_index
    return out


def bundle_from_json(doc: Any) -> TransactionBundle:
    """Parse the fixture document. Shape errors raise ParseError; no validation."""
    if not isinstance(doc, dict):
        raise ParseError("$", "fixture must be a JSON object")
    md = _require(doc, "metadata", "$")
    recipient = md.get("to") if isinstance(md, dict) else None
    metadata = TxMetadata(
        hash=_addr(_require(md, "hash", "metadata"), "metadata.hash"),
        block_number=_dec(_require(md, "blockNumber", "metadata"), "metadata.blockNumber"),
        timestamp=_dec(_require(md, "timestamp", "metadata"), "metadata.timestamp"),
        sender=_addr(_require(md, "from", "metadata"), "metadata.from"),
        recipient=None if recipient is None else _addr(recipient, "metadata.to"),
        eth_value=_dec(_require(md, "value", "metadata"), "metadata.value"),
        status=_enum(TxStatus, _require(md, "status", "metadata"), "metadata.status"),
    )
    root = call_from_json(_require(doc, "calls", "$"))
    transfers_raw = _require(doc, "transfers", "$")
    if not isinstance(transfers_raw, list):
        raise ParseError("transfers", "expected a list")
    transfers = [transfer_from_json(t, f"transfers[{i}]") for i, t in enumerate(transfers_raw)]
    tokens_raw = _require(doc, "tokens", "$")
    if not isinstance(tokens_raw, dict):
        raise ParseError("tokens", "expected an object")
    tokens: dict[str, TokenInfo] = {}
    for key, info in tokens_raw.items():
        where = f"tokens.{key}"
        address = key.lower()
        decimals = _require(info, "decimals", where)
        if isinstance(decimals, bool) or not isinstance(decimals, int):
            raise ParseError(f"{where}.decimals", "expected an integer")
        tokens[address] = TokenInfo(address=address, symbol=str(_require(info, "symbol", where)), decimals=decimals)
    declared = None
    if doc.get("netBalances") is not None:
        raw = doc["netBalances"]
        if not isinstance(raw, list):
            raise ParseError("netBalances", "expected a list")
        declared = tuple(
            NetBalanceChange(
                holder=_addr(_require(nb, "holder", f"netBalances[{i}]"), f"netBalances[{i}].holder"),
                token=_addr(_require(nb, "token", f"netBalances[{i}]"), f"netBalances[{i}].token"),
                delta=_dec(_require(nb, "delta", f"netBalances[{i}]"), f"netBalances[{i}].delta"),
            )
            for i, nb in enumerate(raw)
        )
    return TransactionBundle(
        metadata=metadata,
        root_call=root,
        transfers=tuple(transfers),
        tokens=tokens,
        declared_net_balances=declared,
    )


def bundle_to_json(bundle: TransactionBundle) -> dict:
    md = bundle.metadata
    doc: dict[str, Any] = {
        "metadata": {
            "hash": md.hash,
            "blockNumber": str(md.block_number),
            "timestamp": str(md.timestamp),
            "from": md.sender,
            "to": md.recipient,
            "value": str(md.eth_value),
            "status": md.status.value,
        },
        "calls": call_to_json(bundle.root_call),
        "transfers": [transfer_to_json(t) for t in bundle.transfers],
        "tokens": {
            addr: {"symbol": info.symbol, "decimals": info.decimals}
            for addr, info in sorted(bundle.tokens.items())
        },
    }
    if bundle.declared_net_balances is not None:
        doc["netBalances"] = [
            {"holder": nb.holder, "token": nb.token, "delta": str(nb.delta)}
            for nb in bundle.declared_net_balances
        ]
    return doc


# --------------------------------------------------------------------------
# Generic dataclass codec for board payloads. Integer fields tagged with
# ``metadata={"decimal": True}`` travel as decimal strings.

def camel(name: str) -> str:
    head, *rest = name.split("_")
    return head + "".join(part.title() for part in rest)


def to_wire(value: Any, decimal: bool = False) -> Any:
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        if isinstance(value, TransactionBundle):
            return bundle_to_json(value)
        return {
            camel(f.name): to_wire(getattr(value, f.name), f.metadata.get("decimal", False))
            for f in dataclasses.fields(value)
        }
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, bool) or value is None or isinstance(value, (str, float)):
        return value
    if isinstance(value, int):
        return str(value) if decimal else value
    if isinstance(value, dict):
        return {str(k): to_wire(v, decimal) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_wire(v, decimal) for v in value]
    raise TypeError(f"cannot serialize {type(value).__name__}")


def from_wire(hint: Any, data: Any) -> Any:
    if hint is Any:
        return data
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if data is None:
            return None
        if len(args) > 1 and isinstance(data, dict):
            # Pick the dataclass whose wire keys match exactly.
            for arg in args:
                if dataclasses.is_dataclass(arg) and {camel(f.name) for f in dataclasses.fields(arg)} == set(data):
                    return from_wire(arg, data)
        return from_wire(args[0], data)
    if origin in (list, tuple):
        args = typing.get_args(hint)
        inner = args[0] if args else Any
        items = [from_wire(inner, v) for v in data]
        return tuple(items) if origin is tuple else items
    if origin is dict:
        key_t, val_t = typing.get_args(hint)
        return {from_wire(key_t, k): from_wire(val_t, v) for k, v in data.items()}
    if hint is TransactionBundle:
        return bundle_from_json(data)
    if dataclasses.is_dataclass(hint):
        hints = typing.get_type_hints(hint)
        kwargs = {}
        for f in dataclasses.fields(hint):
            key = camel(f.name)
            if key in data:
                kwargs[f.name] = from_wire(hints[f.name], data[key])
        return hint(**kwargs)
    if isinstance(hint, type) and issubclass(hint, enum.Enum):
        return hint(data)
    if hint is int:
        return int(data)
    if hint is tuple:
        return tuple(data)
    return data


# --------------------------------------------------------------------------
# Evidence Board

@dataclass(frozen=True)
class EvidenceEntry:
    id: int
    kind: EntryKind
    payload: Any
    produced_by: Stage
    source_citation: str


def _payload_type(kind: EntryKind) -> Any:
    # Payload types live in the stage modules that produce them.
    from txlens.auditor import AuditReport
    from txlens.knowledge import KnowledgePatch
    from txlens.profiler import Hypothesis, UncertaintyFlag
    from txlens.synthesizer import ExplanationDraft

    return {
        EntryKind.BUNDLE: TransactionBundle,
        EntryKind.HYPOTHESIS: Hypothesis,
        EntryKind.FLAG: UncertaintyFlag,
        EntryKind.PATCH: KnowledgePatch,
        EntryKind.DRAFT: ExplanationDraft,
        EntryKind.AUDIT: AuditReport,
    }[kind]


class EvidenceBoard:
    """Append-only, provenance-tagged context for one transaction analysis.

    Single writer: stages take turns appending. ``entries`` hands out a
    tuple snapshot, so readers never observe later appends.
    """

    def __init__(self, tx_hash: str, entries: list[EvidenceEntry]) -> None:
        self.tx_hash = tx_hash
        self._entries = entries

    @classmethod
    def new(cls, bundle: TransactionBundle) -> EvidenceBoard:
        bundle.validate()
        entry = EvidenceEntry(0, EntryKind.BUNDLE, bundle, Stage.INGESTION, f"transaction {bundle.metadata.hash}")
        return cls(bundle.metadata.hash, [entry])

    @property
    def entries(self) -> tuple[EvidenceEntry, ...]:
        return tuple(self._entries)

    @property
    def bundle(self) -> TransactionBundle:
        return self._entries[0].payload

    def append(self, kind: EntryKind, payload: Any, produced_by: Stage, source_citation: str) -> int:
        kind = EntryKind(kind)
        if kind is EntryKind.BUNDLE:
            raise DuplicateBundleError("a board holds exactly one bundle entry")
        entry_id = len(self._entries)
        self._entries.append(EvidenceEntry(entry_id, kind, payload, Stage(produced_by), source_citation))
        return entry_id

    def get(self, entry_id: int) -> EvidenceEntry:
        return self._entries[entry_id]

    def query(self, kind: EntryKind) -> list[EvidenceEntry]:
        kind = EntryKind(kind)
        return [e for e in self._entries if e.kind is kind]

    def latest(self, kind: EntryKind) -> EvidenceEntry | None:
        found = self.query(kind)
        return found[-1] if found else None

    def to_json(self) -> dict:
        return {
            "txHash": self.tx_hash,
            "entries": [
                {
                    "id": e.id,
                    "kind": e.kind.value,
                    "producedBy": e.produced_by.value,
                    "sourceCitation": e.source_citation,
                    "payload": to_wire(e.payload),
                }
                for e in self._entries
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, ensure_ascii=False)

    @classmethod
    def from_json(cls, doc: dict) -> EvidenceBoard:
        entries = []
        for raw in doc["entries"]:
            kind = EntryKind(raw["kind"])
            entries.append(
                EvidenceEntry(
                    id=int(raw["id"]),
                    kind=kind,
                    payload=from_wire(_payload_type(kind), raw["payload"]),
                    produced_by=Stage(raw["producedBy"]),
                    source_citation=raw["sourceCitation"],
                )
            )
        if [e.id for e in entries] != list(range(len(entries))):
            raise InvalidBundleError("entries", "ids must be dense from 0")
        if not entries or entries[0].kind is not EntryKind.BUNDLE or len(
            [e for e in entries if e.kind is EntryKind.BUNDLE]
        ) != 1:
            raise InvalidBundleError("entries", "exactly one bundle entry, first")
        return cls(doc["txHash"], entries)


# Function-style aliases for the board operations.
def board_new(bundle: TransactionBundle) -> EvidenceBoard:
    return EvidenceBoard.new(bundle)


def board_append(board: EvidenceBoard, kind: EntryKind, payload: Any, produced_by: Stage, source_citation: str) -> int:
    return board.append(kind, payload, produced_by, source_citation)


def board_query(board: EvidenceBoard, kind: EntryKind) -> list[EvidenceEntry]:
    return board.query(kind)

