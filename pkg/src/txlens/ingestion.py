"""Building validated TransactionBundles from fixtures or a live node."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

import httpx

from txlens.errors import (
    InvalidBundleError,
    MalformedLogError,
    NetworkError,
    NotFoundError,
    ParseError,
    TraceUnavailableError,
    TxLensError,
    ValidationError,
)
from txlens.model import (
    NATIVE_TOKEN,
    CallKind,
    CallNode,
    TokenInfo,
    TokenStandard,
    TokenTransfer,
    TransactionBundle,
    TxMetadata,
    TxStatus,
    bundle_from_json,
    bundle_to_json,
)

log = logging.getLogger(__name__)

# keccak-256("Transfer(address,address,uint256)"); pinned by a keccak oracle test.
TRANSFER_TOPIC = "0xddf252ad1be2c89b69c2b068fc378daa952ba7f163c4a11628f55a4df523b3ef"

NATIVE_INFO = TokenInfo(address=NATIVE_TOKEN, symbol="ETH", decimals=18)

ENV_RPC_URL = "TXLENS_RPC_URL"
ENV_EXPLORER_URL = "TXLENS_EXPLORER_URL"
ENV_EXPLORER_KEY = "TXLENS_EXPLORER_KEY"


@dataclass(frozen=True)
class EndpointConfig:
    rpc_url: str | None = None
    explorer_api_url: str | None = None
    explorer_api_key: str | None = None
    offline: bool = False
    timeout: float = 30.0

    @classmethod
    def from_env(cls, offline: bool = False, **overrides: Any) -> EndpointConfig:
        values = {
            "rpc_url": os.environ.get(ENV_RPC_URL),
            "explorer_api_url": os.environ.get(ENV_EXPLORER_URL),
            "explorer_api_key": os.environ.get(ENV_EXPLORER_KEY),
            "offline": offline,
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass(frozen=True)
class RawLog:
    address: str
    topics: tuple[str, ...]
    data: str
    log_index: int


# --------------------------------------------------------------------------
# Fixtures

def normalize_bundle(bundle: TransactionBundle) -> TransactionBundle:
    transfers = tuple(sorted(bundle.transfers, key=lambda t: t.log_index))
    tokens = dict(bundle.tokens)
    if any(t.standard is TokenStandard.NATIVE for t in transfers) and NATIVE_TOKEN not in tokens:
        tokens[NATIVE_TOKEN] = NATIVE_INFO
    return replace(bundle, transfers=transfers, tokens=tokens)


def parse_fixture(text: str | bytes) -> TransactionBundle:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"line {exc.lineno} column {exc.colno}", exc.msg) from None
    bundle = normalize_bundle(bundle_from_json(doc))
    try:
        bundle.validate()
    except InvalidBundleError as exc:
        raise ValidationError(exc.field, exc.reason) from None
    return bundle


def load_fixture(path: str | os.PathLike[str]) -> TransactionBundle:
    """Load and validate a fixture file; transfers come back sorted by log index."""
    return parse_fixture(Path(path).read_bytes())


def dump_fixture(bundle: TransactionBundle) -> str:
    return json.dumps(bundle_to_json(bundle), indent=2, sort_keys=False) + "\n"


# --------------------------------------------------------------------------
# Log and trace decoding

def _topic_address(topic: str, log_index: int) -> str:
    body = topic[2:]
    if len(body) != 64 or body[:24] != "0" * 24:
        raise MalformedLogError(f"log {log_index}: topic is not a left-padded address: {topic}")
    return "0x" + body[24:]


def decode_transfer_logs(logs: list[RawLog]) -> list[TokenTransfer]:
    """Turn Transfer event logs into TokenTransfers; other logs are skipped.

    Three topics means ERC-20 (amount in data), four means ERC-721 (token id
    in the last topic). Anything else carrying the Transfer topic is malformed.
    """
    out: list[TokenTransfer] = []
    for raw in logs:
        if len(raw.topics) > 4:
            raise MalformedLogError(f"log {raw.log_index}: {len(raw.topics)} topics")
        if not raw.topics or raw.topics[0].lower() != TRANSFER_TOPIC:
            continue
        topics = [t.lower() for t in raw.topics]
        sender = _topic_address(topics[1], raw.log_index) if len(topics) > 1 else None
        receiver = _topic_address(topics[2], raw.log_index) if len(topics) > 2 else None
        data = (raw.data or "0x").lower()
        if len(topics) == 3:
            if len(data) != 66:
                raise MalformedLogError(f"log {raw.log_index}: erc20 Transfer needs 32 data bytes, got {data}")
            out.append(
                TokenTransfer(
                    token=raw.address.lower(),
                    standard=TokenStandard.ERC20,
                    sender=sender,
                    receiver=receiver,
                    amount=int(data, 16),
                    log_index=raw.log_index,
                )
            )
        elif len(topics) == 4:
            if data not in ("0x", ""):
                raise MalformedLogError(f"log {raw.log_index}: erc721 Transfer carries unexpected data")
            out.append(
                TokenTransfer(
                    token=raw.address.lower(),
                    standard=TokenStandard.ERC721,
                    sender=sender,
                    receiver=receiver,
                    amount=1,
                    log_index=raw.log_index,
                    token_id=int(topics[3], 16),
                )
            )
        else:
            raise MalformedLogError(f"log {raw.log_index}: Transfer topic with {len(topics)} topics")
    return out


def extract_native_transfers(root_call: CallNode, first_log_index: int = 0) -> list[TokenTransfer]:
    """One native transfer per value-bearing call, in depth-first order.

    Delegatecalls run in the caller's context and move no value of their own.
    """
    out = []
    for node in root_call.walk():
        if node.eth_value > 0 and node.call_kind in (CallKind.CALL, CallKind.CREATE):
            out.append(
                TokenTransfer(
                    token=NATIVE_TOKEN,
                    standard=TokenStandard.NATIVE,
                    sender=node.caller,
                    receiver=node.callee,
                    amount=node.eth_value,
                    log_index=first_log_index + len(out),
                )
            )
    return out


_CALL_TYPES = {
    "CALL": CallKind.CALL,
    "CALLCODE": CallKind.CALL,
    "DELEGATECALL": CallKind.DELEGATECALL,
    "STATICCALL": CallKind.STATICCALL,
    "CREATE": CallKind.CREATE,
    "CREATE2": CallKind.CREATE,
}


def call_from_tracer(frame: dict, path: tuple[int, ...] = ()) -> CallNode:
    """Convert a callTracer frame (hex quantities) into a CallNode tree."""
    input_data = (frame.get("input") or "0x").lower()
    if input_data == "0x":
        input_data = None
    return CallNode(
        caller=frame["from"].lower(),
        callee=(frame.get("to") or "0x" + "0" * 40).lower(),
        call_kind=_CALL_TYPES.get(frame.get("type", "CALL").upper(), CallKind.CALL),
        selector=input_data[:10] if input_data and len(input_data) >= 10 else None,
        input_data=input_data,
        eth_value=int(frame.get("value") or "0x0", 16),
        trace_path=path,
        children=tuple(call_from_tracer(c, path + (i,)) for i, c in enumerate(frame.get("calls") or [])),
    )


# --------------------------------------------------------------------------
# Live node

class RpcError(TxLensError):
    def __init__(self, code: int, message: str) -> None:
        super().__init__(f"rpc error {code}: {message}")
        self.code = code
        self.message = message


class RpcClient:
    """Minimal JSON-RPC over HTTP."""

    def __init__(self, url: str, client: httpx.Client | None = None, timeout: float = 30.0) -> None:
        self.url = url
        self._client = client or httpx.Client(timeout=timeout)
        self._next_id = 1

    def call(self, method: str, params: list) -> Any:
        body = {"jsonrpc": "2.0", "id": self._next_id, "method": method, "params": params}
        self._next_id += 1
        try:
            response = self._client.post(self.url, json=body)
            response.raise_for_status()
            payload = response.json()
        except (httpx.HTTPError, ValueError) as exc:
            raise NetworkError(f"{method}: {exc}") from exc
        if payload.get("error"):
            err = payload["error"]
            raise RpcError(int(err.get("code", 0)), str(err.get("message", "")))
        return payload.get("result")

    def eth_call(self, to: str, data: str, block: str) -> str:
        return self.call("eth_call", [{"to": to, "data": data}, block])


SYMBOL_CALL = "0x95d89b41"
DECIMALS_CALL = "0x313ce567"


def _decode_symbol(result: str | None) -> str | None:
    if not result or result == "0x":
        return None
    raw = bytes.fromhex(result[2:])
    try:
        if len(raw) >= 64:
            offset = int.from_bytes(raw[:32], "big")
            length = int.from_bytes(raw[offset : offset + 32], "big")
            text = raw[offset + 32 : offset + 32 + length].decode("utf-8")
        else:
            text = raw.rstrip(b"\x00").decode("utf-8")
    except (UnicodeDecodeError, ValueError):
        return None
    text = "".join(text.split())
    return text[:32] or None


def token_info(rpc: RpcClient, address: str, block: str, standard: TokenStandard) -> TokenInfo:
    try:
        symbol = _decode_symbol(rpc.eth_call(address, SYMBOL_CALL, block))
    except RpcError:
        symbol = None
    if symbol is None:
        symbol = "TKN-" + address[2:10]
    default_decimals = 0 if standard is TokenStandard.ERC721 else 18
    try:
        result = rpc.eth_call(address, DECIMALS_CALL, block)
        decimals = int(result, 16) if result and result != "0x" else None
    except (RpcError, ValueError):
        decimals = None
    if decimals is None or not 0 <= decimals <= 36:
        log.warning("token %s has no usable decimals(); defaulting to %d", address, default_decimals)
        decimals = default_decimals
    return TokenInfo(address=address, symbol=symbol, decimals=decimals)


def fetch_transaction(
    cfg: EndpointConfig, tx_hash: str, client: httpx.Client | None = None
) -> TransactionBundle:
    """Assemble a bundle from transaction, receipt, call trace and token metadata."""
    if cfg.offline:
        raise NetworkError("offline mode: refusing to contact the node")
    if not cfg.rpc_url:
        raise NetworkError(f"no RPC endpoint configured (set {ENV_RPC_URL})")
    tx_hash = tx_hash.lower()
    rpc = RpcClient(cfg.rpc_url, client, cfg.timeout)

    tx = rpc.call("eth_getTransactionByHash", [tx_hash])
    if tx is None:
        raise NotFoundError(f"transaction {tx_hash} not found")
    receipt = rpc.call("eth_getTransactionReceipt", [tx_hash])
    if receipt is None:
        raise NotFoundError(f"no receipt for {tx_hash}")
    block = rpc.call("eth_getBlockByNumber", [tx["blockNumber"], False])
    try:
        trace = rpc.call("debug_traceTransaction", [tx_hash, {"tracer": "callTracer"}])
    except RpcError as exc:
        raise TraceUnavailableError(f"node cannot trace {tx_hash}: {exc.message}") from exc
    if not trace:
        raise TraceUnavailableError(f"empty trace for {tx_hash}")

    root = call_from_tracer(trace)
    logs = [
        RawLog(
            address=entry["address"].lower(),
            topics=tuple(t.lower() for t in entry.get("topics", [])),
            data=entry.get("data", "0x"),
            log_index=int(entry["logIndex"], 16),
        )
        for entry in receipt.get("logs", [])
    ]
    transfers = decode_transfer_logs(logs)
    first_native = max((t.log_index for t in transfers), default=-1) + 1
    transfers += extract_native_transfers(root, first_native)

    tokens: dict[str, TokenInfo] = {}
    for t in transfers:
        if t.token in tokens:
            continue
        if t.standard is TokenStandard.NATIVE:
            tokens[t.token] = NATIVE_INFO
        else:
            tokens[t.token] = token_info(rpc, t.token, tx["blockNumber"], t.standard)

    to = tx.get("to")
    metadata = TxMetadata(
        hash=tx_hash,
        block_number=int(tx["blockNumber"], 16),
        timestamp=int(block["timestamp"], 16),
        sender=tx["from"].lower(),
        recipient=to.lower() if to else None,
        eth_value=int(tx.get("value") or "0x0", 16),
        status=TxStatus.SUCCESS if int(receipt.get("status", "0x1"), 16) == 1 else TxStatus.FAILURE,
    )
    bundle = normalize_bundle(
        TransactionBundle(metadata=metadata, root_call=root, transfers=tuple(transfers), tokens=tokens)
    )
    bundle.validate()
    return bundle
