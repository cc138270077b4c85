"""Selector database, knowledge cards, explorer ABI retrieval and caching.

This is everything the Investigator stage draws on to turn an uncertainty
flag into a citable knowledge patch.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import re
import tempfile
import time
from collections.abc import Callable, Iterable
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import httpx

from txlens.errors import (
    MalformedSignatureError,
    NetworkError,
    PreconditionError,
    RateLimitedError,
    TxLensError,
    UnverifiedContractError,
)
from txlens.hashing import selector_of
from txlens.ingestion import EndpointConfig
from txlens.model import EntryKind, EvidenceBoard, Stage, is_address

log = logging.getLogger(__name__)

DEFAULT_EXPLORER_URL = "https://api.etherscan.io/api"

_IDENT = r"[A-Za-z_$][A-Za-z0-9_$]*"
_TYPE_CHARS = re.compile(r"^[A-Za-z0-9_$\[\](),]*$")


class SelectorSource(str, enum.Enum):
    BUILTIN = "builtin"
    EXPLORER = "explorer"
    USER = "user"


class CardKind(str, enum.Enum):
    ROUTER = "router"
    POOL = "pool"
    TOKEN = "token"
    LENDING_POOL = "lending_pool"
    VAULT = "vault"
    STAKING = "staking"
    UNKNOWN = "unknown"


class PatchSource(str, enum.Enum):
    SELECTOR_DB = "selector_db"
    EXPLORER_ABI = "explorer_abi"
    KNOWLEDGE_CARD = "knowledge_card"


@dataclass(frozen=True)
class SelectorEntry:
    selector: str
    canonical_signature: str
    human_name: str
    source: SelectorSource

    @property
    def function_name(self) -> str:
        return self.canonical_signature.split("(", 1)[0]


@dataclass(frozen=True)
class KnowledgeCard:
    address: str
    name: str
    protocol: str
    kind: CardKind
    notes: str
    source_label: str


@dataclass(frozen=True)
class KnowledgePatch:
    subject: str
    claim: str
    structured: SelectorEntry | KnowledgeCard | None
    source: PatchSource
    source_label: str
    retrieved_at: int


UNRESOLVED = "unresolved"


def is_canonical_signature(signature: str) -> bool:
    m = re.fullmatch(rf"({_IDENT})\((.*)\)", signature)
    if not m or not _TYPE_CHARS.match(m.group(2)):
        return False
    depth = 0
    prev = "("
    for ch in m.group(2):
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
            if depth < 0 or prev == ",":
                return False
        elif ch == "," and prev in "(,":
            return False
        prev = ch
    return depth == 0 and prev != ","


def human_name(signature: str) -> str:
    """``swapExactTokensForTokens(...)`` -> ``swap exact tokens for tokens``."""
    name = signature.split("(", 1)[0]
    words = re.findall(r"[A-Z]+(?![a-z])|[A-Z]?[a-z]+|\d+", name)
    return " ".join(w.lower() for w in words) or name


class SelectorDB:
    """Selector -> signature registry. Every entry is keccak-checked on insert."""

    def __init__(self) -> None:
        self._entries: dict[str, list[SelectorEntry]] = {}
        self.conflicts: list[tuple[SelectorEntry, SelectorEntry]] = []

    def __len__(self) -> int:
        return sum(len(v) for v in self._entries.values())

    def __contains__(self, selector: str) -> bool:
        return selector.lower() in self._entries

    def entries(self) -> list[SelectorEntry]:
        return [e for _, group in sorted(self._entries.items()) for e in group]

    def lookup(self, selector: str) -> SelectorEntry | None:
        group = self._entries.get(selector.lower())
        return group[0] if group else None

    def register(
        self, canonical_signature: str, human: str | None = None, source: SelectorSource = SelectorSource.USER
    ) -> SelectorEntry:
        if not is_canonical_signature(canonical_signature):
            raise MalformedSignatureError(f"not a canonical signature: {canonical_signature!r}")
        entry = SelectorEntry(
            selector=selector_of(canonical_signature),
            canonical_signature=canonical_signature,
            human_name=human or human_name(canonical_signature),
            source=SelectorSource(source),
        )
        group = self._entries.setdefault(entry.selector, [])
        for existing in group:
            if existing.canonical_signature == canonical_signature:
                return existing
        if group:
            # Both stay registered; lookups keep answering with the first.
            self.conflicts.append((group[0], entry))
            log.warning("selector conflict %s: %s vs %s", entry.selector, group[0].canonical_signature, canonical_signature)
        group.append(entry)
        return entry

    def load_lines(self, lines: Iterable[str], source: SelectorSource) -> None:
        for line in lines:
            line = line.split("#", 1)[0].strip()
            if line:
                self.register(line, source=source)

    @classmethod
    def builtin(cls) -> SelectorDB:
        db = cls()
        text = resources.files("txlens").joinpath("data/signatures.txt").read_text(encoding="utf-8")
        db.load_lines(text.splitlines(), SelectorSource.BUILTIN)
        return db


def selector_lookup(db: SelectorDB, selector: str) -> SelectorEntry | None:
    return db.lookup(selector)


def selector_register(db: SelectorDB, canonical_signature: str, human: str, source: SelectorSource) -> SelectorEntry:
    return db.register(canonical_signature, human, source)


# --------------------------------------------------------------------------
# Knowledge cards

def card_from_json(doc: dict) -> KnowledgeCard:
    return KnowledgeCard(
        address=doc["address"].lower(),
        name=doc["name"],
        protocol=doc["protocol"],
        kind=CardKind(doc["kind"]),
        notes=doc.get("notes", ""),
        source_label=doc["sourceLabel"],
    )


class CardStore:
    """Curated protocol cards, one JSON file per address."""

    def __init__(self, cards: Iterable[KnowledgeCard] = ()) -> None:
        self._cards: dict[str, KnowledgeCard] = {}
        for card in cards:
            self.add(card)

    def add(self, card: KnowledgeCard) -> None:
        if not is_address(card.address):
            raise ValueError(f"bad card address {card.address!r}")
        if card.address in self._cards and self._cards[card.address] != card:
            raise ValueError(f"two different cards for {card.address}")
        self._cards[card.address] = card

    def lookup(self, address: str) -> KnowledgeCard | None:
        return self._cards.get(address.lower())

    def __len__(self) -> int:
        return len(self._cards)

    def __iter__(self):
        return iter(sorted(self._cards.values(), key=lambda c: c.address))

    def load_dir(self, directory: str | os.PathLike[str]) -> None:
        for path in sorted(Path(directory).glob("*.json")):
            self.add(card_from_json(json.loads(path.read_text(encoding="utf-8"))))

    @classmethod
    def builtin(cls) -> CardStore:
        store = cls()
        folder = resources.files("txlens").joinpath("data/cards")
        for item in sorted(folder.iterdir(), key=lambda p: p.name):
            if item.name.endswith(".json"):
                store.add(card_from_json(json.loads(item.read_text(encoding="utf-8"))))
        return store


def card_lookup(store: CardStore, address: str) -> KnowledgeCard | None:
    return store.lookup(address)


# --------------------------------------------------------------------------
# Response cache

class ResponseCache:
    """One JSON file per request key, named by the key's sha-256.

    Entries never expire; ``refresh`` makes reads miss so callers refetch.
    Writes go through a temp file and an atomic rename.
    """

    def __init__(self, directory: str | os.PathLike[str], refresh: bool = False) -> None:
        self.directory = Path(directory)
        self.refresh = refresh

    def path_for(self, key: str) -> Path:
        return self.directory / (hashlib.sha256(key.encode("utf-8")).hexdigest() + ".json")

    def get(self, key: str) -> tuple[int, Any] | None:
        if self.refresh:
            return None
        path = self.path_for(key)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, ValueError):
            return None
        if doc.get("key") != key:
            return None
        return int(doc["retrievedAt"]), doc["body"]

    def put(self, key: str, body: Any, retrieved_at: int | None = None) -> int:
        retrieved_at = int(time.time()) if retrieved_at is None else retrieved_at
        self.directory.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump({"key": key, "retrievedAt": retrieved_at, "body": body}, fh, sort_keys=True)
            os.replace(tmp, self.path_for(key))
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise
        return retrieved_at


# --------------------------------------------------------------------------
# Explorer ABI retrieval

def _canonical_type(param: dict) -> str:
    typ = param["type"]
    if typ.startswith("tuple"):
        inner = ",".join(_canonical_type(c) for c in param.get("components", []))
        return f"({inner}){typ[len('tuple'):]}"
    m = re.fullmatch(r"(u?int|fixed|ufixed)((?:\[\d*\])*)", typ)
    if m:
        base = {"uint": "uint256", "int": "int256", "fixed": "fixed128x18", "ufixed": "ufixed128x18"}[m.group(1)]
        return base + m.group(2)
    return typ


def abi_signatures(abi: list[dict]) -> list[str]:
    out = []
    for item in abi:
        if item.get("type", "function") != "function" or "name" not in item:
            continue
        args = ",".join(_canonical_type(p) for p in item.get("inputs", []))
        out.append(f"{item['name']}({args})")
    return out


RATE_LIMIT_RETRIES = 2
RATE_LIMIT_SPACING = 1.0


def _explorer_get(cfg: EndpointConfig, address: str, client: httpx.Client | None) -> dict:
    params = {"module": "contract", "action": "getabi", "address": address}
    if cfg.explorer_api_key:
        params["apikey"] = cfg.explorer_api_key
    http = client or httpx.Client(timeout=cfg.timeout)
    try:
        response = http.get(cfg.explorer_api_url or DEFAULT_EXPLORER_URL, params=params)
    except httpx.HTTPError as exc:
        raise NetworkError(f"explorer request failed: {exc}") from exc
    if response.status_code == 429:
        raise RateLimitedError("explorer returned HTTP 429")
    try:
        response.raise_for_status()
        return response.json()
    except (httpx.HTTPError, ValueError) as exc:
        raise NetworkError(f"explorer response unusable: {exc}") from exc


def fetch_abi(
    cfg: EndpointConfig,
    cache: ResponseCache,
    address: str,
    db: SelectorDB | None = None,
    client: httpx.Client | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> list[SelectorEntry]:
    """Function selectors of a verified contract, via cache or explorer."""
    address = address.lower()
    key = f"abi:{address}"
    hit = cache.get(key)
    if hit is not None:
        abi_text = hit[1]
    else:
        if cfg.offline:
            raise NetworkError(f"offline and no cached ABI for {address}")
        attempt = 0
        while True:
            try:
                doc = _explorer_get(cfg, address, client)
                result = str(doc.get("result", ""))
                if str(doc.get("status")) == "1":
                    break
                if "rate limit" in result.lower():
                    raise RateLimitedError(result)
                if "not verified" in result.lower():
                    raise UnverifiedContractError(f"{address}: {result}")
                raise NetworkError(f"explorer error for {address}: {doc.get('message')} {result}")
            except RateLimitedError:
                if attempt >= RATE_LIMIT_RETRIES:
                    raise
                attempt += 1
                sleep(RATE_LIMIT_SPACING)
        abi_text = doc["result"]
        cache.put(key, abi_text)
    try:
        abi = json.loads(abi_text)
    except ValueError as exc:
        raise NetworkError(f"explorer returned an unparseable ABI for {address}") from exc
    registry = db if db is not None else SelectorDB()
    return [registry.register(sig, source=SelectorSource.EXPLORER) for sig in abi_signatures(abi)]


def abi_retrieved_at(cache: ResponseCache, address: str) -> int | None:
    hit = cache.get(f"abi:{address.lower()}")
    return None if hit is None else hit[0]


# --------------------------------------------------------------------------
# Investigator

def _card_patch(card: KnowledgeCard, now: int) -> KnowledgePatch:
    return KnowledgePatch(
        subject=card.address,
        claim=f"{card.address} is {card.name} ({card.protocol} {card.kind.value})",
        structured=card,
        source=PatchSource.KNOWLEDGE_CARD,
        source_label=card.source_label,
        retrieved_at=now,
    )


def _unresolved(subject: str, source: PatchSource, now: int) -> KnowledgePatch:
    return KnowledgePatch(subject, UNRESOLVED, None, source, "none", now)


def investigate(
    board: EvidenceBoard,
    flags: list,
    cfg: EndpointConfig,
    db: SelectorDB,
    store: CardStore,
    cache: ResponseCache,
    client: httpx.Client | None = None,
    clock: Callable[[], float] = time.time,
    sleep: Callable[[float], None] = time.sleep,
) -> list[KnowledgePatch]:
    """Resolve each uncertainty flag into a knowledge patch on the board.

    Retrieval failures never raise; they leave an ``unresolved`` patch.
    """
    hyp = board.latest(EntryKind.HYPOTHESIS)
    known = list(hyp.payload.flags) if hyp is not None else []
    for flag in flags:
        if flag not in known:
            raise PreconditionError(f"flag {flag.kind.value} on {flag.subject} is not from this board's profiler")

    bundle = board.bundle
    patches: list[KnowledgePatch] = []
    for flag in flags:
        now = int(clock())
        kind = getattr(flag.kind, "value", flag.kind)
        patch: KnowledgePatch | None = None
        if kind == "unknown_selector":
            entry = db.lookup(flag.subject)
            if entry is not None:
                patch = KnowledgePatch(
                    flag.subject,
                    f"decodes to {entry.canonical_signature}",
                    entry,
                    PatchSource.SELECTOR_DB,
                    "selector database" if entry.source is SelectorSource.BUILTIN else f"selector database ({entry.source.value})",
                    now,
                )
            else:
                call = bundle.root_call.find(tuple(flag.trace_path or ()))
                patch = _abi_patch(cfg, cache, db, store, client, sleep, call.callee if call else None, flag.subject, now)
        elif kind == "unverified_contract":
            card = store.lookup(flag.subject)
            if card is not None:
                patch = _card_patch(card, now)
            else:
                patch = _abi_patch(cfg, cache, db, store, client, sleep, flag.subject, None, now)
        elif kind == "unmatched_transfer":
            card = store.lookup(flag.subject) if is_address(flag.subject) else None
            patch = _card_patch(card, now) if card else _unresolved(flag.subject, PatchSource.KNOWLEDGE_CARD, now)
        if patch is None:
            patch = _unresolved(flag.subject, PatchSource.KNOWLEDGE_CARD, now)
        board.append(EntryKind.PATCH, patch, Stage.INVESTIGATOR, patch.source_label)
        patches.append(patch)
    return patches


def _abi_patch(
    cfg: EndpointConfig,
    cache: ResponseCache,
    db: SelectorDB,
    store: CardStore,
    client: httpx.Client | None,
    sleep: Callable[[float], None],
    address: str | None,
    selector: str | None,
    now: int,
) -> KnowledgePatch:
    subject = selector or address or ""
    if address is None:
        return _unresolved(subject, PatchSource.EXPLORER_ABI, now)
    try:
        entries = fetch_abi(cfg, cache, address, db, client, sleep)
    except TxLensError as exc:
        log.info("ABI retrieval for %s degraded to unresolved: %s", address, exc)
        return _unresolved(subject, PatchSource.EXPLORER_ABI, now)
    retrieved = abi_retrieved_at(cache, address) or now
    card = store.lookup(address)
    label = f"{card.name if card else address} ABI, explorer"
    if selector is not None:
        match = next((e for e in entries if e.selector == selector), None)
        if match is None:
            return _unresolved(subject, PatchSource.EXPLORER_ABI, retrieved)
        return KnowledgePatch(selector, f"decodes to {match.canonical_signature}", match, PatchSource.EXPLORER_ABI, label, retrieved)
    names = ", ".join(sorted({e.function_name for e in entries}))
    return KnowledgePatch(
        address, f"verified contract exposing {names}", None, PatchSource.EXPLORER_ABI, label, retrieved
    )

