"""Keccak-256 helpers for selectors and event topics."""

from __future__ import annotations

from Crypto.Hash import keccak


def keccak256(data: bytes) -> bytes:
    return keccak.new(data=data, digest_bits=256).digest()


def selector_of(signature: str) -> str:
    """``0x``-prefixed first 4 bytes of keccak-256 over the ASCII signature."""
    return "0x" + keccak256(signature.encode("ascii"))[:4].hex()


def topic_of(signature: str) -> str:
    return "0x" + keccak256(signature.encode("ascii")).hex()
