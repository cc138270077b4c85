"""Collects one pass/fail line per acceptance criterion for the terminal summary."""

from __future__ import annotations

LINES: list[str] = []


def record(criterion: str, ok: bool, detail: str) -> bool:
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} {detail}"
    LINES.append(line)
    print(line)
    return ok
