"""Gold corpus loading, per-transaction scoring and report emission.

Only the action types, flow coverage and the auditor's grounding counts are
scored automatically. The prose step fields are shown side by side for
manual review.
"""

from __future__ import annotations

import json
import logging
import re
import typing
from collections.abc import Mapping
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from txlens.auditor import FinalExplanation
from txlens.errors import InvalidBundleError, MismatchedFixtureError, ParseError, SchemaError
from txlens.flows import MacroAction
from txlens.ingestion import load_fixture
from txlens.model import ActionType, EntryKind, TransactionBundle
from txlens.synthesizer import StepAnnotation

log = logging.getLogger(__name__)

FIXTURE_SUFFIX = ".fixture.json"
GOLD_SUFFIX = ".gold.json"
METRICS = ("action_type_accuracy", "flow_coverage", "number_grounding_rate", "entity_grounding_rate")
METRIC_NOTE = "automatic metrics defined by this tool: action types, flow coverage, number and entity grounding"


@dataclass(frozen=True)
class GoldAnnotation:
    fixture_path: str
    steps: tuple[StepAnnotation, ...]
    macro_actions: tuple[MacroAction, ...]
    summary: str

    def gold_types(self) -> dict[int, ActionType]:
        return {li: step.action_type for step in self.steps for li in step.flow_refs}


def sentence_count(text: str) -> int:
    return len(re.findall(r"[.!?](?=\s|$)", text.strip()))


def _require(doc: dict, key: str, kind: type, file: str) -> typing.Any:
    if key not in doc:
        raise SchemaError(file, key, "missing")
    value = doc[key]
    if not isinstance(value, kind):
        raise SchemaError(file, key, f"expected {kind.__name__}")
    return value


def _parse_step(doc: typing.Any, where: str, file: str) -> StepAnnotation:
    if not isinstance(doc, dict):
        raise SchemaError(file, where, "expected object")
    refs = _require(doc, "flowRefs", list, file)
    if not refs or not all(isinstance(r, int) and not isinstance(r, bool) for r in refs):
        raise SchemaError(file, f"{where}.flowRefs", "expected non-empty list of log indices")
    try:
        action = ActionType(_require(doc, "actionType", str, file))
    except ValueError:
        raise SchemaError(file, f"{where}.actionType", f"unknown action type {doc['actionType']!r}") from None
    texts = {}
    for key in ("intent", "mechanism", "result"):
        value = _require(doc, key, str, file)
        if not value.strip():
            raise SchemaError(file, f"{where}.{key}", "must not be empty")
        texts[key] = value
    pre = _require(doc, "preconditions", list, file)
    if not pre or not all(isinstance(p, str) and p.strip() for p in pre):
        raise SchemaError(file, f"{where}.preconditions", "expected non-empty list of strings")
    return StepAnnotation(tuple(refs), action, texts["intent"], texts["mechanism"], tuple(pre), texts["result"])


def _parse_macro(doc: typing.Any, where: str, file: str) -> MacroAction:
    if not isinstance(doc, dict):
        raise SchemaError(file, where, "expected object")
    try:
        return MacroAction(
            id=int(doc["id"]),
            kind=ActionType(doc["kind"]),
            member_flows=tuple(int(x) for x in doc["memberFlows"]),
            call_anchor=tuple(int(x) for x in doc.get("callAnchor", [])),
            aggregate_in={k: int(v) for k, v in doc.get("aggregateIn", {}).items()},
            aggregate_out={k: int(v) for k, v in doc.get("aggregateOut", {}).items()},
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(file, where, f"malformed macro action: {exc}") from None


def parse_gold(doc: typing.Any, file: str, bundle: TransactionBundle) -> GoldAnnotation:
    if not isinstance(doc, dict):
        raise SchemaError(file, "<root>", "expected object")
    fixture = _require(doc, "fixture", str, file)
    steps = tuple(_parse_step(s, f"steps[{i}]", file) for i, s in enumerate(_require(doc, "steps", list, file)))
    macros = tuple(
        _parse_macro(m, f"macroActions[{i}]", file) for i, m in enumerate(_require(doc, "macroActions", list, file))
    )
    summary = _require(doc, "summary", str, file)
    if not 2 <= sentence_count(summary) <= 3:
        raise SchemaError(file, "summary", f"expected 2-3 sentences, found {sentence_count(summary)}")
    valid = set(bundle.log_indices)
    for i, step in enumerate(steps):
        for ref in step.flow_refs:
            if ref not in valid:
                raise SchemaError(file, f"steps[{i}].flowRefs", f"log index {ref} is not in the fixture")
    for i, macro in enumerate(macros):
        for ref in macro.member_flows:
            if ref not in valid:
                raise SchemaError(file, f"macroActions[{i}].memberFlows", f"log index {ref} is not in the fixture")
    return GoldAnnotation(fixture, steps, macros, summary)


def load_corpus(directory: str | Path) -> list[tuple[TransactionBundle, GoldAnnotation]]:
    """Pairs ``<name>.fixture.json`` with ``<name>.gold.json``, sorted by name."""
    root = Path(directory)
    pairs = []
    for fixture_path in sorted(root.glob("*" + FIXTURE_SUFFIX)):
        name = fixture_path.name[: -len(FIXTURE_SUFFIX)]
        gold_path = root / (name + GOLD_SUFFIX)
        if not gold_path.exists():
            raise SchemaError(str(gold_path), "<file>", "missing gold annotation")
        try:
            bundle = load_fixture(fixture_path)
        except (ParseError, InvalidBundleError) as exc:
            raise SchemaError(str(fixture_path), getattr(exc, "field", "<file>") or "<file>", str(exc)) from exc
        try:
            doc = json.loads(gold_path.read_text(encoding="utf-8"))
        except ValueError as exc:
            raise SchemaError(str(gold_path), "<file>", f"invalid JSON: {exc}") from exc
        gold = parse_gold(doc, str(gold_path), bundle)
        if Path(gold.fixture_path).name != fixture_path.name:
            raise SchemaError(str(gold_path), "fixture", f"names {gold.fixture_path}, expected {fixture_path.name}")
        log.info("%s: %d token flows", name, len(bundle.transfers))
        pairs.append((bundle, replace_path(gold, str(fixture_path))))
    return pairs


def replace_path(gold: GoldAnnotation, path: str) -> GoldAnnotation:
    return GoldAnnotation(path, gold.steps, gold.macro_actions, gold.summary)


def score_action_types(pred: Mapping[int, ActionType], gold: GoldAnnotation) -> Fraction:
    expected = gold.gold_types()
    if not expected:
        return Fraction(1)
    hits = sum(1 for li, kind in expected.items() if li in pred and ActionType(pred[li]) is kind)
    return Fraction(hits, len(expected))


@dataclass(frozen=True)
class EvalRow:
    tx: str
    action_type_accuracy: Fraction
    flow_coverage: Fraction
    number_grounding_rate: Fraction
    entity_grounding_rate: Fraction
    audit_verdict: str
    name: str = ""
    flags: tuple[str, ...] = ()
    flows: int = 0


@dataclass(frozen=True)
class EvalReport:
    per_tx: tuple[EvalRow, ...]
    aggregate: dict[str, typing.Any] = field(default_factory=dict)


def _rate(checked: int, violated: int) -> Fraction:
    return Fraction(1) if checked == 0 else Fraction(checked - violated, checked)


def score_explanation(final: FinalExplanation, gold: GoldAnnotation) -> EvalRow:
    bundle = final.board.bundle
    gold_refs = {li for s in gold.steps for li in s.flow_refs} | {li for m in gold.macro_actions for li in m.member_flows}
    if gold.fixture_path and Path(gold.fixture_path).exists():
        gold_hash = load_fixture(gold.fixture_path).metadata.hash
        if gold_hash != bundle.metadata.hash:
            raise MismatchedFixtureError(f"gold annotation is for {gold_hash}, explanation for {bundle.metadata.hash}")
    if not gold_refs <= set(bundle.log_indices):
        raise MismatchedFixtureError("gold annotation references flows absent from the explained transaction")
    hyp = final.board.latest(EntryKind.HYPOTHESIS).payload
    total = bundle.log_indices
    covered = {li for s in final.draft.steps for li in s.flow_refs}
    report = final.report
    return EvalRow(
        tx=bundle.metadata.hash,
        action_type_accuracy=score_action_types(hyp.classified_flows, gold),
        flow_coverage=Fraction(len(covered & set(total)), len(total)) if total else Fraction(1),
        number_grounding_rate=_rate(report.numbers_checked, report.numbers_violated),
        entity_grounding_rate=_rate(report.entities_checked, report.entities_violated),
        audit_verdict=report.verdict.value,
        name=Path(gold.fixture_path).name[: -len(FIXTURE_SUFFIX)] if gold.fixture_path.endswith(FIXTURE_SUFFIX) else "",
        flags=tuple(sorted({f.kind.value for f in hyp.flags})),
        flows=len(total),
    )


def aggregate(rows: typing.Sequence[EvalRow]) -> dict[str, typing.Any]:
    out: dict[str, typing.Any] = {}
    for metric in METRICS:
        values = [getattr(r, metric) for r in rows]
        out[metric] = sum(values, Fraction(0)) / len(values) if values else None
    verdicts: dict[str, int] = {}
    for r in rows:
        verdicts[r.audit_verdict] = verdicts.get(r.audit_verdict, 0) + 1
    out["verdicts"] = dict(sorted(verdicts.items()))
    return out


def build_report(rows: typing.Sequence[EvalRow]) -> EvalReport:
    return EvalReport(tuple(rows), aggregate(rows))


def _num(value: Fraction | None) -> float | None:
    return None if value is None else float(value)


def _exact(value: Fraction | None) -> str | None:
    return None if value is None else str(value)


def emit_report(report: EvalReport, fmt: str = "json") -> str:
    if fmt == "json":
        doc = {
            "metrics": METRIC_NOTE,
            "perTx": [
                {
                    "tx": r.tx,
                    "name": r.name,
                    **{m: _num(getattr(r, m)) for m in METRICS},
                    "exact": {m: _exact(getattr(r, m)) for m in METRICS},
                    "auditVerdict": r.audit_verdict,
                    "flags": list(r.flags),
                    "flows": r.flows,
                }
                for r in report.per_tx
            ],
            "aggregate": {
                **{m: _num(report.aggregate.get(m)) for m in METRICS},
                "exact": {m: _exact(report.aggregate.get(m)) for m in METRICS},
                "verdicts": report.aggregate.get("verdicts", {}),
            },
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if fmt == "text":
        header = ("name", "flows", "types", "coverage", "numbers", "entities", "verdict")
        rows = [header]
        for r in report.per_tx:
            rows.append(
                (
                    r.name or "-",
                    str(r.flows),
                    *(f"{float(getattr(r, m)):.3f}" for m in METRICS),
                    r.audit_verdict,
                )
            )
        widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
        if report.per_tx:
            agg = report.aggregate
            means = "  ".join(f"{m}={float(agg[m]):.3f}" for m in METRICS)
            counts = " ".join(f"{k}={v}" for k, v in agg["verdicts"].items())
            lines.append(f"mean: {means}  verdicts: {counts}")
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")


def comparison_view(final: FinalExplanation, gold: GoldAnnotation) -> str:
    """Predicted and gold step prose side by side, for manual review."""
    lines = [f"# {final.board.bundle.metadata.hash}", f"gold summary: {gold.summary}", f"pred summary: {final.draft.summary_text()}"]
    for i, step in enumerate(final.draft.steps):
        match = next((g for g in gold.steps if set(g.flow_refs) & set(step.flow_refs)), None)
        for attr in ("intent", "mechanism", "result"):
            lines.append(f"step {i} {attr}: pred={getattr(step, attr)!r} gold={getattr(match, attr, None)!r}")
    return "\n".join(lines) + "\n"
