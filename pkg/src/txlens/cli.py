"""Command-line entry point: ``txlens decode|profile|explain|eval``."""

from __future__ import annotations

import argparse
import json
import logging
import shlex
import sys
from pathlib import Path

from txlens.auditor import PipelineConfig, Verdict, render_json, render_text, run_pipeline
from txlens.errors import TxLensError
from txlens.flows import GROUPING_RULE, build_flow_graph, compute_net_balances, group_macro_actions
from txlens.harness import build_report, emit_report, load_corpus, score_explanation
from txlens.ingestion import EndpointConfig, fetch_transaction, load_fixture
from txlens.knowledge import CardStore, SelectorDB
from txlens.model import EvidenceBoard, HASH_RE, TransactionBundle, to_wire
from txlens.profiler import profile
from txlens.synthesizer import Backend, BackendConfig

EXIT_PASS, EXIT_ERROR, EXIT_UNRESOLVED = 0, 1, 2


def _load(target: str, offline: bool) -> TransactionBundle:
    if HASH_RE.match(target.lower()) and not Path(target).exists():
        return fetch_transaction(EndpointConfig.from_env(offline=offline), target)
    return load_fixture(target)


def _store(cards: str | None) -> CardStore:
    store = CardStore.builtin()
    if cards:
        store.load_dir(cards)
    return store


def _backend(args: argparse.Namespace) -> BackendConfig:
    kind = Backend(args.backend)
    command = tuple(shlex.split(args.backend_cmd)) if args.backend_cmd else None
    if kind is Backend.EXTERNAL and not (command or args.backend_url):
        raise TxLensError("external backend needs --backend-cmd or --backend-url")
    return BackendConfig(kind=kind, command=command, url=args.backend_url)


def _pipeline_cfg(args: argparse.Namespace) -> PipelineConfig:
    return PipelineConfig(
        backend=_backend(args),
        max_refine=args.max_refine,
        endpoint=EndpointConfig.from_env(offline=args.offline),
        cache_dir=args.cache_dir,
        cards_dir=args.cards,
        refresh=args.refresh,
    )


def _write(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_decode(args: argparse.Namespace) -> int:
    bundle = _load(args.target, args.offline)
    board = EvidenceBoard.new(bundle)
    hyp = profile(board, SelectorDB.builtin(), _store(args.cards))
    graph = build_flow_graph(bundle)
    macros = group_macro_actions(bundle, graph, hyp.classified_flows)
    doc = {
        "groupingRule": GROUPING_RULE,
        "edges": to_wire(list(graph.edges)),
        "macroActions": to_wire(macros),
        "netBalances": [
            {"holder": nb.holder, "token": nb.token, "delta": str(nb.delta)}
            for nb in compute_net_balances(bundle.transfers, bundle.user)
        ],
    }
    _write(json.dumps(doc, indent=2, sort_keys=True) + "\n", None)
    return EXIT_PASS


def cmd_profile(args: argparse.Namespace) -> int:
    board = EvidenceBoard.new(_load(args.target, args.offline))
    hyp = profile(board, SelectorDB.builtin(), _store(args.cards))
    _write(json.dumps(to_wire(hyp), indent=2, sort_keys=True) + "\n", None)
    return EXIT_PASS


def cmd_explain(args: argparse.Namespace) -> int:
    final = run_pipeline(_load(args.target, args.offline), _pipeline_cfg(args))
    if args.dump_board:
        Path(args.dump_board).write_text(final.board.dumps(), encoding="utf-8")
    _write(render_json(final) if args.format == "json" else render_text(final), None)
    return EXIT_PASS if final.report.verdict is Verdict.PASS else EXIT_UNRESOLVED


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _pipeline_cfg(args)
    rows = []
    for bundle, gold in load_corpus(args.directory):
        rows.append(score_explanation(run_pipeline(bundle, cfg), gold))
    _write(emit_report(build_report(rows), args.format), args.out)
    return EXIT_PASS


def _pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", choices=[b.value for b in Backend], default="template")
    p.add_argument("--backend-cmd", help="command for the external backend (stdin/stdout JSON)")
    p.add_argument("--backend-url", help="HTTP endpoint for the external backend")
    p.add_argument("--max-refine", type=int, default=3, help="maximum audit rounds (default 3)")
    p.add_argument("--cache-dir", default=".txlens-cache", help="explorer response cache")
    p.add_argument("--refresh", action="store_true", help="ignore cached explorer responses")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="txlens", description="Explain Ethereum transactions from their traces.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, func, helptext in (
        ("decode", cmd_decode, "flow graph, macro-actions and net balances"),
        ("profile", cmd_profile, "rule-based classification and uncertainty flags"),
        ("explain", cmd_explain, "audited natural-language explanation"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("target", help="fixture path or transaction hash")
        p.add_argument("--offline", action="store_true", help="never touch the network")
        p.add_argument("--cards", help="extra directory of knowledge cards")
        p.set_defaults(func=func)
        if name == "explain":
            _pipeline_flags(p)
            p.add_argument("--format", choices=["text", "json"], default="text")
            p.add_argument("--dump-board", help="write the evidence board JSON here")

    p = sub.add_parser("eval", help="score the pipeline on a gold corpus")
    p.add_argument("directory")
    p.add_argument("--offline", action="store_true")
    p.add_argument("--cards")
    p.add_argument("--format", choices=["json", "text"], default="json")
    p.add_argument("--out")
    _pipeline_flags(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (TxLensError, OSError) as exc:
        print(f"txlens: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
