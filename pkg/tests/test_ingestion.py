from __future__ import annotations

import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from fake_chain import BLOCK, ROUTER, TX, USDC, USER, WETH, FakeChain, topic_addr, word
from keccak_oracle import keccak256
from txlens.errors import MalformedLogError, NetworkError, NotFoundError, ParseError, TraceUnavailableError, ValidationError
from txlens.flows import compute_net_balances
from txlens.ingestion import (
    TRANSFER_TOPIC,
    EndpointConfig,
    RawLog,
    RpcClient,
    decode_transfer_logs,
    dump_fixture,
    extract_native_transfers,
    load_fixture,
    parse_fixture,
)
from txlens.model import NATIVE_TOKEN, CallKind, CallNode, TokenStandard


def test_transfer_topic_matches_oracle():
    assert TRANSFER_TOPIC == "0x" + keccak256(b"Transfer(address,address,uint256)").hex()


def test_case_study_fixture(fixtures_dir):
    bundle = load_fixture(fixtures_dir / "case_study.fixture.json")
    assert len(bundle.transfers) == 3
    parties = {a for t in bundle.transfers for a in (t.sender, t.receiver)}
    assert len(parties) == 4


def test_transfers_resorted(fixtures_dir):
    doc = json.loads((fixtures_dir / "case_study.fixture.json").read_text())
    doc["transfers"].reverse()
    bundle = parse_fixture(json.dumps(doc))
    assert [t.log_index for t in bundle.transfers] == [0, 1, 2]


def test_missing_token_entry_is_validation_error(fixtures_dir):
    doc = json.loads((fixtures_dir / "case_study.fixture.json").read_text())
    del doc["tokens"][USDC]
    with pytest.raises(ValidationError):
        parse_fixture(json.dumps(doc))


def test_bad_json_reports_position():
    with pytest.raises(ParseError) as err:
        parse_fixture('{"metadata": ')
    assert "line" in err.value.position


def test_fixture_determinism(fixtures_dir):
    raw = (fixtures_dir / "wrap.fixture.json").read_bytes()
    assert dump_fixture(parse_fixture(raw)) == dump_fixture(parse_fixture(raw))


def _log(topics, data, li=0, address=USDC):
    return RawLog(address, tuple(topics), data, li)


def test_decode_erc20():
    [t] = decode_transfer_logs([_log([TRANSFER_TOPIC, topic_addr(USER), topic_addr(ROUTER)], "0x" + word(2_500_000_000))])
    assert t.standard is TokenStandard.ERC20 and t.amount == 2_500_000_000
    assert (t.sender, t.receiver) == (USER, ROUTER)


def test_decode_erc721():
    [t] = decode_transfer_logs([_log([TRANSFER_TOPIC, topic_addr(USER), topic_addr(ROUTER), "0x" + word(77)], "0x")])
    assert t.standard is TokenStandard.ERC721 and t.token_id == 77 and t.amount == 1


def test_decode_skips_other_topics():
    assert decode_transfer_logs([_log(["0x" + "12" * 32], "0x")]) == []
    assert decode_transfer_logs([_log([], "0x")]) == []


@pytest.mark.parametrize(
    "topics,data",
    [
        ([TRANSFER_TOPIC, topic_addr(USER)], "0x"),
        ([TRANSFER_TOPIC, topic_addr(USER), topic_addr(ROUTER)], "0x1234"),
        ([TRANSFER_TOPIC, "0x" + "ff" * 32, topic_addr(ROUTER)], "0x" + word(1)),
    ],
)
def test_decode_malformed(topics, data):
    with pytest.raises(MalformedLogError):
        decode_transfer_logs([_log(topics, data)])


@given(st.lists(st.binary(min_size=32, max_size=32), max_size=4), st.binary(max_size=64))
def test_decoding_total_on_foreign_logs(topics, data):
    hexed = ["0x" + t.hex() for t in topics]
    if hexed and hexed[0] == TRANSFER_TOPIC:
        return
    assert decode_transfer_logs([_log(hexed, "0x" + data.hex())]) == []


def node(value=0, children=(), caller=USER, callee=ROUTER, path=()):
    return CallNode(caller, callee, CallKind.CALL, None, None, value, path, tuple(children))


def test_native_zero_case():
    assert extract_native_transfers(node()) == []


def test_native_root_value():
    [t] = extract_native_transfers(node(24_700_000_000_000_000))
    assert t.token == NATIVE_TOKEN and t.amount == 24_700_000_000_000_000


def test_native_nested_among_zero_siblings():
    kids = [node(path=(0,)), node(5, path=(1,), caller=ROUTER, callee=WETH), node(path=(2,))]
    out = extract_native_transfers(node(children=kids), first_log_index=7)
    assert [(t.sender, t.receiver, t.amount, t.log_index) for t in out] == [(ROUTER, WETH, 5, 7)]


def test_fetch_offline_refuses_before_io():
    chain = FakeChain()
    with pytest.raises(NetworkError):
        from txlens.ingestion import fetch_transaction

        fetch_transaction(EndpointConfig(rpc_url="http://node", offline=True), TX, chain.client())
    assert chain.requests == []


def test_fetch_unknown_hash():
    from txlens.ingestion import fetch_transaction

    with pytest.raises(NotFoundError):
        fetch_transaction(EndpointConfig(rpc_url="http://node"), "0x" + "00" * 32, FakeChain().client())


def test_fetch_trace_unavailable():
    from txlens.ingestion import fetch_transaction

    with pytest.raises(TraceUnavailableError):
        fetch_transaction(EndpointConfig(rpc_url="http://node"), TX, FakeChain(trace_error=True).client())


def test_fetch_matches_balance_diffs():
    from txlens.ingestion import fetch_transaction

    chain = FakeChain()
    client = chain.client()
    bundle = fetch_transaction(EndpointConfig(rpc_url="http://node"), TX, client)
    assert bundle.tokens[USDC].symbol == "USDC" and bundle.tokens[USDC].decimals == 6
    assert [t.log_index for t in bundle.transfers] == [4, 6, 7]
    assert bundle.transfers[-1].standard is TokenStandard.NATIVE
    rpc = RpcClient("http://node", client)
    for token in (USDC, WETH):
        data = "0x70a08231" + word(int(USER, 16))
        after = int(rpc.eth_call(token, data, hex(BLOCK)), 16)
        before = int(rpc.eth_call(token, data, hex(BLOCK - 1)), 16)
        recomputed = {nb.token: nb.delta for nb in compute_net_balances(bundle.transfers, USER)}
        assert recomputed[token] == after - before


def test_token_info_fallbacks():
    from txlens.ingestion import token_info

    rpc = RpcClient("http://node", FakeChain().client())
    odd = "0x00000000000000000000000000000000000000ad"
    info = token_info(rpc, odd, hex(BLOCK), TokenStandard.ERC20)
    assert info.symbol == "TKN-00000000" and info.decimals == 18
    assert token_info(rpc, odd, hex(BLOCK), TokenStandard.ERC721).decimals == 0
