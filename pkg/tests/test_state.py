from __future__ import annotations

import io
import random

import pytest
from hypothesis import given, settings, strategies as st

from conftest import build_fig5_state, ix
from mptlab.keys import account_indexing, mapping_slot, storage_indexing
from mptlab.state import (
    TRANSFER_GAS,
    Account,
    InsufficientBalance,
    LeafRef,
    NodeCache,
    TouchReport,
    TraceRecord,
    UnknownAccount,
    UnknownContract,
    WorldState,
    read_trace,
    replay,
    write_trace,
)


def path_union(trie, keys):
    """Distinct nodes on the root-to-leaf paths of ``keys``."""
    return len({id(n) for k in keys for n in trie.traverse_nodes(k)})


def test_fig5_gas_flaw(fig5_state):
    s = fig5_state
    src, a, b = ix("aab3e"), ix("acd3f"), ix("abc6d")
    assert s.state_trie.depth_of(src) == 5
    tx1 = s.apply_transfer(src, a, 1)
    assert tx1.gas_charged == TRANSFER_GAS
    assert tx1.op1_nodes_updated == 6 == path_union(s.state_trie, [src, a])
    tx2 = s.apply_transfer(src, b, 1)
    assert tx2.gas_charged == TRANSFER_GAS
    assert tx2.op1_nodes_updated == 9 == path_union(s.state_trie, [src, b])
    assert tx2.op2_hashes_recomputed == tx2.op1_nodes_updated


def test_fig5_replay_totals(fig5_state):
    trace = [
        TraceRecord("transfer", ix("aab3e"), ix("acd3f"), None, 1, 0),
        TraceRecord("transfer", ix("aab3e"), ix("abc6d"), None, 1, 0),
    ]
    result = replay(fig5_state, trace)
    assert result.total.op1_nodes_updated == 15
    assert result.total.gas_charged == 42_000
    assert result.total.transactions == 2
    assert len(result.blocks) == 1 and not result.rejected


def test_account_encoding_round_trip():
    acc = Account(balance=12345, nonce=7)
    assert Account.decode(acc.encode()) == acc
    with pytest.raises(ValueError):
        Account.decode(b"\x00" * 10)


def test_leafref_label_round_trip():
    leaf = LeafRef(ix("ab"), ix("cd"))
    assert LeafRef.parse(leaf.label()) == leaf
    assert LeafRef.parse(LeafRef(None, ix("ef")).label()) == LeafRef(None, ix("ef"))


def test_transfer_errors(fig5_state):
    with pytest.raises(UnknownAccount):
        fig5_state.apply_transfer(ix("ff"), ix("aab3e"), 1)
    with pytest.raises(InsufficientBalance):
        fig5_state.apply_transfer(ix("aab3e"), ix("acd3f"), 10**19)
    with pytest.raises(UnknownContract):
        fig5_state.apply_storage_write(ix("aab3e"), ix("01"), b"\x01")


def test_transfer_creates_recipient(fig5_state):
    new = ix("ab")
    rep = fig5_state.apply_transfer(ix("aab3e"), new, 5)
    assert fig5_state.account(new).balance == 5
    assert rep.op1_nodes_updated == path_union(fig5_state.state_trie, [ix("aab3e"), new])


def contract_state():
    s = WorldState()
    s.create_account(ix("aa"), 100)
    c = s.create_account(ix("b0"), 0, contract=True)
    s.create_account(ix("b1"), 0)
    for k in ("111234d", "111d12f"):
        s.seed_storage(c, ix(k), b"\x01")
    s.finalize_setup()
    return s, c


def test_storage_write_cascades_to_state_root():
    s, c = contract_state()
    root = s.commitment()
    storage = s.storage_tries[c]
    rep = s.apply_storage_write(c, ix("111d1f3"), b"\x05")
    # the split leaf is rebuilt shorter, so every node on both paths is new
    assert storage.depth_of(ix("111d12f")) == 5
    assert rep.op1_storage_nodes == path_union(storage, [ix("111d1f3"), ix("111d12f")])
    assert rep.op1_nodes_updated == rep.op1_storage_nodes + path_union(s.state_trie, [c])
    assert s.account(c).storage_root == storage.root_commitment()
    assert s.commitment() != root
    # clearing the slot collapses the split and restores every root
    s.apply_storage_write(c, ix("111d1f3"), b"\x00")
    assert s.commitment() == root


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6), st.integers(0, 50)), max_size=30))
def test_balance_conservation_and_monotone_accounting(txs):
    s = WorldState()
    addrs = [bytes([i]) * 20 for i in range(7)]
    for a in addrs:
        s.create_account(a, 1000)
    s.finalize_setup()
    total = s.total_balance()
    agg = TouchReport()
    for i, (x, y, amt) in enumerate(txs):
        try:
            rep = s.apply_transfer(addrs[x], addrs[y], amt, block=i // 5)
        except InsufficientBalance:
            continue
        assert rep.op1_nodes_updated >= 1
        assert rep.op2_hashes_recomputed == rep.op1_nodes_updated
        before = agg.counts()
        agg.add(rep)
        assert all(agg.counts()[k] >= before[k] for k in before)
    assert s.total_balance() == total
    assert agg.gas_charged == TRANSFER_GAS * agg.transactions


def test_access_log_and_window(fig5_state):
    s = fig5_state
    s.apply_transfer(ix("aab3e"), ix("acd3f"), 1, block=3)
    s.apply_transfer(ix("aab3e"), ix("abc6d"), 1, block=7)
    counts = s.access_counts()
    assert counts[LeafRef(None, ix("aab3e"))] == 2
    windowed = s.access_counts((5, 9))
    assert windowed == {LeafRef(None, ix("aab3e")): 1, LeafRef(None, ix("abc6d")): 1}


def test_node_cache_lru():
    cache = NodeCache(2)
    assert cache.read(b"a") == 1  # miss
    assert cache.read(b"a") == 0  # hit
    cache.admit(b"b")
    assert cache.admit(b"c") == 1  # evicts a
    assert b"a" not in cache and len(cache) == 2


def test_cache_events_on_cold_and_warm_reads(fig5_state):
    s = fig5_state
    cold = s.apply_transfer(ix("aab3e"), ix("acd3f"), 1)
    warm = s.apply_transfer(ix("aab3e"), ix("acd3f"), 1)
    assert cold.op3_cache_events > 0
    assert warm.op3_cache_events == 0


def test_replay_flushes_per_block_and_rejects():
    s = build_fig5_state()
    trace = [
        TraceRecord("transfer", ix("aab3e"), ix("acd3f"), None, 1, 0),
        TraceRecord("transfer", ix("ff"), ix("acd3f"), None, 1, 0),
        TraceRecord("transfer", ix("aab3e"), ix("abc6d"), None, 1, 1),
    ]
    res = replay(s, trace)
    assert [b for b, _ in res.blocks] == [0, 1]
    assert res.rejected and res.rejected[0][0] == 1
    assert res.blocks[0][1].op4_nodes_persisted == res.blocks[0][1].op1_nodes_updated
    with pytest.raises(UnknownAccount):
        replay(build_fig5_state(), trace, strict=True)


def test_trace_round_trip(tmp_path):
    slot = mapping_slot(b"\x01" * 32, 0)
    recs = [
        TraceRecord("transfer", b"\x01" * 20, ix("ab"), None, 10**30, 2),
        TraceRecord("storage_write", b"\x02" * 20, b"\x03" * 20, slot, 0, 3),
    ]
    path = tmp_path / "t.jsonl"
    assert write_trace(recs, str(path)) == 2
    assert read_trace(str(path)) == recs
    with pytest.raises(ValueError):
        TraceRecord("transfer", b"\x01" * 20, b"\x01" * 20, slot, 1, 0)


def test_state_dump_load_round_trip():
    rng = random.Random(5)
    s = WorldState()
    for _ in range(30):
        s.create_account(bytes(rng.randrange(256) for _ in range(20)), rng.randrange(10**6))
    c = s.create_account(b"\x09" * 20, 0, contract=True)
    for i in range(10):
        s.seed_storage(c, storage_indexing(mapping_slot(bytes([i]) * 32, 0)), b"\x02")
    s.finalize_setup()
    s.apply_transfer(b"\x09" * 20, b"\x09" * 20, 0, block=4)
    buf = io.StringIO()
    s.dump(buf)
    buf.seek(0)
    t = WorldState.load(buf)
    assert t.commitment() == s.commitment()
    assert t.node_counts() == s.node_counts()
    assert t.access_counts() == s.access_counts()
    assert account_indexing(b"\x09" * 20) in t.storage_tries


@pytest.mark.parametrize("crafted,gain", [("aab3f", 1), ("aab3e1", 2)])
def test_deepened_leaf_costs_exactly_k_more_per_touch(crafted, gain):
    """A self transfer rewrites exactly the nodes on the sender's path."""
    plain = build_fig5_state()
    deep = build_fig5_state()
    deep.create_account(ix(crafted), 1)
    deep.finalize_setup()
    target = ix("aab3e")
    assert deep.state_trie.depth_of(target) == plain.state_trie.depth_of(target) + gain
    a = plain.apply_transfer(target, target, 0).op1_nodes_updated
    b = deep.apply_transfer(target, target, 0).op1_nodes_updated
    assert b - a == gain
