from __future__ import annotations

import random

import pytest
from hypothesis import given, settings, strategies as st

from conftest import build_fig5_state, ix
from mptlab.collision import CollisionResult, CollisionTarget
from mptlab.keys import digest_from_path, mapping_slot, nibbles_to_hex, storage_indexing
from mptlab.planner import (
    ActiveAccountFilter,
    exact_prefix_target,
    emit_payload_trace,
    is_splittable,
    match_strategy,
    plan_attack,
    plan_on,
    required_positions,
    select_targets,
)
from mptlab.state import LeafRef, replay
from mptlab.trie import Branch, Extension, KeyNotFound, Leaf, Trie


def fake(path, counter=0):
    """A candidate with a chosen indexing; planning only looks at the digest."""
    return CollisionResult(b"\x00" * 20, digest_from_path(path), CollisionTarget((path[0],), "f"), 1, 1, counter)


def fig4_trie():
    t = Trie()
    for k in ("111234d", "111d12f"):
        t.insert(ix(k), b"x")
    return t


@pytest.mark.parametrize("cand,strategy,added,depth", [
    ("111dd3e", "S1", 1, 4),
    ("111d1f3", "S2", 2, 5),
    ("11d2dcd", "S3", 1, 4),
])
def test_figure_strategies(cand, strategy, added, depth):
    t = fig4_trie()
    target = ix("111d12f")
    plan = plan_attack(t, target, [fake(ix(cand))])
    assert len(plan.inserts) == 1
    p = plan.inserts[0]
    assert (p.strategy, p.predicted_new_intermediates) == (strategy, added)
    assert (plan.target_depth_before, plan.target_depth_after) == (3, depth)
    # plan_attack leaves the trie alone; applying the insert confirms the prediction
    assert t.depth_of(target) == 3
    before = t.node_count
    t.insert(ix(cand), b"y")
    assert t.depth_of(target) == depth
    assert t.node_count - before == added + 1
    if strategy == "S3":
        assert p.collateral_leaves == 1 and t.depth_of(ix("111234d")) == 4


def test_is_splittable():
    assert is_splittable(Extension((1, 1, 1), Branch((None,) * 16)))
    assert not is_splittable(Extension((1,), Branch((None,) * 16)))
    assert is_splittable(Leaf((1, 2), b"x"))
    assert not is_splittable(Leaf((1,), b"x"))
    assert not is_splittable(Branch((None,) * 16))


def test_match_strategy_prefers_s2_then_longer_prefix():
    target = ix("111d12f")
    leaf = Leaf(target[4:], b"x")  # below extension 111 and the branch slot d
    cands = [fake(ix("111dd3e"), 5), fake(ix("111d1f3"), 9), fake(ix("111d12a"), 7)]
    m = match_strategy(leaf, cands, 4, target)
    assert m.strategy == "S2" and nibbles_to_hex(m.candidate.indexing).startswith("111d12a")
    assert match_strategy(leaf, cands, 4, target, depth=14, max_layer=15).strategy == "S1"
    assert match_strategy(leaf, [], 4, target) is None


def test_plan_is_idempotent_and_absent_target_errors():
    t = fig4_trie()
    target = ix("111d12f")
    cands = [fake(ix("111dd3e")), fake(ix("111d1f3")), fake(ix("11d2dcd"))]
    first = plan_on(t, target, cands)
    assert first.inserts
    again = plan_on(t, target, cands)
    assert again.inserts == [] and again.deepening == 0
    with pytest.raises(KeyNotFound):
        plan_attack(t, ix("fff"), cands)


def random_trie(rng, n):
    keys = {tuple(rng.randrange(16) for _ in range(64)) for _ in range(n)}
    return Trie.from_items((k, b"v") for k in keys), sorted(keys)


def exact_candidates(rng, target, upto):
    """One candidate per divergence position 0..upto, random past the divergence."""
    out = []
    for p in range(upto + 1):
        path = list(target[:p]) + [(target[p] + 1 + rng.randrange(15)) % 16]
        path += [rng.randrange(16) for _ in range(63 - p)]
        out.append(fake(tuple(path), counter=p))
    return out


def test_lemma_layer_bound_randomized():
    """With crafted leaves sharing up to x nibbles, the target lands at layer x+2."""
    rng = random.Random(2024)
    checked = 0
    for trial in range(100):
        t, keys = random_trie(rng, rng.choice([1, 2, 10, 100, 400]))
        target = rng.choice(keys)
        rep = t.path_report(target)
        assert rep.unique_part_len > 2
        lo = max(64 - rep.unique_part_len, rep.depth - 1)
        x = rng.randint(lo, min(lo + 8, 13))
        max_layer = 15
        plan = plan_attack(t, target, exact_candidates(rng, target, x), max_layer)
        assert plan.target_depth_after == x + 2 <= max_layer
        sim = t.snapshot()
        for p in plan.inserts:
            sim.insert(p.expected_indexing, b"c")
        assert sim.depth_of(target) == x + 2
        checked += 1
    assert checked == 100


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**9), st.integers(1, 6), st.integers(6, 15))
def test_plan_predictions_match_replayed_inserts(seed, x, max_layer):
    rng = random.Random(seed)
    t, keys = random_trie(rng, 60)
    target = rng.choice(keys)
    d0 = t.depth_of(target)
    if d0 > max_layer:
        return
    plan = plan_attack(t, target, exact_candidates(rng, target, x), max_layer)
    assert plan.target_depth_after <= max_layer
    sim = t.snapshot()
    for p in plan.inserts:
        before = sim.node_count
        d = sim.depth_of(target)
        sim.insert(p.expected_indexing, b"c")
        assert sim.node_count - before == p.predicted_new_intermediates + 1
        assert sim.depth_of(target) - d == p.predicted_deepening
    assert sim.depth_of(target) == plan.target_depth_after


def test_required_positions_and_exact_targets():
    t = fig4_trie()
    target = ix("111d12f")
    assert exact_prefix_target(target, 0, "a").prefix == (2,)
    goal = exact_prefix_target(target, 3, "b")
    assert goal.prefix == (1, 1, 1) and goal.avoid == 13
    positions = required_positions(t, target, 4)
    # 0 and 1 split extension 111; what is left of it at 2 is one nibble long,
    # so a fork there gains nothing; 3 is already a branch; 4 splits the leaf
    assert positions == [0, 1, 4]
    assert required_positions(t, target, 4, max_deepening=1) == [0]


def test_select_targets_matches_frequency_scan():
    s = build_fig5_state()
    from mptlab.state import TraceRecord
    trace = [TraceRecord("transfer", ix("aab3e"), ix(k), None, 1, b)
             for b, k in enumerate(["acd3f", "abc6d", "acd3f", "aa000"])]
    replay(s, trace)
    scan = {}
    for rec in trace:
        for ref in (rec.sender, rec.recipient):
            leaf = LeafRef(None, ref)
            scan[leaf] = scan.get(leaf, 0) + 1
    got = select_targets(s, ActiveAccountFilter(threshold=1))
    want = sorted(scan, key=lambda l: (-scan[l], l.label()))
    assert got == want
    assert select_targets(s, ActiveAccountFilter(threshold=2)) == want[:2]
    assert select_targets(s, ActiveAccountFilter(threshold=1, window=(1, 1))) == sorted(
        [LeafRef(None, ix("aab3e")), LeafRef(None, ix("abc6d"))], key=LeafRef.label)
    assert len(select_targets(s, ActiveAccountFilter(limit=2))) == 2
    with pytest.raises(ValueError):
        ActiveAccountFilter(threshold=0)


def test_emit_payload_trace_applies_planned_shapes():
    s = build_fig5_state()
    c = s.create_account(b"\x05" * 20, 0, contract=True)
    key = b"\x07" * 32
    s.seed_storage(c, storage_indexing(mapping_slot(key, 0)), b"\x01")
    attacker = b"\xaa" * 20
    s.create_account(attacker, 10)
    s.finalize_setup()
    target = ix("aab3e")
    cand = CollisionResult(b"\x11" * 20, digest_from_path(ix("aab3f")), CollisionTarget((10,), "t"), 4, 1, 0)
    plan = plan_attack(s.state_trie, target, [cand])
    records = emit_payload_trace([plan], attacker, block=9)
    assert [(r.kind, r.recipient, r.value, r.block) for r in records] == [("transfer", b"\x11" * 20, 1, 9)]
    from mptlab.planner import InsertPayload, AttackPlan
    storage_plan = AttackPlan(target=ix("0"), owner=c, inserts=[
        InsertPayload("storage_slot", key, ix("0"), "S1", 1, 1, owner=c)])
    rec = emit_payload_trace([storage_plan], attacker)[0]
    assert rec.kind == "storage_write" and rec.slot == mapping_slot(key, 0) and rec.recipient == c
