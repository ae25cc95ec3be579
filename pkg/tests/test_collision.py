from __future__ import annotations

import math

import pytest
from hypothesis import given, settings, strategies as st

from keccak_ref import keccak256 as ref_keccak
from mptlab.collision import (
    CollisionResult,
    CollisionTarget,
    GrindSpec,
    TrialModel,
    collide_multi,
    collide_single,
    coupon_trials,
    expected_trials,
    single_target_trials,
)
from mptlab.keys import StructuralError, mapping_slot, path_from_digest


def brute_first_match(spec: GrindSpec, target: CollisionTarget, limit: int):
    """Sequential scan with the reference keccak; lowest matching counter."""
    for counter in range(spec.start_counter, spec.start_counter + limit):
        data = spec.candidate(counter)
        if spec.domain == "address_20byte":
            digest = ref_keccak(data)
        else:
            digest = ref_keccak(ref_keccak(data + spec.mapping_position.to_bytes(32, "big")))
        if target.accepts(path_from_digest(digest)):
            return counter, digest
    return None


@pytest.mark.parametrize("domain", ["address_20byte", "mapping_key_32byte"])
def test_single_matches_reference_scan(domain):
    spec = GrindSpec(domain=domain, mapping_position=3)
    target = CollisionTarget((0xA, 0x5), "t", avoid=7)
    got = collide_single(target, spec, 5000)
    want = brute_first_match(spec, target, 5000)
    assert got is not None and want is not None
    assert (got.counter, got.digest) == want
    assert got.trials == got.counter + 1
    assert got.verify()
    assert got.indexing[:2] == (0xA, 0x5) and got.indexing[2] != 7


@settings(max_examples=20, deadline=None)
@given(st.lists(st.integers(0, 15), min_size=1, max_size=2), st.integers(0, 10**6))
def test_results_are_sound(prefix, start):
    spec = GrindSpec(start_counter=start)
    res = collide_single(CollisionTarget(tuple(prefix), "x"), spec, 20000)
    assert res is not None
    assert res.verify()
    assert res.input == spec.candidate(res.counter)
    assert res.matched_len == len(prefix)


def test_mapping_digest_is_slot_indexing():
    spec = GrindSpec(domain="mapping_key_32byte", mapping_position=2)
    res = collide_single(CollisionTarget((1,), "m"), spec, 1000)
    assert res.digest == ref_keccak(mapping_slot(res.input, 2))


def test_worker_count_does_not_change_results():
    targets = [CollisionTarget(tuple(int(c, 16) for c in p), p) for p in ("10", "abc", "7", "fe1")]
    one = collide_multi(targets, GrindSpec(worker_count=1), 200_000, chunk=1024)
    three = collide_multi(targets, GrindSpec(worker_count=3), 200_000, chunk=1024)
    assert one == three
    assert one.trials == three.trials and one.complete


def test_multi_reduces_to_single():
    t = CollisionTarget((3, 4), "a")
    multi = collide_multi([t], GrindSpec(), 10_000)
    single = collide_single(t, GrindSpec(), 10_000)
    assert multi["a"] == single
    assert multi.trials == single.trials


def test_multi_trials_is_last_winning_counter():
    targets = [CollisionTarget((i,), f"t{i}") for i in range(16)]
    out = collide_multi(targets, GrindSpec(start_counter=100), 10_000)
    assert out.complete and len(out) == 16
    assert out.trials == max(r.counter for r in out.values()) - 100 + 1
    # a digest satisfies one target only, so all inputs differ
    assert len({r.counter for r in out.values()}) == 16


def test_budget_exhaustion_reports_partial():
    out = collide_multi([CollisionTarget((1, 2, 3, 4, 5, 6), "deep")], GrindSpec(), 500)
    assert not out.complete and len(out) == 0 and out.trials == 500


def test_input_validation():
    with pytest.raises(StructuralError):
        CollisionTarget((), "empty")
    with pytest.raises(StructuralError):
        GrindSpec(base=b"\x00" * 5)
    with pytest.raises(StructuralError):
        GrindSpec(worker_count=0)
    with pytest.raises(StructuralError):
        collide_multi([CollisionTarget((1,), "a"), CollisionTarget((2,), "a")], GrindSpec(), 10)
    with pytest.raises(StructuralError):
        collide_multi([], GrindSpec(), 10)


def test_record_round_trip():
    res = collide_single(CollisionTarget((9,), "r", avoid=1), GrindSpec(domain="mapping_key_32byte"), 1000)
    assert CollisionResult.from_record(res.to_record()) == res


def test_trial_models():
    assert single_target_trials(3) == 4096
    assert expected_trials(4096, 1) == 4096
    assert expected_trials(4096, 32) == pytest.approx(4096 * math.log(32))
    assert coupon_trials(10, 3) == pytest.approx(10 * (1 + 1 / 2 + 1 / 3))
    with pytest.raises(ValueError):
        expected_trials(4096, 0.5)
    assert TrialModel(100.0, 50.0, 1).worker_hours() == 2.0


@given(st.floats(1, 1e6), st.integers(2, 10**6))
def test_multi_target_cheaper_than_one_by_one(theta, phi):
    assert expected_trials(theta, phi) < theta * phi
    assert coupon_trials(theta, phi) < theta * phi


def test_multi_target_beats_one_by_one_on_average():
    import numpy as np

    rng = np.random.default_rng(4)
    multi = single = 0
    for run in range(40):
        prefixes = {tuple(int(x) for x in rng.integers(0, 16, 2)) for _ in range(4)}
        targets = [CollisionTarget(p, f"t{i}") for i, p in enumerate(sorted(prefixes))]
        spec = GrindSpec(base=rng.bytes(20))
        multi += collide_multi(targets, spec, 10**6).trials
        for t in targets:
            single += collide_single(t, GrindSpec(base=rng.bytes(20)), 10**6).trials
    assert multi < single


@settings(max_examples=15, deadline=None)
@given(st.lists(st.tuples(st.lists(st.integers(0, 3), min_size=1, max_size=2), st.none() | st.integers(0, 3)),
                min_size=1, max_size=6))
def test_chunking_does_not_change_winners(specs):
    """Overlapping prefixes make one digest satisfy several targets at once."""
    targets = [CollisionTarget(tuple(p), f"t{i}", a if len(p) < 64 else None) for i, (p, a) in enumerate(specs)]
    ref = collide_multi(targets, GrindSpec(), 3000, chunk=1)
    for chunk in (7, 256, 4096):
        got = collide_multi(targets, GrindSpec(), 3000, chunk=chunk)
        assert got == ref and got.trials == ref.trials and got.complete == ref.complete
