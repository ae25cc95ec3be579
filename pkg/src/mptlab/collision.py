"""Brute-force keccak256 prefix grinding.

Candidate inputs come from a byte template with a big-endian counter spliced
into a fixed byte range.  Counters are enumerated from ``start_counter`` in
fixed-size chunks; with several workers the chunks of one round are hashed in
parallel and merged in counter order, so the returned inputs never depend on
the worker count.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from Crypto.Hash import keccak as _keccak

from .keys import Nibbles, StructuralError, mapping_slot, nibbles_to_hex, path_from_digest

CHUNK = 8192
DOMAINS = ("address_20byte", "mapping_key_32byte")


@dataclass(frozen=True, slots=True)
class CollisionTarget:
    """Digest paths starting with ``prefix``.

    ``avoid`` optionally forbids one nibble right after the prefix, which turns
    the target into "common prefix of exactly len(prefix)" with a path whose
    next nibble is ``avoid``.
    """

    prefix: Nibbles
    tag: str
    avoid: Optional[int] = None

    def __post_init__(self):
        if len(self.prefix) < 1:
            raise StructuralError("collision prefix must have at least one nibble")
        if len(self.prefix) > 63 and self.avoid is not None:
            raise StructuralError("no nibble left to avoid")
        if any(not 0 <= n <= 15 for n in self.prefix):
            raise StructuralError("prefix nibbles must be in [0, 15]")

    def accepts(self, path: Nibbles) -> bool:
        n = len(self.prefix)
        if tuple(path[:n]) != tuple(self.prefix):
            return False
        return self.avoid is None or path[n] != self.avoid


@dataclass(frozen=True, slots=True)
class GrindSpec:
    domain: str = "address_20byte"
    base: bytes = b""
    counter_offset: Optional[tuple[int, int]] = None  # [start, end) byte range
    start_counter: int = 0
    worker_count: int = 1
    mapping_position: int = 0

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise StructuralError(f"unknown grind domain {self.domain!r}")
        width = 20 if self.domain == "address_20byte" else 32
        if len(self.base) not in (0, width):
            raise StructuralError(f"template must be {width} bytes")
        lo, hi = self.byte_range
        if not 0 <= lo < hi <= width:
            raise StructuralError("counter range outside the template")
        if self.worker_count < 1:
            raise StructuralError("worker_count must be positive")
        if self.start_counter < 0:
            raise StructuralError("start_counter must be non-negative")

    @property
    def width(self) -> int:
        return 20 if self.domain == "address_20byte" else 32

    @property
    def template(self) -> bytes:
        return self.base or bytes(self.width)

    @property
    def byte_range(self) -> tuple[int, int]:
        if self.counter_offset is not None:
            return self.counter_offset
        # trailing bytes, like the "...ff07" suffixes of crafted addresses
        return (self.width - 8, self.width)

    def candidate(self, counter: int) -> bytes:
        lo, hi = self.byte_range
        t = self.template
        return t[:lo] + counter.to_bytes(hi - lo, "big") + t[hi:]

    def digest(self, data: bytes) -> bytes:
        """The digest whose nibbles form the trie indexing of ``data``."""
        if self.domain == "address_20byte":
            return _keccak.new(digest_bits=256, data=data).digest()
        return _keccak.new(digest_bits=256, data=mapping_slot(data, self.mapping_position)).digest()

    @property
    def capacity(self) -> int:
        lo, hi = self.byte_range
        return 256 ** (hi - lo)


@dataclass(frozen=True, slots=True)
class CollisionResult:
    input: bytes
    digest: bytes
    matched: CollisionTarget
    matched_len: int
    trials: int
    counter: int
    domain: str = "address_20byte"
    mapping_position: int = 0

    @property
    def indexing(self) -> Nibbles:
        return path_from_digest(self.digest)

    def verify(self) -> bool:
        spec = GrindSpec(domain=self.domain, mapping_position=self.mapping_position)
        return spec.digest(self.input) == self.digest and self.matched.accepts(self.indexing)

    def to_record(self) -> dict:
        return {
            "tag": self.matched.tag,
            "prefix": nibbles_to_hex(self.matched.prefix),
            "avoid": self.matched.avoid,
            "domain": self.domain,
            "mapping_position": self.mapping_position,
            "input": self.input.hex(),
            "digest": self.digest.hex(),
            "matched_len": self.matched_len,
            "counter": self.counter,
            "trials": self.trials,
        }

    @classmethod
    def from_record(cls, d: dict) -> "CollisionResult":
        from .keys import nibbles_from_hex

        target = CollisionTarget(nibbles_from_hex(d["prefix"]), d["tag"], d.get("avoid"))
        return cls(
            input=bytes.fromhex(d["input"]),
            digest=bytes.fromhex(d["digest"]),
            matched=target,
            matched_len=d["matched_len"],
            trials=d["trials"],
            counter=d["counter"],
            domain=d.get("domain", "address_20byte"),
            mapping_position=d.get("mapping_position", 0),
        )


class CollisionOutcome(dict):
    """``tag -> CollisionResult`` plus the total number of trials spent."""

    def __init__(self, results=(), trials: int = 0, complete: bool = False):
        super().__init__(results)
        self.trials = trials
        self.complete = complete


def _matchers(targets: Sequence[CollisionTarget]):
    """Group targets by prefix length: ``[(length, {prefix_int: [indices]})]``."""
    by_len: dict[int, dict[int, list[int]]] = {}
    for i, t in enumerate(targets):
        key = int(nibbles_to_hex(t.prefix), 16)
        by_len.setdefault(len(t.prefix), {}).setdefault(key, []).append(i)
    return sorted(by_len.items())


def _scan(spec: GrindSpec, targets: Sequence[CollisionTarget], lo: int, hi: int):
    """Hash counters ``[lo, hi)``; return ``[(counter, input, digest, [target indices])]``."""
    matchers = _matchers(targets)
    head_lo, head_hi = spec.byte_range
    t = spec.template
    head, tail, width = t[:head_lo], t[head_hi:], head_hi - head_lo
    address = spec.domain == "address_20byte"
    pos_bytes = spec.mapping_position.to_bytes(32, "big")
    new = _keccak.new
    hits = []
    # Claim hits locally with the merge's own rule; once every target is
    # claimed, later hits in this range cannot win any target the merge
    # still needs, since its unmatched set is a subset of ours.
    unclaimed = set(range(len(targets)))
    for counter in range(lo, hi):
        data = head + counter.to_bytes(width, "big") + tail
        if address:
            digest = new(digest_bits=256, data=data).digest()
        else:
            slot = new(digest_bits=256, data=data + pos_bytes).digest()
            digest = new(digest_bits=256, data=slot).digest()
        top = int.from_bytes(digest[:32], "big")
        matched = None
        for length, table in matchers:
            idx = table.get(top >> (256 - 4 * length))
            if idx is None:
                continue
            nxt = (top >> (252 - 4 * length)) & 0xF
            for i in idx:
                avoid = targets[i].avoid
                if avoid is None or avoid != nxt:
                    if matched is None:
                        matched = []
                    matched.append(i)
        if matched:
            matched.sort()
            hits.append((counter, data, digest, matched))
            first = next((i for i in matched if i in unclaimed), None)
            if first is not None:
                unclaimed.discard(first)
                if not unclaimed:
                    break
    return hits


def _scan_job(args):
    return _scan(*args)


def collide_multi(
    targets: Iterable[CollisionTarget],
    spec: GrindSpec,
    budget: int,
    chunk: int = CHUNK,
) -> CollisionOutcome:
    """Grind until every target is matched or ``budget`` trials are spent.

    Each trial's digest is checked against all still-unmatched targets; when
    it satisfies several, the earliest target in ``targets`` order wins.
    """
    targets = list(targets)
    if not targets:
        raise StructuralError("need at least one target")
    tags = [t.tag for t in targets]
    if len(set(tags)) != len(tags):
        raise StructuralError("target tags must be distinct")
    if budget <= 0:
        raise StructuralError("budget must be positive")
    end = min(spec.start_counter + budget, spec.capacity)
    unmatched = set(range(len(targets)))
    found: dict[str, CollisionResult] = {}
    last = spec.start_counter
    pool = None
    if spec.worker_count > 1:
        import multiprocessing

        ctx = multiprocessing.get_context("fork" if os.name == "posix" else "spawn")
        pool = ProcessPoolExecutor(spec.worker_count, mp_context=ctx)
    try:
        cursor = spec.start_counter
        while unmatched and cursor < end:
            bounds = []
            for _ in range(spec.worker_count):
                if cursor >= end:
                    break
                bounds.append((cursor, min(cursor + chunk, end)))
                cursor = bounds[-1][1]
            live = [targets[i] if i in unmatched else None for i in range(len(targets))]
            subset = [t for t in live if t is not None]
            index_map = [i for i, t in enumerate(live) if t is not None]
            jobs = [(spec, subset, lo, hi) for lo, hi in bounds]
            if pool is None:
                batches = [_scan_job(j) for j in jobs]
            else:
                batches = list(pool.map(_scan_job, jobs))
            for hits in batches:
                for counter, data, digest, idx in hits:
                    winner = next((index_map[i] for i in idx if index_map[i] in unmatched), None)
                    if winner is None:
                        continue
                    unmatched.discard(winner)
                    target = targets[winner]
                    found[target.tag] = CollisionResult(
                        input=data,
                        digest=digest,
                        matched=target,
                        matched_len=common_len(path_from_digest(digest), target.prefix),
                        trials=counter - spec.start_counter + 1,
                        counter=counter,
                        domain=spec.domain,
                        mapping_position=spec.mapping_position,
                    )
                    last = counter
                    if not unmatched:
                        break
                if not unmatched:
                    break
    finally:
        if pool is not None:
            pool.shutdown()
    ordered = {t.tag: found[t.tag] for t in targets if t.tag in found}
    if unmatched:
        return CollisionOutcome(ordered, trials=end - spec.start_counter, complete=False)
    return CollisionOutcome(ordered, trials=last - spec.start_counter + 1, complete=True)


def collide_single(target: CollisionTarget, spec: GrindSpec, budget: int, chunk: int = CHUNK) -> Optional[CollisionResult]:
    """Lowest-counter match for one target, or None once ``budget`` trials are spent."""
    out = collide_multi([target], spec, budget, chunk)
    return out.get(target.tag)


def common_len(path: Nibbles, prefix: Nibbles) -> int:
    n = 0
    for a, b in zip(path, prefix):
        if a != b:
            break
        n += 1
    return n


# -- trial-count models ---------------------------------------------------


def single_target_trials(prefix_len: int) -> float:
    """Expected trials to hit one fixed prefix of ``prefix_len`` nibbles."""
    return 16.0 ** prefix_len


def expected_trials(theta: float, phi: float) -> float:
    """Expected trials to hit ``phi`` targets at once: ``theta * ln(phi)``.

    The logarithmic form degenerates at a single target, where the answer is
    simply ``theta``.
    """
    if phi < 1:
        raise ValueError("phi must be at least 1")
    if theta <= 0:
        raise ValueError("theta must be positive")
    if phi == 1:
        return float(theta)
    return theta * math.log(phi)


def coupon_trials(theta: float, phi: int) -> float:
    """Exact coupon-collector expectation ``theta * H_phi`` for equiprobable targets."""
    if phi < 1:
        raise ValueError("phi must be at least 1")
    return theta * sum(1.0 / k for k in range(1, int(phi) + 1))


@dataclass(frozen=True, slots=True)
class TrialModel:
    theta: float
    throughput: float  # hashes per worker-hour
    phi: float = 1

    def __post_init__(self):
        if self.theta <= 0 or self.throughput <= 0 or self.phi < 1:
            raise ValueError("theta and throughput must be positive, phi >= 1")

    @property
    def expected(self) -> float:
        return expected_trials(self.theta, self.phi)

    def worker_hours(self) -> float:
        return self.expected / self.throughput
