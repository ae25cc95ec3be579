"""Two-level world state with per-transaction resource accounting.

The State Trie maps account indexings to encoded accounts; each contract owns
a Storage Trie whose commitment is mirrored in the account's ``storage_root``.
Every mutation returns a :class:`TouchReport` with four structural counters:

* ``op1_nodes_updated``: nodes whose stored content changed (value or child
  digest), i.e. the union of rewritten paths across both tries.
* ``op2_hashes_recomputed``: keccak calls made to re-commit those nodes.
* ``op3_cache_events``: misses plus evictions of a bounded LRU node cache
  while reading the old paths and admitting the rewritten nodes.
* ``op4_nodes_persisted``: nodes flushed to the node store; only non-zero on
  block boundaries.
"""

from __future__ import annotations

import json
import logging
import time
from collections import Counter, OrderedDict
from dataclasses import dataclass, field, fields
from typing import Callable, Iterable, Iterator, NamedTuple, Optional, Union

from .keys import (
    EMPTY_CODE_HASH,
    Nibbles,
    StructuralError,
    account_indexing,
    check_indexing,
    keccak256,
    nibbles_from_hex,
    nibbles_to_hex,
    storage_indexing,
)
from .trie import EMPTY_ROOT, KeyNotFound, Trie

log = logging.getLogger(__name__)

TRANSFER_GAS = 21_000
STORAGE_WRITE_GAS = 44_258
DEFAULT_CACHE_CAPACITY = 4096

AccountRef = Union[bytes, Nibbles]


class StateError(Exception):
    pass


class InsufficientBalance(StateError):
    pass


class UnknownAccount(StateError):
    pass


class UnknownContract(StateError):
    pass


@dataclass(frozen=True, slots=True)
class Account:
    balance: int = 0
    nonce: int = 0
    code_hash: bytes = EMPTY_CODE_HASH
    storage_root: bytes = EMPTY_ROOT

    def encode(self) -> bytes:
        return (
            self.balance.to_bytes(32, "big")
            + self.nonce.to_bytes(8, "big")
            + self.code_hash
            + self.storage_root
        )

    @classmethod
    def decode(cls, raw: bytes) -> "Account":
        if len(raw) != 104:
            raise StructuralError(f"encoded account must be 104 bytes, got {len(raw)}")
        return cls(
            balance=int.from_bytes(raw[:32], "big"),
            nonce=int.from_bytes(raw[32:40], "big"),
            code_hash=raw[40:72],
            storage_root=raw[72:104],
        )


class LeafRef(NamedTuple):
    """A leaf anywhere in the state: ``owner`` is None for the State Trie,
    otherwise the indexing of the contract owning the Storage Trie."""

    owner: Optional[Nibbles]
    path: Nibbles

    def label(self) -> str:
        if self.owner is None:
            return nibbles_to_hex(self.path)
        return nibbles_to_hex(self.owner) + "/" + nibbles_to_hex(self.path)

    @classmethod
    def parse(cls, text: str) -> "LeafRef":
        if "/" in text:
            owner, path = text.split("/", 1)
            return cls(check_indexing(nibbles_from_hex(owner)), check_indexing(nibbles_from_hex(path)))
        return cls(None, check_indexing(nibbles_from_hex(text)))


COUNT_FIELDS = (
    "op1_nodes_updated",
    "op2_hashes_recomputed",
    "op3_cache_events",
    "op4_nodes_persisted",
    "op1_storage_nodes",
    "gas_charged",
    "transactions",
)


@dataclass
class TouchReport:
    op1_nodes_updated: int = 0
    op2_hashes_recomputed: int = 0
    op3_cache_events: int = 0
    op4_nodes_persisted: int = 0
    op1_storage_nodes: int = 0  # the Storage-Trie share of op1_nodes_updated
    gas_charged: int = 0
    transactions: int = 0
    wall_time: float = 0.0

    def add(self, other: "TouchReport") -> "TouchReport":
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))
        return self

    def counts(self) -> dict:
        """Every field except wall time, for determinism comparisons."""
        return {name: getattr(self, name) for name in COUNT_FIELDS}


class NodeCache:
    """Bounded LRU set of node digests standing in for the in-memory node cache."""

    def __init__(self, capacity: int = DEFAULT_CACHE_CAPACITY):
        if capacity < 1:
            raise ValueError("cache capacity must be positive")
        self.capacity = capacity
        self._entries: OrderedDict[bytes, None] = OrderedDict()

    def __len__(self):
        return len(self._entries)

    def __contains__(self, digest):
        return digest in self._entries

    def _insert(self, digest: bytes) -> int:
        self._entries[digest] = None
        if len(self._entries) > self.capacity:
            self._entries.popitem(last=False)
            return 1
        return 0

    def read(self, digest: bytes) -> int:
        """Access a node; returns miss + eviction events."""
        if digest in self._entries:
            self._entries.move_to_end(digest)
            return 0
        return 1 + self._insert(digest)

    def admit(self, digest: bytes) -> int:
        """Cache a freshly written node; only evictions count."""
        if digest in self._entries:
            self._entries.move_to_end(digest)
            return 0
        return self._insert(digest)


class WorldState:
    def __init__(
        self,
        cache_capacity: int = DEFAULT_CACHE_CAPACITY,
        storage_write_gas: int = STORAGE_WRITE_GAS,
    ):
        self.state_trie = Trie()
        self.storage_tries: dict[Nibbles, Trie] = {}
        self.addresses: dict[Nibbles, bytes] = {}
        self.access_log: dict[LeafRef, Counter] = {}
        self.cache = NodeCache(cache_capacity)
        self.storage_write_gas = storage_write_gas

    # -- addressing ------------------------------------------------------

    def resolve(self, ref: AccountRef) -> Nibbles:
        """Accept a 20-byte address or a raw 64-nibble indexing."""
        if isinstance(ref, (bytes, bytearray)):
            path = account_indexing(bytes(ref))
            self.addresses.setdefault(path, bytes(ref))
            return path
        return check_indexing(tuple(ref))

    def account(self, ref: AccountRef) -> Optional[Account]:
        raw, _ = self.state_trie.get(self.resolve(ref))
        return None if raw is None else Account.decode(raw)

    def is_contract(self, ref: AccountRef) -> bool:
        return self.resolve(ref) in self.storage_tries

    def accounts(self) -> Iterator[tuple[Nibbles, Account]]:
        for path, raw in self.state_trie.items():
            yield path, Account.decode(raw)

    def total_balance(self) -> int:
        return sum(acc.balance for _, acc in self.accounts())

    def leaf_depth(self, leaf: LeafRef) -> int:
        trie = self.state_trie if leaf.owner is None else self.storage_tries[leaf.owner]
        return trie.depth_of(leaf.path)

    def trie_for(self, owner: Optional[Nibbles]) -> Trie:
        if owner is None:
            return self.state_trie
        try:
            return self.storage_tries[owner]
        except KeyError:
            raise UnknownContract(nibbles_to_hex(owner)) from None

    # -- setup (not accounted) -------------------------------------------

    def create_account(
        self,
        ref: AccountRef,
        balance: int = 0,
        nonce: int = 0,
        contract: bool = False,
    ) -> Nibbles:
        path = self.resolve(ref)
        code_hash = EMPTY_CODE_HASH
        if contract:
            self.storage_tries.setdefault(path, Trie())
            code_hash = keccak256(b"contract" + bytes(path))
        storage_root = self.storage_tries[path].root_commitment() if path in self.storage_tries else EMPTY_ROOT
        self.state_trie.insert(path, Account(balance, nonce, code_hash, storage_root).encode())
        return path

    def seed_storage(self, contract: AccountRef, slot_path: Nibbles, value: bytes) -> None:
        """Populate a slot directly, refreshing the owner's storage root."""
        owner = self.resolve(contract)
        storage = self.trie_for(owner)
        storage.insert(check_indexing(slot_path), value)
        self._write_account(owner, self.account(owner), storage_root=storage.root_commitment())

    def finalize_setup(self) -> int:
        """Commit and persist everything built so far; resets the node cache."""
        persisted = self.end_block()
        self.cache = NodeCache(self.cache.capacity)
        return persisted

    def _write_account(self, path: Nibbles, acc: Account, **changes) -> None:
        if changes:
            acc = Account(
                balance=changes.get("balance", acc.balance),
                nonce=changes.get("nonce", acc.nonce),
                code_hash=acc.code_hash,
                storage_root=changes.get("storage_root", acc.storage_root),
            )
        self.state_trie.insert(path, acc.encode())

    # -- accounting helpers ----------------------------------------------

    def _read_path(self, trie: Trie, path: Nibbles) -> int:
        _, report = trie.get(path)
        events = 0
        for node in report.visited:
            if node._digest is None:
                continue
            events += self.cache.read(node._digest)
        return events

    def _commit(self, trie: Trie, report: TouchReport) -> None:
        dirty = trie.dirty_nodes()
        report.op1_nodes_updated += len(dirty)
        if trie is not self.state_trie:
            report.op1_storage_nodes += len(dirty)
        report.op2_hashes_recomputed += trie.commit()
        for node in dirty:
            report.op3_cache_events += self.cache.admit(node._digest)

    def _log(self, leaf: LeafRef, block: int) -> None:
        self.access_log.setdefault(leaf, Counter())[block] += 1

    # -- transactions ----------------------------------------------------

    def apply_transfer(self, sender: AccountRef, recipient: AccountRef, amount: int, block: int = 0) -> TouchReport:
        started = time.perf_counter()
        if amount < 0:
            raise StateError("transfer amount must be non-negative")
        src = self.resolve(sender)
        dst = self.resolve(recipient)
        src_acc = self.account(src)
        if src_acc is None:
            raise UnknownAccount(nibbles_to_hex(src))
        if src_acc.balance < amount:
            raise InsufficientBalance(f"{nibbles_to_hex(src)} holds {src_acc.balance}, needs {amount}")

        report = TouchReport(gas_charged=TRANSFER_GAS, transactions=1)
        self.state_trie.commit()
        report.op3_cache_events += self._read_path(self.state_trie, src)
        report.op3_cache_events += self._read_path(self.state_trie, dst)

        self._write_account(src, src_acc, balance=src_acc.balance - amount, nonce=src_acc.nonce + 1)
        dst_acc = self.account(dst)
        if dst_acc is None:
            dst_acc = Account()
        self._write_account(dst, dst_acc, balance=dst_acc.balance + amount)
        self._commit(self.state_trie, report)

        self._log(LeafRef(None, src), block)
        if dst != src:
            self._log(LeafRef(None, dst), block)
        report.wall_time = time.perf_counter() - started
        return report

    def apply_storage_write(self, contract: AccountRef, slot_path: Nibbles, value: bytes, block: int = 0) -> TouchReport:
        """Write ``value`` into a slot; an empty or all-zero value clears it."""
        started = time.perf_counter()
        owner = self.resolve(contract)
        check_indexing(slot_path)
        acc = self.account(owner)
        if acc is None or owner not in self.storage_tries:
            raise UnknownContract(nibbles_to_hex(owner))
        storage = self.storage_tries[owner]

        report = TouchReport(gas_charged=self.storage_write_gas, transactions=1)
        storage.commit()
        self.state_trie.commit()
        report.op3_cache_events += self._read_path(storage, slot_path)
        report.op3_cache_events += self._read_path(self.state_trie, owner)

        if any(value):
            storage.insert(slot_path, value)
        elif slot_path in storage:
            storage.delete(slot_path)
        self._commit(storage, report)
        self._write_account(owner, acc, storage_root=storage.root_commitment())
        self._commit(self.state_trie, report)

        self._log(LeafRef(owner, slot_path), block)
        self._log(LeafRef(None, owner), block)
        report.wall_time = time.perf_counter() - started
        return report

    def end_block(self) -> int:
        """Persist every committed node not yet in a node store."""
        persisted = self.state_trie.flush()
        for owner in sorted(self.storage_tries):
            persisted += self.storage_tries[owner].flush()
        return persisted

    def commitment(self) -> bytes:
        return self.state_trie.root_commitment()

    # -- snapshots -------------------------------------------------------

    def copy(self) -> "WorldState":
        """Structural snapshot with a cold node cache."""
        other = WorldState(self.cache.capacity, self.storage_write_gas)
        other.state_trie = self.state_trie.copy()
        other.storage_tries = {k: t.copy() for k, t in self.storage_tries.items()}
        other.addresses = dict(self.addresses)
        other.access_log = {k: Counter(v) for k, v in self.access_log.items()}
        return other

    def node_counts(self) -> dict:
        storage = Counter()
        for t in self.storage_tries.values():
            storage.update(t.stats)
        return {
            "state_nodes": self.state_trie.node_count,
            "state_leaves": self.state_trie.stats["leaf"],
            "storage_nodes": sum(storage.values()),
            "storage_leaves": storage["leaf"],
        }

    def access_counts(self, window: Optional[tuple[int, int]] = None) -> dict[LeafRef, int]:
        out = {}
        for leaf, per_block in self.access_log.items():
            if window is None:
                n = sum(per_block.values())
            else:
                n = sum(c for b, c in per_block.items() if window[0] <= b <= window[1])
            if n:
                out[leaf] = n
        return out

    # -- persistence -----------------------------------------------------

    def dump(self, fh) -> None:
        """Write the state as line-delimited JSON records."""
        fh.write(json.dumps({"format": "mptlab-state", "version": 1,
                             "storage_write_gas": self.storage_write_gas,
                             "cache_capacity": self.cache.capacity}) + "\n")
        for path, acc in self.accounts():
            rec = {
                "account": nibbles_to_hex(path),
                "address": self.addresses[path].hex() if path in self.addresses else None,
                "balance": str(acc.balance),
                "nonce": acc.nonce,
                "code_hash": acc.code_hash.hex(),
                "contract": path in self.storage_tries,
            }
            if path in self.storage_tries:
                rec["storage"] = [[nibbles_to_hex(k), v.hex()] for k, v in self.storage_tries[path].items()]
            fh.write(json.dumps(rec) + "\n")
        for leaf in sorted(self.access_log, key=LeafRef.label):
            per_block = self.access_log[leaf]
            fh.write(json.dumps({"access": leaf.label(),
                                 "blocks": {str(b): per_block[b] for b in sorted(per_block)}}) + "\n")

    @classmethod
    def load(cls, fh) -> "WorldState":
        header = json.loads(fh.readline())
        if header.get("format") != "mptlab-state":
            raise StructuralError("not a state file")
        state = cls(header.get("cache_capacity", DEFAULT_CACHE_CAPACITY),
                    header.get("storage_write_gas", STORAGE_WRITE_GAS))
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if "access" in rec:
                state.access_log[LeafRef.parse(rec["access"])] = Counter(
                    {int(b): n for b, n in rec["blocks"].items()})
                continue
            path = check_indexing(nibbles_from_hex(rec["account"]))
            if rec.get("address"):
                state.addresses[path] = bytes.fromhex(rec["address"])
            storage_root = EMPTY_ROOT
            if rec.get("contract"):
                storage = Trie()
                for k, v in rec.get("storage", []):
                    storage.insert(check_indexing(nibbles_from_hex(k)), bytes.fromhex(v))
                state.storage_tries[path] = storage
                storage_root = storage.root_commitment()
            acc = Account(int(rec["balance"]), rec["nonce"], bytes.fromhex(rec["code_hash"]), storage_root)
            state.state_trie.insert(path, acc.encode())
        state.finalize_setup()
        return state

    def save(self, filename: str) -> None:
        with open(filename, "w") as fh:
            self.dump(fh)

    @classmethod
    def from_file(cls, filename: str) -> "WorldState":
        with open(filename) as fh:
            return cls.load(fh)


# -- traces --------------------------------------------------------------

TRACE_FIELDS = ("kind", "from", "to", "slot", "value", "block")


@dataclass(frozen=True, slots=True)
class TraceRecord:
    kind: str  # transfer | storage_write
    sender: AccountRef
    recipient: AccountRef
    slot: Optional[bytes] = None
    value: int = 0
    block: int = 0

    def __post_init__(self):
        if self.kind not in ("transfer", "storage_write"):
            raise StructuralError(f"unknown record kind {self.kind!r}")
        if (self.slot is not None) != (self.kind == "storage_write"):
            raise StructuralError("slot must be present exactly for storage writes")
        if self.slot is not None and len(self.slot) != 32:
            raise StructuralError("slot must be 32 bytes")
        if self.value < 0:
            raise StructuralError("value must be non-negative")

    def to_json(self) -> str:
        return json.dumps({
            "kind": self.kind,
            "from": _ref_hex(self.sender),
            "to": _ref_hex(self.recipient),
            "slot": None if self.slot is None else self.slot.hex(),
            "value": str(self.value),
            "block": self.block,
        })

    @classmethod
    def from_json(cls, line: str) -> "TraceRecord":
        d = json.loads(line)
        missing = [k for k in TRACE_FIELDS if k not in d]
        if missing:
            raise StructuralError(f"trace record missing {missing}")
        return cls(
            kind=d["kind"],
            sender=_parse_ref(d["from"]),
            recipient=_parse_ref(d["to"]),
            slot=None if d["slot"] is None else bytes.fromhex(d["slot"]),
            value=int(d["value"]),
            block=int(d["block"]),
        )


def _ref_hex(ref: AccountRef) -> str:
    if isinstance(ref, (bytes, bytearray)):
        return bytes(ref).hex()
    return nibbles_to_hex(ref)


def _parse_ref(text: str) -> AccountRef:
    text = text[2:] if text.startswith("0x") else text
    if len(text) == 40:
        return bytes.fromhex(text)
    if len(text) == 64:
        return check_indexing(nibbles_from_hex(text))
    raise StructuralError(f"account reference must be 40 or 64 hex chars: {text!r}")


def write_trace(records: Iterable[TraceRecord], filename: str) -> int:
    n = 0
    with open(filename, "w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
            n += 1
    return n


def read_trace(filename: str) -> list[TraceRecord]:
    with open(filename) as fh:
        return [TraceRecord.from_json(line) for line in fh if line.strip()]


def value_bytes(value: int) -> bytes:
    return value.to_bytes(max(1, (value.bit_length() + 7) // 8), "big") if value else b""


@dataclass
class ReplayResult:
    blocks: list = field(default_factory=list)  # (block number, TouchReport)
    total: TouchReport = field(default_factory=TouchReport)
    rejected: list = field(default_factory=list)  # (record index, reason)


def apply_record(state: WorldState, rec: TraceRecord) -> TouchReport:
    if rec.kind == "transfer":
        return state.apply_transfer(rec.sender, rec.recipient, rec.value, rec.block)
    return state.apply_storage_write(rec.recipient, storage_indexing(rec.slot), value_bytes(rec.value), rec.block)


def replay(
    state: WorldState,
    trace: Iterable[TraceRecord],
    strict: bool = False,
    on_record: Optional[Callable[[int, TraceRecord, TouchReport], None]] = None,
) -> ReplayResult:
    """Apply records in order, flushing at every block boundary.

    Rejected records are logged and skipped unless ``strict`` is set, in which
    case the first rejection is re-raised.
    """
    result = ReplayResult()
    current: Optional[int] = None
    block_report = TouchReport()

    def close_block():
        started = time.perf_counter()
        block_report.op4_nodes_persisted += state.end_block()
        block_report.wall_time += time.perf_counter() - started
        result.blocks.append((current, block_report))
        result.total.add(block_report)

    for i, rec in enumerate(trace):
        if current is not None and rec.block != current:
            close_block()
            block_report = TouchReport()
        current = rec.block
        try:
            touch = apply_record(state, rec)
        except (StateError, StructuralError, KeyNotFound) as exc:
            if strict:
                raise
            log.warning("record %d rejected: %s", i, exc)
            result.rejected.append((i, str(exc)))
            continue
        block_report.add(touch)
        if on_record is not None:
            on_record(i, rec, touch)
    if current is not None:
        close_block()
    return result
