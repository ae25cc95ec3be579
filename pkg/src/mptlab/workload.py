"""Seeded synthetic state and transaction traces.

Accounts and storage slots are ranked by a random permutation and drawn with
Zipf (or uniform) probabilities, so a few leaves take most of the touches,
which is what makes active-leaf targeting pay off.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .keys import keccak256, mapping_slot, storage_indexing
from .state import TraceRecord, WorldState

ATTACKER = keccak256(b"mptlab attacker")[:20]
INITIAL_BALANCE = 10**18


class WorkloadError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class WorkloadSpec:
    accounts: int = 1000
    contracts: int = 5
    slots_per_contract: int = 50
    blocks: int = 10
    txs_per_block: int = 100
    distribution: str = "zipf"  # zipf | uniform
    zipf_s: float = 1.1
    storage_write_ratio: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.accounts < 2:
            raise WorkloadError("need at least two accounts")
        if self.contracts < 0 or self.slots_per_contract < 0 or self.blocks < 0 or self.txs_per_block < 0:
            raise WorkloadError("counts must be non-negative")
        if self.distribution not in ("zipf", "uniform"):
            raise WorkloadError(f"unknown distribution {self.distribution!r}")
        if self.distribution == "zipf" and self.zipf_s <= 0:
            raise WorkloadError("zipf exponent must be positive")
        if not 0 <= self.storage_write_ratio <= 1:
            raise WorkloadError("storage_write_ratio must lie in [0, 1]")
        if self.storage_write_ratio > 0 and self.contracts * self.slots_per_contract == 0:
            raise WorkloadError("storage writes need contracts with slots")


def access_probabilities(n: int, spec: WorkloadSpec, rng: np.random.Generator) -> np.ndarray:
    """Per-item draw probabilities; item popularity ranks are a random permutation."""
    if spec.distribution == "uniform":
        return np.full(n, 1.0 / n)
    weights = 1.0 / np.arange(1, n + 1) ** spec.zipf_s
    weights /= weights.sum()
    return weights[rng.permutation(n)]


def _addresses(rng: np.random.Generator, n: int) -> list[bytes]:
    raw = rng.integers(0, 256, size=(n, 20), dtype=np.uint8)
    return [bytes(row) for row in raw]


def generate_workload(spec: WorkloadSpec) -> tuple[WorldState, list[TraceRecord]]:
    """Initial state plus a trace touching only pre-existing leaves."""
    rng = np.random.default_rng(spec.seed)
    state = WorldState()
    accounts = _addresses(rng, spec.accounts)
    contracts = _addresses(rng, spec.contracts)
    for addr in accounts:
        state.create_account(addr, INITIAL_BALANCE)
    state.create_account(ATTACKER, INITIAL_BALANCE)

    slots = []  # (contract address, 32-byte slot)
    for addr in contracts:
        state.create_account(addr, 0, contract=True)
        keys = rng.integers(0, 256, size=(spec.slots_per_contract, 32), dtype=np.uint8)
        for key in keys:
            slot = mapping_slot(bytes(key), 0)
            state.seed_storage(addr, storage_indexing(slot), b"\x01")
            slots.append((addr, slot))
    state.finalize_setup()

    n_tx = spec.blocks * spec.txs_per_block
    p_acc = access_probabilities(len(accounts), spec, rng)
    p_slot = access_probabilities(len(slots), spec, rng) if slots else None
    is_write = rng.random(n_tx) < spec.storage_write_ratio
    senders = rng.choice(len(accounts), size=n_tx, p=p_acc)
    recipients = rng.choice(len(accounts), size=n_tx, p=p_acc)
    slot_pick = rng.choice(len(slots), size=n_tx, p=p_slot) if slots else np.zeros(n_tx, dtype=int)
    amounts = rng.integers(1, 1000, size=n_tx)
    values = rng.integers(1, 10**6, size=n_tx)

    trace = []
    for i in range(n_tx):
        block = i // spec.txs_per_block
        sender = accounts[senders[i]]
        if is_write[i]:
            contract, slot = slots[slot_pick[i]]
            trace.append(TraceRecord("storage_write", sender, contract, slot, int(values[i]), block))
            continue
        r = recipients[i]
        while r == senders[i]:
            r = rng.choice(len(accounts), p=p_acc)
        trace.append(TraceRecord("transfer", sender, accounts[r], None, int(amounts[i]), block))
    return state, trace
