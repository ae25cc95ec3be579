"""Merkle Patricia Trie stress laboratory.

Trie and world-state accounting, keccak prefix grinding, the leaf-deepening
planner, and closed-form impact and cost estimators.
"""

from .keys import (
    StructuralError,
    account_indexing,
    keccak256,
    path_from_digest,
    slot_indexing,
)
from .trie import KeyNotFound, Trie
from .state import TouchReport, TraceRecord, WorldState, replay
from .collision import CollisionResult, CollisionTarget, GrindSpec, collide_multi, collide_single, expected_trials
from .planner import ActiveAccountFilter, AttackPlan, InsertPayload, plan_attack, select_targets, emit_payload_trace
from .estimator import ImpactParams, impact_factor, gas_units, gas_cost_usd, gpu_cost, gpu_time, optimized_cost

__version__ = "0.1.0"
