"""Closed-form impact and cost models, and their check against replay counts.

Impact: deepening ``num_account`` state leaves and ``num_slot`` storage leaves
from layer ``d_base`` to ``d_nurgle`` adds one handled node per touch per
extra layer, so the handled-node ratio is

    F = (N_state + A*(d_n - d_b) + N_storage + S*(d_n - d_b)) / (N_state + N_storage)

Cost: gas for the crafted inserts (21,000 per account leaf, a configurable
contract-call cost per storage leaf) priced in USD, plus rented GPU hours for
the multi-target collision search.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from typing import Iterable, Optional

from .state import TRANSFER_GAS, STORAGE_WRITE_GAS, LeafRef, TraceRecord, WorldState, replay

UNIT_SCALE = {
    "coin": 1.0,
    "gwei": 1e-9,
    "navax": 1e-9,
    "nano": 1e-9,
    "wei": 1e-18,
}


class DomainError(ValueError):
    pass


def _nonneg(**values):
    for name, v in values.items():
        if v < 0:
            raise DomainError(f"{name} must be non-negative, got {v}")


@dataclass(frozen=True, slots=True)
class ImpactParams:
    num_state_trie: float
    num_storage_tries: float
    num_account: float
    num_slot: float
    d_base: float
    d_nurgle: float

    def __post_init__(self):
        _nonneg(num_state_trie=self.num_state_trie, num_storage_tries=self.num_storage_tries,
                num_account=self.num_account, num_slot=self.num_slot)
        if self.d_nurgle < self.d_base:
            raise DomainError("d_nurgle must not be below d_base")


@dataclass(frozen=True, slots=True)
class ImpactReport:
    f_nurgle: float
    num_state_trie_after: float
    num_storage_tries_after: float

    @property
    def overhead(self) -> float:
        """Extra handled nodes as a fraction of the unattacked count."""
        return self.f_nurgle - 1.0


def impact_factor(p: ImpactParams) -> ImpactReport:
    base = p.num_state_trie + p.num_storage_tries
    if base == 0:
        raise DomainError("no handled nodes without the attack")
    delta = p.d_nurgle - p.d_base
    state_after = p.num_state_trie + p.num_account * delta
    storage_after = p.num_storage_tries + p.num_slot * delta
    return ImpactReport((state_after + storage_after) / base, state_after, storage_after)


# -- gas and money ----------------------------------------------------------


def insert_counts(num_account: float, num_slot: float, d_base: float, d_nurgle: float) -> tuple[float, float]:
    """Crafted inserts needed when each one deepens its target by two layers."""
    if d_nurgle < d_base:
        raise DomainError("d_nurgle must not be below d_base")
    _nonneg(num_account=num_account, num_slot=num_slot)
    half = (d_nurgle - d_base) / 2
    return num_account * half, num_slot * half


def gas_units(
    num_state_inserts: float,
    num_storage_inserts: float,
    cost_storage: float = STORAGE_WRITE_GAS,
    cost_state: float = TRANSFER_GAS,
) -> float:
    _nonneg(num_state_inserts=num_state_inserts, num_storage_inserts=num_storage_inserts,
            cost_storage=cost_storage, cost_state=cost_state)
    return num_state_inserts * cost_state + num_storage_inserts * cost_storage


def gas_cost_usd(price_gas: float, units_gas: float, price_coin: float, unit: str = "gwei") -> float:
    """USD paid for ``units_gas`` at ``price_gas`` (in ``unit`` of the native coin)."""
    _nonneg(price_gas=price_gas, units_gas=units_gas, price_coin=price_coin)
    try:
        scale = UNIT_SCALE[unit.lower()]
    except KeyError:
        raise DomainError(f"unknown gas price unit {unit!r}") from None
    return price_gas * scale * units_gas * price_coin


def gpu_cost(num_gpu: float, time_hours: float, price_gpu: float) -> float:
    _nonneg(num_gpu=num_gpu, time_hours=time_hours, price_gpu=price_gpu)
    return num_gpu * time_hours * price_gpu


def gpu_time(theta_over_p: float, phi: float, d_nurgle: float, d_base: float) -> float:
    """Single-GPU hours to collide ``phi * (d_nurgle - d_base) / 2`` targets at once."""
    arg = phi * (d_nurgle - d_base) / 2
    if arg < 1:
        raise DomainError(f"collision goal count {arg} is below 1")
    _nonneg(theta_over_p=theta_over_p)
    return theta_over_p * math.log(arg)


def gpus_needed(gpu_hours: float, deadline_hours: float) -> int:
    if deadline_hours <= 0:
        raise DomainError("deadline must be positive")
    return math.ceil(gpu_hours / deadline_hours)


def optimized_cost(retained_cost_fraction: float, base_g_gas: float) -> float:
    if not 0 <= retained_cost_fraction <= 1:
        raise DomainError("retained cost fraction must lie in [0, 1]")
    return retained_cost_fraction * base_g_gas


def total_cost(g_gas: float, g_gpu: float) -> float:
    return g_gas + g_gpu


def baseline_ratio(baseline_cost: float, attack_cost: float) -> float:
    """How many times more a spam baseline with equal impact costs."""
    if attack_cost <= 0:
        raise DomainError("attack cost must be positive")
    return baseline_cost / attack_cost


# -- parameter files ----------------------------------------------------------


@dataclass(frozen=True, slots=True)
class CostParams:
    price_coin: float = 0.0
    price_gas: float = 0.0
    gas_unit: str = "gwei"
    units_gas: Optional[float] = None  # derived from impact params when absent
    num_gpu: Optional[float] = None  # derived from the deadline when absent
    time_hours: float = 12.0
    price_gpu: float = 0.1
    cost_storage_insert: float = STORAGE_WRITE_GAS
    cost_state_insert: float = TRANSFER_GAS
    theta_over_p: float = 24.58
    retained_cost_fraction: float = 1.0
    optimized_num_gpu: Optional[float] = None
    optimized_time_hours: Optional[float] = None

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (int, float)) and not isinstance(v, bool) and v < 0:
                raise DomainError(f"{f.name} must be non-negative")


IMPACT_KEYS = {f.name for f in fields(ImpactParams)}
COST_KEYS = {f.name for f in fields(CostParams)}


def parse_params(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment; numbers parse as floats."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DomainError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = float(value.replace("_", "").replace(",", ""))
        except ValueError:
            out[key] = value
    return out


def bundled_params(name: str) -> dict:
    """Load a parameter file shipped with the package (e.g. ``ethereum``)."""
    ref = resources.files("mptlab").joinpath("data").joinpath(f"{name}.params")
    if not ref.is_file():
        raise FileNotFoundError(f"no bundled parameter file {name!r}")
    return parse_params(ref.read_text())


def bundled_names() -> list[str]:
    folder = resources.files("mptlab").joinpath("data")
    return sorted(p.name[: -len(".params")] for p in folder.iterdir() if p.name.endswith(".params"))


def split_params(values: dict) -> tuple[Optional[ImpactParams], CostParams, dict]:
    impact = None
    if IMPACT_KEYS <= values.keys():
        impact = ImpactParams(**{k: values[k] for k in IMPACT_KEYS})
    cost = CostParams(**{k: values[k] for k in COST_KEYS if k in values})
    extra = {k: v for k, v in values.items() if k not in IMPACT_KEYS | COST_KEYS}
    return impact, cost, extra


@dataclass
class EstimateReport:
    chain: str = ""
    f_nurgle: Optional[float] = None
    num_state_trie_after: Optional[float] = None
    num_storage_tries_after: Optional[float] = None
    state_inserts: Optional[float] = None
    storage_inserts: Optional[float] = None
    units_gas: float = 0.0
    g_gas: float = 0.0
    gpu_hours: Optional[float] = None
    num_gpu: Optional[float] = None
    g_gpu: float = 0.0
    g_nurgle: float = 0.0
    optimized_g_gas: float = 0.0
    optimized_g_gpu: float = 0.0
    optimized_g_nurgle: float = 0.0

    def rows(self) -> list[tuple[str, object]]:
        return list(asdict(self).items())


def estimate(values: dict) -> EstimateReport:
    """Run the whole impact and cost pipeline from one parameter set."""
    impact, cost, extra = split_params(values)
    report = EstimateReport(chain=str(extra.get("chain", "")))
    if impact is not None:
        ir = impact_factor(impact)
        report.f_nurgle = ir.f_nurgle
        report.num_state_trie_after = ir.num_state_trie_after
        report.num_storage_tries_after = ir.num_storage_tries_after
        report.state_inserts, report.storage_inserts = insert_counts(
            impact.num_account, impact.num_slot, impact.d_base, impact.d_nurgle)
    if cost.units_gas is not None:
        report.units_gas = cost.units_gas
    elif impact is not None:
        report.units_gas = gas_units(report.state_inserts, report.storage_inserts,
                                     cost.cost_storage_insert, cost.cost_state_insert)
    report.g_gas = gas_cost_usd(cost.price_gas, report.units_gas, cost.price_coin, cost.gas_unit)
    num_gpu = cost.num_gpu
    if impact is not None:
        phi = impact.num_account + impact.num_slot
        report.gpu_hours = gpu_time(cost.theta_over_p, phi, impact.d_nurgle, impact.d_base)
        if num_gpu is None:
            num_gpu = gpus_needed(report.gpu_hours, cost.time_hours)
    report.num_gpu = num_gpu
    report.g_gpu = gpu_cost(num_gpu or 0, cost.time_hours, cost.price_gpu)
    report.g_nurgle = total_cost(report.g_gas, report.g_gpu)
    report.optimized_g_gas = optimized_cost(cost.retained_cost_fraction, report.g_gas)
    opt_gpu = cost.optimized_num_gpu if cost.optimized_num_gpu is not None else (num_gpu or 0)
    opt_hours = cost.optimized_time_hours if cost.optimized_time_hours is not None else cost.time_hours
    report.optimized_g_gpu = gpu_cost(opt_gpu, opt_hours, cost.price_gpu)
    report.optimized_g_nurgle = total_cost(report.optimized_g_gas, report.optimized_g_gpu)
    return report


# -- model vs measurement -----------------------------------------------------


@dataclass
class ImpactValidation:
    params: Optional[ImpactParams]
    predicted: float
    measured: float
    measured_pre: int
    measured_post: int
    deepened_leaves: dict = field(default_factory=dict)  # LeafRef -> layers gained

    @property
    def relative_error(self) -> float:
        return abs(self.predicted - self.measured) / self.measured


def _touched_leaves(state: WorldState, rec: TraceRecord) -> set:
    from .keys import storage_indexing

    if rec.kind == "transfer":
        return {LeafRef(None, state.resolve(rec.sender)), LeafRef(None, state.resolve(rec.recipient))}
    owner = state.resolve(rec.recipient)
    return {LeafRef(owner, storage_indexing(rec.slot)), LeafRef(None, owner)}


def validate_impact(
    pre_state: WorldState,
    post_state: WorldState,
    trace: Iterable[TraceRecord],
) -> ImpactValidation:
    """Replay ``trace`` on copies of both states and compare handled-node counts.

    The six parameters come from the baseline replay: handled nodes per trie,
    and for every touch of a leaf that sits deeper in ``post_state`` the
    layers it gained.  Leaves absent from ``pre_state`` count as not deepened.
    """
    trace = list(trace)
    pre = pre_state.copy()
    post = post_state.copy()

    touches: list[LeafRef] = []

    def collect(i, rec, touch):
        touches.extend(sorted(_touched_leaves(pre, rec), key=LeafRef.label))

    base_run = replay(pre, trace, on_record=collect)
    attacked_run = replay(post, trace)
    measured_pre = base_run.total.op1_nodes_updated
    measured_post = attacked_run.total.op1_nodes_updated
    if measured_pre == 0:
        raise DomainError("baseline replay handled no nodes")

    gained: dict[LeafRef, int] = {}
    depth_pre: dict[LeafRef, int] = {}
    for leaf in set(touches):
        try:
            a = pre_state.leaf_depth(leaf)
            b = post_state.leaf_depth(leaf)
        except (KeyError, ValueError):
            continue
        if b > a:
            gained[leaf] = b - a
            depth_pre[leaf] = a

    acc_touch = slot_touch = 0
    acc_layers = slot_layers = 0
    base_layers = 0
    for leaf in touches:
        if leaf not in gained:
            continue
        base_layers += depth_pre[leaf]
        if leaf.owner is None:
            acc_touch += 1
            acc_layers += gained[leaf]
        else:
            slot_touch += 1
            slot_layers += gained[leaf]
    storage_pre = base_run.total.op1_storage_nodes
    state_pre = measured_pre - storage_pre
    total_touch = acc_touch + slot_touch
    if total_touch:
        d_base = base_layers / total_touch
        d_nurgle = d_base + (acc_layers + slot_layers) / total_touch
        params = ImpactParams(state_pre, storage_pre, acc_touch, slot_touch, d_base, d_nurgle)
    else:
        params = ImpactParams(state_pre, storage_pre, 0, 0, 0, 0)
    predicted = impact_factor(params).f_nurgle
    return ImpactValidation(params, predicted, measured_post / measured_pre, measured_pre, measured_post, gained)
