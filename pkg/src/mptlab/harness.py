"""End-to-end experiment pipeline and report serialization.

Stages: baseline replay, active-leaf selection, collision grinding, planning,
payload emission, payload application, attacked replay, model validation.
Each stage can also be driven on its own from the command line; the file
formats in between are the state and trace formats of :mod:`mptlab.state`.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

from .collision import GrindSpec, collide_multi
from .estimator import validate_impact
from .keys import keccak256
from .planner import (
    DEFAULT_MAX_LAYER,
    ActiveAccountFilter,
    AttackPlan,
    emit_payload_trace,
    exact_prefix_target,
    plan_on,
    required_positions,
    select_targets,
)
from .state import LeafRef, ReplayResult, TraceRecord, WorldState, replay
from .workload import ATTACKER

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True, slots=True)
class AttackConfig:
    enabled: bool = True
    threshold: int = 1
    window: Optional[tuple[int, int]] = None
    top: Optional[int] = None
    include_storage: bool = True
    max_prefix: int = 4
    max_deepening: Optional[int] = 4
    max_layer: int = DEFAULT_MAX_LAYER
    budget: int = 50_000_000
    worker_count: int = 1
    seed: int = 0
    attacker: bytes = ATTACKER
    payload_block: int = 0


@dataclass
class AttackOutcome:
    targets: list = field(default_factory=list)
    plans: list = field(default_factory=list)
    payload: list = field(default_factory=list)
    collision_targets: int = 0
    collision_found: int = 0
    collision_trials: int = 0


def _grind_template(seed: int, domain: str) -> bytes:
    width = 20 if domain == "address_20byte" else 32
    return keccak256(f"mptlab grind {seed} {domain}".encode())[:width]


def grind_candidates(
    state: WorldState,
    targets: list[LeafRef],
    cfg: AttackConfig,
) -> tuple[dict, int, int, int]:
    """Collide every divergence position the targets need.

    Returns ``(candidates by owner, target count, found count, trials)``.
    """
    wanted: dict[str, list] = {"address_20byte": [], "mapping_key_32byte": []}
    owner_of_tag: dict[str, Optional[tuple]] = {}
    seen = {}
    for leaf in targets:
        trie = state.trie_for(leaf.owner)
        positions = required_positions(trie, leaf.path, cfg.max_prefix, cfg.max_deepening, cfg.max_layer)
        domain = "address_20byte" if leaf.owner is None else "mapping_key_32byte"
        for p in positions:
            goal = exact_prefix_target(leaf.path, p, "")
            key = (leaf.owner, goal.prefix, goal.avoid)
            if key in seen:
                continue
            tag = f"{leaf.label()}@{p}"
            seen[key] = tag
            owner_of_tag[tag] = leaf.owner
            wanted[domain].append(exact_prefix_target(leaf.path, p, tag))

    by_owner: dict = {}
    total = found = trials = 0
    for domain, goals in wanted.items():
        if not goals:
            continue
        spec = GrindSpec(domain=domain, base=_grind_template(cfg.seed, domain), worker_count=cfg.worker_count)
        outcome = collide_multi(goals, spec, cfg.budget)
        total += len(goals)
        found += len(outcome)
        trials += outcome.trials
        if not outcome.complete:
            log.warning("%s: %d of %d prefixes collided within budget", domain, len(outcome), len(goals))
        for tag, res in outcome.items():
            by_owner.setdefault(owner_of_tag[tag], []).append(res)
    return by_owner, total, found, trials


def plan_targets(
    state: WorldState,
    targets: list[LeafRef],
    candidates: dict,
    cfg: AttackConfig,
) -> list[AttackPlan]:
    """Plan targets one after another on evolving copies of their tries."""
    work = {}
    plans = []
    for leaf in targets:
        if leaf.owner not in work:
            work[leaf.owner] = state.trie_for(leaf.owner).snapshot()
        trie = work[leaf.owner]
        plans.append(plan_on(trie, leaf.path, candidates.get(leaf.owner, []),
                             cfg.max_layer, leaf.owner, cfg.max_deepening))
    return plans


def run_attack(state: WorldState, cfg: AttackConfig) -> AttackOutcome:
    """Select targets from ``state.access_log``, grind, plan and emit the payload."""
    out = AttackOutcome()
    filt = ActiveAccountFilter(cfg.threshold, cfg.window, cfg.top, cfg.include_storage)
    out.targets = select_targets(state, filt)
    candidates, out.collision_targets, out.collision_found, out.collision_trials = grind_candidates(
        state, out.targets, cfg)
    out.plans = plan_targets(state, out.targets, candidates, cfg)
    out.payload = emit_payload_trace(out.plans, cfg.attacker, cfg.payload_block)
    return out


def probe_touch_costs(state: WorldState, leaves) -> dict:
    """Nodes rewritten by touching each leaf alone, on throwaway copies.

    Account leaves get a zero-value self transfer (nonce bump); storage
    leaves get their value rewritten, which also rewrites the owner account.
    """
    out = {}
    for leaf in leaves:
        probe = state.copy()
        if leaf.owner is None:
            out[leaf] = probe.apply_transfer(leaf.path, leaf.path, 0).op1_nodes_updated
        else:
            current, _ = probe.storage_tries[leaf.owner].get(leaf.path)
            value = (int.from_bytes(current, "big") + 1).to_bytes(len(current) + 1, "big")
            out[leaf] = probe.apply_storage_write(leaf.owner, leaf.path, value).op1_nodes_updated
    return out


# -- reports ----------------------------------------------------------------

REPORT_COLUMNS = ("record", "phase", "block", "metric", "value")


@dataclass
class BenchReport:
    summary: dict = field(default_factory=dict)
    blocks: list = field(default_factory=list)  # (phase, block, {metric: value})
    outcome: Optional[AttackOutcome] = field(default=None, compare=False, repr=False)
    validation: object = field(default=None, compare=False, repr=False)
    post_state: Optional[WorldState] = field(default=None, compare=False, repr=False)

    def counts(self) -> dict:
        """Everything except wall-clock fields, for determinism checks."""
        summary = {k: v for k, v in self.summary.items() if not k.endswith("seconds")}
        blocks = [(p, b, {k: v for k, v in m.items() if k != "wall_time"}) for p, b, m in self.blocks]
        return {"summary": summary, "blocks": blocks}

    def add_replay(self, phase: str, result: ReplayResult) -> None:
        for block, rep in result.blocks:
            metrics = rep.counts()
            metrics["wall_time"] = rep.wall_time
            self.blocks.append((phase, block, metrics))
        for name, value in result.total.counts().items():
            self.summary[f"{phase}.{name}"] = value
        self.summary[f"{phase}.rejected"] = len(result.rejected)
        self.summary[f"{phase}.wall_seconds"] = result.total.wall_time

    def rows(self):
        for name, value in self.summary.items():
            yield ("summary", "", "", name, value)
        for phase, block, metrics in self.blocks:
            for name, value in metrics.items():
                yield ("block", phase, block, name, value)


def _cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_cell(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def emit_report(report: BenchReport, fh, fmt: str = "csv") -> None:
    if fmt == "csv":
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in report.rows():
            writer.writerow([_cell(v) for v in row])
    elif fmt == "jsonl":
        for row in report.rows():
            fh.write(json.dumps(dict(zip(REPORT_COLUMNS, row))) + "\n")
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def parse_report(fh, fmt: str = "csv") -> BenchReport:
    if fmt == "csv":
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return BenchReport()
        if tuple(header) != REPORT_COLUMNS:
            raise ValueError(f"unexpected report header {header}")
        rows = [(r[0], r[1], _parse_cell(r[2]) if r[2] else "", r[3], _parse_cell(r[4])) for r in reader]
    elif fmt == "jsonl":
        rows = [tuple(json.loads(line)[c] for c in REPORT_COLUMNS) for line in fh if line.strip()]
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    report = BenchReport()
    for record, phase, block, metric, value in rows:
        if record == "summary":
            report.summary[metric] = value
            continue
        if not report.blocks or report.blocks[-1][:2] != (phase, block):
            report.blocks.append((phase, block, {}))
        report.blocks[-1][2][metric] = value
    return report


def report_text(report: BenchReport, fmt: str = "csv") -> str:
    buf = io.StringIO()
    emit_report(report, buf, fmt)
    return buf.getvalue()


# -- full pipeline ------------------------------------------------------------


def _stage(name, fn, *args, **kwargs):
    started = time.perf_counter()
    try:
        value = fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc
    log.info("stage %s done in %.2fs", name, time.perf_counter() - started)
    return value, time.perf_counter() - started


def run_experiment(pre_state: WorldState, trace: list[TraceRecord], cfg: AttackConfig = AttackConfig()) -> BenchReport:
    """Baseline replay, attack, attacked replay and model check in one go."""
    report = BenchReport()
    s = report.summary
    before = pre_state.node_counts()
    for k, v in before.items():
        s[f"pre.{k}"] = v

    base = pre_state.copy()
    baseline, secs = _stage("baseline", replay, base, trace)
    report.add_replay("baseline", baseline)
    s["baseline.stage_seconds"] = secs

    post = pre_state.copy()
    outcome = AttackOutcome()
    if cfg.enabled:
        outcome, secs = _stage("attack", run_attack, base, cfg)
        s["attack.stage_seconds"] = secs
        applied, secs = _stage("payload", replay, post, outcome.payload, True)
        report.add_replay("payload", applied)
    s["attack.targets"] = len(outcome.targets)
    s["attack.collision_targets"] = outcome.collision_targets
    s["attack.collision_found"] = outcome.collision_found
    s["attack.collision_trials"] = outcome.collision_trials
    s["attack.inserts"] = len(outcome.payload)
    strategies = Counter(p.strategy for plan in outcome.plans for p in plan.inserts)
    for name in ("S1", "S2", "S3"):
        s[f"attack.{name}"] = strategies[name]
    s["attack.planned_deepening"] = sum(plan.deepening for plan in outcome.plans)
    s["attack.planned_intermediates"] = sum(plan.new_intermediates for plan in outcome.plans)
    s["attack.collateral_leaves"] = sum(plan.collateral_leaves for plan in outcome.plans)
    histogram = Counter(plan.deepening for plan in outcome.plans)
    for k in sorted(histogram):
        s[f"attack.targets_deepened_by_{k}"] = histogram[k]

    after = post.node_counts()
    for k, v in after.items():
        s[f"post.{k}"] = v

    attacked, secs = _stage("attacked", replay, post.copy(), trace)
    report.add_replay("attacked", attacked)

    check, secs = _stage("validate", validate_impact, pre_state, post, trace)
    s["impact.predicted"] = check.predicted
    s["impact.measured"] = check.measured
    s["impact.relative_error"] = check.relative_error
    if check.params is not None:
        for name in ("num_state_trie", "num_storage_tries", "num_account", "num_slot", "d_base", "d_nurgle"):
            s[f"impact.{name}"] = getattr(check.params, name)
    s["impact.deepened_touched_leaves"] = len(check.deepened_leaves)
    s["root.pre"] = "0x" + pre_state.commitment().hex()
    s["root.post"] = "0x" + post.commitment().hex()
    report.outcome = outcome
    report.validation = check
    report.post_state = post
    return report
