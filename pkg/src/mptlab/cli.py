"""Command-line front end.

Subcommands: build, replay, collide, attack, estimate, bench.  Data goes to
files or standard output, logs to standard error.  Exit codes: 0 success,
1 usage error, 2 stage failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
import time

from . import estimator
from .collision import CollisionTarget, GrindSpec, collide_multi
from .harness import (
    AttackConfig,
    BenchReport,
    StageError,
    emit_report,
    run_attack,
    run_experiment,
    grind_candidates,
    plan_targets,
)
from .keys import nibbles_from_hex
from .planner import DEFAULT_MAX_LAYER, emit_payload_trace, payload_records
from .state import DEFAULT_CACHE_CAPACITY, STORAGE_WRITE_GAS, LeafRef, WorldState, read_trace, replay, write_trace
from .workload import ATTACKER, WorkloadSpec, generate_workload

log = logging.getLogger("mptlab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _window(text: str) -> tuple[int, int]:
    try:
        lo, hi = text.split(":")
        return int(lo), int(hi)
    except ValueError:
        raise argparse.ArgumentTypeError("window must look like FIRST:LAST") from None


def _add_workload_args(p):
    g = p.add_argument_group("workload")
    g.add_argument("--accounts", type=int, default=1000, help="externally owned accounts (default 1000)")
    g.add_argument("--contracts", type=int, default=5, help="contract accounts (default 5)")
    g.add_argument("--slots", type=int, default=50, help="storage slots per contract (default 50)")
    g.add_argument("--blocks", type=int, default=10, help="blocks in the trace (default 10)")
    g.add_argument("--txs", type=int, default=100, help="transactions per block (default 100)")
    g.add_argument("--distribution", choices=("zipf", "uniform"), default="zipf")
    g.add_argument("--zipf-s", type=float, default=1.1, help="Zipf exponent (default 1.1)")
    g.add_argument("--write-ratio", type=float, default=0.3, help="share of storage writes (default 0.3)")
    g.add_argument("--seed", type=int, default=0)


def _add_attack_args(p):
    g = p.add_argument_group("attack")
    g.add_argument("--threshold", type=int, default=1, help="minimum touches for an active leaf (default 1)")
    g.add_argument("--window", type=_window, help="block range FIRST:LAST for counting touches")
    g.add_argument("--top", type=int, help="keep only the N busiest leaves")
    g.add_argument("--accounts-only", action="store_true", help="ignore storage leaves as targets")
    g.add_argument("--max-layer", type=int, default=DEFAULT_MAX_LAYER, help=f"deepest target layer (default {DEFAULT_MAX_LAYER})")
    g.add_argument("--max-prefix", type=int, default=4, help="longest prefix to collide, in nibbles (default 4)")
    g.add_argument("--max-deepening", type=int, default=4, help="layers to add per target (default 4)")
    g.add_argument("--budget", type=int, default=50_000_000, help="grinding trials per domain")
    g.add_argument("--workers", type=int, default=1, help="grinding processes (default 1)")
    g.add_argument("--grind-seed", type=int, default=0, help="selects the grinding template")
    g.add_argument("--attacker", default=ATTACKER.hex(), help="20-byte attacker address (hex)")


def _attack_config(args) -> AttackConfig:
    return AttackConfig(
        threshold=args.threshold,
        window=args.window,
        top=args.top,
        include_storage=not args.accounts_only,
        max_prefix=args.max_prefix,
        max_deepening=args.max_deepening,
        max_layer=args.max_layer,
        budget=args.budget,
        worker_count=args.workers,
        seed=args.grind_seed,
        attacker=bytes.fromhex(args.attacker.removeprefix("0x")),
    )


def _workload_spec(args) -> WorkloadSpec:
    return WorkloadSpec(
        accounts=args.accounts,
        contracts=args.contracts,
        slots_per_contract=args.slots,
        blocks=args.blocks,
        txs_per_block=args.txs,
        distribution=args.distribution,
        zipf_s=args.zipf_s,
        storage_write_ratio=args.write_ratio,
        seed=args.seed,
    )


@contextlib.contextmanager
def _open_out(path):
    if path in (None, "-"):
        yield sys.stdout
        return
    with open(path, "w", newline="") as fh:
        yield fh


# -- subcommands ----------------------------------------------------------------


def cmd_build(args) -> int:
    state, trace = generate_workload(_workload_spec(args))
    state.save(args.state_out)
    n = write_trace(trace, args.trace_out)
    log.info("wrote %s (%d accounts) and %s (%d records)", args.state_out, len(state.state_trie), args.trace_out, n)
    return 0


def cmd_replay(args) -> int:
    state = WorldState.from_file(args.state)
    state.cache = type(state.cache)(args.cache)
    if args.storage_gas is not None:
        state.storage_write_gas = args.storage_gas
    trace = read_trace(args.trace)
    result = replay(state, trace, strict=args.strict)
    report = BenchReport()
    report.add_replay(args.phase, result)
    with _open_out(args.report) as fh:
        emit_report(report, fh, args.format)
    if args.out_state:
        state.save(args.out_state)
    return 0


def cmd_collide(args) -> int:
    targets = [CollisionTarget(nibbles_from_hex(p), f"t{i}:{p}") for i, p in enumerate(args.prefix)]
    spec = GrindSpec(domain=args.domain, start_counter=args.start, worker_count=args.workers,
                     mapping_position=args.position,
                     base=bytes.fromhex(args.template) if args.template else b"")
    outcome = collide_multi(targets, spec, args.budget)
    with _open_out(args.out) as fh:
        for res in outcome.values():
            fh.write(json.dumps(res.to_record()) + "\n")
    log.info("%d of %d targets matched in %d trials", len(outcome), len(targets), outcome.trials)
    return 0 if outcome.complete else 2


def cmd_attack(args) -> int:
    state = WorldState.from_file(args.state)
    cfg = _attack_config(args)
    if args.target:
        targets = [LeafRef.parse(t) for t in args.target]
        candidates, *_ = grind_candidates(state, targets, cfg)
        plans = plan_targets(state, targets, candidates, cfg)
        payload = emit_payload_trace(plans, cfg.attacker, cfg.payload_block)
    else:
        out = run_attack(state, cfg)
        plans, payload = out.plans, out.payload
    write_trace(payload, args.payload_out)
    with _open_out(args.summary_out) as fh:
        for plan in plans:
            fh.write(json.dumps(plan.summary()) + "\n")
    if args.inserts_out:
        with open(args.inserts_out, "w") as fh:
            for rec in payload_records(plans):
                fh.write(json.dumps(rec) + "\n")
    log.info("%d targets, %d crafted inserts", len(plans), len(payload))
    return 0


def cmd_estimate(args) -> int:
    values = {}
    if args.chain:
        values.update(estimator.bundled_params(args.chain))
    for path in args.params or []:
        with open(path) as fh:
            values.update(estimator.parse_params(fh.read()))
    if args.active_count is not None:
        fractions = estimator.bundled_params("active_fractions")
        key = f"count_{args.active_count}"
        if key not in fractions:
            raise UsageError(f"no retained-cost fraction for count {args.active_count}")
        values["retained_cost_fraction"] = fractions[key]
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        values.update(estimator.parse_params(item))
    if not values:
        raise UsageError("give --chain or --params")
    report = estimator.estimate(values)
    with _open_out(args.out) as fh:
        if args.format == "jsonl":
            for k, v in report.rows():
                fh.write(json.dumps({"metric": k, "value": v}) + "\n")
        else:
            for k, v in report.rows():
                fh.write(f"{k} = {v}\n")
    return 0


def cmd_bench(args) -> int:
    if args.state and args.trace:
        state = WorldState.from_file(args.state)
        trace = read_trace(args.trace)
    elif args.state or args.trace:
        raise UsageError("--state and --trace go together")
    else:
        state, trace = generate_workload(_workload_spec(args))
    cfg = _attack_config(args)
    if args.no_attack:
        cfg = AttackConfig(enabled=False)
    started = time.perf_counter()
    report = run_experiment(state, trace, cfg)
    report.summary["total_seconds"] = time.perf_counter() - started
    with _open_out(args.report) as fh:
        emit_report(report, fh, args.format)
    if args.payload_out and report.outcome is not None:
        write_trace(report.outcome.payload, args.payload_out)
    return 0


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mptlab", description="Merkle Patricia Trie stress laboratory")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    parser.add_argument("--config", help="key = value file of flag defaults; flags override")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build", help="generate an initial state and a workload trace")
    _add_workload_args(p)
    p.add_argument("--state-out", required=True)
    p.add_argument("--trace-out", required=True)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("replay", help="apply a trace and report OP1-OP4 counts per block")
    p.add_argument("--state", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--out-state", help="write the resulting state here")
    p.add_argument("--report", help="report file (default stdout)")
    p.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    p.add_argument("--phase", default="replay", help="label for the report rows")
    p.add_argument("--strict", action="store_true", help="abort on the first rejected record")
    p.add_argument("--cache", type=int, default=DEFAULT_CACHE_CAPACITY, help="node cache capacity")
    p.add_argument("--storage-gas", type=int, default=None, help=f"gas per storage write (default {STORAGE_WRITE_GAS})")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("collide", help="grind inputs whose keccak digest starts with given prefixes")
    p.add_argument("--prefix", action="append", required=True, help="hex nibble prefix (repeatable)")
    p.add_argument("--domain", choices=("address_20byte", "mapping_key_32byte"), default="address_20byte")
    p.add_argument("--budget", type=int, default=10_000_000)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--start", type=int, default=0, help="first counter value")
    p.add_argument("--template", help="hex byte template (default all zero)")
    p.add_argument("--position", type=int, default=0, help="mapping declaration slot")
    p.add_argument("--out", help="output file (default stdout)")
    p.set_defaults(func=cmd_collide)

    p = sub.add_parser("attack", help="select targets, grind, plan and emit the payload trace")
    p.add_argument("--state", required=True, help="state file carrying an access log")
    p.add_argument("--target", action="append", help="explicit leaf (indexing or owner/indexing), repeatable")
    _add_attack_args(p)
    p.add_argument("--payload-out", required=True)
    p.add_argument("--summary-out", help="plan summaries (default stdout)")
    p.add_argument("--inserts-out", help="per-insert records")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("estimate", help="impact and cost models from a parameter file")
    p.add_argument("--chain", help="bundled parameter set: " + ", ".join(estimator.bundled_names()))
    p.add_argument("--params", action="append", help="key = value file (repeatable, later wins)")
    p.add_argument("--set", action="append", help="override one key=value")
    p.add_argument("--active-count", type=int, help="apply the retained-cost fraction for this touch threshold")
    p.add_argument("--format", choices=("text", "jsonl"), default="text")
    p.add_argument("--out")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("bench", help="full pipeline: baseline, attack, attacked replay, model check")
    _add_workload_args(p)
    _add_attack_args(p)
    p.add_argument("--state", help="initial state instead of a generated one")
    p.add_argument("--trace", help="workload trace instead of a generated one")
    p.add_argument("--no-attack", action="store_true")
    p.add_argument("--report", help="report file (default stdout)")
    p.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    p.add_argument("--payload-out", help="also write the payload trace")
    p.set_defaults(func=cmd_bench)
    return parser


def _config_defaults(parser, argv) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    with open(known.config) as fh:
        values = estimator.parse_params(fh.read())
    defaults = {k.replace("-", "_"): (int(v) if isinstance(v, float) and v.is_integer() else v) for k, v in values.items()}
    for action in parser._subparsers._group_actions:
        for sub in action.choices.values():
            sub.set_defaults(**defaults)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    try:
        _config_defaults(parser, argv)
    except (OSError, ValueError) as exc:
        print(f"mptlab: error: config: {exc}", file=sys.stderr)
        return 1
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"mptlab: error: {exc}", file=sys.stderr)
        return 1
    except StageError as exc:
        print(f"mptlab: stage failed: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as exc:
        print(f"mptlab: failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
