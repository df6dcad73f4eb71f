"""Command line entry point: compile, verify, run, and draw plans.

Exit codes: 0 ok, 1 task failure, 2 usage/parse error, 3 internal error,
4 analysis bound exceeded.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import yaml

from . import analysis
from .actions import FaultPlan
from .compiler import compile_plan
from .errors import PnmError, ScenarioError
from .kb import ABSENT, DeferringPort, GlobalKBPort, KBValue, PendingTicket, StaticGlobalKB
from .machine import MachineStatus
from .net import validate
from .plan_lang import PlanLangError, parse_domain, parse_plan
from .scenario import load_faults, load_oracle, load_scenario
from .scheduler import Scheduler, TicketStatus, VirtualClock, WallClock

EXIT_OK = 0
EXIT_TASK_FAILED = 1
EXIT_USAGE = 2
EXIT_INTERNAL = 3
EXIT_BOUND = 4


class ConsolePort(GlobalKBPort):
    """Interactive global side: every question is deferred to the user."""

    def defers(self, name: str) -> bool:
        return True

    def inform(self, name: str, value: KBValue) -> None:
        print(f"! {name} = {value}")

    def on_ticket(self, ticket: PendingTicket, now: float) -> None:
        print(f"? {ticket.ticket_id} {ticket.machine_id} {ticket.name}")


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PlanLangError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except analysis.BoundExceeded as exc:
        print(f"analysis bound exceeded: {exc}", file=sys.stderr)
        return EXIT_BOUND
    except ScenarioError as exc:
        print(f"scenario failed: {exc}", file=sys.stderr)
        return EXIT_TASK_FAILED
    except FileNotFoundError as exc:
        print(f"cannot read {exc.filename}", file=sys.stderr)
        return EXIT_USAGE
    except PnmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pnm", description=__doc__)
    sub = parser.add_subparsers(required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--domain", required=True, help="domain document (actions, params, checks)")
        p.add_argument("--plan", required=True, help="plan document (initial knowledge + nodes)")

    p = sub.add_parser("compile", help="compile and summarise the net")
    common(p)
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("run", help="execute the plan to completion")
    common(p)
    p.add_argument("--scenario", help="timed command script")
    p.add_argument("--faults", help="fault plan forcing outcomes/latencies")
    p.add_argument("--oracle", help="scripted answers for the global side")
    p.add_argument("--interactive", action="store_true", help="console answers open questions")
    p.add_argument("--seed", type=int, default=0, help="run seed (recorded; the engine is deterministic)")
    p.add_argument("--trace", help="write one structured record per line here")
    p.add_argument("--clock", choices=["virtual", "wall"], default="virtual")
    p.add_argument("--preempt-on-pause", action="store_true", help="preempt in-flight actions when pausing")
    p.add_argument("--max-ticks", type=int, default=10_000)
    p.add_argument("--abandon-after", type=float, default=None, help="fail machines blocked this many ticks")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="reachability and dead-node analysis")
    common(p)
    p.add_argument("--max-markings", type=int, default=analysis.DEFAULT_MAX_MARKINGS)
    p.add_argument("--max-tokens", type=int, default=analysis.DEFAULT_MAX_TOKENS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("dot", help="export the compiled net as Graphviz text")
    common(p)
    p.add_argument("--out", required=True, help="output path")
    p.add_argument("--marking", action="store_true", help="overlay the initial marking")
    p.set_defaults(func=cmd_dot)
    return parser


def _compile_files(domain_path: str, plan_path: str):
    domain = parse_domain(Path(domain_path).read_text())
    plan = parse_plan(Path(plan_path).read_text(), domain)
    return domain, plan, compile_plan(domain, plan)


def cmd_compile(args) -> int:
    _, _, machine = _compile_files(args.domain, args.plan)
    net = machine.net
    print(
        f"places={len(net.places)} transitions={len(net.transitions)} "
        f"goals={len(machine.goal_places)} fails={len(machine.fail_places)}"
    )
    for warning in validate(net):
        print(f"warning: {warning.kind}: {warning.message}")
    return EXIT_OK


def cmd_verify(args) -> int:
    _, _, machine = _compile_files(args.domain, args.plan)
    report = analysis.check(machine, args.max_markings, args.max_tokens)
    for line in report.lines():
        print(line)
    return EXIT_OK if report.healthy else EXIT_TASK_FAILED


def cmd_dot(args) -> int:
    _, _, machine = _compile_files(args.domain, args.plan)
    marking = machine.initial_marking if args.marking else None
    Path(args.out).write_text(analysis.export_dot(machine.net, marking))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    domain, plan, _ = _compile_files(args.domain, args.plan)
    if args.interactive:
        port: GlobalKBPort = ConsolePort()
    elif args.oracle:
        port = load_oracle(Path(args.oracle).read_text())
    elif args.scenario:
        # scripted runs answer questions through 'answer' commands
        port = DeferringPort()
    else:
        port = StaticGlobalKB()
    faults = load_faults(Path(args.faults).read_text()) if args.faults else FaultPlan()
    clock = WallClock() if args.clock == "wall" else VirtualClock()
    trace_stream = open(args.trace, "w") if args.trace else None
    try:
        scheduler = Scheduler(
            global_port=port,
            clock=clock,
            faults=faults,
            seed=args.seed,
            trace_stream=trace_stream,
            preempt_on_pause=args.preempt_on_pause,
            abandon_after=args.abandon_after,
        )
        scheduler.register_task("main", domain, plan)
        if args.scenario:
            scheduler.schedule_all(load_scenario(Path(args.scenario).read_text()))
        else:
            scheduler.launch("main")
        if args.interactive:
            _interactive_loop(scheduler, args.max_ticks)
        else:
            scheduler.run(max_ticks=args.max_ticks)
    finally:
        if trace_stream is not None:
            trace_stream.close()
    return _final_report(scheduler)


def _final_report(scheduler: Scheduler) -> int:
    code = EXIT_OK
    for machine_id in sorted(scheduler.machines):
        machine = scheduler.machines[machine_id]
        status = machine.status
        note = f" ({machine.fail_reason})" if machine.fail_reason else ""
        print(f"machine {machine_id}: {status.value}{note}")
        if status is MachineStatus.INTERNAL_ERROR:
            code = max(code, EXIT_INTERNAL)
        elif status is not MachineStatus.SUCCEEDED:
            code = max(code, EXIT_TASK_FAILED)
    return code


def _interactive_loop(scheduler: Scheduler, max_ticks: int) -> None:
    """Drive ticks until only a human can unblock things, then read a command.

    Protocol: `answer [<ticket>] <value>`, `task <name> [k=v ...]`,
    `pause <id>`, `resume <id>`, `status`, `quit`. Questions print as
    `? <ticket> <machine> <name>`.
    """
    ticks = 0
    while ticks < max_ticks:
        while ticks < max_ticks and not scheduler.idle() and not scheduler.finished():
            scheduler.tick()
            ticks += 1
        if scheduler.finished() and not _open_tickets(scheduler):
            return
        try:
            line = input("> ").strip()
        except EOFError:
            return
        if not line:
            continue
        try:
            if not _apply_console_line(scheduler, line):
                return
        except PnmError as exc:
            print(f"error: {exc}")


def _open_tickets(scheduler: Scheduler):
    return [t for t in scheduler.tickets.values() if t.status is TicketStatus.OPEN]


def _parse_value(text: str) -> KBValue:
    value = yaml.safe_load(text)
    return "" if value is None else value


def _apply_console_line(scheduler: Scheduler, line: str) -> bool:
    parts = line.split()
    command, rest = parts[0], parts[1:]
    if command == "quit":
        return False
    if command == "status":
        for machine_id in sorted(scheduler.machines):
            print(f"machine {machine_id}: {scheduler.machines[machine_id].status.value}")
        for ticket in _open_tickets(scheduler):
            print(f"? {ticket.ticket_id} {ticket.machine_id} {ticket.name}")
        return True
    if command == "answer":
        if rest and rest[0].isdigit():
            scheduler.deliver_answer(int(rest[0]), _parse_value(" ".join(rest[1:])))
        else:
            scheduler.deliver_answer(None, _parse_value(" ".join(rest)))
        return True
    if command == "task":
        if not rest:
            print("usage: task <name> [k=v ...]")
            return True
        args = {}
        for pair in rest[1:]:
            key, _, raw = pair.partition("=")
            args[key] = _parse_value(raw)
        scheduler.launch(rest[0], args)
        return True
    if command == "pause":
        scheduler.pause(int(rest[0]))
        return True
    if command == "resume":
        scheduler.resume(int(rest[0]))
        return True
    print(f"unknown command {command!r}")
    return True


if __name__ == "__main__":
    sys.exit(main())
