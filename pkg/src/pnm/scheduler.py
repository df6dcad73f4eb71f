"""Concurrent execution of many machines with query arbitration.

The scheduler owns every machine, the shared global knowledge port and the
action runtime. Each tick advances the clock, delivers due action
completions and scripted answers, applies scheduled commands, then gives
every running machine one turn in id order; a turn drives the machine to
quiescence (repeated steps until nothing fires) so net traversal consumes
no virtual time and action timing alone determines the makespan.

External answers route by ticket: a machine whose action asked a question
parks as blocked and resumes exactly when its ticket is answered. The most
recently launched or answered machine is the foreground and receives
unaddressed answers. Everything is deterministic under the virtual clock:
identical scripts produce byte-identical traces.
"""

from __future__ import annotations

import itertools
import json
import time as _time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, IO

from .actions import (
    ActionEnv,
    ActionFailed,
    ActionKind,
    ActionRegistry,
    ActionRuntime,
    ActionSpec,
    FaultEntry,
    FaultPlan,
    HandleState,
    RunTask,
    UnknownAction,
)
from .compiler import compile_plan
from .errors import (
    AmbiguousTarget,
    InvalidStatus,
    NoOpenTicket,
    ScenarioError,
    UnknownTask,
)
from .kb import ABSENT, GlobalKBPort, KBValue, PendingTicket, StaticGlobalKB
from .machine import (
    EffectKind,
    Machine,
    MachineStatus,
    Outcome,
    StepReport,
    TERMINAL_STATUSES,
    TransitionEffect,
)
from .plan_lang import DomainSpec, KbOpNode, PlanSpec

# Safety valve: a machine that keeps firing without ever waiting is a plan
# bug (e.g. a knowledge-op-only while-true loop); halt it instead of hanging.
MAX_STEPS_PER_TURN = 10_000


class VirtualClock:
    """Deterministic integer-tick clock; advances only when told."""

    wall = False

    def __init__(self) -> None:
        self.now: float = 0

    def advance(self) -> float:
        self.now += 1
        return self.now


class WallClock:
    """Real time, quantised to ticks of ``interval`` seconds."""

    wall = True

    def __init__(self, interval: float = 0.05):
        self.interval = interval
        self._origin = _time.monotonic()
        self.now = 0.0

    def advance(self) -> float:
        _time.sleep(self.interval)
        self.now = _time.monotonic() - self._origin
        return self.now


class TicketStatus(Enum):
    OPEN = "open"
    ANSWERED = "answered"
    ABANDONED = "abandoned"


@dataclass
class Ticket:
    ticket_id: int
    machine_id: int
    action_id: int
    name: str
    status: TicketStatus = TicketStatus.OPEN
    opened_at: float = 0.0


@dataclass(frozen=True)
class TraceEvent:
    """One line of the run trace; sequence strictly increasing, time monotone."""

    seq: int
    time: float
    machine: int
    kind: str
    data: dict

    def json_line(self) -> str:
        t = int(self.time) if float(self.time).is_integer() else self.time
        return json.dumps(
            {"seq": self.seq, "t": t, "machine": self.machine, "kind": self.kind, "data": self.data},
            sort_keys=True,
        )


class Tracer:
    def __init__(self, stream: IO[str] | None = None):
        self.events: list[TraceEvent] = []
        self.stream = stream
        self._seq = itertools.count(1)

    def emit(self, time_now: float, kind: str, machine: int, data: dict) -> None:
        event = TraceEvent(next(self._seq), time_now, machine, kind, dict(data))
        self.events.append(event)
        if self.stream is not None:
            self.stream.write(event.json_line() + "\n")

    def lines(self) -> list[str]:
        return [e.json_line() for e in self.events]

    def of_kind(self, *kinds: str) -> list[TraceEvent]:
        return [e for e in self.events if e.kind in kinds]


@dataclass(frozen=True)
class Command:
    """A scheduled external command, as read from a scenario script."""

    at: float
    kind: str  # launch | answer | pause | resume | inject-fault | expect-status
    data: dict


@dataclass
class RoundReport:
    now: float
    fired: int = 0
    statuses: dict[int, str] = field(default_factory=dict)

    def terminal(self) -> dict[int, str]:
        terminal_values = {s.value for s in TERMINAL_STATUSES}
        return {m: s for m, s in self.statuses.items() if s in terminal_values}


@dataclass
class AnswerReport:
    ticket_id: int
    machine_id: int
    action_id: int
    name: str


class Scheduler:
    """Single writer over the machine registry; drives everything by ticks."""

    def __init__(
        self,
        registry: ActionRegistry | None = None,
        global_port: GlobalKBPort | None = None,
        clock: VirtualClock | WallClock | None = None,
        faults: FaultPlan | None = None,
        seed: int = 0,
        trace_stream: IO[str] | None = None,
        preempt_on_pause: bool = False,
        abandon_after: float | None = None,
    ):
        self.registry = registry or ActionRegistry.with_builtins()
        self.global_port = global_port or StaticGlobalKB()
        self.clock = clock or VirtualClock()
        self.seed = seed
        self.preempt_on_pause = preempt_on_pause
        self.abandon_after = abandon_after
        self.tracer = Tracer(trace_stream)
        self.tasks: dict[str, Machine] = {}
        self.machines: dict[int, Machine] = {}
        self.tickets: dict[int, Ticket] = {}
        self.foreground: int | None = None
        self.runtime = ActionRuntime(
            ActionEnv(
                now=lambda: self.clock.now,
                machine_of=self._machine_of,
                open_ticket=self._open_ticket,
                abandon_ticket=self._abandon_ticket,
                trace=self._trace,
                run_subtask=self._run_subtask,
            ),
            faults=faults,
        )
        self._machine_ids = itertools.count(1)
        self._ticket_ids = itertools.count(1)
        self._commands: list[tuple[float, int, Command]] = []
        self._command_seq = itertools.count()
        self._last_status: dict[int, MachineStatus] = {}
        self._subtask_parent: dict[int, int] = {}  # sub machine id -> parent handle id

    # -- registration -----------------------------------------------------------

    def register_task(self, name: str, domain: DomainSpec, plan: PlanSpec) -> Machine:
        """Compile and store a launchable task; the task also becomes an action.

        Registering makes the plan invocable from other plans: starting the
        task action launches a fresh machine and finishes with its status.
        Every action the plan binds must already be registered, so register
        sub-tasks before the plans that invoke them.
        """
        template = compile_plan(domain, plan)
        missing = sorted(
            {b.action for b in template.bindings.values() if b.action not in self.registry and b.action != name}
        )
        if missing:
            raise UnknownAction(f"task {name!r} uses unregistered actions: {missing}")
        self.tasks[name] = template
        self.registry.register(
            ActionSpec(name, ActionKind.PLAIN, params=(), body=_subtask_body(name)), replace=True
        )
        return template

    def register_machine(self, name: str, template: Machine) -> None:
        self.tasks[name] = template

    # -- operations ---------------------------------------------------------------

    def launch(self, task: str, args: dict[str, KBValue] | None = None) -> int:
        """Fresh machine + fresh disjoint local store; becomes the foreground."""
        if task not in self.tasks:
            raise UnknownTask(f"no task named {task!r}")
        machine_id = next(self._machine_ids)
        machine = self.tasks[task].fresh_instance(args)
        machine.machine_id = machine_id
        machine.global_port = self.global_port
        machine.status = MachineStatus.RUNNING
        self.machines[machine_id] = machine
        self._last_status[machine_id] = MachineStatus.RUNNING
        self.foreground = machine_id
        self._trace("status-change", machine_id, {"to": "running", "reason": "launch", "task": task})
        return machine_id

    def deliver_answer(
        self, ticket_id: int | None = None, value: KBValue = ABSENT, name: str | None = None
    ) -> AnswerReport:
        """Route an answer to one pending question and resume its machine.

        Without an explicit ticket id the answer goes to the foreground
        machine, which must have exactly one open ticket (optionally
        narrowed by question name).
        """
        ticket = self._resolve_ticket(ticket_id, name)
        ticket.status = TicketStatus.ANSWERED
        machine = self.machines[ticket.machine_id]
        machine.open_tickets.discard(ticket.ticket_id)
        self._trace(
            "ticket-answered",
            ticket.machine_id,
            {"ticket": ticket.ticket_id, "name": ticket.name, "value": _show(value)},
        )
        handle = self.runtime.handles[ticket.action_id]
        self.runtime.deliver_answer(handle, value)
        if machine.status is MachineStatus.BLOCKED:
            machine.status = MachineStatus.RUNNING
        self.foreground = ticket.machine_id
        self._note_status(ticket.machine_id)
        return AnswerReport(ticket.ticket_id, ticket.machine_id, ticket.action_id, ticket.name)

    def _resolve_ticket(self, ticket_id: int | None, name: str | None) -> Ticket:
        if ticket_id is not None:
            ticket = self.tickets.get(ticket_id)
            if ticket is None or ticket.status is not TicketStatus.OPEN:
                raise NoOpenTicket(f"no open ticket {ticket_id}")
            return ticket
        if self.foreground is None:
            raise NoOpenTicket("no foreground machine")
        candidates = [
            t
            for t in self.tickets.values()
            if t.machine_id == self.foreground and t.status is TicketStatus.OPEN
        ]
        if name is not None:
            candidates = [t for t in candidates if t.name == name]
        if not candidates:
            raise NoOpenTicket("the foreground machine has no open question")
        if len(candidates) > 1:
            raise AmbiguousTarget(
                f"tickets {sorted(t.ticket_id for t in candidates)} are all open; pass an explicit id"
            )
        return candidates[0]

    def pause(self, machine_id: int) -> None:
        """Withhold dispatch for one machine; open tickets are parked."""
        machine = self._machine_of(machine_id)
        if machine.status not in (MachineStatus.RUNNING, MachineStatus.BLOCKED):
            raise InvalidStatus(f"cannot pause a {machine.status.value} machine")
        machine.status = MachineStatus.PAUSED
        if self.preempt_on_pause:
            for handle in self.runtime.active_handles(machine_id):
                self.runtime.preempt(handle)
        self._note_status(machine_id, reason="pause")

    def resume(self, machine_id: int) -> None:
        """Restore dispatch; the newest parked question is re-prompted."""
        machine = self._machine_of(machine_id)
        if machine.status is not MachineStatus.PAUSED:
            raise InvalidStatus(f"cannot resume a {machine.status.value} machine")
        machine.status = MachineStatus.RUNNING
        open_tickets = [
            t for t in self.tickets.values()
            if t.machine_id == machine_id and t.status is TicketStatus.OPEN
        ]
        if open_tickets:
            newest = max(open_tickets, key=lambda t: t.ticket_id)
            self._trace(
                "ticket-open",
                machine_id,
                {"ticket": newest.ticket_id, "name": newest.name, "action": newest.action_id, "reprompt": True},
            )
        self._note_status(machine_id, reason="resume")

    def schedule(self, command: Command) -> None:
        self._commands.append((command.at, next(self._command_seq), command))

    def schedule_all(self, commands: list[Command]) -> None:
        for command in commands:
            self.schedule(command)

    # -- the tick ---------------------------------------------------------------------

    def tick(self) -> RoundReport:
        """Advance the clock one unit and drive the system to quiescence.

        Order inside a tick: due action completions first (a completion
        beats a racing preempt), then scripted answers, then scheduled
        commands, then one turn per running machine in id order. The loop
        repeats until nothing in this tick can make further progress.
        """
        self.clock.advance()
        now = self.clock.now
        report = RoundReport(now=now)
        progress = True
        while progress:
            progress = False
            if self.runtime.deliver_due(now):
                progress = True
            for ticket_id, value in self.global_port.due_answers(now):
                self.deliver_answer(ticket_id, value=value)
                progress = True
            if self._apply_due_commands(now):
                progress = True
            fired = self._step_machines()
            report.fired += fired
            if fired:
                progress = True
        self._check_abandonment(now)
        report.statuses = {m: self.machines[m].status.value for m in sorted(self.machines)}
        return report

    def run(self, max_ticks: int = 10_000) -> dict[int, str]:
        """Tick until every machine is terminal and no commands remain."""
        for _ in range(max_ticks):
            if self.finished():
                break
            self.tick()
        return {m: self.machines[m].status.value for m in sorted(self.machines)}

    def finished(self) -> bool:
        if self._commands:
            return False
        return all(m.status in TERMINAL_STATUSES for m in self.machines.values())

    def idle(self) -> bool:
        """Nothing can proceed without external input (answers or resume)."""
        if self._commands or self.runtime.pending_timers():
            return False
        waiting = (MachineStatus.BLOCKED, MachineStatus.PAUSED)
        return all(m.status in TERMINAL_STATUSES or m.status in waiting for m in self.machines.values())

    def _apply_due_commands(self, now: float) -> bool:
        due = sorted((c for c in self._commands if c[0] <= now), key=lambda c: (c[0], c[1]))
        if not due:
            return False
        for entry in due:
            self._commands.remove(entry)
            self._apply_command(entry[2])
        return True

    def _apply_command(self, command: Command) -> None:
        data = command.data
        if command.kind == "launch":
            self.launch(data["task"], data.get("args"))
        elif command.kind == "answer":
            try:
                self.deliver_answer(data.get("ticket"), data.get("value", ABSENT), data.get("name"))
            except (NoOpenTicket, AmbiguousTarget) as exc:
                raise ScenarioError(f"answer at t={command.at}: {exc}") from exc
        elif command.kind == "pause":
            self.pause(data["machine"])
        elif command.kind == "resume":
            self.resume(data["machine"])
        elif command.kind == "inject-fault":
            outcome = Outcome(data["outcome"]) if "outcome" in data else None
            self.runtime.faults.add(
                data["action"], int(data.get("invocation", 1)), FaultEntry(outcome, float(data.get("latency", 0)))
            )
        elif command.kind == "expect-status":
            machine = self._machine_of(data["machine"])
            if machine.status.value != data["status"]:
                raise ScenarioError(
                    f"expected machine {data['machine']} to be {data['status']} at t={command.at}, "
                    f"found {machine.status.value}"
                )
        else:
            raise ScenarioError(f"unknown scenario command {command.kind!r}")

    # -- machine turns -----------------------------------------------------------------

    def _step_machines(self) -> int:
        fired_total = 0
        for machine_id in sorted(self.machines):
            machine = self.machines[machine_id]
            if machine.status not in (MachineStatus.READY, MachineStatus.RUNNING):
                continue
            fired_total += self._turn(machine_id, machine)
        return fired_total

    def _turn(self, machine_id: int, machine: Machine) -> int:
        fired_total = 0
        for _ in range(MAX_STEPS_PER_TURN):
            if machine.status not in (MachineStatus.READY, MachineStatus.RUNNING):
                break
            report = machine.step()
            if report.error:
                self._note_status(machine_id, reason=report.error)
                break
            if not report.fired:
                break
            fired_total += len(report.fired)
            self._trace(
                "step",
                machine_id,
                {
                    "fired": report.fired_labels(machine.net),
                    "consumed": len(report.consumed),
                    "marking": machine.marking.labels(machine.net),
                },
            )
            for t, n in report.fired:
                self._trace("fired", machine_id, {"transition": machine.net.transitions[t], "count": n})
            self._execute_effects(machine_id, machine, report)
            self._note_status(machine_id)
        else:
            machine.status = MachineStatus.INTERNAL_ERROR
            machine.fail_reason = f"exceeded {MAX_STEPS_PER_TURN} steps in one turn"
            self._note_status(machine_id, reason=machine.fail_reason)
        if machine.status in TERMINAL_STATUSES:
            self._on_terminal(machine_id, machine)
        return fired_total

    def _execute_effects(self, machine_id: int, machine: Machine, report: StepReport) -> None:
        for t, n in report.fired:
            effect = machine.effects.get(t)
            if effect is None:
                continue
            for _ in range(n):
                if effect.kind is EffectKind.START_ACTION:
                    self._start_action(machine_id, machine, effect)
                else:
                    self._kb_op(machine_id, machine, effect.kb_op)

    def _start_action(self, machine_id: int, machine: Machine, effect: TransitionEffect) -> None:
        binding = machine.bindings[effect.box]
        goal = machine.staged_goals.pop(effect.box, None)
        if goal is None:
            goal = binding.args_dict()
        spec = self.registry.get(binding.action)
        self.runtime.start(spec, goal, machine_id, box=effect.box)

    def _kb_op(self, machine_id: int, machine: Machine, op: KbOpNode) -> None:
        if op.op == "set":
            value = list(op.value) if isinstance(op.value, tuple) else op.value
            machine.local_kb.set(op.name, value)
            self._trace("kb-update", machine_id, {"op": "set", "name": op.name, "value": _show(value)})
        elif op.op == "copy":
            value = machine.local_kb.get(op.source)
            if value is ABSENT:
                value = machine.global_port.lookup(op.source)
            self._trace("kb-query", machine_id, {"op": "copy", "name": op.source, "hit": value is not ABSENT})
            if value is not ABSENT:
                machine.local_kb.set(op.target, value)
                self._trace("kb-update", machine_id, {"op": "copy", "name": op.target, "value": _show(value)})
        else:
            machine.local_kb.delete(op.name)
            self._trace("kb-update", machine_id, {"op": "delete", "name": op.name})

    def _on_terminal(self, machine_id: int, machine: Machine) -> None:
        for handle in self.runtime.active_handles(machine_id):
            self.runtime.preempt(handle)
        for ticket in self.tickets.values():
            if ticket.machine_id == machine_id and ticket.status is TicketStatus.OPEN:
                ticket.status = TicketStatus.ABANDONED
                machine.open_tickets.discard(ticket.ticket_id)
        if machine_id in self._subtask_parent:
            parent_handle_id = self._subtask_parent.pop(machine_id)
            handle = self.runtime.handles[parent_handle_id]
            if handle.state is HandleState.ACTIVE:
                self.runtime.resume_body(handle, machine.status.value)

    def _run_subtask(self, handle, task: str, args: dict) -> None:
        sub_id = self.launch(task, args)
        self._subtask_parent[sub_id] = handle.instance_id

    def _check_abandonment(self, now: float) -> None:
        if self.abandon_after is None:
            return
        for ticket in list(self.tickets.values()):
            if ticket.status is not TicketStatus.OPEN:
                continue
            machine = self.machines[ticket.machine_id]
            if machine.status is MachineStatus.BLOCKED and now - ticket.opened_at > self.abandon_after:
                ticket.status = TicketStatus.ABANDONED
                machine.open_tickets.discard(ticket.ticket_id)
                self._trace(
                    "ticket-answered",
                    ticket.machine_id,
                    {"ticket": ticket.ticket_id, "name": ticket.name, "abandoned": True},
                )
                machine.status = MachineStatus.FAILED
                machine.fail_reason = f"abandoned: question {ticket.name!r} unanswered for {self.abandon_after} ticks"
                self._note_status(ticket.machine_id, reason=machine.fail_reason)
                self._on_terminal(ticket.machine_id, machine)

    # -- hooks for the action runtime ------------------------------------------------------

    def _machine_of(self, machine_id: int) -> Machine:
        try:
            return self.machines[machine_id]
        except KeyError:
            raise UnknownTask(f"no machine {machine_id}") from None

    def _open_ticket(self, machine_id: int, action_id: int, name: str) -> PendingTicket:
        ticket_id = next(self._ticket_ids)
        self.tickets[ticket_id] = Ticket(
            ticket_id, machine_id, action_id, name, TicketStatus.OPEN, opened_at=self.clock.now
        )
        self.machines[machine_id].open_tickets.add(ticket_id)
        self._trace("ticket-open", machine_id, {"ticket": ticket_id, "name": name, "action": action_id})
        return PendingTicket(ticket_id, machine_id, action_id, name)

    def _abandon_ticket(self, pending: PendingTicket) -> None:
        ticket = self.tickets.get(pending.ticket_id)
        if ticket is not None and ticket.status is TicketStatus.OPEN:
            ticket.status = TicketStatus.ABANDONED
            self.machines[ticket.machine_id].open_tickets.discard(ticket.ticket_id)

    def _trace(self, kind: str, machine_id: int, data: dict) -> None:
        self.tracer.emit(self.clock.now, kind, machine_id, data)

    def _note_status(self, machine_id: int, reason: str | None = None) -> None:
        machine = self.machines[machine_id]
        if self._last_status.get(machine_id) is machine.status:
            return
        self._last_status[machine_id] = machine.status
        data = {"to": machine.status.value}
        if reason:
            data["reason"] = reason
        elif machine.fail_reason and machine.status in (MachineStatus.FAILED, MachineStatus.INTERNAL_ERROR):
            data["reason"] = machine.fail_reason
        self._trace("status-change", machine_id, data)


def _subtask_body(task_name: str):
    def body(goal):
        status = yield RunTask(task_name, dict(goal))
        if status != MachineStatus.SUCCEEDED.value:
            raise ActionFailed(f"sub-task {task_name!r} finished {status}")
        return {}

    return body


def _show(value: Any) -> Any:
    if value is ABSENT:
        return "ABSENT"
    return value
