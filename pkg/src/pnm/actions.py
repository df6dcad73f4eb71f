"""Asynchronous action protocol: start, monitor, preempt, three terminal outcomes.

Action bodies are generator functions driven by the runtime. They yield
requests -- Sleep to consume (virtual) time, KbQuery/KbUpdate/KbDelete to
talk to the knowledge stores -- and receive the response of each request
back at the yield point. Returning a mapping finishes the action as
succeeded and installs the mapping into the owning machine's local store
as result fields, where the next parameter autofill will see them.

Every effect a running body has on its machine funnels through the
per-machine event queue, so bodies may interleave freely with machine
stepping while runs stay deterministic under the virtual clock. A fault
plan can force outcomes or stretch latencies per invocation to exercise
every outcome branch of a compiled net.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Generator, Iterator

from . import kb as kbmod
from .errors import PnmError
from .kb import ABSENT, GlobalUnavailable, KBValue, KnowledgeStore, PendingTicket, Scope
from .machine import Event, EventKind, Machine, Outcome


class UnknownAction(PnmError):
    pass


class NotActive(PnmError):
    pass


class NotKBCapable(PnmError):
    pass


class ActionFailed(PnmError):
    """Raised by a body to finish with the failed outcome."""


# -- requests a body may yield ----------------------------------------------


@dataclass(frozen=True)
class Sleep:
    duration: float


@dataclass(frozen=True)
class KbQuery:
    scope: Scope
    name: str


@dataclass(frozen=True)
class KbUpdate:
    scope: Scope
    name: str
    value: KBValue


@dataclass(frozen=True)
class KbDelete:
    name: str


@dataclass(frozen=True)
class RunTask:
    """Run a registered task as a sub-machine; resumes with its final status."""

    task: str
    args: dict


Request = Sleep | KbQuery | KbUpdate | KbDelete | RunTask
ActionBody = Callable[[dict[str, KBValue]], Generator[Request, Any, "dict[str, KBValue] | None"]]


class ActionKind(Enum):
    PLAIN = "plain"
    KB_CAPABLE = "kb-capable"


@dataclass(frozen=True)
class ActionSpec:
    name: str
    kind: ActionKind
    params: tuple[str, ...] = ()
    result_fields: tuple[str, ...] = ()
    body: ActionBody | None = None


class HandleState(Enum):
    PENDING = "pending"
    ACTIVE = "active"
    DONE = "done"


@dataclass
class ActionHandle:
    """One in-flight invocation; transitions pending -> active -> done."""

    instance_id: int
    machine_id: int
    box: int
    spec: ActionSpec
    goal: dict[str, KBValue]
    state: HandleState = HandleState.PENDING
    outcome: Outcome | None = None
    result: dict[str, KBValue] = field(default_factory=dict)
    started_at: float = 0.0
    finished_at: float | None = None
    waiting_ticket: PendingTicket | None = None
    _gen: Iterator | None = None
    _forced: Outcome | None = None
    _extra_latency: float = 0.0


@dataclass(frozen=True)
class FaultEntry:
    outcome: Outcome | None = None
    latency: float = 0.0


class FaultPlan:
    """Forced outcomes and added latencies keyed by (action, invocation index).

    Invocation indices are 1-based: entry 1 applies to the first start of
    that action name. Absent entries mean nominal behaviour.
    """

    def __init__(self, entries: dict[str, dict[int, FaultEntry]] | None = None):
        self._entries = {k: dict(v) for k, v in (entries or {}).items()}

    @classmethod
    def from_data(cls, data: dict) -> FaultPlan:
        entries: dict[str, dict[int, FaultEntry]] = {}
        for action, by_index in (data or {}).items():
            entries[str(action)] = {}
            for index, spec in (by_index or {}).items():
                spec = spec or {}
                outcome = Outcome(spec["outcome"]) if "outcome" in spec else None
                entries[str(action)][int(index)] = FaultEntry(outcome, float(spec.get("latency", 0)))
        return cls(entries)

    def entry(self, action: str, invocation: int) -> FaultEntry | None:
        return self._entries.get(action, {}).get(invocation)

    def add(self, action: str, invocation: int, entry: FaultEntry) -> None:
        self._entries.setdefault(action, {})[invocation] = entry


class ActionRegistry:
    """Name -> spec table of startable actions."""

    def __init__(self) -> None:
        self._specs: dict[str, ActionSpec] = {}

    def register(self, spec: ActionSpec, replace: bool = False) -> None:
        if spec.name in self._specs and not replace:
            raise ValueError(f"action {spec.name!r} already registered")
        self._specs[spec.name] = spec

    def get(self, name: str) -> ActionSpec:
        try:
            return self._specs[name]
        except KeyError:
            raise UnknownAction(f"no action named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._specs

    def names(self) -> list[str]:
        return sorted(self._specs)

    @classmethod
    def with_builtins(cls) -> ActionRegistry:
        registry = cls()
        for spec in BUILTIN_ACTIONS:
            registry.register(spec)
        return registry


# -- built-in simulated actions ----------------------------------------------

DUMMY_SERVER_DURATION = 1.0


def _numeric(value: KBValue, what: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ActionFailed(f"{what} must be numeric, got {value!r}")
    if value < 0:
        raise ActionFailed(f"{what} must be non-negative, got {value!r}")
    return float(value)


def _wait_body(goal):
    yield Sleep(_numeric(goal["time"], "time"))
    return {}


def _dummy_server_body(goal):
    yield Sleep(DUMMY_SERVER_DURATION)
    return {"time": goal["value"]}


def _echo_body(goal):
    return {"text": goal["text"]}
    yield  # makes this a generator; echo finishes immediately


def _kb_set_body(goal):
    yield KbUpdate(Scope.LOCAL, goal["name"], goal["value"])
    return {}


def _kb_copy_body(goal):
    value = yield KbQuery(Scope.ALL, goal["from"])
    if value is ABSENT:
        raise ActionFailed(f"nothing to copy: {goal['from']!r} is unknown everywhere")
    yield KbUpdate(Scope.LOCAL, goal["to"], value)
    return {}


def _kb_delete_body(goal):
    yield KbDelete(goal["name"])
    return {}


BUILTIN_ACTIONS = (
    ActionSpec("wait", ActionKind.PLAIN, params=("time",), body=_wait_body),
    ActionSpec(
        "dummy_server", ActionKind.KB_CAPABLE, params=("value",), result_fields=("time",), body=_dummy_server_body
    ),
    ActionSpec("echo", ActionKind.PLAIN, params=("text",), result_fields=("text",), body=_echo_body),
    ActionSpec("kb_set", ActionKind.KB_CAPABLE, params=("name", "value"), body=_kb_set_body),
    ActionSpec("kb_copy", ActionKind.KB_CAPABLE, params=("from", "to"), body=_kb_copy_body),
    ActionSpec("kb_delete", ActionKind.KB_CAPABLE, params=("name",), body=_kb_delete_body),
)


# -- the runtime --------------------------------------------------------------


def _noop_trace(kind: str, machine_id: int, data: dict) -> None:
    pass


@dataclass
class ActionEnv:
    """Hooks the runtime needs from its host (the scheduler or a test harness)."""

    now: Callable[[], float]
    machine_of: Callable[[int], Machine]
    open_ticket: Callable[[int, int, str], PendingTicket]
    abandon_ticket: Callable[[PendingTicket], None] = lambda ticket: None
    trace: Callable[[str, int, dict], None] = _noop_trace
    run_subtask: Callable[[ActionHandle, str, dict], None] | None = None


class ActionRuntime:
    """Drives action bodies: scheduling, knowledge calls, outcome delivery.

    Completions and wakeups are timers ordered by (due time, creation
    order); `deliver_due` fires everything due at the current instant.
    Each started handle posts exactly one outcome event, ever.
    """

    def __init__(self, env: ActionEnv, faults: FaultPlan | None = None):
        self.env = env
        self.faults = faults or FaultPlan()
        self.handles: dict[int, ActionHandle] = {}
        self._ids = itertools.count(1)
        self._timer_seq = itertools.count()
        self._timers: list[tuple[float, int, int, str]] = []  # (due, seq, handle, kind)
        self._invocations: dict[str, int] = {}

    # -- lifecycle -----------------------------------------------------------

    def start(self, spec: ActionSpec, goal: dict[str, KBValue], machine_id: int, box: int = 0) -> ActionHandle:
        """Begin an invocation; the body runs against the virtual clock."""
        handle = ActionHandle(
            instance_id=next(self._ids),
            machine_id=machine_id,
            box=box,
            spec=spec,
            goal=dict(goal),
            started_at=self.env.now(),
        )
        self.handles[handle.instance_id] = handle
        invocation = self._invocations.get(spec.name, 0) + 1
        self._invocations[spec.name] = invocation
        fault = self.faults.entry(spec.name, invocation)
        self.env.trace(
            "action-start",
            machine_id,
            {"action": spec.name, "instance": handle.instance_id, "goal": _jsonable(goal), "invocation": invocation},
        )
        handle.state = HandleState.ACTIVE
        if fault is not None and fault.outcome is not None:
            handle._forced = fault.outcome
            self._schedule(handle, "complete", delay=fault.latency)
            return handle
        if fault is not None:
            handle._extra_latency = fault.latency
        if spec.body is None:
            self._complete(handle, Outcome.SUCCEEDED, {})
            return handle
        handle._gen = spec.body(dict(goal))
        self._advance(handle, None)
        return handle

    def preempt(self, handle: ActionHandle) -> None:
        """Interrupt an active invocation; its terminal outcome becomes preempted.

        A completion that already reached the event queue wins the race:
        preempting a done handle is an error.
        """
        if handle.state is not HandleState.ACTIVE:
            raise NotActive(f"action instance {handle.instance_id} is {handle.state.value}")
        self._cancel_timers(handle)
        if handle._gen is not None:
            handle._gen.close()
        self._complete(handle, Outcome.PREEMPTED, {})

    def kb_call(
        self,
        handle: ActionHandle,
        op: str,
        scope: Scope,
        name: str,
        value: KBValue = ABSENT,
    ) -> KBValue | PendingTicket | None:
        """Knowledge access on behalf of a running body.

        Only kb-capable actions may call; a query miss against a deferring
        global port returns a PendingTicket and the caller suspends until
        the answer arrives.
        """
        if handle.spec.kind is not ActionKind.KB_CAPABLE:
            raise NotKBCapable(f"action {handle.spec.name!r} cannot access the knowledge base")
        if handle.state is not HandleState.ACTIVE:
            raise NotActive(f"action instance {handle.instance_id} is {handle.state.value}")
        machine = self.env.machine_of(handle.machine_id)
        if op == "query":
            result = kbmod.query(
                machine.local_kb,
                machine.global_port,
                scope,
                name,
                ticket_factory=lambda q: self.env.open_ticket(handle.machine_id, handle.instance_id, q),
                now=self.env.now(),
            )
            self.env.trace(
                "kb-query",
                handle.machine_id,
                {
                    "action": handle.spec.name,
                    "instance": handle.instance_id,
                    "scope": scope.value,
                    "name": name,
                    "pending": isinstance(result, PendingTicket),
                },
            )
            return result
        if op == "update":
            kbmod.update(machine.local_kb, machine.global_port, scope, name, value)
            self.env.trace(
                "kb-update",
                handle.machine_id,
                {"action": handle.spec.name, "instance": handle.instance_id, "scope": scope.value, "name": name},
            )
            return None
        if op == "delete":
            machine.local_kb.delete(name)
            self.env.trace(
                "kb-update",
                handle.machine_id,
                {"action": handle.spec.name, "instance": handle.instance_id, "scope": "local", "name": name, "deleted": True},
            )
            return None
        raise ValueError(f"unknown kb op {op!r}")

    def deliver_answer(self, handle: ActionHandle, value: KBValue) -> None:
        """Resume a body suspended on a pending knowledge ticket."""
        if handle.state is not HandleState.ACTIVE or handle.waiting_ticket is None:
            raise NotActive(f"action instance {handle.instance_id} is not waiting for an answer")
        handle.waiting_ticket = None
        self._advance(handle, value)

    def resume_body(self, handle: ActionHandle, value: Any) -> None:
        """Resume a body suspended on a sub-task or other host-side request."""
        if handle.state is not HandleState.ACTIVE:
            raise NotActive(f"action instance {handle.instance_id} is {handle.state.value}")
        self._advance(handle, value)

    # -- timers ---------------------------------------------------------------

    def deliver_due(self, now: float) -> int:
        """Fire all timers due at or before ``now``; returns how many fired."""
        fired = 0
        while True:
            due = sorted(t for t in self._timers if t[0] <= now)
            if not due:
                return fired
            entry = due[0]
            self._timers.remove(entry)
            _, _, handle_id, kind = entry
            handle = self.handles[handle_id]
            fired += 1
            if kind == "wake":
                self._advance(handle, None)
            else:
                self._complete(handle, handle._forced or Outcome.SUCCEEDED, {})

    def pending_timers(self) -> int:
        return len(self._timers)

    def active_handles(self, machine_id: int | None = None) -> list[ActionHandle]:
        return [
            h
            for h in self.handles.values()
            if h.state is HandleState.ACTIVE and (machine_id is None or h.machine_id == machine_id)
        ]

    def _schedule(self, handle: ActionHandle, kind: str, delay: float) -> None:
        self._timers.append((self.env.now() + max(delay, 0.0), next(self._timer_seq), handle.instance_id, kind))

    def _cancel_timers(self, handle: ActionHandle) -> None:
        self._timers = [t for t in self._timers if t[2] != handle.instance_id]

    # -- body driving -----------------------------------------------------------

    def _advance(self, handle: ActionHandle, send_value: Any) -> None:
        gen = handle._gen
        while True:
            try:
                request = gen.send(send_value)
            except StopIteration as stop:
                result = stop.value or {}
                if handle._extra_latency > 0:
                    # fault-injected latency: hold the finished result back
                    handle._forced = Outcome.SUCCEEDED
                    handle.result = dict(result)
                    self._schedule(handle, "complete", delay=handle._extra_latency)
                    handle._extra_latency = 0.0
                    return
                self._complete(handle, Outcome.SUCCEEDED, dict(result))
                return
            except ActionFailed as exc:
                self._complete(handle, Outcome.FAILED, {}, error=str(exc))
                return
            except Exception as exc:  # body bug: surfaces as a failed outcome
                self._complete(handle, Outcome.FAILED, {}, error=f"{type(exc).__name__}: {exc}")
                return
            try:
                send_value, suspended = self._perform(handle, request)
            except ActionFailed as exc:
                gen.close()
                self._complete(handle, Outcome.FAILED, {}, error=str(exc))
                return
            except Exception as exc:
                gen.close()
                self._complete(handle, Outcome.FAILED, {}, error=f"{type(exc).__name__}: {exc}")
                return
            if suspended:
                return

    def _perform(self, handle: ActionHandle, request: Request) -> tuple[Any, bool]:
        if isinstance(request, Sleep):
            self._schedule(handle, "wake", delay=request.duration)
            return None, True
        try:
            if isinstance(request, KbQuery):
                result = self.kb_call(handle, "query", request.scope, request.name)
                if isinstance(result, PendingTicket):
                    handle.waiting_ticket = result
                    return None, True
                return result, False
            if isinstance(request, KbUpdate):
                self.kb_call(handle, "update", request.scope, request.name, request.value)
                return None, False
            if isinstance(request, KbDelete):
                self.kb_call(handle, "delete", Scope.LOCAL, request.name)
                return None, False
            if isinstance(request, RunTask):
                if self.env.run_subtask is None:
                    raise ActionFailed("no scheduler available to run sub-tasks")
                self.env.run_subtask(handle, request.task, dict(request.args))
                return None, True
        except (NotKBCapable, GlobalUnavailable) as exc:
            raise ActionFailed(str(exc)) from exc
        raise ValueError(f"action body yielded {request!r}; expected a Request")

    def _complete(self, handle: ActionHandle, outcome: Outcome, result: dict, error: str | None = None) -> None:
        if handle.state is HandleState.DONE:
            return
        if handle._forced is Outcome.SUCCEEDED and handle.result:
            result = handle.result
        handle.state = HandleState.DONE
        handle.outcome = outcome
        handle.result = result if outcome is Outcome.SUCCEEDED else {}
        handle.finished_at = self.env.now()
        self._cancel_timers(handle)
        if handle.waiting_ticket is not None:
            self.env.abandon_ticket(handle.waiting_ticket)
            handle.waiting_ticket = None
        machine = self.env.machine_of(handle.machine_id)
        for name, field_value in handle.result.items():
            machine.local_kb.set(name, field_value)
            self.env.trace(
                "kb-update",
                handle.machine_id,
                {"action": handle.spec.name, "instance": handle.instance_id, "scope": "local", "name": name, "from": "result"},
            )
        payload = {
            "action": handle.spec.name,
            "instance": handle.instance_id,
            "outcome": outcome.value,
            "result": _jsonable(handle.result),
        }
        if error:
            payload["error"] = error
        self.env.trace("action-end", handle.machine_id, payload)
        machine.post_event(
            Event(
                source=handle.instance_id,
                kind=EventKind.OUTCOME,
                box=handle.box,
                outcome=outcome,
                result=tuple(handle.result.items()),
            )
        )


def _jsonable(data: dict) -> dict:
    return {k: (repr(v) if v is ABSENT else v) for k, v in data.items()}
