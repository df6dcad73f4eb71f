"""Executable machines: a net plus goal places and an event-driven step rule.

A machine extends a net with an initial marking, goal and fail places,
per-transition guards and a FIFO event buffer. Each step selects a jointly
admissible firing vector from the buffered events and the current marking
(the input-driven transition function), applies it with the matrix update,
and re-derives the machine status. The run has reached its goal exactly
when a goal place holds a token.

Guards either fire on tokens alone, optionally gated by a condition
evaluated against the machine's knowledge stores at firing time, or await
a buffered event from a specific action invocation site. Conflicts over
shared input tokens resolve deterministically by ascending transition
index, so identical inputs always produce identical traces.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable, Sequence

from . import plan_lang
from .errors import InadmissibleFiring, InvalidStatus
from .kb import ABSENT, GlobalKBPort, KBValue, KnowledgeStore, MissingParam, StaticGlobalKB, autofill
from .net import IncidenceMatrices, Marking, Net, build_incidence, enabled_count, fire
from .plan_lang import Expression, KbOpNode, TypeMismatch


class Outcome(Enum):
    SUCCEEDED = "succeeded"
    FAILED = "failed"
    PREEMPTED = "preempted"


class MachineStatus(Enum):
    READY = "ready"
    RUNNING = "running"
    BLOCKED = "blocked"
    PAUSED = "paused"
    SUCCEEDED = "succeeded"
    FAILED = "failed"
    INTERNAL_ERROR = "internal-error"


TERMINAL_STATUSES = frozenset(
    {MachineStatus.SUCCEEDED, MachineStatus.FAILED, MachineStatus.INTERNAL_ERROR}
)


class EventKind(Enum):
    OUTCOME = "outcome"
    KB_ANSWER = "kb-answer"
    COMMAND = "command"


@dataclass(frozen=True)
class Event:
    """One input symbol: an action outcome, a knowledge answer, or a command.

    Outcome events are buffered on the owning machine and consumed by at
    most one firing each; answers are routed to the suspended action.
    """

    source: int  # action instance id, 0 for external origins
    kind: EventKind
    box: int | None = None
    outcome: Outcome | None = None
    result: tuple[tuple[str, Any], ...] = ()
    name: str | None = None
    value: Any = None


class GuardKind(Enum):
    TOKEN_ONLY = "token-only"
    AWAITS_EVENT = "awaits-event"


class ConditionKind(Enum):
    ACTION_READY = "action-ready"
    ACTION_NOT_READY = "action-not-ready"
    EFFECTS_OK = "effects-ok"
    EFFECTS_NOT_OK = "effects-not-ok"
    EXPR_TRUE = "expr-true"
    EXPR_FALSE = "expr-false"


@dataclass(frozen=True)
class Condition:
    """Predicate evaluated against the knowledge stores at firing time."""

    kind: ConditionKind
    box: int | None = None
    expr: Expression | None = None


@dataclass(frozen=True)
class Guard:
    """Firing rule for one transition.

    Token-only guards fire as tokens allow; an attached condition caps
    them at one firing per step and gates on the predicate. Awaits-event
    guards additionally consume exactly one matching buffered event per
    firing, keyed by (invocation site, outcome).
    """

    kind: GuardKind
    event: tuple[int, Outcome] | None = None
    condition: Condition | None = None

    def matches(self, event: Event) -> bool:
        return (
            self.kind is GuardKind.AWAITS_EVENT
            and event.kind is EventKind.OUTCOME
            and self.event is not None
            and event.box == self.event[0]
            and event.outcome == self.event[1]
        )


TOKEN_GUARD = Guard(GuardKind.TOKEN_ONLY)


class EffectKind(Enum):
    START_ACTION = "start-action"
    KB_OP = "kb-op"


@dataclass(frozen=True)
class TransitionEffect:
    """Side effect the runtime performs when a transition fires."""

    kind: EffectKind
    box: int | None = None
    kb_op: KbOpNode | None = None


@dataclass(frozen=True)
class ActionBinding:
    """One action invocation site in the compiled net."""

    box_id: int
    action: str
    args: tuple[tuple[str, KBValue], ...]
    params: tuple[str, ...]
    preconditions: Expression | None
    effects: Expression | None
    kb_capable: bool = False

    def args_dict(self) -> dict[str, KBValue]:
        return dict(self.args)


@dataclass(frozen=True)
class StepReport:
    """What one step did: firings, consumed events, marking delta, status."""

    fired: tuple[tuple[int, int], ...]
    consumed: tuple[Event, ...]
    before: Marking
    after: Marking
    status: MachineStatus
    error: str | None = None

    def fired_labels(self, net: Net) -> list[str]:
        return [net.transitions[t] for t, _ in self.fired]


class Machine:
    """A net bound to goal places, guards and per-machine knowledge.

    The structure (net, matrices, guards, effects, bindings) is immutable
    and shared between instances; marking, buffer, status and the local
    store are per-instance run state. A machine is confined to one
    execution context at a time.
    """

    def __init__(
        self,
        net: Net,
        initial_marking: Marking,
        goal_places: Iterable[int],
        fail_places: Iterable[int] = (),
        guards: dict[int, Guard] | None = None,
        effects: dict[int, TransitionEffect] | None = None,
        bindings: dict[int, ActionBinding] | None = None,
        initial_knowledge: dict[str, KBValue] | None = None,
        global_port: GlobalKBPort | None = None,
    ):
        self.net = net
        self.matrices: IncidenceMatrices = build_incidence(net)
        self.goal_places = frozenset(goal_places)
        self.fail_places = frozenset(fail_places)
        n_p = len(net.places)
        for p in self.goal_places | self.fail_places:
            if not 0 <= p < n_p:
                raise ValueError(f"goal/fail place index {p} out of range")
        if self.goal_places & self.fail_places:
            raise ValueError("goal and fail places must be disjoint")
        if len(initial_marking) != n_p:
            raise ValueError("initial marking length must equal |P|")
        self.guards = dict(guards or {})
        self.effects = dict(effects or {})
        self.bindings = dict(bindings or {})
        self.initial_marking = initial_marking
        self.initial_knowledge = dict(initial_knowledge or {})
        self.marking = initial_marking
        self.status = MachineStatus.READY
        self.event_buffer: list[Event] = []
        self.local_kb = KnowledgeStore(self.initial_knowledge)
        self.global_port = global_port or StaticGlobalKB()
        self.machine_id = 0
        self.open_tickets: set[int] = set()
        self.staged_goals: dict[int, dict[str, KBValue]] = {}
        self.fail_reason: str | None = None

    # -- run state ---------------------------------------------------------

    def post_event(self, event: Event) -> None:
        self.event_buffer.append(event)
        if self.status is MachineStatus.BLOCKED and event.kind is EventKind.OUTCOME:
            self.status = MachineStatus.RUNNING

    def reset(self) -> None:
        """Back to the initial marking with an empty buffer, status ready."""
        self.marking = self.initial_marking
        self.event_buffer.clear()
        self.status = MachineStatus.READY
        self.open_tickets.clear()
        self.staged_goals.clear()
        self.fail_reason = None

    def fresh_instance(self, overrides: dict[str, KBValue] | None = None) -> Machine:
        """Independent copy with its own marking, buffer and local store."""
        clone = Machine(
            net=self.net,
            initial_marking=self.initial_marking,
            goal_places=self.goal_places,
            fail_places=self.fail_places,
            guards=self.guards,
            effects=self.effects,
            bindings=self.bindings,
            initial_knowledge=self.initial_knowledge,
            global_port=self.global_port,
        )
        for name, value in (overrides or {}).items():
            clone.local_kb.set(name, value)
        return clone

    def goal_reached(self, marking: Marking | None = None) -> bool:
        m = self.marking if marking is None else marking
        return bool(self.goal_places & m.marked())

    # -- transition selection (the input-driven firing rule) ----------------

    def select_firings(
        self, events: Sequence[Event] | None = None, marking: Marking | None = None
    ) -> tuple[tuple[int, ...], list[Event]]:
        """Choose a jointly admissible firing vector and the events it consumes.

        Greedy by ascending transition index: token-only transitions take
        their full enabled count (condition-gated ones at most one, and
        only if the condition holds now); awaits-event transitions take
        one firing per matching buffered event, oldest first. The result
        may be all-zero.
        """
        events = list(self.event_buffer if events is None else events)
        m = self.marking if marking is None else marking
        remaining = list(m.counts)
        vector = [0] * len(self.net.transitions)
        consumed: list[Event] = []
        for t in range(len(self.net.transitions)):
            guard = self.guards.get(t, TOKEN_GUARD)
            cap = enabled_count(remaining, t, self.matrices)
            if cap == 0:
                continue
            if guard.kind is GuardKind.AWAITS_EVENT:
                matching = [e for e in events if guard.matches(e)]
                n = min(len(matching), cap)
                for e in matching[:n]:
                    events.remove(e)
                    consumed.append(e)
            elif guard.condition is not None:
                n = 1 if self.evaluate_condition(guard.condition) else 0
            else:
                n = cap
            if n:
                vector[t] = n
                row = self.matrices.d_minus[t]
                for p in range(len(remaining)):
                    remaining[p] -= n * row[p]
        return tuple(vector), consumed

    def evaluate_condition(self, cond: Condition) -> bool:
        """Resolve a guard condition against the current knowledge stores.

        Evaluation is fail-soft: a missing parameter or a type mismatch in
        an expression makes the underlying check false rather than halting
        the machine, so the compiled fail route takes over.
        """
        if cond.kind is ConditionKind.ACTION_READY:
            return self._action_ready(cond.box, stage=True)
        if cond.kind is ConditionKind.ACTION_NOT_READY:
            return not self._action_ready(cond.box, stage=False)
        if cond.kind is ConditionKind.EFFECTS_OK:
            return self._effects_ok(cond.box)
        if cond.kind is ConditionKind.EFFECTS_NOT_OK:
            return not self._effects_ok(cond.box)
        if cond.kind is ConditionKind.EXPR_TRUE:
            return self._expr_holds(cond.expr)
        return not self._expr_holds(cond.expr)

    def _action_ready(self, box: int, stage: bool) -> bool:
        binding = self.bindings[box]
        try:
            goal = autofill(binding.params, binding.args_dict(), self.local_kb, self.global_port)
        except MissingParam:
            return False
        if binding.preconditions is not None and not self._expr_holds(binding.preconditions):
            return False
        if stage:
            self.staged_goals[box] = goal
        return True

    def _effects_ok(self, box: int) -> bool:
        binding = self.bindings[box]
        if binding.effects is None:
            return True
        return self._expr_holds(binding.effects)

    def _expr_holds(self, expr: Expression) -> bool:
        try:
            return plan_lang.evaluate(expr, self.local_kb, self.global_port)
        except TypeMismatch:
            return False

    # -- stepping ------------------------------------------------------------

    def step(self) -> StepReport:
        """One application of the firing rule followed by the matrix update."""
        if self.status not in (MachineStatus.READY, MachineStatus.RUNNING):
            raise InvalidStatus(f"machine is {self.status.value}, not steppable")
        if self.status is MachineStatus.READY:
            self.status = MachineStatus.RUNNING
        before = self.marking
        vector, consumed = self.select_firings()
        try:
            after = fire(before, vector, self.matrices)
        except InadmissibleFiring as exc:
            self.status = MachineStatus.INTERNAL_ERROR
            self.fail_reason = str(exc)
            return StepReport((), (), before, before, self.status, error=str(exc))
        for event in consumed:
            self.event_buffer.remove(event)
        self.marking = after
        fired = tuple((t, n) for t, n in enumerate(vector) if n)
        if self.goal_places & after.marked():
            self.status = MachineStatus.SUCCEEDED
        elif self.fail_places & after.marked():
            self.status = MachineStatus.FAILED
            self.fail_reason = self.fail_reason or "fail place marked"
        elif not fired and self.open_tickets:
            self.status = MachineStatus.BLOCKED
        else:
            self.status = MachineStatus.RUNNING
        return StepReport(fired, tuple(consumed), before, after, self.status)


def delta_hat(events: Sequence[Event], marking: Marking, machine: Machine) -> tuple[int, ...]:
    """The firing vector the machine would apply for the given inputs.

    Pure with respect to marking and buffer: neither is modified. Condition
    guards still read the machine's knowledge stores.
    """
    if machine.status not in (MachineStatus.READY, MachineStatus.RUNNING):
        raise InvalidStatus(f"machine is {machine.status.value}, not steppable")
    vector, _ = machine.select_firings(events, marking)
    return vector
