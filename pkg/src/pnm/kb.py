"""Local and global knowledge stores with scoped query/update and autofill.

Each running machine owns a disjoint local store; a shared global port
(static data, a scripted oracle, or a live console user) answers what the
local store cannot. ABSENT is a real value distinct from empty text or an
empty list, so "no answer" is never conflated with data.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Union

from .errors import PnmError


class _Absent:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "ABSENT"

    def __bool__(self) -> bool:
        return False


ABSENT = _Absent()

KBValue = Union[str, int, float, bool, list, _Absent]


class Scope(Enum):
    LOCAL = "local"
    GLOBAL = "global"
    ALL = "all"


class MissingParam(PnmError):
    def __init__(self, name: str):
        super().__init__(f"no value available for parameter {name!r}")
        self.name = name


class GlobalUnavailable(PnmError):
    """The global port rejected an inform."""


@dataclass(frozen=True)
class PendingTicket:
    """A question forwarded to the global side, answered later."""

    ticket_id: int
    machine_id: int
    action_id: int
    name: str


class KnowledgeStore:
    """Case-sensitive name -> value map owned by a single machine."""

    def __init__(self, entries: dict[str, KBValue] | None = None):
        self._entries: dict[str, KBValue] = dict(entries or {})

    def get(self, name: str) -> KBValue:
        return self._entries.get(name, ABSENT)

    def set(self, name: str, value: KBValue) -> None:
        if not name:
            raise ValueError("knowledge names must be non-empty")
        if value is ABSENT:
            raise ValueError("cannot store ABSENT; use delete")
        self._entries[name] = value

    def delete(self, name: str) -> None:
        self._entries.pop(name, None)

    def snapshot(self) -> dict[str, KBValue]:
        return dict(self._entries)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)


class GlobalKBPort:
    """Abstract query/inform endpoint behind the local store.

    ``lookup`` is the non-blocking path used by guard evaluation and
    autofill: it answers immediately or returns ABSENT. ``defers`` says
    whether an explicit query for the name should open a ticket to be
    answered later (e.g. by a user).
    """

    def lookup(self, name: str) -> KBValue:
        return ABSENT

    def defers(self, name: str) -> bool:
        return False

    def inform(self, name: str, value: KBValue) -> None:
        raise GlobalUnavailable(f"global side rejected update of {name!r}")

    def on_ticket(self, ticket: PendingTicket, now: float) -> None:
        """Called once when a deferred query opened a ticket."""

    def due_answers(self, now: float) -> list[tuple[int, KBValue]]:
        """(ticket_id, value) pairs whose scripted delay has elapsed."""
        return []


class StaticGlobalKB(GlobalKBPort):
    """Fixed name->value table; read-only unless ``writable``."""

    def __init__(self, entries: dict[str, KBValue] | None = None, writable: bool = False):
        self._entries = dict(entries or {})
        self._writable = writable

    def lookup(self, name: str) -> KBValue:
        return self._entries.get(name, ABSENT)

    def inform(self, name: str, value: KBValue) -> None:
        if not self._writable:
            raise GlobalUnavailable(f"static global store is read-only, rejected {name!r}")
        self._entries[name] = value

    def snapshot(self) -> dict[str, KBValue]:
        return dict(self._entries)


class DeferringPort(GlobalKBPort):
    """Turns every question into an open ticket; answers come from outside.

    Used by scripted scenario runs where 'answer' commands play the user.
    Informs are accepted and recorded.
    """

    def __init__(self) -> None:
        self.informs: list[tuple[str, KBValue]] = []

    def defers(self, name: str) -> bool:
        return True

    def inform(self, name: str, value: KBValue) -> None:
        self.informs.append((name, value))


@dataclass
class _ScriptEntry:
    answer: KBValue
    delay: float = 0.0


class ScriptedOracle(GlobalKBPort):
    """Plays a user: defers scripted questions and answers after a delay.

    ``script`` maps a question name to a list of answers consumed in
    order, each optionally delayed by virtual time. Unscripted names
    answer ABSENT immediately (the oracle does not know).
    """

    def __init__(self, script: dict[str, list[_ScriptEntry]] | None = None):
        self._script = {k: list(v) for k, v in (script or {}).items()}
        self._pending: list[tuple[float, int, KBValue]] = []
        self.questions_asked: list[str] = []

    @classmethod
    def from_data(cls, data: dict) -> ScriptedOracle:
        """Build from the oracle file shape: {name: [{answer, delay?}, ...]}."""
        script: dict[str, list[_ScriptEntry]] = {}
        for name, entries in (data or {}).items():
            if not isinstance(entries, list):
                entries = [entries]
            parsed = []
            for e in entries:
                if isinstance(e, dict):
                    parsed.append(_ScriptEntry(e["answer"], float(e.get("delay", 0))))
                else:
                    parsed.append(_ScriptEntry(e))
            script[str(name)] = parsed
        return cls(script)

    def defers(self, name: str) -> bool:
        return bool(self._script.get(name))

    def on_ticket(self, ticket: PendingTicket, now: float) -> None:
        entry = self._script[ticket.name].pop(0)
        self.questions_asked.append(ticket.name)
        self._pending.append((now + entry.delay, ticket.ticket_id, entry.answer))

    def due_answers(self, now: float) -> list[tuple[int, KBValue]]:
        due = sorted(e for e in self._pending if e[0] <= now)
        self._pending = [e for e in self._pending if e[0] > now]
        return [(tid, value) for _, tid, value in due]


TicketFactory = Callable[[str], PendingTicket]


def query(
    local: KnowledgeStore,
    port: GlobalKBPort,
    scope: Scope,
    name: str,
    ticket_factory: TicketFactory | None = None,
    now: float = 0.0,
) -> KBValue | PendingTicket:
    """Resolve a name through the scoped store chain.

    ALL consults the local store first and only falls through to the
    global port on a miss. A port miss may open a PendingTicket when a
    ticket factory is supplied and the port defers the question;
    otherwise the miss is ABSENT. Absence and pending are values here,
    not errors.
    """
    if not name:
        raise ValueError("query name must be non-empty")
    if scope in (Scope.LOCAL, Scope.ALL):
        value = local.get(name)
        if value is not ABSENT or scope is Scope.LOCAL:
            return value
    value = port.lookup(name)
    if value is not ABSENT:
        return value
    if ticket_factory is not None and port.defers(name):
        ticket = ticket_factory(name)
        port.on_ticket(ticket, now)
        return ticket
    return ABSENT


def update(
    local: KnowledgeStore,
    port: GlobalKBPort,
    scope: Scope,
    name: str,
    value: KBValue,
) -> None:
    """Write a value at the given scope; ALL writes both sides.

    Raises :class:`GlobalUnavailable` if the port rejects the inform.
    """
    if value is ABSENT:
        raise ValueError("cannot write ABSENT")
    if scope in (Scope.LOCAL, Scope.ALL):
        local.set(name, value)
    if scope in (Scope.GLOBAL, Scope.ALL):
        port.inform(name, value)


def autofill(
    params: tuple[str, ...] | list[str],
    supplied: dict[str, KBValue],
    local: KnowledgeStore,
    port: GlobalKBPort,
) -> dict[str, KBValue]:
    """Bind every declared parameter to a value.

    Explicitly supplied arguments win; the rest resolve local-then-global
    (non-blocking: never opens a ticket). Any parameter left unresolved
    raises :class:`MissingParam`, which drives the precondition-check
    failure path.
    """
    goal: dict[str, KBValue] = {}
    for name in params:
        if name in supplied:
            goal[name] = supplied[name]
            continue
        value = local.get(name)
        if value is ABSENT:
            value = port.lookup(name)
        if value is ABSENT:
            raise MissingParam(name)
        goal[name] = value
    return goal
