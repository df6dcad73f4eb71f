"""Loaders for the auxiliary run documents: scenarios, fault plans, oracles.

All three share the plan files' markup. A scenario is a timed command list
driving the scheduler; a fault plan forces action outcomes or latencies by
invocation index; an oracle scripts the global side's answers.

    scenario:                      faults:                oracle:
      - at: 0                        wait:                  restaurant:
        launch: {task: main}           1: {outcome: failed}    - answer: PizzaPlace
      - at: 9                                                    delay: 2
        answer: {value: yes}
      - at: 20
        expect_status: {machine: 1, status: succeeded}
"""

from __future__ import annotations

from .actions import FaultPlan
from .kb import ScriptedOracle
from .plan_lang import PlanSyntaxError, _load_yaml, _require_map
from .scheduler import Command

_COMMAND_KINDS = {
    "launch": "launch",
    "answer": "answer",
    "pause": "pause",
    "resume": "resume",
    "inject_fault": "inject-fault",
    "expect_status": "expect-status",
}


def load_scenario(document: str) -> list[Command]:
    data = _require_map(_load_yaml(document), "scenario document")
    unknown = set(data) - {"scenario"}
    if unknown:
        raise PlanSyntaxError(f"unknown scenario keys {sorted(unknown)!r}")
    entries = data.get("scenario")
    if not isinstance(entries, list):
        raise PlanSyntaxError("scenario must be a list of timed commands")
    commands = []
    for entry in entries:
        entry = _require_map(entry, "scenario entry")
        if "at" not in entry:
            raise PlanSyntaxError(f"scenario entry needs 'at': {entry!r}")
        at = entry["at"]
        if not isinstance(at, (int, float)) or isinstance(at, bool) or at < 0:
            raise PlanSyntaxError(f"'at' must be a non-negative time, got {at!r}")
        kinds = set(entry) - {"at"}
        if len(kinds) != 1:
            raise PlanSyntaxError(f"scenario entry needs exactly one command: {entry!r}")
        key = kinds.pop()
        if key not in _COMMAND_KINDS:
            raise PlanSyntaxError(f"unknown scenario command {key!r}")
        body = _require_map(entry[key], key)
        commands.append(Command(at=float(at), kind=_COMMAND_KINDS[key], data=dict(body)))
    return commands


def load_faults(document: str) -> FaultPlan:
    data = _require_map(_load_yaml(document), "fault document")
    unknown = set(data) - {"faults"}
    if unknown:
        raise PlanSyntaxError(f"unknown fault keys {sorted(unknown)!r}")
    try:
        return FaultPlan.from_data(_require_map(data.get("faults"), "faults"))
    except (KeyError, ValueError, TypeError) as exc:
        raise PlanSyntaxError(f"bad fault entry: {exc}")


def load_oracle(document: str) -> ScriptedOracle:
    data = _require_map(_load_yaml(document), "oracle document")
    unknown = set(data) - {"oracle"}
    if unknown:
        raise PlanSyntaxError(f"unknown oracle keys {sorted(unknown)!r}")
    try:
        return ScriptedOracle.from_data(_require_map(data.get("oracle"), "oracle"))
    except (KeyError, ValueError, TypeError) as exc:
        raise PlanSyntaxError(f"bad oracle entry: {exc}")
