"""Petri net machines: plans compiled to executable concurrent nets.

Declarative YAML plans become weighted Petri nets with goal places, an
event-driven transition function, auto-generated precondition/effect
checks and recovery routes, per-machine knowledge stores, and a scheduler
that interleaves many machines while routing user answers to the right
pending question.
"""

from .actions import ActionRegistry, ActionSpec, FaultPlan, Outcome
from .analysis import check, export_dot, reachability
from .compiler import compile_plan
from .kb import ABSENT, KnowledgeStore, Scope, ScriptedOracle, StaticGlobalKB
from .machine import Machine, MachineStatus
from .net import Marking, Net, NetBuilder, build_incidence, enabled_count, fire, validate
from .plan_lang import DomainSpec, PlanSpec, evaluate, parse_domain, parse_plan
from .scheduler import Scheduler, VirtualClock, WallClock

__all__ = [
    "ABSENT",
    "ActionRegistry",
    "ActionSpec",
    "compile_plan",
    "check",
    "DomainSpec",
    "evaluate",
    "export_dot",
    "FaultPlan",
    "fire",
    "build_incidence",
    "enabled_count",
    "KnowledgeStore",
    "Machine",
    "MachineStatus",
    "Marking",
    "Net",
    "NetBuilder",
    "Outcome",
    "parse_domain",
    "parse_plan",
    "PlanSpec",
    "reachability",
    "Scheduler",
    "Scope",
    "ScriptedOracle",
    "StaticGlobalKB",
    "validate",
    "VirtualClock",
    "WallClock",
]

__version__ = "0.1.0"
