"""Desk-scale verification: reachability, boundedness, dead nodes, DOT export.

Reachability explores every admissible single-transition firing from the
initial marking, treating guards as nondeterministic choice: every outcome
of an event-guarded transition and both sides of every condition are
explored. That soundly over-approximates runtime behaviour, so a place the
graph never marks really is unreachable and a goal the graph reaches is
reachable under some outcome assignment.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .errors import PnmError
from .machine import Machine
from .net import Marking, Net, build_incidence, enabled_count, fire


class BoundExceeded(PnmError):
    """Exploration hit a bound; the net may be unbounded at these limits."""


DEFAULT_MAX_MARKINGS = 100_000
DEFAULT_MAX_TOKENS = 16


@dataclass
class ReachabilityGraph:
    root: tuple[int, ...]
    nodes: set[tuple[int, ...]] = field(default_factory=set)
    edges: list[tuple[tuple[int, ...], str, tuple[int, ...]]] = field(default_factory=list)

    def markings(self) -> list[tuple[int, ...]]:
        return sorted(self.nodes)


def reachability(
    machine: Machine,
    max_markings: int = DEFAULT_MAX_MARKINGS,
    max_tokens: int = DEFAULT_MAX_TOKENS,
) -> ReachabilityGraph:
    """Breadth-first graph of all markings reachable from the initial one."""
    if max_markings <= 0 or max_tokens <= 0:
        raise ValueError("bounds must be positive")
    net = machine.net
    matrices = machine.matrices
    root = machine.initial_marking.counts
    graph = ReachabilityGraph(root=root, nodes={root})
    queue: deque[tuple[int, ...]] = deque([root])
    while queue:
        current = queue.popleft()
        marking = Marking(current)
        for t in range(len(net.transitions)):
            if enabled_count(current, t, matrices) < 1:
                continue
            vector = [0] * len(net.transitions)
            vector[t] = 1
            nxt = fire(marking, vector, matrices).counts
            if any(c > max_tokens for c in nxt):
                raise BoundExceeded(
                    f"place exceeds {max_tokens} tokens after {net.transitions[t]!r}; "
                    "net may be unbounded at these limits"
                )
            graph.edges.append((current, net.transitions[t], nxt))
            if nxt not in graph.nodes:
                if len(graph.nodes) >= max_markings:
                    raise BoundExceeded(f"more than {max_markings} reachable markings")
                graph.nodes.add(nxt)
                queue.append(nxt)
    return graph


@dataclass
class CheckReport:
    unreachable_places: list[str]
    dead_transitions: list[str]
    goal_reachable: bool
    bound: int
    markings: int

    @property
    def healthy(self) -> bool:
        return not self.unreachable_places and not self.dead_transitions and self.goal_reachable

    def lines(self) -> list[str]:
        out = [
            f"reachable markings: {self.markings}",
            f"k-bound: {self.bound}",
            f"goal reachable: {'yes' if self.goal_reachable else 'NO'}",
        ]
        if self.unreachable_places:
            out.append(f"unreachable places: {', '.join(self.unreachable_places)}")
        else:
            out.append("unreachable places: none")
        if self.dead_transitions:
            out.append(f"dead transitions: {', '.join(self.dead_transitions)}")
        else:
            out.append("dead transitions: none")
        return out


def check(
    machine: Machine,
    max_markings: int = DEFAULT_MAX_MARKINGS,
    max_tokens: int = DEFAULT_MAX_TOKENS,
) -> CheckReport:
    """Reachability-derived health report for a compiled machine."""
    graph = reachability(machine, max_markings, max_tokens)
    net = machine.net
    seen_places = [False] * len(net.places)
    for node in graph.nodes:
        for p, count in enumerate(node):
            if count:
                seen_places[p] = True
    fired = {label for _, label, _ in graph.edges}
    unreachable = [net.places[p] for p in range(len(net.places)) if not seen_places[p]]
    dead = [t for t in net.transitions if t not in fired]
    goal = any(set(machine.goal_places) & {p for p, c in enumerate(node) if c} for node in graph.nodes)
    bound = max((max(node) for node in graph.nodes), default=0)
    return CheckReport(unreachable, dead, goal, bound, len(graph.nodes))


def export_dot(net: Net, marking: Marking | None = None, name: str = "net") -> str:
    """Graphviz text: circles for places, bars for transitions.

    Weight-1 arc labels are omitted by convention; a marking overlays
    token counts onto the place labels. Node order follows the net's
    indices so output is diff-stable.
    """
    lines = [f"digraph {name} {{", "  rankdir=LR;"]
    for i, label in enumerate(net.places):
        tokens = marking[i] if marking is not None else 0
        text = label if not tokens else f"{label}\\n{'●' * tokens if tokens <= 5 else f'{tokens} tokens'}"
        lines.append(f'  "p:{label}" [shape=circle label="{text}"];')
    for label in net.transitions:
        lines.append(f'  "t:{label}" [shape=box style=filled fillcolor=black height=0.12 label="" xlabel="{label}"];')
    def weight(w: int) -> str:
        return f' [label="{w}"]' if w > 1 else ""
    for (p, t), w in sorted(net.input_arcs.items()):
        lines.append(f'  "p:{net.places[p]}" -> "t:{net.transitions[t]}"{weight(w)};')
    for (t, p), w in sorted(net.output_arcs.items()):
        lines.append(f'  "t:{net.transitions[t]}" -> "p:{net.places[p]}"{weight(w)};')
    lines.append("}")
    return "\n".join(lines) + "\n"
