"""Weighted place/transition nets and their matrix firing semantics.

A net is a bipartite graph of places and transitions with weighted arcs.
The token state is a marking vector; firing is pure integer matrix
arithmetic: ``m' = tbar @ d + m`` where ``d = d_plus - d_minus``.

Everything here is exact integer math and immutable after construction,
so nets, matrices and markings can be shared freely between execution
contexts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .errors import InadmissibleFiring

Arc = tuple[int, int]


@dataclass(frozen=True)
class Net:
    """Immutable weighted net.

    ``input_arcs`` maps (place, transition) to the arc weight (tokens
    consumed per firing); ``output_arcs`` maps (transition, place) to the
    weight produced. Weights are always >= 1 -- a multiset of parallel
    arcs is folded into its count.

    Build one with :class:`NetBuilder`::

        b = NetBuilder()
        b.place("p1"); b.place("p2"); b.transition("t")
        b.arc_pt("p1", "t", 2)
        b.arc_tp("t", "p2")
        net = b.build()
    """

    places: tuple[str, ...]
    transitions: tuple[str, ...]
    input_arcs: Mapping[Arc, int] = field(default_factory=dict)
    output_arcs: Mapping[Arc, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(set(self.places)) != len(self.places):
            raise ValueError("place labels must be unique")
        if len(set(self.transitions)) != len(self.transitions):
            raise ValueError("transition labels must be unique")
        for (p, t), w in self.input_arcs.items():
            self._check_endpoint(p, len(self.places), "place")
            self._check_endpoint(t, len(self.transitions), "transition")
            self._check_weight(w)
        for (t, p), w in self.output_arcs.items():
            self._check_endpoint(t, len(self.transitions), "transition")
            self._check_endpoint(p, len(self.places), "place")
            self._check_weight(w)

    @staticmethod
    def _check_endpoint(idx: int, size: int, kind: str) -> None:
        if not 0 <= idx < size:
            raise ValueError(f"arc references unknown {kind} index {idx}")

    @staticmethod
    def _check_weight(w: int) -> None:
        if not isinstance(w, int) or w < 1:
            raise ValueError(f"arc weight must be an integer >= 1, got {w!r}")

    def place_index(self, label: str) -> int:
        return self.places.index(label)

    def transition_index(self, label: str) -> int:
        return self.transitions.index(label)


class NetBuilder:
    """Incremental construction of a :class:`Net` by label."""

    def __init__(self) -> None:
        self._places: list[str] = []
        self._transitions: list[str] = []
        self._input: dict[Arc, int] = {}
        self._output: dict[Arc, int] = {}

    def place(self, label: str) -> int:
        if label in self._places or label in self._transitions:
            raise ValueError(f"duplicate node label {label!r}")
        self._places.append(label)
        return len(self._places) - 1

    def transition(self, label: str) -> int:
        if label in self._places or label in self._transitions:
            raise ValueError(f"duplicate node label {label!r}")
        self._transitions.append(label)
        return len(self._transitions) - 1

    def arc_pt(self, place: int | str, transition: int | str, weight: int = 1) -> None:
        p = self._places.index(place) if isinstance(place, str) else place
        t = self._transitions.index(transition) if isinstance(transition, str) else transition
        self._input[(p, t)] = self._input.get((p, t), 0) + weight

    def arc_tp(self, transition: int | str, place: int | str, weight: int = 1) -> None:
        t = self._transitions.index(transition) if isinstance(transition, str) else transition
        p = self._places.index(place) if isinstance(place, str) else place
        self._output[(t, p)] = self._output.get((t, p), 0) + weight

    def build(self) -> Net:
        return Net(
            places=tuple(self._places),
            transitions=tuple(self._transitions),
            input_arcs=dict(self._input),
            output_arcs=dict(self._output),
        )


@dataclass(frozen=True)
class Marking:
    """Token counts per place; length always equals |P|, entries >= 0."""

    counts: tuple[int, ...]

    def __post_init__(self) -> None:
        if any(c < 0 for c in self.counts):
            raise ValueError("marking entries must be non-negative")

    @classmethod
    def of(cls, net: Net, tokens: Mapping[str, int] | Iterable[str] = ()) -> Marking:
        """Marking from {place label: count} or an iterable of marked labels."""
        counts = [0] * len(net.places)
        items = tokens.items() if isinstance(tokens, Mapping) else ((l, 1) for l in tokens)
        for label, count in items:
            counts[net.place_index(label)] += count
        return cls(tuple(counts))

    def __getitem__(self, index: int) -> int:
        return self.counts[index]

    def __len__(self) -> int:
        return len(self.counts)

    def total(self) -> int:
        return sum(self.counts)

    def marked(self) -> frozenset[int]:
        """Indices of places holding at least one token."""
        return frozenset(i for i, c in enumerate(self.counts) if c > 0)

    def labels(self, net: Net) -> dict[str, int]:
        return {net.places[i]: c for i, c in enumerate(self.counts) if c > 0}


@dataclass(frozen=True)
class IncidenceMatrices:
    """Consumption (d_minus), production (d_plus) and composite (d) matrices.

    All three are |T| x |P| integer matrices with d = d_plus - d_minus,
    elementwise. Entries hold arc weights, so multi-token arcs are
    represented exactly.
    """

    d_minus: tuple[tuple[int, ...], ...]
    d_plus: tuple[tuple[int, ...], ...]
    d: tuple[tuple[int, ...], ...]


def build_incidence(net: Net) -> IncidenceMatrices:
    """Derive the incidence matrices from a net's arc weights."""
    n_t, n_p = len(net.transitions), len(net.places)
    d_minus = [[0] * n_p for _ in range(n_t)]
    d_plus = [[0] * n_p for _ in range(n_t)]
    for (p, t), w in net.input_arcs.items():
        d_minus[t][p] = w
    for (t, p), w in net.output_arcs.items():
        d_plus[t][p] = w
    d = [[d_plus[t][p] - d_minus[t][p] for p in range(n_p)] for t in range(n_t)]
    freeze = lambda m: tuple(tuple(row) for row in m)
    return IncidenceMatrices(freeze(d_minus), freeze(d_plus), freeze(d))


def enabled_count(marking: Marking | Sequence[int], t: int, m: IncidenceMatrices) -> int:
    """How many times transition ``t`` could fire from ``marking``.

    A transition with no input arcs is formally enabled without limit;
    its count is capped at 1 per step so source-less entry transitions
    cannot diverge.
    """
    row = m.d_minus[t]
    counts = marking.counts if isinstance(marking, Marking) else marking
    best: int | None = None
    for p, need in enumerate(row):
        if need > 0:
            n = counts[p] // need
            best = n if best is None else min(best, n)
    return 1 if best is None else best


def fire(marking: Marking, tbar: Sequence[int], m: IncidenceMatrices) -> Marking:
    """Apply a firing vector: returns ``tbar @ d + marking``.

    ``tbar`` must be jointly admissible: the marking must cover the total
    consumption of all firings at once. Raises :class:`InadmissibleFiring`
    otherwise; the input marking is never mutated.
    """
    if len(tbar) != len(m.d_minus):
        raise ValueError("firing vector length must equal |T|")
    if any(n < 0 for n in tbar):
        raise ValueError("firing counts must be non-negative")
    n_p = len(marking)
    consumed = [0] * n_p
    produced = [0] * n_p
    for t, n in enumerate(tbar):
        if n == 0:
            continue
        for p in range(n_p):
            consumed[p] += n * m.d_minus[t][p]
            produced[p] += n * m.d_plus[t][p]
    for p in range(n_p):
        if marking[p] - consumed[p] < 0:
            raise InadmissibleFiring(
                f"place {p} holds {marking[p]} tokens but firing consumes {consumed[p]}"
            )
    return Marking(tuple(marking[p] - consumed[p] + produced[p] for p in range(n_p)))


@dataclass(frozen=True)
class StructureWarning:
    kind: str
    subject: str
    message: str


def validate(net: Net) -> list[StructureWarning]:
    """Structural lint: isolated nodes and degenerate transitions.

    Warnings, not failures -- a place with several outgoing transitions is
    legitimate (outcome branching relies on it) and is not reported.
    """
    warnings: list[StructureWarning] = []
    place_touched = [False] * len(net.places)
    trans_in = [False] * len(net.transitions)
    trans_out = [False] * len(net.transitions)
    for (p, t) in net.input_arcs:
        place_touched[p] = True
        trans_in[t] = True
    for (t, p) in net.output_arcs:
        place_touched[p] = True
        trans_out[t] = True
    for i, touched in enumerate(place_touched):
        if not touched:
            warnings.append(
                StructureWarning("isolated-place", net.places[i], f"place {net.places[i]!r} has no arcs")
            )
    for i in range(len(net.transitions)):
        if not trans_in[i] and not trans_out[i]:
            warnings.append(
                StructureWarning(
                    "isolated-transition",
                    net.transitions[i],
                    f"transition {net.transitions[i]!r} has no inputs and no outputs",
                )
            )
    return warnings
