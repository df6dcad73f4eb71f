"""Translate a parsed domain and plan into an executable machine.

Every plan node expands to a box with one entry and one exit place; boxes
compose in plan order by identifying each exit with the next entry. The
action box template (normative, see docs/expansion.md):

    entry --pre_ok--> exec --succeeded--> done --eff_ok--> exit
      |                 |--failed-----> (per failed policy)
      |                 |--preempted--> (per preempted policy, default exit)
      |--pre_fail--> (per failed policy)        done --eff_fail--> (failed policy)

pre_ok fires only when parameter autofill succeeds and the preconditions
hold; its firing starts the action. The three outcome transitions await
the matching outcome event of that invocation site, so at most one fires
per invocation. Defaults: a failure routes to the shared machine fail
place, a preemption continues to the exit.

Concurrency compiles to a fork transition (one input, k outputs) and a
mirrored join; loops re-test their condition place on every pass; branch
conditions pick one of two guarded twin transitions. All conditions are
evaluated at transition-firing time against the machine's knowledge.

Compilation is deterministic: identical inputs yield identical nets,
indices and labels.
"""

from __future__ import annotations

import itertools

from .errors import CompileError
from .kb import KBValue
from .machine import (
    ActionBinding,
    Condition,
    ConditionKind,
    EffectKind,
    Guard,
    GuardKind,
    Machine,
    Outcome,
    TransitionEffect,
)
from .net import Marking, NetBuilder
from .plan_lang import (
    ActionNode,
    BranchNode,
    ConcurrentNode,
    DomainSpec,
    KbOpNode,
    LoopNode,
    PlanNode,
    PlanSpec,
    RecoveryPolicy,
)


def compile_plan(domain: DomainSpec, plan: PlanSpec) -> Machine:
    """Build the machine for a plan: net, guards, effects, bindings, knowledge.

    The final exit place is the goal; a single shared fail place collects
    every default failure route. The initial marking is one token on the
    first entry place.
    """
    compiler = _Compiler(domain)
    start = compiler.builder.place("start")
    exit_place = compiler.compile_seq(plan.plan, start)
    net = compiler.builder.build()
    return Machine(
        net=net,
        initial_marking=Marking.of(net, {"start": 1}),
        goal_places={exit_place},
        fail_places={compiler.fail_place} if compiler.fail_place is not None else (),
        guards=compiler.guards,
        effects=compiler.effects,
        bindings=compiler.bindings,
        initial_knowledge=plan.knowledge_dict(),
    )


class _Compiler:
    def __init__(self, domain: DomainSpec):
        self.domain = domain
        self.builder = NetBuilder()
        self.guards: dict[int, Guard] = {}
        self.effects: dict[int, TransitionEffect] = {}
        self.bindings: dict[int, ActionBinding] = {}
        self.fail_place: int | None = None
        self._boxes = itertools.count(1)

    def _fail(self) -> int:
        if self.fail_place is None:
            self.fail_place = self.builder.place("fail")
        return self.fail_place

    def compile_seq(self, nodes: tuple[PlanNode, ...], entry: int) -> int:
        if not nodes:
            raise CompileError("a node sequence must not be empty")
        current = entry
        for node in nodes:
            current = self.compile_node(node, current)
        return current

    def compile_node(self, node: PlanNode, entry: int) -> int:
        if isinstance(node, ActionNode):
            return self.expand_action(node, entry)
        if isinstance(node, ConcurrentNode):
            return self._expand_concurrent(node, entry)
        if isinstance(node, (LoopNode, BranchNode)):
            return self.expand_control(node, entry)
        if isinstance(node, KbOpNode):
            return self._expand_kb_op(node, entry)
        raise CompileError(f"cannot compile {node!r}")

    # -- actions --------------------------------------------------------------

    def expand_action(self, node: ActionNode, entry: int) -> int:
        """Expand one action node, unrolling retries into chained attempts."""
        if node.name not in self.domain.actions:
            raise CompileError(f"plan references undeclared action {node.name!r}")
        policy = node.recovery
        box0 = next(self._boxes)
        base = f"b{box0}.{node.name}"
        exit_place = self.builder.place(f"{base}.exit")

        retries = policy.on_failed[1] if self._is(policy.on_failed, "retry") else 0
        final_failed = self._failure_target(policy, base, exit_place)
        preempted = self._preempt_target(policy, base, exit_place)

        attempt_entry = entry
        for attempt in range(retries + 1):
            last = attempt == retries
            label = base if attempt == 0 else f"{base}.retry{attempt}"
            failed_target = (
                final_failed if last else self.builder.place(f"{base}.retry{attempt + 1}.entry")
            )
            self._expand_attempt(node, label, box0 if attempt == 0 else next(self._boxes),
                                 attempt_entry, exit_place, failed_target, preempted)
            attempt_entry = failed_target
        return exit_place

    def _is(self, arm, tag: str) -> bool:
        return isinstance(arm, tuple) and arm and arm[0] == tag

    def _failure_target(self, policy: RecoveryPolicy, base: str, exit_place: int) -> int:
        if self._is(policy.on_failed, "alternative"):
            alt_entry = self.builder.place(f"{base}.onfail")
            alt_exit = self.compile_seq(policy.on_failed[1], alt_entry)
            t = self.builder.transition(f"{base}.onfail.done")
            self.builder.arc_pt(alt_exit, t)
            self.builder.arc_tp(t, exit_place)
            return alt_entry
        return self._fail()

    def _preempt_target(self, policy: RecoveryPolicy, base: str, exit_place: int) -> int:
        if self._is(policy.on_preempted, "alternative"):
            alt_entry = self.builder.place(f"{base}.onpreempt")
            alt_exit = self.compile_seq(policy.on_preempted[1], alt_entry)
            t = self.builder.transition(f"{base}.onpreempt.done")
            self.builder.arc_pt(alt_exit, t)
            self.builder.arc_tp(t, exit_place)
            return alt_entry
        return exit_place  # default: the run continues regardless

    def _expand_attempt(
        self,
        node: ActionNode,
        label: str,
        box: int,
        entry: int,
        exit_place: int,
        failed_target: int,
        preempted_target: int,
    ) -> None:
        spec = self.domain.actions[node.name]
        self.bindings[box] = ActionBinding(
            box_id=box,
            action=node.name,
            args=node.args,
            params=spec.params,
            preconditions=spec.preconditions,
            effects=spec.effects,
            kb_capable=spec.super_type == "rpn_action",
        )
        b = self.builder
        exec_place = b.place(f"{label}.exec")
        done_place = b.place(f"{label}.done")

        # With no params and no preconditions the check is vacuously true and
        # degenerates to a pass-through; it still stages the goal for the start.
        t_pre = b.transition(f"{label}.pre_ok")
        b.arc_pt(entry, t_pre)
        b.arc_tp(t_pre, exec_place)
        self.guards[t_pre] = Guard(
            GuardKind.TOKEN_ONLY, condition=Condition(ConditionKind.ACTION_READY, box=box)
        )
        self.effects[t_pre] = TransitionEffect(EffectKind.START_ACTION, box=box)

        t_pre_fail = b.transition(f"{label}.pre_fail")
        b.arc_pt(entry, t_pre_fail)
        b.arc_tp(t_pre_fail, failed_target)
        self.guards[t_pre_fail] = Guard(
            GuardKind.TOKEN_ONLY, condition=Condition(ConditionKind.ACTION_NOT_READY, box=box)
        )

        for outcome, target in (
            (Outcome.SUCCEEDED, done_place),
            (Outcome.FAILED, failed_target),
            (Outcome.PREEMPTED, preempted_target),
        ):
            t = b.transition(f"{label}.{outcome.value}")
            b.arc_pt(exec_place, t)
            b.arc_tp(t, target)
            self.guards[t] = Guard(GuardKind.AWAITS_EVENT, event=(box, outcome))

        t_eff = b.transition(f"{label}.eff_ok")
        b.arc_pt(done_place, t_eff)
        b.arc_tp(t_eff, exit_place)
        if spec.effects is not None:
            self.guards[t_eff] = Guard(
                GuardKind.TOKEN_ONLY, condition=Condition(ConditionKind.EFFECTS_OK, box=box)
            )
        t_eff_fail = b.transition(f"{label}.eff_fail")
        b.arc_pt(done_place, t_eff_fail)
        b.arc_tp(t_eff_fail, failed_target)
        self.guards[t_eff_fail] = Guard(
            GuardKind.TOKEN_ONLY, condition=Condition(ConditionKind.EFFECTS_NOT_OK, box=box)
        )

    # -- concurrency ------------------------------------------------------------

    def _expand_concurrent(self, node: ConcurrentNode, entry: int) -> int:
        if not node.children:
            raise CompileError("concurrent block must not be empty")
        b = self.builder
        box = next(self._boxes)
        base = f"b{box}.par"
        fork = b.transition(f"{base}.fork")
        b.arc_pt(entry, fork)
        child_exits = []
        for i, child in enumerate(node.children, start=1):
            child_entry = b.place(f"{base}.c{i}")
            b.arc_tp(fork, child_entry)
            child_exits.append(self.compile_node(child, child_entry))
        exit_place = b.place(f"{base}.exit")
        join = b.transition(f"{base}.join")
        for child_exit in child_exits:
            b.arc_pt(child_exit, join)
        b.arc_tp(join, exit_place)
        return exit_place

    # -- loops and branches -------------------------------------------------------

    def expand_control(self, node: LoopNode | BranchNode, entry: int) -> int:
        """Loops re-test their condition place each pass; branches pick one arm."""
        b = self.builder
        box = next(self._boxes)
        if isinstance(node, LoopNode):
            base = f"b{box}.loop"
            exit_place = b.place(f"{base}.exit")
            body_entry = b.place(f"{base}.body")
            t_enter = b.transition(f"{base}.enter")
            b.arc_pt(entry, t_enter)
            b.arc_tp(t_enter, body_entry)
            self.guards[t_enter] = Guard(
                GuardKind.TOKEN_ONLY, condition=Condition(ConditionKind.EXPR_TRUE, expr=node.condition)
            )
            t_exit = b.transition(f"{base}.done")
            b.arc_pt(entry, t_exit)
            b.arc_tp(t_exit, exit_place)
            self.guards[t_exit] = Guard(
                GuardKind.TOKEN_ONLY, condition=Condition(ConditionKind.EXPR_FALSE, expr=node.condition)
            )
            body_exit = self.compile_seq(node.body, body_entry)
            t_again = b.transition(f"{base}.again")
            b.arc_pt(body_exit, t_again)
            b.arc_tp(t_again, entry)  # back-arc to the condition place
            return exit_place

        base = f"b{box}.branch"
        exit_place = b.place(f"{base}.exit")
        self._branch_arm(node.then, entry, exit_place, f"{base}.then",
                         Condition(ConditionKind.EXPR_TRUE, expr=node.condition))
        self._branch_arm(node.orelse, entry, exit_place, f"{base}.else",
                         Condition(ConditionKind.EXPR_FALSE, expr=node.condition))
        return exit_place

    def _branch_arm(self, nodes, entry: int, exit_place: int, label: str, condition: Condition) -> None:
        b = self.builder
        t = b.transition(label)
        b.arc_pt(entry, t)
        self.guards[t] = Guard(GuardKind.TOKEN_ONLY, condition=condition)
        if nodes:
            arm_entry = b.place(f"{label}.entry")
            b.arc_tp(t, arm_entry)
            arm_exit = self.compile_seq(nodes, arm_entry)
            t_done = b.transition(f"{label}.done")
            b.arc_pt(arm_exit, t_done)
            b.arc_tp(t_done, exit_place)
        else:
            b.arc_tp(t, exit_place)

    # -- direct knowledge operations ------------------------------------------------

    def _expand_kb_op(self, node: KbOpNode, entry: int) -> int:
        b = self.builder
        box = next(self._boxes)
        label = f"b{box}.kb_{node.op}"
        exit_place = b.place(f"{label}.exit")
        t = b.transition(label)
        b.arc_pt(entry, t)
        b.arc_tp(t, exit_place)
        self.effects[t] = TransitionEffect(EffectKind.KB_OP, kb_op=node)
        return exit_place
