"""Domain/plan document parsing and the precondition/effect expression language.

Documents are YAML. A domain declares actions (super type, parameters,
preconditions, effects); a plan declares initial knowledge plus an ordered
list of nodes: actions, concurrent blocks, loops, branches and direct
knowledge-base operations. See docs/formats.md for the full grammar.

Expressions embed as::

    and: [ ... ]                     or: [ ... ]
    not: <expr>
    Comparison: ["eq", [Query: "time", Query: "value"]]
    Exists: [Query: "time"]

Parsing and evaluation are pure functions over immutable inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Union

import yaml

from .errors import PnmError
from .kb import ABSENT, GlobalKBPort, KBValue, KnowledgeStore, StaticGlobalKB


class PlanLangError(PnmError):
    """Base for all document parsing errors; carries a location when known."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        loc = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(message + loc)
        self.line = line
        self.column = column


class PlanSyntaxError(PlanLangError):
    pass


class UnknownSuperType(PlanLangError):
    pass


class DuplicateAction(PlanLangError):
    pass


class UnknownActionRef(PlanLangError):
    pass


class UnknownParam(PlanLangError):
    pass


class TypeMismatch(PnmError):
    """Ordered comparison applied to non-numeric operands."""


# ---------------------------------------------------------------------------
# Expression AST

COMPARISON_OPS = ("eq", "ne", "lt", "gt", "le", "ge")


@dataclass(frozen=True)
class Query:
    name: str


@dataclass(frozen=True)
class Literal:
    value: Any

    def __post_init__(self):
        if isinstance(self.value, list):
            object.__setattr__(self, "value", tuple(self.value))


@dataclass(frozen=True)
class Comparison:
    op: str
    left: Query | Literal
    right: Query | Literal


@dataclass(frozen=True)
class Exists:
    operand: Query | Literal


@dataclass(frozen=True)
class Not:
    child: "Expression"


@dataclass(frozen=True)
class And:
    children: tuple["Expression", ...]


@dataclass(frozen=True)
class Or:
    children: tuple["Expression", ...]


Expression = Union[And, Or, Not, Comparison, Exists, Query, Literal]


# ---------------------------------------------------------------------------
# Plan AST


@dataclass(frozen=True)
class RecoveryPolicy:
    """What to do when an action fails or is preempted.

    on_failed: "fail" (default), ("retry", n) with n >= 1 retries, or
    ("alternative", nodes). on_preempted: "continue" (default) or
    ("alternative", nodes).
    """

    on_failed: Any = "fail"
    on_preempted: Any = "continue"


@dataclass(frozen=True)
class ActionNode:
    name: str
    args: tuple[tuple[str, KBValue], ...] = ()
    recovery: RecoveryPolicy = RecoveryPolicy()

    def args_dict(self) -> dict[str, KBValue]:
        return dict(self.args)


@dataclass(frozen=True)
class ConcurrentNode:
    children: tuple["PlanNode", ...]


@dataclass(frozen=True)
class LoopNode:
    condition: Expression
    body: tuple["PlanNode", ...]


@dataclass(frozen=True)
class BranchNode:
    condition: Expression
    then: tuple["PlanNode", ...]
    orelse: tuple["PlanNode", ...] = ()


@dataclass(frozen=True)
class KbOpNode:
    op: str  # set | copy | delete
    name: str = ""
    value: KBValue = None
    source: str = ""
    target: str = ""


PlanNode = Union[ActionNode, ConcurrentNode, LoopNode, BranchNode, KbOpNode]


@dataclass(frozen=True)
class ActionDef:
    name: str
    super_type: str  # rpn_action | ros_action
    params: tuple[str, ...] = ()
    preconditions: Expression | None = None
    effects: Expression | None = None


@dataclass(frozen=True)
class DomainSpec:
    actions: dict[str, ActionDef] = field(default_factory=dict)


@dataclass(frozen=True)
class PlanSpec:
    initial_knowledge: tuple[tuple[str, KBValue], ...]
    plan: tuple[PlanNode, ...]

    def knowledge_dict(self) -> dict[str, KBValue]:
        return dict(self.initial_knowledge)


# ---------------------------------------------------------------------------
# YAML loading helpers


def _load_yaml(document: str) -> Any:
    try:
        return yaml.safe_load(document)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        if mark is not None:
            raise PlanSyntaxError(f"invalid document: {exc}", mark.line + 1, mark.column + 1)
        raise PlanSyntaxError(f"invalid document: {exc}")


def _duplicate_keys(document: str, top_key: str) -> list[tuple[str, Any]]:
    """Duplicate entries of the mapping under ``top_key``.

    yaml.safe_load silently keeps the last duplicate, so doubled keys are
    found on the composed node tree instead.
    """
    try:
        root = yaml.compose(document, yaml.SafeLoader)
    except yaml.YAMLError:
        return []
    if not isinstance(root, yaml.MappingNode):
        return []
    for key_node, value_node in root.value:
        if getattr(key_node, "value", None) == top_key and isinstance(value_node, yaml.MappingNode):
            seen: set[str] = set()
            dups = []
            for inner_key, _ in value_node.value:
                name = getattr(inner_key, "value", None)
                if name in seen:
                    dups.append((name, inner_key.start_mark))
                seen.add(name)
            return dups
    return []


def _require_map(value: Any, what: str) -> dict:
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise PlanSyntaxError(f"{what} must be a mapping, got {type(value).__name__}")
    return value


def _check_scalar(value: Any, what: str) -> KBValue:
    if isinstance(value, (str, int, float, bool)):
        return value
    if isinstance(value, list):
        return [_check_scalar(v, what) for v in value]
    raise PlanSyntaxError(f"{what} must be text, a number, a boolean or a list, got {value!r}")


# ---------------------------------------------------------------------------
# Expression parsing


def parse_expression(data: Any) -> Expression:
    """Parse the embedded expression shape into an AST."""
    if isinstance(data, dict):
        if len(data) != 1:
            raise PlanSyntaxError(f"expression must have exactly one key, got {sorted(data)!r}")
        key, value = next(iter(data.items()))
        if key == "and":
            return And(tuple(parse_expression(v) for v in _expr_list(value, "and")))
        if key == "or":
            return Or(tuple(parse_expression(v) for v in _expr_list(value, "or")))
        if key == "not":
            return Not(parse_expression(value))
        if key == "Comparison":
            return _parse_comparison(value)
        if key == "Exists":
            return Exists(_parse_operand(value[0] if isinstance(value, list) and len(value) == 1 else value))
        if key == "Query":
            if not isinstance(value, str) or not value:
                raise PlanSyntaxError(f"Query takes a non-empty name, got {value!r}")
            return Query(value)
        raise PlanSyntaxError(f"unknown expression key {key!r}")
    return Literal(_check_scalar(data, "literal"))


def _expr_list(value: Any, op: str) -> list:
    if not isinstance(value, list):
        raise PlanSyntaxError(f"{op!r} takes a list of expressions")
    return value


def _parse_comparison(value: Any) -> Comparison:
    if not (isinstance(value, list) and len(value) == 2 and isinstance(value[1], list)):
        raise PlanSyntaxError('Comparison takes [op, [left, right]]')
    op, operands = value
    if op not in COMPARISON_OPS:
        raise PlanSyntaxError(f"unknown comparison operator {op!r}; expected one of {COMPARISON_OPS}")
    if len(operands) != 2:
        raise PlanSyntaxError(f"Comparison takes exactly two operands, got {len(operands)}")
    return Comparison(op, _parse_operand(operands[0]), _parse_operand(operands[1]))


def _parse_operand(data: Any) -> Query | Literal:
    if isinstance(data, dict):
        if list(data) == ["Query"]:
            name = data["Query"]
            if not isinstance(name, str) or not name:
                raise PlanSyntaxError(f"Query takes a non-empty name, got {name!r}")
            return Query(name)
        raise PlanSyntaxError(f"operand must be a Query or a literal, got {data!r}")
    return Literal(_check_scalar(data, "operand"))


def expression_to_data(expr: Expression) -> Any:
    """Inverse of :func:`parse_expression`; round-trips exactly."""
    if isinstance(expr, And):
        return {"and": [expression_to_data(c) for c in expr.children]}
    if isinstance(expr, Or):
        return {"or": [expression_to_data(c) for c in expr.children]}
    if isinstance(expr, Not):
        return {"not": expression_to_data(expr.child)}
    if isinstance(expr, Comparison):
        return {"Comparison": [expr.op, [expression_to_data(expr.left), expression_to_data(expr.right)]]}
    if isinstance(expr, Exists):
        return {"Exists": [expression_to_data(expr.operand)]}
    if isinstance(expr, Query):
        return {"Query": expr.name}
    if isinstance(expr, Literal):
        return list(expr.value) if isinstance(expr.value, tuple) else expr.value
    raise TypeError(f"not an expression: {expr!r}")


# ---------------------------------------------------------------------------
# Expression evaluation


def evaluate(
    expr: Expression,
    local: KnowledgeStore,
    port: GlobalKBPort | None = None,
) -> bool:
    """Evaluate an expression against the stores.

    Query resolves local-first then global (non-blocking). Comparisons on
    an absent operand are false, not errors; Exists is false exactly when
    its query comes back absent. and/or short-circuit left to right.
    """
    port = port or StaticGlobalKB()
    if isinstance(expr, And):
        return all(evaluate(c, local, port) for c in expr.children)
    if isinstance(expr, Or):
        return any(evaluate(c, local, port) for c in expr.children)
    if isinstance(expr, Not):
        return not evaluate(expr.child, local, port)
    if isinstance(expr, Comparison):
        return _compare(expr, local, port)
    if isinstance(expr, Exists):
        return _resolve(expr.operand, local, port) is not ABSENT
    if isinstance(expr, (Query, Literal)):
        value = _resolve(expr, local, port)
        return value is not ABSENT and bool(value)
    raise TypeError(f"not an expression: {expr!r}")


def _resolve(operand: Query | Literal, local: KnowledgeStore, port: GlobalKBPort) -> KBValue:
    if isinstance(operand, Query):
        value = local.get(operand.name)
        if value is ABSENT:
            value = port.lookup(operand.name)
        return value
    return list(operand.value) if isinstance(operand.value, tuple) else operand.value


def _compare(expr: Comparison, local: KnowledgeStore, port: GlobalKBPort) -> bool:
    left = _resolve(expr.left, local, port)
    right = _resolve(expr.right, local, port)
    if left is ABSENT or right is ABSENT:
        return False
    if expr.op == "eq":
        return left == right
    if expr.op == "ne":
        return left != right
    for side, value in (("left", left), ("right", right)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeMismatch(f"{expr.op!r} needs numeric operands, {side} is {value!r}")
    if expr.op == "lt":
        return left < right
    if expr.op == "gt":
        return left > right
    if expr.op == "le":
        return left <= right
    return left >= right


# ---------------------------------------------------------------------------
# Domain parsing

_ACTION_KEYS = {"super_type", "params", "preconditions", "effects"}
_SUPER_TYPES = ("rpn_action", "ros_action")


def parse_domain(document: str) -> DomainSpec:
    """Parse a domain document into action definitions.

    Top-level keys: ``actions`` (required) and ``super_types`` (anchor
    definitions merged into actions via ``<<``). Unknown keys, unknown
    super types and duplicate action names are rejected.
    """
    data = _require_map(_load_yaml(document), "domain document")
    unknown = set(data) - {"actions", "super_types"}
    if unknown:
        raise PlanSyntaxError(f"unknown domain keys {sorted(unknown)!r}")
    dups = _duplicate_keys(document, "actions")
    if dups:
        name, mark = dups[0]
        raise DuplicateAction(f"action {name!r} defined twice", mark.line + 1, mark.column + 1)
    actions: dict[str, ActionDef] = {}
    raw_actions = _require_map(data.get("actions"), "actions")
    for name, body in raw_actions.items():
        name = str(name)
        actions[name] = _parse_action_def(name, _require_map(body, f"action {name!r}"))
    return DomainSpec(actions=actions)


def _parse_action_def(name: str, body: dict) -> ActionDef:
    unknown = set(body) - _ACTION_KEYS
    if unknown:
        raise PlanSyntaxError(f"action {name!r} has unknown keys {sorted(unknown)!r}")
    super_type = body.get("super_type")
    if super_type not in _SUPER_TYPES:
        raise UnknownSuperType(
            f"action {name!r} needs super_type in {_SUPER_TYPES}, got {super_type!r}"
        )
    params_raw = body.get("params") or []
    if not isinstance(params_raw, list) or not all(isinstance(p, str) and p for p in params_raw):
        raise PlanSyntaxError(f"action {name!r}: params must be a list of names")
    if len(set(params_raw)) != len(params_raw):
        raise PlanSyntaxError(f"action {name!r}: duplicate parameter names")
    pre = body.get("preconditions")
    eff = body.get("effects")
    return ActionDef(
        name=name,
        super_type=super_type,
        params=tuple(params_raw),
        preconditions=parse_expression(pre) if pre is not None else None,
        effects=parse_expression(eff) if eff is not None else None,
    )


# ---------------------------------------------------------------------------
# Plan parsing

_RECOVERY_NODE_KEYS = {"recovery"}


def parse_plan(document: str, domain: DomainSpec) -> PlanSpec:
    """Parse a plan document and validate it against a parsed domain."""
    data = _require_map(_load_yaml(document), "plan document")
    unknown = set(data) - {"initial_knowledge", "plan"}
    if unknown:
        raise PlanSyntaxError(f"unknown plan keys {sorted(unknown)!r}")
    dups = _duplicate_keys(document, "initial_knowledge")
    if dups:
        name, mark = dups[0]
        raise PlanSyntaxError(f"initial_knowledge key {name!r} repeated", mark.line + 1, mark.column + 1)
    knowledge_raw = _require_map(data.get("initial_knowledge"), "initial_knowledge")
    knowledge = tuple(
        (str(k), _check_scalar(v, f"initial_knowledge[{k!r}]")) for k, v in knowledge_raw.items()
    )
    nodes_raw = data.get("plan")
    if not isinstance(nodes_raw, list) or not nodes_raw:
        raise PlanSyntaxError("plan must be a non-empty list of nodes")
    nodes = tuple(_parse_node(n, domain) for n in nodes_raw)
    return PlanSpec(initial_knowledge=knowledge, plan=nodes)


def _parse_node(data: Any, domain: DomainSpec) -> PlanNode:
    node = _require_map(data, "plan node")
    if not node:
        raise PlanSyntaxError("plan node must not be empty")
    keys = set(node) - _RECOVERY_NODE_KEYS
    if len(keys) != 1:
        raise PlanSyntaxError(f"plan node must have exactly one node key, got {sorted(node)!r}")
    key = keys.pop()
    value = node[key]
    if key == "concurrent_actions":
        if not isinstance(value, list) or not value:
            raise PlanSyntaxError("concurrent_actions takes a non-empty list")
        return ConcurrentNode(tuple(_parse_node(child, domain) for child in value))
    if key == "loop":
        body = _require_map(value, "loop")
        _expect_keys(body, {"while", "do"}, "loop")
        steps = body.get("do")
        if not isinstance(steps, list) or not steps:
            raise PlanSyntaxError("loop 'do' takes a non-empty list")
        return LoopNode(parse_expression(body["while"]), tuple(_parse_node(s, domain) for s in steps))
    if key == "branch":
        body = _require_map(value, "branch")
        _expect_keys(body, {"if", "then", "else"}, "branch", required={"if", "then"})
        then = body.get("then") or []
        orelse = body.get("else") or []
        if not isinstance(then, list) or not isinstance(orelse, list):
            raise PlanSyntaxError("branch 'then'/'else' take lists")
        return BranchNode(
            parse_expression(body["if"]),
            tuple(_parse_node(s, domain) for s in then),
            tuple(_parse_node(s, domain) for s in orelse),
        )
    if key == "kb_op":
        return _parse_kb_op(_require_map(value, "kb_op"))
    return _parse_action_node(key, value, node.get("recovery"), domain)


def _expect_keys(body: dict, allowed: set, what: str, required: set | None = None) -> None:
    unknown = set(body) - allowed
    if unknown:
        raise PlanSyntaxError(f"{what} has unknown keys {sorted(unknown)!r}")
    for key in allowed if required is None else required:
        if key not in body:
            raise PlanSyntaxError(f"{what} requires key {key!r}")


def _parse_kb_op(body: dict) -> KbOpNode:
    if len(body) != 1:
        raise PlanSyntaxError(f"kb_op takes exactly one of set/copy/delete, got {sorted(body)!r}")
    op, spec = next(iter(body.items()))
    spec = _require_map(spec, f"kb_op {op!r}")
    if op == "set":
        _expect_keys(spec, {"name", "value"}, "kb_op set")
        return KbOpNode(op="set", name=str(spec["name"]), value=_check_scalar(spec["value"], "kb_op value"))
    if op == "copy":
        _expect_keys(spec, {"from", "to"}, "kb_op copy")
        return KbOpNode(op="copy", source=str(spec["from"]), target=str(spec["to"]))
    if op == "delete":
        _expect_keys(spec, {"name"}, "kb_op delete")
        return KbOpNode(op="delete", name=str(spec["name"]))
    raise PlanSyntaxError(f"unknown kb_op {op!r}")


def _parse_action_node(name: str, args_raw: Any, recovery_raw: Any, domain: DomainSpec) -> ActionNode:
    if name not in domain.actions:
        raise UnknownActionRef(f"plan references undeclared action {name!r}")
    spec = domain.actions[name]
    args = _require_map(args_raw, f"arguments of {name!r}")
    for arg in args:
        if arg not in spec.params:
            raise UnknownParam(f"action {name!r} has no parameter {arg!r}")
    parsed_args = tuple((str(k), _check_scalar(v, f"{name}.{k}")) for k, v in args.items())
    return ActionNode(name=name, args=parsed_args, recovery=_parse_recovery(recovery_raw, domain))


def _parse_recovery(data: Any, domain: DomainSpec) -> RecoveryPolicy:
    if data is None:
        return RecoveryPolicy()
    body = _require_map(data, "recovery")
    _expect_keys(body, {"failed", "preempted"}, "recovery", required=set())
    on_failed: Any = "fail"
    on_preempted: Any = "continue"
    if "failed" in body:
        on_failed = _parse_policy_arm(body["failed"], "failed", domain)
    if "preempted" in body:
        on_preempted = _parse_policy_arm(body["preempted"], "preempted", domain)
    return RecoveryPolicy(on_failed=on_failed, on_preempted=on_preempted)


def _parse_policy_arm(value: Any, arm: str, domain: DomainSpec) -> Any:
    defaults = {"failed": "fail", "preempted": "continue"}
    if value == defaults[arm]:
        return value
    if isinstance(value, dict) and list(value) == ["retry"]:
        if arm != "failed":
            raise PlanSyntaxError("retry is only valid for the failed arm")
        n = value["retry"]
        if not isinstance(n, int) or n < 1:
            raise PlanSyntaxError(f"retry takes an integer >= 1, got {n!r}")
        return ("retry", n)
    if isinstance(value, dict) and list(value) == ["alternative"]:
        nodes = value["alternative"]
        if not isinstance(nodes, list) or not nodes:
            raise PlanSyntaxError("alternative takes a non-empty list of plan nodes")
        return ("alternative", tuple(_parse_node(n, domain) for n in nodes))
    raise PlanSyntaxError(f"unknown recovery policy for {arm!r}: {value!r}")


# ---------------------------------------------------------------------------
# Serialization (plan/domain -> data -> YAML text)


def domain_to_data(domain: DomainSpec) -> dict:
    actions: dict[str, Any] = {}
    for name, spec in domain.actions.items():
        body: dict[str, Any] = {"super_type": spec.super_type}
        if spec.params:
            body["params"] = list(spec.params)
        if spec.preconditions is not None:
            body["preconditions"] = expression_to_data(spec.preconditions)
        if spec.effects is not None:
            body["effects"] = expression_to_data(spec.effects)
        actions[name] = body
    return {"actions": actions}


def plan_to_data(plan: PlanSpec) -> dict:
    data: dict[str, Any] = {}
    if plan.initial_knowledge:
        data["initial_knowledge"] = {
            k: (list(v) if isinstance(v, tuple) else v) for k, v in plan.initial_knowledge
        }
    data["plan"] = [_node_to_data(n) for n in plan.plan]
    return data


def _node_to_data(node: PlanNode) -> dict:
    if isinstance(node, ActionNode):
        data: dict[str, Any] = {node.name: {k: (list(v) if isinstance(v, tuple) else v) for k, v in node.args}}
        rec = node.recovery
        if rec != RecoveryPolicy():
            arm: dict[str, Any] = {}
            if rec.on_failed != "fail":
                arm["failed"] = _policy_to_data(rec.on_failed)
            if rec.on_preempted != "continue":
                arm["preempted"] = _policy_to_data(rec.on_preempted)
            data["recovery"] = arm
        return data
    if isinstance(node, ConcurrentNode):
        return {"concurrent_actions": [_node_to_data(c) for c in node.children]}
    if isinstance(node, LoopNode):
        return {"loop": {"while": expression_to_data(node.condition), "do": [_node_to_data(c) for c in node.body]}}
    if isinstance(node, BranchNode):
        body: dict[str, Any] = {"if": expression_to_data(node.condition), "then": [_node_to_data(c) for c in node.then]}
        if node.orelse:
            body["else"] = [_node_to_data(c) for c in node.orelse]
        return {"branch": body}
    if isinstance(node, KbOpNode):
        if node.op == "set":
            return {"kb_op": {"set": {"name": node.name, "value": node.value}}}
        if node.op == "copy":
            return {"kb_op": {"copy": {"from": node.source, "to": node.target}}}
        return {"kb_op": {"delete": {"name": node.name}}}
    raise TypeError(f"not a plan node: {node!r}")


def _policy_to_data(arm: Any) -> Any:
    if isinstance(arm, tuple) and arm[0] == "retry":
        return {"retry": arm[1]}
    if isinstance(arm, tuple) and arm[0] == "alternative":
        return {"alternative": [_node_to_data(n) for n in arm[1]]}
    return arm


def serialize_domain(domain: DomainSpec) -> str:
    return yaml.safe_dump(domain_to_data(domain), sort_keys=False)


def serialize_plan(plan: PlanSpec) -> str:
    return yaml.safe_dump(plan_to_data(plan), sort_keys=False)
