"""PDDL (STRIPS + typing) parsing, grounding and state-transition semantics."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

ROOT_TYPE = "object"
SUPPORTED_REQUIREMENTS = {":strips", ":typing", ":negative-preconditions"}


class PDDLError(ValueError):
    """Parse or semantic error, optionally carrying a source location."""

    def __init__(self, message: str, line: int | None = None, col: int | None = None):
        self.message = message
        self.line = line
        self.col = col
        where = f" (line {line}, column {col})" if line is not None else ""
        super().__init__(message + where)


# ---------------------------------------------------------------------------
# S-expression reader
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Token:
    text: str
    line: int
    col: int


class SExpr(list):
    """A parenthesised list that remembers where it opened."""

    def __init__(self, items=(), line: int = 0, col: int = 0):
        super().__init__(items)
        self.line = line
        self.col = col


def tokenize(text: str) -> list[Token]:
    tokens: list[Token] = []
    line, col = 1, 1
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch == "\n":
            line, col = line + 1, 1
            i += 1
            continue
        if ch.isspace():
            i += 1
            col += 1
            continue
        if ch == ";":
            while i < n and text[i] != "\n":
                i += 1
            continue
        if ch in "()":
            tokens.append(Token(ch, line, col))
            i += 1
            col += 1
            continue
        start, start_col = i, col
        while i < n and not text[i].isspace() and text[i] not in "();":
            i += 1
            col += 1
        tokens.append(Token(text[start:i].lower(), line, start_col))
    return tokens


def read_sexpr(text: str) -> SExpr:
    """Read exactly one top-level s-expression."""
    tokens = tokenize(text)
    if not tokens:
        raise PDDLError("empty input", 1, 1)
    stack: list[SExpr] = []
    result: SExpr | None = None
    for tok in tokens:
        if result is not None:
            raise PDDLError(f"unexpected trailing token {tok.text!r}", tok.line, tok.col)
        if tok.text == "(":
            stack.append(SExpr(line=tok.line, col=tok.col))
        elif tok.text == ")":
            if not stack:
                raise PDDLError("unbalanced ')'", tok.line, tok.col)
            done = stack.pop()
            if stack:
                stack[-1].append(done)
            else:
                result = done
        else:
            if not stack:
                raise PDDLError(f"atom {tok.text!r} outside of any list", tok.line, tok.col)
            stack[-1].append(tok)
    if stack:
        raise PDDLError("unbalanced '(': missing ')'", stack[-1].line, stack[-1].col)
    assert result is not None
    return result


def _loc(node) -> tuple[int, int]:
    return (node.line, node.col)


def _atom(node, what: str) -> str:
    if not isinstance(node, Token):
        raise PDDLError(f"expected {what}, found a list", *_loc(node))
    return node.text


# ---------------------------------------------------------------------------
# Data model
# ---------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class Literal:
    predicate: str
    args: tuple[str, ...] = ()
    negated: bool = False

    def is_ground(self) -> bool:
        return not any(a.startswith("?") for a in self.args)

    def positive(self) -> Literal:
        return Literal(self.predicate, self.args) if self.negated else self

    def substitute(self, binding: dict[str, str]) -> Literal:
        return Literal(self.predicate, tuple(binding.get(a, a) for a in self.args), self.negated)

    def __str__(self) -> str:
        atom = "(" + " ".join((self.predicate, *self.args)) + ")"
        return f"(not {atom})" if self.negated else atom


@dataclass(frozen=True)
class PredicateSchema:
    name: str
    params: tuple[tuple[str, str], ...] = ()

    @property
    def arity(self) -> int:
        return len(self.params)


@dataclass(frozen=True)
class OperatorSchema:
    name: str
    params: tuple[tuple[str, str], ...]
    preconditions: tuple[Literal, ...]
    effects: tuple[Literal, ...]

    @property
    def add_effects(self) -> tuple[Literal, ...]:
        return tuple(e for e in self.effects if not e.negated)

    @property
    def delete_effects(self) -> tuple[Literal, ...]:
        return tuple(e.positive() for e in self.effects if e.negated)


@dataclass(frozen=True)
class Domain:
    name: str
    types: tuple[tuple[str, str], ...] = ()
    predicates: tuple[PredicateSchema, ...] = ()
    operators: tuple[OperatorSchema, ...] = ()
    requirements: tuple[str, ...] = ()

    def type_parent(self, name: str) -> str | None:
        for t, parent in self.types:
            if t == name:
                return parent
        return None

    def has_type(self, name: str) -> bool:
        return name == ROOT_TYPE or any(t == name for t, _ in self.types)

    def is_subtype(self, sub: str, sup: str) -> bool:
        if sup == ROOT_TYPE:
            return True
        seen = set()
        cur: str | None = sub
        while cur is not None and cur not in seen:
            if cur == sup:
                return True
            seen.add(cur)
            cur = self.type_parent(cur)
        return False

    def predicate(self, name: str) -> PredicateSchema | None:
        for p in self.predicates:
            if p.name == name:
                return p
        return None

    def operator(self, name: str) -> OperatorSchema:
        for op in self.operators:
            if op.name == name:
                return op
        raise KeyError(f"unknown operator {name}")


@dataclass(frozen=True)
class SymbolicState:
    """Closed-world set of ground positive atoms."""

    atoms: frozenset[Literal] = frozenset()

    def __contains__(self, lit: Literal) -> bool:
        return lit in self.atoms

    def __len__(self) -> int:
        return len(self.atoms)

    def __iter__(self) -> Iterator[Literal]:
        return iter(sorted(self.atoms))

    def satisfies(self, goal: Iterable[Literal]) -> bool:
        return all(g in self.atoms for g in goal)


@dataclass(frozen=True)
class Problem:
    name: str
    domain_name: str
    objects: tuple[tuple[str, str], ...]
    initial: SymbolicState
    goal: frozenset[Literal]

    def object_type(self, name: str) -> str | None:
        for o, t in self.objects:
            if o == name:
                return t
        return None


@dataclass(frozen=True)
class GroundedAction:
    operator: str
    binding: tuple[str, ...]
    pre: frozenset[Literal]
    add: frozenset[Literal]
    delete: frozenset[Literal]

    @property
    def name(self) -> str:
        return "(" + " ".join((self.operator, *self.binding)) + ")"

    def __str__(self) -> str:
        return f"{self.operator}({', '.join(self.binding)})"


@dataclass(frozen=True)
class Plan:
    steps: tuple[GroundedAction, ...] = ()

    def __len__(self) -> int:
        return len(self.steps)


@dataclass(frozen=True)
class PlanValidation:
    valid: bool
    failed_step: int | None
    final_state: SymbolicState
    reason: str = ""


class InapplicableActionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _parse_typed_list(items: Sequence, what: str) -> list[tuple[str, str, tuple[int, int]]]:
    """Parse `a b - t c` style lists into (name, type, location)."""
    out: list[tuple[str, str, tuple[int, int]]] = []
    pending: list[tuple[str, tuple[int, int]]] = []
    i = 0
    while i < len(items):
        node = items[i]
        name = _atom(node, what)
        if name == "-":
            if i + 1 >= len(items):
                raise PDDLError(f"missing type after '-' in {what}", *_loc(node))
            tname = _atom(items[i + 1], "type name")
            if not pending:
                raise PDDLError(f"type {tname!r} given without names in {what}", *_loc(node))
            out.extend((n, tname, loc) for n, loc in pending)
            pending = []
            i += 2
            continue
        pending.append((name, _loc(node)))
        i += 1
    out.extend((n, ROOT_TYPE, loc) for n, loc in pending)
    return out


def _parse_literal(node, allow_negation: bool) -> Literal:
    if not isinstance(node, SExpr) or not node:
        raise PDDLError("expected a literal", *_loc(node))
    head = _atom(node[0], "predicate name")
    if head == "not":
        if not allow_negation:
            raise PDDLError("negated literal not allowed here", *_loc(node))
        if len(node) != 2:
            raise PDDLError("'not' takes exactly one literal", *_loc(node))
        inner = _parse_literal(node[1], allow_negation=False)
        return Literal(inner.predicate, inner.args, True)
    if head in ("and", "or", "forall", "exists", "when", "imply"):
        raise PDDLError(f"unsupported construct {head!r}", *_loc(node))
    return Literal(head, tuple(_atom(a, "term") for a in node[1:]))


def _parse_conjunction(node, allow_negation: bool) -> list[tuple[Literal, tuple[int, int]]]:
    if isinstance(node, Token):
        raise PDDLError("expected a conjunction", *_loc(node))
    if not node:
        return []
    if isinstance(node[0], Token) and node[0].text == "and":
        return [(_parse_literal(n, allow_negation), _loc(n)) for n in node[1:]]
    return [(_parse_literal(node, allow_negation), _loc(node))]


def _check_literal(lit: Literal, loc, domain_preds: dict[str, PredicateSchema]) -> PredicateSchema:
    schema = domain_preds.get(lit.predicate)
    if schema is None:
        raise PDDLError(f"unknown predicate {lit.predicate}", *loc)
    if len(lit.args) != schema.arity:
        raise PDDLError(
            f"predicate {lit.predicate} expects {schema.arity} arguments, got {len(lit.args)}", *loc
        )
    return schema


def _sections(root: SExpr, kind: str) -> tuple[str, list[SExpr]]:
    if len(root) < 2 or not isinstance(root[0], Token) or root[0].text != "define":
        raise PDDLError("expected (define ...)", *_loc(root))
    header = root[1]
    if not isinstance(header, SExpr) or len(header) != 2 or _atom(header[0], "header") != kind:
        raise PDDLError(f"expected ({kind} <name>)", *_loc(header))
    name = _atom(header[1], f"{kind} name")
    sections = []
    for sec in root[2:]:
        if not isinstance(sec, SExpr) or not sec or not isinstance(sec[0], Token):
            raise PDDLError("expected a (:section ...)", *_loc(sec))
        sections.append(sec)
    return name, sections


def parse_domain(text: str) -> Domain:
    name, sections = _sections(read_sexpr(text), "domain")
    requirements: list[str] = []
    types: list[tuple[str, str]] = []
    predicates: list[PredicateSchema] = []
    raw_ops: list[SExpr] = []
    for sec in sections:
        key = sec[0].text
        if key == ":requirements":
            for r in sec[1:]:
                req = _atom(r, "requirement")
                if req not in SUPPORTED_REQUIREMENTS:
                    raise PDDLError(f"unsupported requirement {req}", *_loc(r))
                requirements.append(req)
        elif key == ":types":
            for tname, parent, loc in _parse_typed_list(sec[1:], ":types"):
                if tname == ROOT_TYPE:
                    continue
                if any(t == tname for t, _ in types):
                    raise PDDLError(f"duplicate type {tname}", *loc)
                types.append((tname, parent))
        elif key == ":predicates":
            for p in sec[1:]:
                if not isinstance(p, SExpr) or not p:
                    raise PDDLError("expected predicate declaration", *_loc(p))
                pname = _atom(p[0], "predicate name")
                params = _parse_typed_list(p[1:], f"predicate {pname}")
                names = [n for n, _, _ in params]
                if len(set(names)) != len(names):
                    raise PDDLError(f"duplicate parameter in predicate {pname}", *_loc(p))
                if any(q.name == pname for q in predicates):
                    raise PDDLError(f"duplicate predicate {pname}", *_loc(p))
                predicates.append(PredicateSchema(pname, tuple((n, t) for n, t, _ in params)))
        elif key == ":action":
            raw_ops.append(sec)
        else:
            raise PDDLError(f"unsupported domain section {key}", *_loc(sec))

    declared = {t for t, _ in types} | {ROOT_TYPE}
    for tname, parent in types:
        if parent not in declared:
            raise PDDLError(f"unknown type {parent}")
    _check_type_forest(types)
    for p in predicates:
        for _, t in p.params:
            if t not in declared:
                raise PDDLError(f"unknown type {t} in predicate {p.name}")

    pred_map = {p.name: p for p in predicates}
    operators: list[OperatorSchema] = []
    for sec in raw_ops:
        op = _parse_action(sec, pred_map, declared)
        if any(o.name == op.name for o in operators):
            raise PDDLError(f"duplicate operator {op.name}", *_loc(sec))
        operators.append(op)
    return Domain(name, tuple(types), tuple(predicates), tuple(operators), tuple(requirements))


def _check_type_forest(types: list[tuple[str, str]]) -> None:
    parent = dict(types)
    for start in parent:
        seen = {start}
        cur = parent.get(start)
        while cur is not None and cur != ROOT_TYPE:
            if cur in seen:
                raise PDDLError(f"cyclic type hierarchy through {start}")
            seen.add(cur)
            cur = parent.get(cur)


def _parse_action(sec: SExpr, preds: dict[str, PredicateSchema], declared: set[str]) -> OperatorSchema:
    if len(sec) < 2:
        raise PDDLError("action without a name", *_loc(sec))
    name = _atom(sec[1], "action name")
    fields: dict[str, object] = {}
    i = 2
    while i < len(sec):
        key = _atom(sec[i], "action keyword")
        if key not in (":parameters", ":precondition", ":effect"):
            raise PDDLError(f"unsupported action field {key}", *_loc(sec[i]))
        if i + 1 >= len(sec):
            raise PDDLError(f"missing value for {key}", *_loc(sec[i]))
        fields[key] = sec[i + 1]
        i += 2
    params_node = fields.get(":parameters", SExpr())
    if not isinstance(params_node, SExpr):
        raise PDDLError("parameters must be a list", *_loc(params_node))
    params = _parse_typed_list(params_node, f"parameters of {name}")
    pnames = [p for p, _, _ in params]
    if len(set(pnames)) != len(pnames):
        raise PDDLError(f"duplicate parameter in action {name}", *_loc(params_node))
    for pname, ptype, loc in params:
        if not pname.startswith("?"):
            raise PDDLError(f"parameter {pname} must start with '?'", *loc)
        if ptype not in declared:
            raise PDDLError(f"unknown type {ptype}", *loc)

    pre = _parse_conjunction(fields.get(":precondition", SExpr()), allow_negation=True)
    eff = _parse_conjunction(fields.get(":effect", SExpr()), allow_negation=True)
    pset = set(pnames)
    for lit, loc in pre + eff:
        _check_literal(lit, loc, preds)
        for a in lit.args:
            if a.startswith("?") and a not in pset:
                raise PDDLError(f"free variable {a} in action {name}", *loc)
    return OperatorSchema(
        name,
        tuple((p, t) for p, t, _ in params),
        tuple(lit for lit, _ in pre),
        tuple(lit for lit, _ in eff),
    )


def parse_problem(text: str, domain: Domain) -> Problem:
    name, sections = _sections(read_sexpr(text), "problem")
    domain_name = domain.name
    objects: list[tuple[str, str]] = []
    init_nodes: list[tuple[Literal, tuple[int, int]]] = []
    goal_nodes: list[tuple[Literal, tuple[int, int]]] = []
    for sec in sections:
        key = sec[0].text
        if key == ":domain":
            domain_name = _atom(sec[1], "domain name")
            if domain_name != domain.name:
                raise PDDLError(f"problem is for domain {domain_name}, not {domain.name}", *_loc(sec))
        elif key == ":objects":
            for oname, otype, loc in _parse_typed_list(sec[1:], ":objects"):
                if not domain.has_type(otype):
                    raise PDDLError(f"object {oname} has undeclared type {otype}", *loc)
                if any(o == oname for o, _ in objects):
                    raise PDDLError(f"duplicate object {oname}", *loc)
                objects.append((oname, otype))
        elif key == ":init":
            init_nodes.extend((_parse_literal(n, allow_negation=False), _loc(n)) for n in sec[1:])
        elif key == ":goal":
            if len(sec) != 2:
                raise PDDLError("goal takes exactly one formula", *_loc(sec))
            goal_nodes = _parse_conjunction(sec[1], allow_negation=True)
        else:
            raise PDDLError(f"unsupported problem section {key}", *_loc(sec))

    typing = dict(objects)
    preds = {p.name: p for p in domain.predicates}
    init: set[Literal] = set()
    for lit, loc in init_nodes:
        _check_ground_atom(lit, loc, preds, typing, domain, "initial state")
        init.add(lit)
    goal: set[Literal] = set()
    for lit, loc in goal_nodes:
        if lit.negated:
            raise PDDLError("negative goal literals are not supported", *loc)
        if not lit.is_ground():
            raise PDDLError("non-ground goal", *loc)
        _check_ground_atom(lit, loc, preds, typing, domain, "goal")
        goal.add(lit)
    return Problem(name, domain_name, tuple(objects), SymbolicState(frozenset(init)), frozenset(goal))


def parse_goal(text: str, domain: Domain, objects: Sequence[tuple[str, str]]) -> frozenset[Literal]:
    """Parse a bare goal formula such as `(and (on apple chair))`."""
    node = read_sexpr(text)
    typing = dict(objects)
    preds = {p.name: p for p in domain.predicates}
    goal = set()
    for lit, loc in _parse_conjunction(node, allow_negation=True):
        if lit.negated:
            raise PDDLError("negative goal literals are not supported", *loc)
        if not lit.is_ground():
            raise PDDLError("non-ground goal", *loc)
        _check_ground_atom(lit, loc, preds, typing, domain, "goal")
        goal.add(lit)
    return frozenset(goal)


def _check_ground_atom(lit, loc, preds, typing, domain: Domain, where: str) -> None:
    schema = _check_literal(lit, loc, preds)
    for arg, (_, ptype) in zip(lit.args, schema.params):
        if arg.startswith("?"):
            raise PDDLError(f"variable {arg} in {where}", *loc)
        otype = typing.get(arg)
        if otype is None:
            raise PDDLError(f"unknown object {arg} in {where}", *loc)
        if not domain.is_subtype(otype, ptype):
            raise PDDLError(f"object {arg} of type {otype} is not a {ptype} in {where}", *loc)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _render_typed(pairs: Sequence[tuple[str, str]]) -> str:
    # always explicit: a bare name would be captured by the next "- type" group
    return " ".join(f"{n} - {t}" for n, t in pairs)


def _render_conj(lits: Sequence[Literal]) -> str:
    return "(and" + "".join(" " + str(l) for l in lits) + ")" if lits else "(and)"


def render_domain(d: Domain) -> str:
    lines = [f"(define (domain {d.name})"]
    if d.requirements:
        lines.append(f"  (:requirements {' '.join(d.requirements)})")
    if d.types:
        lines.append(f"  (:types {_render_typed(d.types)})")
    preds = " ".join(
        "(" + " ".join([p.name] + ([_render_typed(p.params)] if p.params else [])) + ")" for p in d.predicates
    )
    lines.append(f"  (:predicates {preds})" if preds else "  (:predicates)")
    for op in d.operators:
        lines.append(f"  (:action {op.name}")
        lines.append(f"    :parameters ({_render_typed(op.params)})")
        lines.append(f"    :precondition {_render_conj(op.preconditions)}")
        lines.append(f"    :effect {_render_conj(op.effects)})")
    lines[-1] += ")"
    return "\n".join(lines) + "\n"


def render_problem(p: Problem) -> str:
    lines = [f"(define (problem {p.name})", f"  (:domain {p.domain_name})"]
    lines.append(f"  (:objects {_render_typed(p.objects)})" if p.objects else "  (:objects)")
    init = " ".join(str(a) for a in sorted(p.initial.atoms))
    lines.append(f"  (:init {init})" if init else "  (:init)")
    lines.append(f"  (:goal {render_goal(p.goal)}))")
    return "\n".join(lines) + "\n"


def render_goal(goal: Iterable[Literal]) -> str:
    lits = sorted(goal)
    return "(and" + "".join(" " + str(l) for l in lits) + ")" if lits else "(and )"


# ---------------------------------------------------------------------------
# Grounding and semantics
# ---------------------------------------------------------------------------


def objects_of_type(domain: Domain, objects: Sequence[tuple[str, str]], type_name: str) -> list[str]:
    return sorted({o for o, t in objects if domain.is_subtype(t, type_name)})


def instantiate(op: OperatorSchema, binding: Sequence[str]) -> GroundedAction:
    if len(binding) != len(op.params):
        raise ValueError(f"{op.name} expects {len(op.params)} arguments, got {len(binding)}")
    sub = {p: b for (p, _), b in zip(op.params, binding)}
    pre = frozenset(l.substitute(sub) for l in op.preconditions)
    add = frozenset(l.substitute(sub) for l in op.add_effects)
    delete = frozenset(l.substitute(sub) for l in op.delete_effects) - add
    return GroundedAction(op.name, tuple(binding), pre, add, delete)


def ground_actions(domain: Domain, objects: Sequence[tuple[str, str]]) -> list[GroundedAction]:
    """All type-consistent groundings, in operator order then lexicographic binding."""
    out: list[GroundedAction] = []
    for op in domain.operators:
        pools = [objects_of_type(domain, objects, t) for _, t in op.params]
        for binding in itertools.product(*pools):
            out.append(instantiate(op, binding))
    return out


def ground_action(domain: Domain, objects: Sequence[tuple[str, str]], operator: str, binding: Sequence[str]) -> GroundedAction:
    """Instantiate one operator, checking the binding against parameter types."""
    op = domain.operator(operator)
    typing = dict(objects)
    if len(binding) != len(op.params):
        raise ValueError(f"{operator} expects {len(op.params)} arguments, got {len(binding)}")
    for b, (p, t) in zip(binding, op.params):
        otype = typing.get(b)
        if otype is None:
            raise ValueError(f"unknown object {b}")
        if not domain.is_subtype(otype, t):
            raise ValueError(f"object {b} of type {otype} does not fit {p} - {t}")
    return instantiate(op, binding)


def is_applicable(state: SymbolicState, action: GroundedAction) -> bool:
    for lit in action.pre:
        if lit.negated:
            if lit.positive() in state.atoms:
                return False
        elif lit not in state.atoms:
            return False
    return True


def apply(state: SymbolicState, action: GroundedAction) -> SymbolicState:
    if not is_applicable(state, action):
        raise InapplicableActionError(f"{action} is not applicable")
    return SymbolicState((state.atoms - action.delete) | action.add)


def validate_plan(problem: Problem, domain: Domain, plan: Plan | Sequence[GroundedAction]) -> PlanValidation:
    steps = plan.steps if isinstance(plan, Plan) else tuple(plan)
    state = problem.initial
    for i, step in enumerate(steps):
        if not is_applicable(state, step):
            return PlanValidation(False, i, state, f"step {i} {step} not applicable")
        state = apply(state, step)
    if not state.satisfies(problem.goal):
        return PlanValidation(False, None, state, "goal not satisfied")
    return PlanValidation(True, None, state)


def parse_plan(text: str, domain: Domain, objects: Sequence[tuple[str, str]]) -> Plan:
    """Parse one `(op arg ...)` action per line; `;` starts a comment."""
    steps = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split(";", 1)[0].strip()
        if not line:
            continue
        node = read_sexpr(line)
        if not node or any(not isinstance(t, Token) for t in node):
            raise PDDLError("expected (operator arg ...)", lineno, 1)
        names = [t.text for t in node]
        try:
            steps.append(ground_action(domain, objects, names[0], names[1:]))
        except (KeyError, ValueError) as exc:
            raise PDDLError(str(exc), lineno, 1) from exc
    return Plan(tuple(steps))


def breadth_first_plan(
    initial: SymbolicState,
    goal: frozenset[Literal],
    actions: Sequence[GroundedAction],
    max_depth: int = 12,
) -> list[GroundedAction] | None:
    """Shortest plan; ties resolved by the order of `actions`."""
    if initial.satisfies(goal):
        return []
    frontier = [(initial, ())]
    seen = {initial.atoms}
    for _ in range(max_depth):
        nxt = []
        for state, prefix in frontier:
            for a in actions:
                if not is_applicable(state, a):
                    continue
                succ = SymbolicState((state.atoms - a.delete) | a.add)
                if succ.atoms in seen:
                    continue
                path = prefix + (a,)
                if succ.satisfies(goal):
                    return list(path)
                seen.add(succ.atoms)
                nxt.append((succ, path))
        if not nxt:
            return None
        frontier = nxt
    return None
