"""Closed-loop safety-guided planner.

Each step re-observes the world, optionally predicts the risk matrix, asks a
backend for the next grounded operator, executes it, and repeats until the
goal holds, the step budget runs out, or skills keep failing.
"""

from __future__ import annotations

import logging
import math
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from . import pddl
from .llm import Backend, BackendError
from .risk import ledger_from_events, risk_of
from .safety import (
    ModelParameters,
    SafetyMatrix,
    SafetyRanking,
    matrix_to_ranking,
    oracle_matrix,
    predict_matrix,
)
from .translate import GoalSpec, Instruction, translate_llm, translate_rule_based
from .world import (
    SKILLS,
    SkillOutcome,
    WorldState,
    execute_skill,
    extract_predicates,
    problem_objects,
    sweep_victims,
    tabletop_domain,
)

logger = logging.getLogger(__name__)

DEFAULT_RHO = 0.5
DEFAULT_STEP_BUDGET = 20
MAX_CONSECUTIVE_FAILURES = 3
MAX_LLM_ATTEMPTS = 3

FORMAT_DIRECTIVE = "Reply with exactly one grounded operator, e.g. (pick apple)."


class NoPlanError(RuntimeError):
    pass


@dataclass
class Decision:
    action: pddl.GroundedAction
    rationale: str  # direct | clearing | backend-text
    backend: str  # search | llm
    reply: str | None = None


@dataclass
class PlanningContext:
    domain: pddl.Domain
    goal: GoalSpec
    world: WorldState
    symbolic: pddl.SymbolicState
    safety: SafetyRanking | None = None
    matrix: SafetyMatrix | None = None
    step_budget: int = DEFAULT_STEP_BUDGET
    history: list[tuple[Decision, SkillOutcome]] = field(default_factory=list)
    cleared: set[str] = field(default_factory=set)

    @property
    def objects(self) -> list[tuple[str, str]]:
        return problem_objects(self.world)

    def failed_picks(self) -> set[str]:
        return {d.action.binding[0] for d, o in self.history if d.action.operator == "pick" and not o.succeeded}


@dataclass
class EpisodeOptions:
    sm: bool = False
    backend: str = "search"  # search | llm
    rho: float = DEFAULT_RHO
    step_budget: int = DEFAULT_STEP_BUDGET
    model: ModelParameters | None = None  # None with sm on -> oracle matrix
    llm: Backend | None = None
    translate_with_llm: bool = False


@dataclass
class EpisodeTrace:
    decisions: list[Decision] = field(default_factory=list)
    outcomes: list[SkillOutcome] = field(default_factory=list)
    step_collisions: list[float] = field(default_factory=list)
    success: bool = False
    goal: GoalSpec | None = None
    wall_time: float = 0.0

    @property
    def total_collisions(self) -> float:
        return float(sum(self.step_collisions))

    @property
    def steps_used(self) -> int:
        return len(self.decisions)

    def actions(self) -> list[str]:
        return [str(d.action) for d in self.decisions]


# ---------------------------------------------------------------------------
# Search backend
# ---------------------------------------------------------------------------


def shortest_plan(ctx: PlanningContext) -> list[pddl.GroundedAction]:
    actions = pddl.ground_actions(ctx.domain, ctx.objects)
    plan = pddl.breadth_first_plan(ctx.symbolic, ctx.goal.literals, actions)
    if plan is None:
        raise NoPlanError(f"goal {pddl.render_goal(ctx.goal.literals)} is unreachable")
    return list(plan)


def _stage(ctx: PlanningContext, obj: str) -> pddl.GroundedAction:
    cell = ctx.world.free_staging()
    if cell is None:
        raise NoPlanError("no free staging cell")
    return pddl.ground_action(ctx.domain, ctx.objects, "place", (obj, cell.name))


def next_action_search(ctx: PlanningContext, rho: float = DEFAULT_RHO) -> Decision:
    """First action of a shortest plan, or a clearing move when guidance flags it as risky.

    Clearing: when the predicted risk of the plan's next pick exceeds `rho`,
    pick instead the object in that pick's sweep region whose own pick is
    predicted safest (ties by name), provided it is safer than the target
    pick, and stow it in the first free staging cell right after.
    """
    held = ctx.world.held
    if held is not None and held in ctx.cleared:
        return Decision(_stage(ctx, held), "clearing", "search")
    if ctx.symbolic.satisfies(ctx.goal.literals):
        raise NoPlanError("goal already satisfied")
    head = shortest_plan(ctx)[0]
    if ctx.matrix is None or head.operator != "pick":
        return Decision(head, "direct", "search")
    target = head.binding[0]
    if ctx.matrix.value("pick", target) <= rho:
        return Decision(head, "direct", "search")
    skip = ctx.failed_picks()
    candidates = []
    for name in sweep_victims(ctx.world, head):
        if name in skip or name not in ctx.matrix.objects:
            continue
        risk = ctx.matrix.value("pick", name)
        if math.isfinite(risk):
            candidates.append((risk, name))
    if not candidates:
        return Decision(head, "direct", "search")
    safer = [(risk, name) for risk, name in candidates if risk < ctx.matrix.value("pick", target)]
    if not safer:
        return Decision(head, "direct", "search")
    _, neighbor = min(safer)
    action = pddl.ground_action(ctx.domain, ctx.objects, "pick", (neighbor,))
    return Decision(action, "clearing", "search")


# ---------------------------------------------------------------------------
# LLM backend
# ---------------------------------------------------------------------------


def build_planner_prompt(ctx: PlanningContext) -> str:
    parts = [
        "You control a robot arm on a tabletop. Choose the next PDDL operator to execute.",
        "",
        "Domain:",
        pddl.render_domain(ctx.domain),
        "",
        "Objects:",
        "\n".join(f"  {n} - {t}" for n, t in ctx.objects),
        "",
        "Goal:",
        pddl.render_goal(ctx.goal.literals),
        "",
        "Current state:",
        "\n".join(f"  {a}" for a in sorted(str(x) for x in ctx.symbolic.atoms)),
    ]
    if ctx.safety is not None:
        parts += ["", "Safety ranking of operators (lower collision risk first):", ctx.safety.text]
    if ctx.history:
        parts += ["", "Executed so far:"]
        parts += [f"  {d.action.name} {'ok' if o.succeeded else 'failed'}" for d, o in ctx.history]
    parts += ["", FORMAT_DIRECTIVE]
    return "\n".join(parts)


OPERATOR_RE = re.compile(r"\(\s*([A-Za-z][\w-]*)((?:\s+[A-Za-z][\w-]*)*)\s*\)")


def parse_operator_reply(reply: str, ctx: PlanningContext) -> pddl.GroundedAction:
    """First `(op arg ...)` in `reply` naming a domain operator, grounded and checked for applicability."""
    problem = "no operator found"
    for m in OPERATOR_RE.finditer(reply):
        op = m.group(1).lower()
        if op not in {o.name for o in ctx.domain.operators}:
            continue
        args = tuple(a.lower() for a in m.group(2).split())
        try:
            action = pddl.ground_action(ctx.domain, ctx.objects, op, args)
        except ValueError as exc:
            problem = str(exc)
            continue
        if not pddl.is_applicable(ctx.symbolic, action):
            problem = f"{action} is not applicable"
            continue
        return action
    raise ValueError(problem)


def next_action_llm(ctx: PlanningContext, backend: Backend, rho: float = DEFAULT_RHO) -> Decision:
    messages = [
        {"role": "system", "content": "You are a careful robot task planner."},
        {"role": "user", "content": build_planner_prompt(ctx)},
    ]
    for attempt in range(MAX_LLM_ATTEMPTS):
        try:
            reply = backend.complete(messages)
        except BackendError as exc:
            logger.warning("planner backend failed: %s", exc)
            break
        try:
            return Decision(parse_operator_reply(reply, ctx), "backend-text", "llm", reply)
        except ValueError as exc:
            logger.info("planner reply %d rejected: %s", attempt + 1, exc)
            messages = messages + [
                {"role": "assistant", "content": reply},
                {"role": "user", "content": f"Invalid operator ({exc}). {FORMAT_DIRECTIVE}"},
            ]
    return next_action_search(ctx, rho)


# ---------------------------------------------------------------------------
# Episode loop
# ---------------------------------------------------------------------------


def resolve_goal(
    domain: pddl.Domain,
    goal: GoalSpec | pddl.Problem | Instruction | str | Iterable[pddl.Literal],
    world: WorldState,
    opts: EpisodeOptions,
) -> GoalSpec:
    if isinstance(goal, GoalSpec):
        return goal
    if isinstance(goal, pddl.Problem):
        return GoalSpec(frozenset(goal.goal), "rule-based")
    if isinstance(goal, str):
        goal = Instruction(goal, tuple(problem_objects(world)))
    if isinstance(goal, Instruction):
        if opts.translate_with_llm and opts.llm is not None:
            return translate_llm(goal, opts.llm, domain)
        return translate_rule_based(goal)
    return GoalSpec(frozenset(goal), "rule-based")


def object_skills(domain: pddl.Domain) -> tuple[str, ...]:
    """Skills whose operator acts on an item; only these are ranked for the planner."""
    by_name = {op.name: op for op in domain.operators}
    return tuple(s for s in SKILLS if s in by_name and by_name[s].params and by_name[s].params[0][1] == "item")


def guidance(
    world: WorldState, model: ModelParameters | None, domain: pddl.Domain | None = None
) -> tuple[SafetyMatrix, SafetyRanking]:
    names = [o.name for o in world.objects]
    if model is None:
        m = oracle_matrix(world, SKILLS, names)
    else:
        m = predict_matrix(model, world, SKILLS, names)
    ranked = object_skills(domain or tabletop_domain())
    rows = [m.skills.index(s) for s in ranked]
    sub = SafetyMatrix(m.entries[rows], ranked, m.objects, m.source)
    return m, matrix_to_ranking(sub)


def run_episode(
    domain: pddl.Domain,
    goal: GoalSpec | pddl.Problem | Instruction | str | Iterable[pddl.Literal],
    world: WorldState,
    opts: EpisodeOptions | None = None,
) -> EpisodeTrace:
    """Drive `world` (mutated in place) toward the goal; failures are recorded, never raised."""
    opts = opts or EpisodeOptions()
    started = time.perf_counter()
    trace = EpisodeTrace(goal=resolve_goal(domain, goal, world, opts))
    ctx = PlanningContext(domain, trace.goal, world, extract_predicates(world), step_budget=opts.step_budget)
    failures = 0
    while True:
        ctx.symbolic = extract_predicates(world)
        if ctx.symbolic.satisfies(trace.goal.literals):
            trace.success = True
            break
        if len(trace.decisions) >= opts.step_budget or failures >= MAX_CONSECUTIVE_FAILURES:
            break
        if opts.sm:
            ctx.matrix, ctx.safety = guidance(world, opts.model, domain)
        try:
            if opts.backend == "llm" and opts.llm is not None:
                decision = next_action_llm(ctx, opts.llm, opts.rho)
            else:
                decision = next_action_search(ctx, opts.rho)
        except NoPlanError as exc:
            logger.info("episode stops: %s", exc)
            break
        outcome = execute_skill(world, decision.action)
        if decision.rationale == "clearing" and decision.action.operator == "pick" and outcome.succeeded:
            ctx.cleared.add(decision.action.binding[0])
        trace.decisions.append(decision)
        trace.outcomes.append(outcome)
        trace.step_collisions.append(risk_of(ledger_from_events(outcome.events, decision.action.binding[0])))
        ctx.history.append((decision, outcome))
        failures = 0 if outcome.succeeded else failures + 1
    trace.wall_time = time.perf_counter() - started
    return trace


def trace_lines(trace: EpisodeTrace) -> list[str]:
    """Decision and outcome records interleaved with the simulator's event lines."""
    lines = []
    for step, (d, o) in enumerate(zip(trace.decisions, trace.outcomes)):
        lines.append(f"decision {step} {d.action} rationale={d.rationale} backend={d.backend}")
        lines += [e.line() for e in o.events]
        lines.append(f"outcome {step} succeeded={int(o.succeeded)} ticks={o.ticks_used} collisions={trace.step_collisions[step]:g}")
    lines.append(
        f"summary success={int(trace.success)} steps={trace.steps_used} collisions={trace.total_collisions:g}"
    )
    return lines


def write_trace(path: str | Path, trace: EpisodeTrace) -> None:
    Path(path).write_text("\n".join(trace_lines(trace)) + "\n")


EVENT_LINE_RE = re.compile(r"^(\d+) (\S+) (\S+) (\d+)$")


def recount_trace(lines: Sequence[str]) -> float:
    """Recount severity-weighted collisions from a trace file's decision and event lines alone."""
    total = 0.0
    manipulated = None
    for line in lines:
        if line.startswith("decision "):
            action = line.split()[2]
            manipulated = action[action.index("(") + 1:].split(",")[0].rstrip(")")
            continue
        m = EVENT_LINE_RE.match(line)
        if m is None:
            continue
        actor, victim, severity = m.group(2), m.group(3), int(m.group(4))
        if actor == "robot" and victim == manipulated:
            continue
        total += severity
    return total
