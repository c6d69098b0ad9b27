"""Natural-language instructions -> PDDL goal literals."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

from . import pddl
from .llm import Backend, BackendError

logger = logging.getLogger(__name__)

ARTICLES = {"the", "a", "an"}
MAX_ATTEMPTS = 3

# (regex, predicate); "under the W" is descriptive and never part of the goal
PATTERNS = [
    (re.compile(r"^move (?P<x>.+?) (?:under (?P<w>.+?) )?into (?P<z>.+)$"), "in"),
    (re.compile(r"^move (?P<x>.+?) (?:on (?P<y>.+?) )?to (?P<z>.+)$"), "on"),
    (re.compile(r"^put (?P<x>.+?) (?:under (?P<w>.+?) )?(?:into|in) (?P<z>.+)$"), "in"),
    (re.compile(r"^put (?P<x>.+?) on (?P<z>.+)$"), "on"),
    (re.compile(r"^pick up (?P<x>.+)$"), "holding"),
]


class TranslationError(ValueError):
    def __init__(self, message: str, span: str = ""):
        self.span = span
        super().__init__(f"{message}: {span!r}" if span else message)


@dataclass(frozen=True)
class Instruction:
    text: str
    vocabulary: tuple[tuple[str, str], ...]  # (name, pddl type)

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("empty instruction")


@dataclass(frozen=True)
class GoalSpec:
    literals: frozenset[pddl.Literal]
    provenance: str = "rule-based"


def normalize(text: str) -> str:
    text = text.strip().lower().rstrip(".!")
    return re.sub(r"\s+", " ", text)


def resolve_name(span: str, vocabulary: Iterable[str]) -> str:
    """Longest vocabulary entry whose tokens appear contiguously in `span`."""
    tokens = [t for t in re.split(r"[\s_]+", span.strip()) if t and t not in ARTICLES]
    joined = "_".join(tokens)
    vocab = set(vocabulary)
    if joined in vocab:
        return joined
    best = None
    for name in sorted(vocab):
        parts = name.split("_")
        k = len(parts)
        if any(tokens[i:i + k] == parts for i in range(len(tokens) - k + 1)):
            if best is None or k > len(best.split("_")):
                best = name
    if best is None:
        raise TranslationError("unknown object name", span)
    return best


def translate_rule_based(ins: Instruction) -> GoalSpec:
    text = normalize(ins.text)
    names = [n for n, _ in ins.vocabulary]
    for regex, predicate in PATTERNS:
        m = regex.match(text)
        if m is None:
            continue
        x = resolve_name(m.group("x"), names)
        if predicate == "holding":
            return GoalSpec(frozenset({pddl.Literal("holding", (x,))}), "rule-based")
        z = resolve_name(m.group("z"), names)
        return GoalSpec(frozenset({pddl.Literal(predicate, (x, z))}), "rule-based")
    raise TranslationError("no pattern matches", ins.text)


def check_goal(literals: Iterable[pddl.Literal], domain: pddl.Domain, vocabulary: Iterable[tuple[str, str]]) -> None:
    """Raise pddl.PDDLError unless every literal is ground, positive and well typed."""
    pddl.parse_goal(render_goal_pddl(GoalSpec(frozenset(literals))), domain, list(vocabulary))


def render_goal_pddl(g: GoalSpec) -> str:
    return pddl.render_goal(g.literals)


def load_prompt_template(path: str | Path | None = None) -> str:
    if path is None:
        return resources.files("safeplan").joinpath("data/translate_prompt.txt").read_text()
    return Path(path).read_text()


def build_translation_prompt(ins: Instruction, domain: pddl.Domain, template: str | None = None) -> str:
    template = template or load_prompt_template()
    objects = "\n".join(f"  {n} - {t}" for n, t in ins.vocabulary)
    return (
        template.replace("{domain}", pddl.render_domain(domain))
        .replace("{objects}", objects)
        .replace("{instruction}", ins.text.strip())
    )


def extract_sexpr(reply: str) -> str | None:
    """First balanced s-expression in `reply`, preferring an `(and ...)` form."""
    starts = [m.start() for m in re.finditer(r"\(\s*and\b", reply, re.IGNORECASE)]
    starts += [i for i, ch in enumerate(reply) if ch == "("]
    for start in starts:
        depth = 0
        for j in range(start, len(reply)):
            if reply[j] == "(":
                depth += 1
            elif reply[j] == ")":
                depth -= 1
                if depth == 0:
                    return reply[start:j + 1]
    return None


def translate_llm(
    ins: Instruction, backend: Backend, domain: pddl.Domain, template: str | None = None
) -> GoalSpec:
    """Ask the backend for a goal; validate; retry; fall back to the pattern grammar."""
    messages = [
        {"role": "system", "content": "You translate household task instructions into PDDL goals."},
        {"role": "user", "content": build_translation_prompt(ins, domain, template)},
    ]
    for attempt in range(MAX_ATTEMPTS):
        try:
            reply = backend.complete(messages)
        except BackendError as exc:
            logger.warning("translation backend failed: %s", exc)
            break
        sexpr = extract_sexpr(reply)
        problem = "the reply contains no PDDL goal"
        if sexpr is not None:
            try:
                goal = pddl.parse_goal(sexpr, domain, list(ins.vocabulary))
                return GoalSpec(goal, "llm")
            except pddl.PDDLError as exc:
                problem = str(exc)
        logger.info("translation attempt %d rejected: %s", attempt + 1, problem)
        messages = messages + [
            {"role": "assistant", "content": reply},
            {"role": "user", "content": f"That goal is invalid ({problem}). Reply with one corrected (and ...) goal."},
        ]
    try:
        return translate_rule_based(ins)
    except TranslationError as exc:
        raise TranslationError("llm translation failed and the rule-based fallback also failed", ins.text) from exc


def load_corpus(path: str | Path | None = None) -> list[str]:
    if path is None:
        text = resources.files("safeplan").joinpath("data/instructions.txt").read_text()
    else:
        text = Path(path).read_text()
    out = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            out.append(line)
    return out


def vocabulary_for(objects: Iterable[tuple[str, str]]) -> tuple[tuple[str, str], ...]:
    return tuple((n, t) for n, t in objects if t in ("item", "receptacle", "support"))


def as_instruction(text: str, objects: Iterable[tuple[str, str]] | Mapping[str, str]) -> Instruction:
    items = objects.items() if isinstance(objects, Mapping) else objects
    return Instruction(text, vocabulary_for(items))
