"""Collision ledgers and the per-(skill, object) risk score.

risk = severity-weighted robot contacts on every object other than the one
being manipulated, plus severity-weighted object-object knocks (unordered
pairs, no self pairs).
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import pddl
from .world import CollisionEvent, WorldState, clone_world, execute_skill, extract_predicates, skill_action

INAPPLICABLE = math.inf


@dataclass
class CollisionLedger:
    robot_victims: Counter = field(default_factory=Counter)
    pairs: Counter = field(default_factory=Counter)

    def merge(self, other: CollisionLedger) -> CollisionLedger:
        return CollisionLedger(self.robot_victims + other.robot_victims, self.pairs + other.pairs)


@dataclass(frozen=True)
class RiskLabel:
    skill_index: int
    object: str
    risk: float


def pair_key(a: str, b: str) -> tuple[str, str]:
    if a == b:
        raise ValueError(f"self pair ({a}, {a})")
    return (a, b) if a < b else (b, a)


def ledger_from_events(events: Iterable[CollisionEvent], manipulated: str) -> CollisionLedger:
    ledger = CollisionLedger()
    for e in events:
        if e.actor == "robot":
            if e.victim != manipulated:
                ledger.robot_victims[e.victim] += e.severity
        else:
            ledger.pairs[pair_key(e.actor, e.victim)] += e.severity
    return ledger


def risk_of(ledger: CollisionLedger) -> float:
    return float(sum(ledger.robot_victims.values()) + sum(ledger.pairs.values()))


def probe_risk(w: WorldState, skill: str, obj: str) -> float:
    """Execute one skill on a private clone and score it; +inf when inapplicable."""
    action = skill_action(w, skill, obj)
    if not pddl.is_applicable(extract_predicates(w), action):
        return INAPPLICABLE
    probe = clone_world(w)
    outcome = execute_skill(probe, action)
    return risk_of(ledger_from_events(outcome.events, obj))


def oracle_risk_matrix(w: WorldState, skills: Sequence[str], objects: Sequence[str]) -> np.ndarray:
    m = np.empty((len(skills), len(objects)))
    for i, skill in enumerate(skills):
        for n, obj in enumerate(objects):
            m[i, n] = probe_risk(w, skill, obj)
    return m
