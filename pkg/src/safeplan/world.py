"""Deterministic 2-D tabletop world.

Objects are discs on the unit table.  The robot approaches from an origin on
the table edge; a pick sweeps a rectangular corridor from that origin to the
target plus a grasp envelope disc around it, and a place sweeps the retreat
corridor back.  Anything the sweep touches is pushed a fixed distance along
the contact normal, and pushed objects can knock into their neighbours.
"""

from __future__ import annotations

import copy
import math
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from . import pddl

CORRIDOR_HALF_WIDTH = 0.05
GRASP_MARGIN = 0.04
PUSH_DISTANCE = 0.03
CHAIN_DEPTH = 3
SKILL_TIMEOUT = 50
TICK_DISTANCE = 0.05
GRASP_TICKS = 2
MAX_PLACEMENT_ATTEMPTS = 10_000

RADIUS_RANGE = (0.02, 0.10)
N_VIEWS = 5
VIEW_DIM = 32
SECTORS_PER_VIEW = 8
RING_EDGES = (0.0, 0.06, 0.14, 0.30, 0.80)
SENSING_RADIUS = RING_EDGES[-1]
MASS_SCALE = 0.05

SKILLS = ("pick", "place", "navigate")
TABLE = "table"

ITEM_NAMES = (
    "apple", "bowl", "mug", "tomato_can", "strawberry_box", "blue_can",
    "sponge", "banana", "cup", "lemon",
)


class SceneError(RuntimeError):
    pass


class SkillError(ValueError):
    pass


@dataclass
class ObjectInstance:
    name: str
    radius: float
    x: float
    y: float
    toppled: bool = False
    container: str | None = None

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass
class Place:
    """A receptacle footprint: the goal surfaces/containers and staging cells."""

    name: str
    kind: str
    x: float
    y: float
    radius: float

    def contains(self, x: float, y: float) -> bool:
        return (x - self.x) ** 2 + (y - self.y) ** 2 < self.radius ** 2


@dataclass
class WorldState:
    objects: list[ObjectInstance] = field(default_factory=list)
    robot: tuple[float, float] = (0.5, 0.0)
    held: str | None = None
    places: list[Place] = field(default_factory=list)
    seed: int = 0
    tick: int = 0
    scene: str = "table_area"
    grasp_point: tuple[float, float] | None = None

    def get(self, name: str) -> ObjectInstance:
        for o in self.objects:
            if o.name == name:
                return o
        raise KeyError(f"unknown object {name}")

    def place(self, name: str) -> Place:
        for p in self.places:
            if p.name == name:
                return p
        raise KeyError(f"unknown place {name}")

    @property
    def staging(self) -> list[Place]:
        return [p for p in self.places if p.kind == "staging"]

    def stowed_in(self, obj: ObjectInstance) -> Place | None:
        for p in self.places:
            if p.contains(obj.x, obj.y):
                return p
        return None

    def table_objects(self) -> list[ObjectInstance]:
        """Objects resting on the table (not held, not inside a receptacle)."""
        return [o for o in self.objects if o.name != self.held and self.stowed_in(o) is None]

    def free_staging(self) -> Place | None:
        for p in self.staging:
            if not any(o.name != self.held and p.contains(o.x, o.y) for o in self.objects):
                return p
        return None


@dataclass(frozen=True)
class SceneConfig:
    mode: str = "easy"
    object_count: int = 3
    min_gap: float = 0.1
    seed: int = 0
    target_object: str = "apple"
    goal_place: str = "chair"
    area: tuple[float, float, float, float] = (0.15, 0.2, 0.85, 0.72)
    radius_range: tuple[float, float] = (0.02, 0.06)
    scene: str = "table_area"

    def validate(self) -> None:
        if self.mode == "easy" and self.object_count != 3:
            raise ValueError("easy mode uses exactly 3 objects")
        if self.mode == "hard" and not 5 <= self.object_count <= 7:
            raise ValueError("hard mode uses 5 to 7 objects")
        if self.mode not in ("easy", "hard"):
            raise ValueError(f"unknown mode {self.mode}")
        lo, hi = self.radius_range
        if not RADIUS_RANGE[0] <= lo <= hi <= RADIUS_RANGE[1]:
            raise ValueError(f"radius range {self.radius_range} outside {RADIUS_RANGE}")


@dataclass(frozen=True)
class CollisionEvent:
    actor: str
    victim: str
    severity: int
    tick: int

    def line(self) -> str:
        return f"{self.tick} {self.actor} {self.victim} {self.severity}"


@dataclass
class SkillOutcome:
    succeeded: bool
    events: list[CollisionEvent]
    ticks_used: int
    world: WorldState


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------


def default_places() -> list[Place]:
    """Goal receptacles and staging cells along the far edge, clear of every corridor."""
    names = [("chair", "surface"), ("blue_box", "container")]
    names += [(f"staging_{i}", "staging") for i in range(6)]
    step = 1.0 / len(names)
    return [Place(n, kind, step * (i + 0.5), 0.92, 0.055) for i, (n, kind) in enumerate(names)]


def generate_scene(cfg: SceneConfig) -> WorldState:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    robot = (float(rng.uniform(0.3, 0.7)), 0.0)
    pool = [n for n in ITEM_NAMES if n != cfg.target_object]
    others = rng.choice(len(pool), size=cfg.object_count - 1, replace=False)
    names = [cfg.target_object] + [pool[i] for i in sorted(others)]
    x0, y0, x1, y1 = cfg.area
    objects: list[ObjectInstance] = []
    attempts = 0
    for name in names:
        radius = float(rng.uniform(*cfg.radius_range))
        while True:
            attempts += 1
            if attempts > MAX_PLACEMENT_ATTEMPTS:
                raise SceneError(
                    f"could not place {cfg.object_count} objects with min gap {cfg.min_gap} "
                    f"after {MAX_PLACEMENT_ATTEMPTS} attempts"
                )
            x, y = float(rng.uniform(x0, x1)), float(rng.uniform(y0, y1))
            if all(
                math.hypot(x - o.x, y - o.y) >= max(cfg.min_gap, radius + o.radius + 0.005)
                for o in objects
            ):
                objects.append(ObjectInstance(name, radius, x, y))
                break
    return WorldState(objects=objects, robot=robot, places=default_places(), seed=cfg.seed, scene=cfg.scene)


def clone_world(w: WorldState) -> WorldState:
    return copy.deepcopy(w)


# ---------------------------------------------------------------------------
# Symbolic view
# ---------------------------------------------------------------------------


@lru_cache(maxsize=1)
def tabletop_domain() -> pddl.Domain:
    text = resources.files("safeplan").joinpath("data/tabletop.pddl").read_text()
    return pddl.parse_domain(text)


def problem_objects(w: WorldState) -> list[tuple[str, str]]:
    objs = [(o.name, "item") for o in w.objects]
    objs.append((TABLE, "support"))
    objs += [(p.name, "receptacle") for p in w.places]
    objs.append((w.scene, "scene"))
    return objs


def extract_predicates(w: WorldState) -> pddl.SymbolicState:
    L = pddl.Literal
    atoms = {L("at-scene", (w.scene,))}
    if w.held is None:
        atoms.add(L("handempty"))
    else:
        atoms.add(L("holding", (w.held,)))
    for o in w.objects:
        if o.name == w.held:
            continue
        atoms.add(L("clear", (o.name,)))
        place = w.stowed_in(o)
        if place is None:
            atoms.add(L("on", (o.name, TABLE)))
        else:
            atoms.add(L("on", (o.name, place.name)))
            atoms.add(L("in", (o.name, place.name)))
    return pddl.SymbolicState(frozenset(atoms))


def skill_action(w: WorldState, skill: str, obj: str) -> pddl.GroundedAction:
    """Instantiate a skill template for one object; place targets the first free staging cell."""
    domain = tabletop_domain()
    if skill == "pick":
        binding = (obj,)
    elif skill == "place":
        cell = w.free_staging()
        binding = (obj, cell.name if cell is not None else w.staging[-1].name)
    elif skill == "navigate":
        binding = (w.scene,)
    else:
        raise SkillError(f"unknown skill {skill}")
    return pddl.instantiate(domain.operator(skill), binding)


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Sweep:
    """Rectangle from `start` to `end` of half-width `half_width`, plus an optional end disc."""

    start: tuple[float, float]
    end: tuple[float, float]
    half_width: float
    envelope: float = 0.0

    def axis(self) -> tuple[float, float, float]:
        dx, dy = self.end[0] - self.start[0], self.end[1] - self.start[1]
        length = math.hypot(dx, dy)
        if length < 1e-12:
            return (0.0, 1.0, 0.0)
        return (dx / length, dy / length, length)

    def local(self, x: float, y: float) -> tuple[float, float]:
        ux, uy, _ = self.axis()
        rx, ry = x - self.start[0], y - self.start[1]
        return (rx * ux + ry * uy, -rx * uy + ry * ux)

    def intersects(self, x: float, y: float, r: float) -> bool:
        _, _, length = self.axis()
        u, v = self.local(x, y)
        cu = min(max(u, 0.0), length)
        cv = min(max(v, -self.half_width), self.half_width)
        if (u - cu) ** 2 + (v - cv) ** 2 < r * r:
            return True
        if self.envelope > 0.0:
            return math.hypot(x - self.end[0], y - self.end[1]) < self.envelope + r
        return False

    def contact_normal(self, x: float, y: float) -> tuple[float, float]:
        ux, uy, length = self.axis()
        u, _ = self.local(x, y)
        t = min(max(u, 0.0), length)
        px, py = self.start[0] + t * ux, self.start[1] + t * uy
        nx, ny = x - px, y - py
        norm = math.hypot(nx, ny)
        if norm < 1e-12:
            return (ux, uy)
        return (nx / norm, ny / norm)


def pick_sweep(w: WorldState, obj: ObjectInstance) -> Sweep:
    return Sweep(w.robot, obj.position, CORRIDOR_HALF_WIDTH, obj.radius + GRASP_MARGIN)


def place_sweep(w: WorldState) -> Sweep:
    assert w.grasp_point is not None
    return Sweep(w.grasp_point, w.robot, CORRIDOR_HALF_WIDTH)


def sweep_for(w: WorldState, action: pddl.GroundedAction) -> Sweep | None:
    if action.operator == "pick":
        return pick_sweep(w, w.get(action.binding[0]))
    if action.operator == "place":
        if w.held != action.binding[0] or w.grasp_point is None:
            return None
        return place_sweep(w)
    return None


def sweep_victims(w: WorldState, action: pddl.GroundedAction) -> list[str]:
    """Table objects the robot itself would touch, in contact order."""
    sweep = sweep_for(w, action)
    if sweep is None:
        return []
    manipulated = action.binding[0]
    hits = []
    for o in w.table_objects():
        if o.name == manipulated:
            continue
        if sweep.intersects(o.x, o.y, o.radius):
            hits.append((sweep.local(o.x, o.y)[0], o.name))
    return [n for _, n in sorted(hits)]


def _overlap(a: ObjectInstance, b: ObjectInstance) -> bool:
    return math.hypot(a.x - b.x, a.y - b.y) < a.radius + b.radius


def _push(o: ObjectInstance, nx: float, ny: float) -> None:
    o.x = min(max(o.x + PUSH_DISTANCE * nx, 0.0), 1.0)
    o.y = min(max(o.y + PUSH_DISTANCE * ny, 0.0), 1.0)


def _resolve_contacts(w: WorldState, sweep: Sweep, victims: list[str], exclude: str, tick: int) -> list[CollisionEvent]:
    """Push robot victims and propagate object-object knocks up to CHAIN_DEPTH."""
    movable = {o.name: o for o in w.table_objects() if o.name != exclude}
    queue: deque = deque()
    for name in victims:
        o = movable[name]
        queue.append(("robot", name, sweep.contact_normal(o.x, o.y), 1))
    seen: set[tuple[str, str]] = set()
    events: list[CollisionEvent] = []
    while queue:
        actor, name, (nx, ny), depth = queue.popleft()
        if (actor, name) in seen:
            continue
        seen.add((actor, name))
        victim = movable[name]
        before = {k for k, other in movable.items() if k != name and _overlap(victim, other)}
        _push(victim, nx, ny)
        severity = 2 if PUSH_DISTANCE > victim.radius else 1
        if severity == 2:
            victim.toppled = True
        events.append(CollisionEvent(actor, name, severity, tick))
        if depth >= CHAIN_DEPTH:
            continue
        for k in sorted(movable):
            if k == name or k in before:
                continue
            other = movable[k]
            if _overlap(victim, other):
                dx, dy = other.x - victim.x, other.y - victim.y
                norm = math.hypot(dx, dy) or 1.0
                queue.append((name, k, (dx / norm, dy / norm), depth + 1))
    return events


def _travel_ticks(a: tuple[float, float], b: tuple[float, float]) -> int:
    return math.ceil(math.hypot(a[0] - b[0], a[1] - b[1]) / TICK_DISTANCE) + GRASP_TICKS


def execute_skill(w: WorldState, skill: pddl.GroundedAction) -> SkillOutcome:
    """Run one grounded skill on `w` in place."""
    if skill.operator not in SKILLS:
        raise SkillError(f"unknown skill {skill.operator}")
    state = extract_predicates(w)
    if not pddl.is_applicable(state, skill):
        raise SkillError(f"precondition violated for {skill}")

    if skill.operator == "navigate":
        w.scene = skill.binding[0]
        w.tick += 1
        return SkillOutcome(True, [], 1, w)

    if skill.operator == "pick":
        target = w.get(skill.binding[0])
        sweep = pick_sweep(w, target)
        victims = sweep_victims(w, skill)
        ticks = _travel_ticks(w.robot, target.position)
        events = _resolve_contacts(w, sweep, victims, target.name, w.tick + ticks - GRASP_TICKS)
        if target.toppled:
            # a toppled object cannot be grasped; the gripper keeps retrying until timeout
            w.tick += SKILL_TIMEOUT
            return SkillOutcome(False, events, SKILL_TIMEOUT, w)
        w.held = target.name
        w.grasp_point = target.position
        target.container = None
        w.tick += ticks
        return SkillOutcome(True, events, ticks, w)

    obj_name, place_name = skill.binding
    target = w.get(obj_name)
    place = w.place(place_name)
    sweep = place_sweep(w)
    victims = sweep_victims(w, skill)
    ticks = _travel_ticks(sweep.start, sweep.end)
    events = _resolve_contacts(w, sweep, victims, obj_name, w.tick + 1)
    target.x, target.y = place.x, place.y
    target.container = place.name
    w.held = None
    w.grasp_point = None
    w.tick += ticks
    return SkillOutcome(True, events, ticks, w)


# ---------------------------------------------------------------------------
# Multi-view features
# ---------------------------------------------------------------------------


def render_views(w: WorldState, name: str) -> np.ndarray:
    """Five 32-bin occupancy views around `name`, shape (5, 32).

    Angles are measured from the direction toward the robot origin.  View k
    covers the 72 degree wedge centred on 72*k degrees, split into 8 sectors,
    times 4 rings of surface gap (centre distance minus the object's own
    radius).  Each neighbour adds (radius / 0.05)**2 to the bin of its centre.
    """
    obj = w.get(name)
    views = np.zeros((N_VIEWS, VIEW_DIM))
    ref = math.atan2(w.robot[1] - obj.y, w.robot[0] - obj.x)
    sector = 2 * math.pi / (N_VIEWS * SECTORS_PER_VIEW)
    offset = math.pi / N_VIEWS
    for other in w.table_objects():
        if other.name == name:
            continue
        dx, dy = other.x - obj.x, other.y - obj.y
        gap = math.hypot(dx, dy) - obj.radius
        if gap >= SENSING_RADIUS:
            continue
        ring = max(0, int(np.searchsorted(RING_EDGES, gap, side="right")) - 1)
        angle = (math.atan2(dy, dx) - ref + offset) % (2 * math.pi)
        idx = min(int(angle / sector), N_VIEWS * SECTORS_PER_VIEW - 1)
        view, sub = divmod(idx, SECTORS_PER_VIEW)
        views[view, ring * SECTORS_PER_VIEW + sub] += (other.radius / MASS_SCALE) ** 2
    return views


# ---------------------------------------------------------------------------
# Scene files
# ---------------------------------------------------------------------------


def save_scene(path: str | Path, w: WorldState, cfg: SceneConfig | None = None) -> None:
    Path(path).write_text(dump_scene(w, cfg))


def dump_scene(w: WorldState, cfg: SceneConfig | None = None) -> str:
    lines = ["# tabletop scene"]
    if cfg is not None:
        lines += [
            f"mode = {cfg.mode}",
            f"object_count = {cfg.object_count}",
            f"min_gap = {cfg.min_gap!r}",
            f"target_object = {cfg.target_object}",
            f"goal_place = {cfg.goal_place}",
            f"area = {' '.join(repr(v) for v in cfg.area)}",
            f"radius_range = {' '.join(repr(v) for v in cfg.radius_range)}",
        ]
    lines += [
        f"seed = {w.seed}",
        f"scene = {w.scene}",
        f"tick = {w.tick}",
        f"robot = {w.robot[0]!r} {w.robot[1]!r}",
        f"held = {w.held or '-'}",
        "grasp_point = " + ("-" if w.grasp_point is None else f"{w.grasp_point[0]!r} {w.grasp_point[1]!r}"),
        "",
        "[objects]",
        "# name radius x y toppled container",
    ]
    for o in w.objects:
        lines.append(f"{o.name} {o.radius!r} {o.x!r} {o.y!r} {int(o.toppled)} {o.container or '-'}")
    lines += ["", "[places]", "# name kind x y radius"]
    for p in w.places:
        lines.append(f"{p.name} {p.kind} {p.x!r} {p.y!r} {p.radius!r}")
    return "\n".join(lines) + "\n"


def load_scene(path: str | Path) -> tuple[WorldState, SceneConfig | None]:
    return parse_scene(Path(path).read_text())


def parse_scene(text: str) -> tuple[WorldState, SceneConfig | None]:
    meta: dict[str, str] = {}
    objects: list[ObjectInstance] = []
    places: list[Place] = []
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1]
            continue
        try:
            if section is None:
                key, value = (s.strip() for s in line.split("=", 1))
                meta[key] = value
            elif section == "objects":
                name, r, x, y, toppled, container = line.split()
                objects.append(ObjectInstance(
                    name, float(r), float(x), float(y), toppled == "1", None if container == "-" else container
                ))
            elif section == "places":
                name, kind, x, y, r = line.split()
                places.append(Place(name, kind, float(x), float(y), float(r)))
            else:
                raise SceneError(f"unknown section [{section}]")
        except ValueError as exc:
            raise SceneError(f"line {lineno}: cannot parse {raw!r}") from exc

    def pair(key: str) -> tuple[float, float] | None:
        value = meta.get(key, "-")
        if value == "-":
            return None
        a, b = value.split()
        return (float(a), float(b))

    w = WorldState(
        objects=objects,
        robot=pair("robot") or (0.5, 0.0),
        held=None if meta.get("held", "-") == "-" else meta["held"],
        places=places or default_places(),
        seed=int(meta.get("seed", 0)),
        tick=int(meta.get("tick", 0)),
        scene=meta.get("scene", "table_area"),
        grasp_point=pair("grasp_point"),
    )
    cfg = None
    if "mode" in meta:
        cfg = SceneConfig(
            mode=meta["mode"],
            object_count=int(meta["object_count"]),
            min_gap=float(meta["min_gap"]),
            seed=w.seed,
            target_object=meta["target_object"],
            goal_place=meta["goal_place"],
            area=tuple(float(v) for v in meta["area"].split()),
            radius_range=tuple(float(v) for v in meta["radius_range"].split()),
            scene=w.scene,
        )
    return w, cfg
