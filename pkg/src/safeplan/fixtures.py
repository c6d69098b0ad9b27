"""Shipped scene fixtures: the three evaluation layouts and the Fig.-6 analog."""

from __future__ import annotations

from dataclasses import dataclass, replace
from importlib import resources

from .world import SceneConfig, WorldState, parse_scene


@dataclass(frozen=True)
class SceneFixture:
    name: str
    area: tuple[float, float, float, float]
    target_object: str
    goal_place: str
    instruction: str
    min_gap: float = 0.1


# Counter and chair squeeze the same objects into narrower footprints.
FIXTURES = {
    "table": SceneFixture("table", (0.15, 0.20, 0.85, 0.72), "apple", "chair",
                          "Move the apple on the table to the chair"),
    "counter": SceneFixture("counter", (0.25, 0.20, 0.75, 0.72), "bowl", "blue_box",
                            "Put the bowl into the blue_box", min_gap=0.09),
    "chair": SceneFixture("chair", (0.28, 0.25, 0.72, 0.68), "mug", "blue_box",
                          "Move the mug into the blue box", min_gap=0.08),
}

SCENE_NAMES = tuple(FIXTURES)
HARD_COUNTS = (5, 6, 7)


def fixture(name: str) -> SceneFixture:
    try:
        return FIXTURES[name]
    except KeyError:
        raise ValueError(f"unknown scene fixture {name!r}; choose from {', '.join(SCENE_NAMES)}") from None


def scene_config(name: str, mode: str, seed: int) -> SceneConfig:
    """Scene template for one (fixture, mode, seed); hard mode draws 5 to 7 objects from the seed."""
    fx = fixture(name)
    if mode == "easy":
        count = 3
    elif mode == "hard":
        count = HARD_COUNTS[seed % len(HARD_COUNTS)]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return SceneConfig(
        mode=mode,
        object_count=count,
        min_gap=fx.min_gap,
        seed=seed,
        target_object=fx.target_object,
        goal_place=fx.goal_place,
        area=fx.area,
        scene=f"{name}_area",
    )


def training_templates() -> list[SceneConfig]:
    """One template per (fixture, mode, count) so collection covers every layout."""
    out = []
    for name in SCENE_NAMES:
        out.append(scene_config(name, "easy", 0))
        for k in range(len(HARD_COUNTS)):
            out.append(scene_config(name, "hard", k))
    return out


def with_seed(cfg: SceneConfig, seed: int) -> SceneConfig:
    return replace(cfg, seed=seed)


FIG6_INSTRUCTION = "Put the strawberry box under the tomato can into the blue box"


def fig6_world() -> WorldState:
    text = resources.files("safeplan").joinpath("data/scenes/fig6.scene").read_text()
    w, _ = parse_scene(text)
    return w
