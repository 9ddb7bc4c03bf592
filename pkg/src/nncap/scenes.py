"""Synthetic placement scenes with rule-based collision outcomes.

A scene is a 16x16 destination grid carrying a handful of non-overlapping
obstacles, plus a target object and the cell it will be placed on.  The
outcome (whether the placement collides and what happens next) follows a
deterministic rule table, and each outcome class owns a family of
paraphrase caption templates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

GRID_SIZE = 16
MAX_OBSTACLES = 8
MAX_OBSTACLE_HEIGHT = 5
TARGET_HEIGHT = 2

DESTINATION_KINDS = (
    "desk", "dining_table", "shelf", "kitchen_counter", "coffee_table",
    "sideboard",
)

OBSTACLE_CLASSES = (
    "apple", "banana", "mug", "teddy_bear", "toy_car", "soy_sauce_bottle",
    "ketchup_bottle", "salt_shaker", "hourglass", "camera", "tissue_box",
    "alarm_clock", "flower_vase", "soup_can", "cereal_bowl", "wine_glass",
    "candle", "stapler", "pencil_cup", "photo_frame", "melon", "orange",
    "milk_carton", "jam_jar", "sugar_pot",
)

# Classes that tend to roll when struck.
ROUND_OBSTACLES = frozenset({
    "apple", "orange", "melon", "soup_can", "wine_glass", "jam_jar",
    "cereal_bowl",
})

TARGET_CLASSES = (
    "plastic_bottle", "rubiks_cube", "baby_bottle", "cigarette_box",
    "water_glass", "coffee_cup", "soda_can", "juice_box", "lunch_box",
    "rice_bowl", "thermos", "medicine_bottle", "spice_jar", "snack_bag",
)

# Footprint (width, height in cells) of each target when set down.
TARGET_FOOTPRINTS = {
    name: (1 + (i % 3), 1 + ((i // 3) % 3))
    for i, name in enumerate(TARGET_CLASSES)
}


class Event(str, Enum):
    NONE = "none"
    FALLS_OVER = "falls_over"
    ROLLS = "rolls"
    FALLS_OFF = "falls_off"
    PUSHED = "pushed"


class GenerationError(RuntimeError):
    """Rejection-sampling budget exhausted while placing obstacles."""


class TemplateError(ValueError):
    """Caption template bank is missing or too thin for an outcome class."""


@dataclass(frozen=True)
class Obstacle:
    cls: str
    box: tuple[int, int, int, int]  # (x1, y1, x2, y2), half-open cells
    height: int

    @property
    def round(self) -> bool:
        return self.cls in ROUND_OBSTACLES

    @property
    def tall(self) -> bool:
        return self.height >= 3

    @property
    def near_edge(self) -> bool:
        x1, y1, x2, y2 = self.box
        return x1 == 0 or y1 == 0 or x2 == GRID_SIZE or y2 == GRID_SIZE


@dataclass
class Scene:
    destination_kind: str
    grid: np.ndarray  # (16, 16) int heights
    obstacles: list[Obstacle]
    target: str
    placement_cell: tuple[int, int]  # (row, col)
    seed: int


@dataclass(frozen=True)
class Outcome:
    collided: bool
    collided_obstacle: int | None
    event: Event


@dataclass
class SceneConfig:
    min_obstacles: int = 1
    max_obstacles: int = 5
    rejection_budget: int = 200

    def __post_init__(self):
        if not 1 <= self.min_obstacles <= self.max_obstacles <= MAX_OBSTACLES:
            raise ValueError(
                f"obstacle count range [{self.min_obstacles}, {self.max_obstacles}] "
                f"must sit inside [1, {MAX_OBSTACLES}]")


def _boxes_intersect(a: tuple[int, int, int, int],
                     b: tuple[int, int, int, int]) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def target_footprint(scene: Scene) -> tuple[int, int, int, int]:
    """Half-open cell box of the target centered on its placement cell."""
    w, h = TARGET_FOOTPRINTS[scene.target]
    row, col = scene.placement_cell
    x1 = col - w // 2
    y1 = row - h // 2
    return (x1, y1, x1 + w, y1 + h)


def generate_scene(seed: int, config: SceneConfig | None = None) -> Scene:
    """Build a scene deterministically from ``seed``.

    Obstacles are placed by rejection sampling so footprints never overlap;
    a dense configuration that cannot be satisfied raises GenerationError.
    """
    config = config or SceneConfig()
    rng = np.random.default_rng(seed)
    kind = DESTINATION_KINDS[rng.integers(len(DESTINATION_KINDS))]
    n_obstacles = int(rng.integers(config.min_obstacles,
                                   config.max_obstacles + 1))
    obstacles: list[Obstacle] = []
    for _ in range(n_obstacles):
        placed = False
        for _attempt in range(config.rejection_budget):
            cls = OBSTACLE_CLASSES[rng.integers(len(OBSTACLE_CLASSES))]
            w = int(rng.integers(2, 6))
            h = int(rng.integers(2, 6))
            x1 = int(rng.integers(0, GRID_SIZE - w + 1))
            y1 = int(rng.integers(0, GRID_SIZE - h + 1))
            box = (x1, y1, x1 + w, y1 + h)
            height = int(rng.integers(1, MAX_OBSTACLE_HEIGHT + 1))
            if all(not _boxes_intersect(box, ob.box) for ob in obstacles):
                obstacles.append(Obstacle(cls, box, height))
                placed = True
                break
        if not placed:
            raise GenerationError(
                f"could not place obstacle {len(obstacles) + 1} of "
                f"{n_obstacles} within {config.rejection_budget} attempts "
                f"(seed {seed})")

    target = TARGET_CLASSES[rng.integers(len(TARGET_CLASSES))]
    tw, th = TARGET_FOOTPRINTS[target]
    # Sample the placement cell so the centered footprint stays on the grid.
    row = int(rng.integers(th // 2, GRID_SIZE - (th - th // 2) + 1))
    col = int(rng.integers(tw // 2, GRID_SIZE - (tw - tw // 2) + 1))

    grid = np.zeros((GRID_SIZE, GRID_SIZE), dtype=np.int16)
    for ob in obstacles:
        x1, y1, x2, y2 = ob.box
        grid[y1:y2, x1:x2] = ob.height

    return Scene(destination_kind=kind, grid=grid, obstacles=obstacles,
                 target=target, placement_cell=(row, col), seed=seed)


def simulate_placement(scene: Scene) -> Outcome:
    """Rule-based outcome: a collision happens iff the target footprint
    overlaps an obstacle; the event follows a fixed trait priority."""
    tbox = target_footprint(scene)
    hit = None
    for i, ob in enumerate(scene.obstacles):
        if _boxes_intersect(tbox, ob.box):
            hit = i
            break
    if hit is None:
        return Outcome(collided=False, collided_obstacle=None, event=Event.NONE)
    ob = scene.obstacles[hit]
    if ob.near_edge:
        event = Event.FALLS_OFF
    elif ob.round:
        event = Event.ROLLS
    elif ob.tall:
        event = Event.FALLS_OVER
    else:
        event = Event.PUSHED
    return Outcome(collided=True, collided_obstacle=hit, event=event)


# ---------------------------------------------------------------------------
# caption templates

CAPTION_TEMPLATES: dict[Event, list[str]] = {
    Event.NONE: [
        "the {target} is placed safely on the {dest} without touching any of the obstacles",
        "the robot places the {target} on the {dest} and it rests in the open space with no contact",
        "placing the {target} on the {dest} succeeds because the chosen spot is clear of obstacles",
        "the {target} settles onto a free area of the {dest} and everything else stays in place",
    ],
    Event.FALLS_OVER: [
        "the {target} collides with the {obstacle} and the {obstacle} falls over on the {dest}",
        "when the {target} is placed it hits the tall {obstacle} which topples over onto the {dest}",
        "the {target} bumps into the {obstacle} and knocks it over while being set down on the {dest}",
        "placing the {target} presses against the {obstacle} and the {obstacle} tips over",
    ],
    Event.ROLLS: [
        "the {target} collides with the {obstacle} and the {obstacle} rolls across the {dest}",
        "when the {target} is placed it strikes the round {obstacle} which rolls away over the {dest}",
        "the {target} brushes the {obstacle} and sends it rolling along the surface of the {dest}",
        "placing the {target} nudges the {obstacle} and the {obstacle} rolls to another spot",
    ],
    Event.FALLS_OFF: [
        "the {target} collides with the {obstacle} near the edge and the {obstacle} falls off the {dest}",
        "when the {target} is placed it hits the {obstacle} and the {obstacle} drops off the edge of the {dest}",
        "the {target} pushes the {obstacle} over the rim and the {obstacle} falls off the {dest} onto the floor",
        "placing the {target} shoves the {obstacle} past the edge so the {obstacle} tumbles off the {dest}",
    ],
    Event.PUSHED: [
        "the {target} collides with the {obstacle} and the {obstacle} is pushed aside on the {dest}",
        "when the {target} is placed it presses against the {obstacle} and shifts it across the {dest}",
        "the {target} bumps the {obstacle} and the {obstacle} slides to a new position on the {dest}",
        "placing the {target} pushes the {obstacle} a short distance across the surface of the {dest}",
    ],
}

# Verbs that only ever appear in collision captions; the no-contact family
# must stay free of them (checked by tests).
COLLISION_VERBS = frozenset({
    "collides", "hits", "bumps", "knocks", "strikes", "brushes", "nudges",
    "presses", "shoves", "pushes", "topples", "tips", "rolls", "slides",
    "shifts", "drops", "tumbles", "falls",
})


def make_captions(scene: Scene, outcome: Outcome, rng: np.random.Generator,
                  templates: dict[Event, list[str]] | None = None,
                  ) -> tuple[list[str], list[list[str]]]:
    """Fill the outcome's template family with the scene's class names.

    Returns ``(caption_train, captions_eval)`` where the training caption is
    drawn uniformly from the full paraphrase family.
    """
    bank = templates if templates is not None else CAPTION_TEMPLATES
    family = bank.get(outcome.event)
    if not family or len(family) < 3:
        raise TemplateError(
            f"need at least 3 caption templates for event {outcome.event!r}, "
            f"got {0 if not family else len(family)}")
    slots = {"target": scene.target, "dest": scene.destination_kind}
    if outcome.collided:
        slots["obstacle"] = scene.obstacles[outcome.collided_obstacle].cls
    captions_eval = [t.format(**slots).split() for t in family]
    pick = int(rng.integers(len(captions_eval)))
    return captions_eval[pick], captions_eval
