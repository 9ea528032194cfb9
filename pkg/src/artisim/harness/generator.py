"""Procedural articulated objects for six household categories.

Coordinates: x points out of the object's front (toward the robot), z is up,
the object stands on the plane z = 0.  Every movable part opens toward
positive joint values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from artisim.perception import GroundTruthScene, Rect, box_faces
from artisim.scene.model import ArticulatedModel, Joint, Link

CATEGORIES = ("box", "door", "microwave", "oven", "fridge", "storage")
PANEL = 0.02  # door / lid thickness
HANDLE_OUT = 0.03  # handle standoff from the front surface
MODEL_POINTS = 96  # representative surface points stored per link
DOOR_LIMIT = 1.75
PAPER_SPLIT = (143, 33)


class GeneratorError(ValueError):
    pass


@dataclass(frozen=True)
class CategorySpec:
    category: str
    parts: tuple[int, int] = (2, 2)
    size_ranges: tuple[tuple[float, float], ...] = ((0.3, 0.4), (0.4, 0.6), (0.25, 0.35))
    mass_range: tuple[float, float] = (0.3, 0.8)
    damping_range: tuple[float, float] = (0.02, 0.08)
    drawer_damping_range: tuple[float, float] = (0.5, 1.5)

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise GeneratorError(f"unknown category {self.category!r}")
        lo, hi = self.parts
        if not 2 <= lo <= hi <= 4:
            raise GeneratorError(f"part-count range {self.parts} must lie within [2, 4]")
        if len(self.size_ranges) != 3 or any(a <= 0 or a > b for a, b in self.size_ranges):
            raise GeneratorError("size ranges must be three positive (lo, hi) pairs")
        for name in ("mass_range", "damping_range", "drawer_damping_range"):
            a, b = getattr(self, name)
            if a < 0 or a > b:
                raise GeneratorError(f"bad {name} {getattr(self, name)}")


DEFAULT_SPECS = {
    "box": CategorySpec("box", (2, 2), ((0.25, 0.35), (0.3, 0.45), (0.15, 0.25))),
    "door": CategorySpec("door", (2, 2), ((0.04, 0.06), (0.35, 0.5), (0.45, 0.6))),
    "microwave": CategorySpec("microwave", (2, 2), ((0.3, 0.4), (0.4, 0.6), (0.25, 0.35))),
    "oven": CategorySpec("oven", (2, 3), ((0.35, 0.45), (0.4, 0.55), (0.35, 0.5))),
    "fridge": CategorySpec("fridge", (2, 3), ((0.35, 0.45), (0.35, 0.5), (0.5, 0.7))),
    "storage": CategorySpec("storage", (2, 4), ((0.35, 0.45), (0.35, 0.5), (0.35, 0.55))),
}


@dataclass
class _Part:
    faces: list[Rect]
    joint: tuple | None = None  # (type, axis, origin, limits)
    handle: np.ndarray | None = None
    mass: float = 1.0
    damping: float = 0.0
    inertia: float = 0.01


@dataclass
class Dataset:
    scenes: list[GroundTruthScene]
    train: list[str]
    test: list[str]
    seed: int
    specs: dict = field(default_factory=dict)

    def by_id(self, scene_id: str) -> GroundTruthScene:
        for s in self.scenes:
            if s.scene_id == scene_id:
                return s
        raise KeyError(scene_id)


def _u(rng, lo_hi) -> float:
    return float(rng.uniform(*lo_hi))


def _door_attrs(rng, spec: CategorySpec, width: float) -> dict:
    mass = _u(rng, spec.mass_range)
    return dict(mass=mass, damping=_u(rng, spec.damping_range), inertia=mass * width**2 / 3.0)


def _drawer_attrs(rng, spec: CategorySpec) -> dict:
    mass = _u(rng, spec.mass_range)
    return dict(mass=mass, damping=_u(rng, spec.drawer_damping_range), inertia=0.01)


def _body(d, w, h, skip) -> _Part:
    return _Part(box_faces([0, 0, h / 2], [d, w, h], skip), mass=5.0, damping=0.0, inertia=1.0)


def _vertical_door(rng, spec, d, y0, y1, z0, z1, hinge_left: bool) -> _Part:
    """Front door over y in [y0, y1], z in [z0, z1]; hinge on the +y edge if ``hinge_left``."""
    x0 = d / 2
    width = y1 - y0
    faces = box_faces([x0 + PANEL / 2, (y0 + y1) / 2, (z0 + z1) / 2], [PANEL, width, z1 - z0])
    sy = 1.0 if hinge_left else -1.0
    hinge_y = y1 if hinge_left else y0
    origin = np.array([x0, hinge_y, (z0 + z1) / 2])
    axis = np.array([0.0, 0.0, sy])
    free_y = y0 + 0.05 if hinge_left else y1 - 0.05
    handle = np.array([x0 + PANEL + HANDLE_OUT, free_y, (z0 + z1) / 2])
    return _Part(faces, ("revolute", axis, origin, (0.0, DOOR_LIMIT)), handle, **_door_attrs(rng, spec, width))


def _bottom_door(rng, spec, d, y0, y1, z0, z1) -> _Part:
    x0 = d / 2
    faces = box_faces([x0 + PANEL / 2, (y0 + y1) / 2, (z0 + z1) / 2], [PANEL, y1 - y0, z1 - z0])
    origin = np.array([x0, (y0 + y1) / 2, z0])
    handle = np.array([x0 + PANEL + HANDLE_OUT, (y0 + y1) / 2, z1 - 0.04])
    return _Part(faces, ("revolute", np.array([0.0, 1.0, 0.0]), origin, (0.0, DOOR_LIMIT)), handle, **_door_attrs(rng, spec, z1 - z0))


def _drawer(rng, spec, d, y0, y1, z0, z1) -> _Part:
    x0 = d / 2
    depth = 0.8 * d
    inset = 0.01
    front = box_faces([x0 + PANEL / 2, (y0 + y1) / 2, (z0 + z1) / 2], [PANEL, y1 - y0, z1 - z0])
    tray = box_faces(
        [x0 - depth / 2, (y0 + y1) / 2, (z0 + z1) / 2],
        [depth, y1 - y0 - 2 * inset, z1 - z0 - 2 * inset],
        skip=("+x", "+z"),
    )
    origin = np.array([x0, (y0 + y1) / 2, (z0 + z1) / 2])
    handle = np.array([x0 + PANEL + HANDLE_OUT, (y0 + y1) / 2, (z0 + z1) / 2])
    return _Part(front + tray, ("prismatic", np.array([1.0, 0.0, 0.0]), origin, (0.0, 0.6 * depth)), handle, **_drawer_attrs(rng, spec))


def _parts_for(category: str, rng: np.random.Generator, spec: CategorySpec) -> list[_Part]:
    d, w, h = (_u(rng, r) for r in spec.size_ranges)
    n_parts = int(rng.integers(spec.parts[0], spec.parts[1] + 1))
    if category == "box":
        body = _body(d, w, h, ("+z",))
        faces = box_faces([0, 0, h + PANEL / 2], [d, w, PANEL])
        origin = np.array([-d / 2, 0.0, h])
        handle = np.array([d / 2 + HANDLE_OUT, 0.0, h + PANEL / 2])
        lid = _Part(faces, ("revolute", np.array([0.0, -1.0, 0.0]), origin, (0.0, DOOR_LIMIT)), handle, **_door_attrs(rng, spec, d))
        return [body, lid]
    if category == "door":
        post = 0.04
        frame = [
            *box_faces([0, w / 2 + post / 2, h / 2], [d, post, h]),
            *box_faces([0, -w / 2 - post / 2, h / 2], [d, post, h]),
            *box_faces([0, 0, h + post / 2], [d, w + 2 * post, post]),
        ]
        body = _Part(frame, mass=5.0, damping=0.0, inertia=1.0)
        # the panel sits inside the frame, flush with its front
        panel = _vertical_door(rng, spec, d - 2 * PANEL, -w / 2, w / 2, 0.0, h, bool(rng.integers(2)))
        return [body, panel]
    if category == "microwave":
        return [_body(d, w, h, ("+x",)), _vertical_door(rng, spec, d, -w / 2, w / 2, 0.0, h, bool(rng.integers(2)))]
    if category == "oven":
        parts = [_body(d, w, h, ("+x",))]
        if n_parts == 2:
            parts.append(_bottom_door(rng, spec, d, -w / 2, w / 2, 0.0, h))
        else:
            split = 0.25 * h
            parts.append(_drawer(rng, spec, d, -w / 2, w / 2, 0.0, split))
            parts.append(_bottom_door(rng, spec, d, -w / 2, w / 2, split, h))
        return parts
    if category == "fridge":
        parts = [_body(d, w, h, ("+x",))]
        if n_parts == 2:
            parts.append(_vertical_door(rng, spec, d, -w / 2, w / 2, 0.0, h, bool(rng.integers(2))))
        else:
            split = float(rng.uniform(0.55, 0.7)) * h
            parts.append(_vertical_door(rng, spec, d, -w / 2, w / 2, 0.0, split, bool(rng.integers(2))))
            parts.append(_vertical_door(rng, spec, d, -w / 2, w / 2, split, h, bool(rng.integers(2))))
        return parts
    # storage: drawers stacked from the top, optional door at the bottom
    parts = [_body(d, w, h, ("+x",))]
    n_mov = n_parts - 1
    with_door = n_mov >= 2 and bool(rng.integers(2))
    n_drawers = n_mov - int(with_door)
    drawer_h = (0.45 * h if with_door else h) / n_drawers
    top = h
    for _ in range(n_drawers):
        parts.append(_drawer(rng, spec, d, -w / 2, w / 2, top - drawer_h, top))
        top -= drawer_h
    if with_door:
        parts.append(_vertical_door(rng, spec, d, -w / 2, w / 2, 0.0, top, bool(rng.integers(2))))
    return parts


def _sample_faces(faces: list[Rect], n: int, rng: np.random.Generator) -> np.ndarray:
    areas = np.array([f.area for f in faces])
    which = rng.choice(len(faces), size=n, p=areas / areas.sum())
    return np.concatenate([faces[i].sample(int((which == i).sum()), rng) for i in range(len(faces))])


def make_scene(category: str, seed: int, scene_id: str = "", spec: CategorySpec | None = None) -> GroundTruthScene:
    """One seeded procedural object of ``category`` in its closed configuration."""
    spec = spec or DEFAULT_SPECS.get(category) or CategorySpec(category)
    rng = np.random.default_rng(seed)
    parts = _parts_for(category, rng, spec)
    links, joints, handles, surfaces = [], [], {}, {}
    for i, part in enumerate(parts):
        lid = i + 1
        pts = _sample_faces(part.faces, MODEL_POINTS, rng)
        links.append(Link(lid, pts, part.mass, part.damping, part.inertia))
        surfaces[lid] = part.faces
        if part.joint is not None:
            jtype, axis, origin, limits = part.joint
            joints.append(Joint(1, lid, jtype, axis, origin, np.zeros(3), limits))
            handles[lid] = part.handle
    model = ArticulatedModel(scene_id or f"{category}-{seed}", tuple(links), tuple(joints))
    return GroundTruthScene(model, np.zeros(len(joints)), seed, surfaces, handles, category, scene_id or model.name)


def split_counts(total: int, ratio: tuple[int, int] = PAPER_SPLIT) -> tuple[int, int]:
    n_test = int(round(total * ratio[1] / (ratio[0] + ratio[1])))
    return total - n_test, n_test


def generate_dataset(specs, n_per_category: int, seed: int, ratio: tuple[int, int] = PAPER_SPLIT) -> Dataset:
    """Seeded scenes for every spec with a deterministic train/test split."""
    if n_per_category < 2:
        raise GeneratorError("need at least 2 scenes per category")
    specs = [DEFAULT_SPECS[s] if isinstance(s, str) else s for s in specs]
    if not specs:
        raise GeneratorError("no category specs given")
    scenes = []
    for spec in specs:
        ci = CATEGORIES.index(spec.category)
        for i in range(n_per_category):
            sub = int(np.random.SeedSequence([seed, ci, i]).generate_state(1)[0])
            scenes.append(make_scene(spec.category, sub, f"{spec.category}-{i:03d}", spec))
    ids = [s.scene_id for s in scenes]
    order = np.random.default_rng(seed).permutation(len(ids))
    _, n_test = split_counts(len(ids), ratio)
    test = sorted(ids[i] for i in order[:n_test])
    train = sorted(ids[i] for i in order[n_test:])
    return Dataset(scenes, train, test, seed, {s.category: s for s in specs})
