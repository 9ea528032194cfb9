"""Articulated-scene data model.

Frame convention: at the reference configuration (all joint values zero)
every link frame coincides with the world frame.  A joint's ``origin`` is a
point on the joint line and ``axis`` its direction, both in the parent link
frame; ``orientation`` (axis-angle) rotates the child frame about ``origin``
relative to the parent.  The child pose is therefore

    T_child(q) = T_parent o Mount(orientation, origin) o Motion(axis, origin, q)

which keeps joint parameters fitted in world coordinates directly usable.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

JOINT_TYPES = ("none", "revolute", "prismatic", "fixed")
MOVABLE = ("revolute", "prismatic")

DEFAULT_LIMITS = {
    "revolute": (-np.pi, np.pi),
    "prismatic": (-0.5, 0.5),
    "fixed": (0.0, 0.0),
}


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class Link:
    id: int
    points: np.ndarray
    mass: float = 1.0
    damping: float = 0.0
    inertia: float = 0.01

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        if self.id < 1:
            raise ModelError(f"link id must be >= 1, got {self.id}")
        if len(pts) == 0:
            raise ModelError(f"link {self.id}: empty point set")
        if not (self.mass > 0 and self.inertia > 0 and self.damping >= 0):
            raise ModelError(
                f"link {self.id}: need mass > 0, inertia > 0, damping >= 0 "
                f"(got {self.mass}, {self.inertia}, {self.damping})"
            )

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)


@dataclass(frozen=True)
class Joint:
    parent: int
    child: int
    type: str
    axis: np.ndarray
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    limits: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=float).reshape(3)
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).reshape(3))
        object.__setattr__(self, "orientation", np.asarray(self.orientation, dtype=float).reshape(3))
        lo, hi = (float(v) for v in self.limits)
        object.__setattr__(self, "limits", (lo, hi))
        if self.type not in JOINT_TYPES[1:]:
            raise ModelError(f"unsupported joint type {self.type!r}")
        if self.parent == self.child:
            raise ModelError(f"joint {self.parent}->{self.child}: parent equals child")
        if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
            raise ModelError(f"joint {self.parent}->{self.child}: axis not unit ({np.linalg.norm(axis)})")
        if lo > hi:
            raise ModelError(f"joint {self.parent}->{self.child}: limits lo > hi")

    @property
    def movable(self) -> bool:
        return self.type in MOVABLE


@dataclass(frozen=True)
class TreeStructure:
    edges: tuple[tuple[int, int], ...]
    root: int

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple((int(u), int(v)) for u, v in self.edges))
        nodes = {self.root} | {v for _, v in self.edges} | {u for u, _ in self.edges}
        check_arborescence(self.edges, self.root, sorted(nodes))

    @property
    def n_nodes(self) -> int:
        return len(self.edges) + 1

    def parent_of(self, v: int) -> int | None:
        for u, w in self.edges:
            if w == v:
                return u
        return None

    def children(self, u: int) -> list[int]:
        return sorted(v for p, v in self.edges if p == u)

    def subtree(self, v: int) -> list[int]:
        out, stack = [], [v]
        while stack:
            n = stack.pop()
            out.append(n)
            stack.extend(self.children(n))
        return sorted(out)

    def topological_edges(self) -> list[tuple[int, int]]:
        """Edges ordered so that a parent's incoming edge precedes its children's."""
        order, frontier = [], [self.root]
        while frontier:
            u = frontier.pop(0)
            for v in self.children(u):
                order.append((u, v))
                frontier.append(v)
        return order


def check_arborescence(edges: Iterable[tuple[int, int]], root: int, nodes: list[int]) -> None:
    edges = list(edges)
    if len(edges) != len(nodes) - 1:
        raise ModelError(f"tree over {len(nodes)} nodes needs {len(nodes) - 1} edges, got {len(edges)}")
    indeg: dict[int, int] = {n: 0 for n in nodes}
    for u, v in edges:
        if u == v:
            raise ModelError(f"self-loop at {u}")
        indeg[v] = indeg.get(v, 0) + 1
    if indeg.get(root, 0) != 0:
        raise ModelError(f"root {root} has an incoming edge")
    for n in nodes:
        if n != root and indeg[n] != 1:
            raise ModelError(f"node {n} has in-degree {indeg[n]}")
    # every node reaches the root by parent links (no cycles)
    parent = {v: u for u, v in edges}
    for n in nodes:
        seen, cur = set(), n
        while cur != root:
            if cur in seen or cur not in parent:
                raise ModelError(f"node {n} is not connected to root {root}")
            seen.add(cur)
            cur = parent[cur]


@dataclass(frozen=True)
class ArticulatedModel:
    name: str
    links: tuple[Link, ...]
    joints: tuple[Joint, ...]

    def __post_init__(self):
        object.__setattr__(self, "links", tuple(self.links))
        object.__setattr__(self, "joints", tuple(self.joints))
        ids = [lk.id for lk in self.links]
        if len(set(ids)) != len(ids):
            raise ModelError("duplicate link ids")
        if sorted(ids) != list(range(1, len(ids) + 1)):
            raise ModelError(f"link ids must be 1..K, got {sorted(ids)}")
        if len(self.joints) != len(self.links) - 1:
            raise ModelError(f"{len(self.links)} links need {len(self.links) - 1} joints, got {len(self.joints)}")
        children = [j.child for j in self.joints]
        if len(set(children)) != len(children):
            raise ModelError("a link appears more than once as a joint child")
        for j in self.joints:
            if j.parent not in ids or j.child not in ids:
                raise ModelError(f"joint {j.parent}->{j.child} references unknown link")
        self.tree  # validates the arborescence

    @property
    def K(self) -> int:
        return len(self.links)

    @property
    def tree(self) -> TreeStructure:
        children = {j.child for j in self.joints}
        roots = [lk.id for lk in self.links if lk.id not in children]
        if len(roots) != 1:
            raise ModelError(f"expected exactly one root, found {roots}")
        return TreeStructure(tuple((j.parent, j.child) for j in self.joints), roots[0])

    @property
    def root(self) -> int:
        return self.tree.root

    def link(self, link_id: int) -> Link:
        for lk in self.links:
            if lk.id == link_id:
                return lk
        raise ModelError(f"no link {link_id}")

    def joint_into(self, child: int) -> Joint:
        for j in self.joints:
            if j.child == child:
                return j
        raise ModelError(f"no joint into link {child}")

    def ordered_joints(self) -> list[Joint]:
        """Joints sorted by child id; this is the order of joint-state vectors."""
        return sorted(self.joints, key=lambda j: j.child)

    def joint_index(self, child: int) -> int:
        return [j.child for j in self.ordered_joints()].index(child)

    def limits_array(self) -> np.ndarray:
        return np.array([j.limits for j in self.ordered_joints()], dtype=float).reshape(-1, 2)

    def with_joint(self, joint: Joint) -> "ArticulatedModel":
        joints = [joint if j.child == joint.child else j for j in self.joints]
        return replace(self, joints=tuple(joints))


def _round_sig(x, digits: int = 9):
    arr = np.asarray(x, dtype=float)
    out = np.array([float(f"{v:.{digits}g}") for v in arr.ravel()], dtype=float).reshape(arr.shape)
    out[out == 0] = 0.0  # drop negative zero
    return out


def canonical_axis(axis: np.ndarray, limits: tuple[float, float]):
    """Flip the axis so its first non-negligible component is positive.

    Flipping the axis negates the joint coordinate, so limits swap and negate.
    """
    axis = np.asarray(axis, dtype=float)
    for c in axis:
        if abs(c) > 1e-9:
            if c < 0:
                return -axis, (-limits[1], -limits[0])
            break
    return axis, limits


def canonicalize(model: ArticulatedModel) -> ArticulatedModel:
    """Deterministic ordering, axis sign normalisation and 9-significant-digit reals."""
    links = []
    for lk in sorted(model.links, key=lambda l: l.id):
        links.append(Link(
            id=lk.id,
            points=_round_sig(lk.points),
            mass=float(_round_sig(lk.mass)),
            damping=float(_round_sig(lk.damping)),
            inertia=float(_round_sig(lk.inertia)),
        ))
    joints = []
    for j in sorted(model.joints, key=lambda j: j.child):
        axis, limits = canonical_axis(j.axis, j.limits)
        already = np.array_equal(_round_sig(axis), axis) and abs(np.linalg.norm(axis) - 1.0) <= 1e-9
        if not already:
            # renormalising a rounded axis would perturb its last digit, so only
            # do it for axes that are not already in canonical form
            axis = _round_sig(axis / np.linalg.norm(axis))
        lo, hi = _round_sig(limits)
        joints.append(Joint(
            parent=j.parent,
            child=j.child,
            type=j.type,
            axis=axis,
            origin=_round_sig(j.origin),
            orientation=_round_sig(j.orientation),
            limits=(float(lo), float(hi)),
        ))
    return ArticulatedModel(model.name, tuple(links), tuple(joints))


def models_equal(a: ArticulatedModel, b: ArticulatedModel, atol: float = 0.0) -> bool:
    if a.name != b.name or a.K != b.K or len(a.joints) != len(b.joints):
        return False
    for la, lb in zip(sorted(a.links, key=lambda l: l.id), sorted(b.links, key=lambda l: l.id)):
        if la.id != lb.id or la.points.shape != lb.points.shape:
            return False
        if not np.allclose(la.points, lb.points, rtol=0, atol=atol):
            return False
        if not np.allclose([la.mass, la.damping, la.inertia], [lb.mass, lb.damping, lb.inertia], rtol=0, atol=atol):
            return False
    for ja, jb in zip(sorted(a.joints, key=lambda j: j.child), sorted(b.joints, key=lambda j: j.child)):
        if (ja.parent, ja.child, ja.type) != (jb.parent, jb.child, jb.type):
            return False
        for x, y in ((ja.axis, jb.axis), (ja.origin, jb.origin), (ja.orientation, jb.orientation), (ja.limits, jb.limits)):
            if not np.allclose(x, y, rtol=0, atol=atol):
                return False
    return True
