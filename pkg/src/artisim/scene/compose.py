"""Build an ArticulatedModel from segmented groups and the joint matrices."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from artisim import geometry
from artisim.scene.model import (
    DEFAULT_LIMITS,
    ArticulatedModel,
    Joint,
    Link,
    ModelError,
    TreeStructure,
)
from artisim.scene.tree import softmax_types

# argmax over (revolute, prismatic, fixed); np.argmax keeps the first on ties,
# which gives the declared priority revolute > prismatic > fixed
_NON_NONE = ("revolute", "prismatic", "fixed")


def edge_type(J: np.ndarray, u: int, v: int) -> str:
    p = softmax_types(np.asarray(J, dtype=float)[u - 1, v - 1])
    return _NON_NONE[int(np.argmax(p[1:]))]


def unpack_spatial(c: np.ndarray):
    c = np.asarray(c, dtype=float).reshape(9)
    axis = c[0:3]
    n = np.linalg.norm(axis)
    if n < 1e-12:
        raise ModelError("spatial descriptor has a zero axis")
    return axis / n, c[3:6].copy(), c[6:9].copy()


def reference_poses(tree: TreeStructure, mounts: Mapping[int, tuple[np.ndarray, np.ndarray]]):
    """World pose of every link at zero joint values: parent o Mount(orientation, origin)."""
    poses = {tree.root: (np.eye(3), np.zeros(3))}
    for u, v in tree.topological_edges():
        origin, orientation = mounts[v]
        R = geometry.rotvec_to_matrix(orientation)
        poses[v] = geometry.compose(poses[u], geometry.rotation_about_point(R, origin))
    return poses


def compose_model(
    groups: Sequence[np.ndarray],
    J: np.ndarray,
    C: np.ndarray,
    E: TreeStructure,
    attrs: Sequence[Mapping[str, float]],
    limits: Mapping[tuple[int, int], tuple[float, float]] | None = None,
    name: str = "object",
) -> ArticulatedModel:
    """Compose a model; ``groups`` are world-frame points at the reference configuration.

    Group ``k`` (0-based) becomes link ``k + 1``.  Point sets are converted into
    link frames using the mounts implied by ``C`` along ``E``.
    """
    K = len(groups)
    if E.n_nodes != K or len(attrs) != K:
        raise ModelError(f"{K} groups but tree spans {E.n_nodes} nodes and {len(attrs)} attribute sets")
    nodes = {E.root} | {v for _, v in E.edges}
    if nodes != set(range(1, K + 1)):
        raise ModelError(f"tree nodes {sorted(nodes)} do not match links 1..{K}")
    limits = dict(limits or {})
    joints, mounts = [], {}
    for u, v in E.edges:
        axis, origin, orientation = unpack_spatial(np.asarray(C)[u - 1, v - 1])
        jtype = edge_type(J, u, v)
        lim = limits.get((u, v), DEFAULT_LIMITS[jtype])
        if jtype == "fixed":
            lim = (0.0, 0.0)
        joints.append(Joint(u, v, jtype, axis, origin, orientation, lim))
        mounts[v] = (origin, orientation)
    poses = reference_poses(E, mounts)
    links = []
    for k in range(K):
        R, t = geometry.invert(poses[k + 1])
        pts = np.asarray(groups[k], dtype=float) @ R.T + t
        a = attrs[k]
        links.append(Link(k + 1, pts, a["mass"], a["damping"], a["inertia"]))
    return ArticulatedModel(name, tuple(links), tuple(joints))
