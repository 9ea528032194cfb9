"""Synthetic sensing: point clouds, segmentation noise, joint fitting, flow.

Ground-truth scenes stand in for the physical world.  Learned perception is
replaced by oracles with controlled corruption: the segmentation is the true
labelling with boundary-biased flips, and scene flow is either the true
per-point motion (optionally with noise) or a nearest-neighbour guess.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from artisim import geometry
from artisim.diffsim import model_poses
from artisim.scene.model import ArticulatedModel, ModelError

DEFAULT_NOISE_SIGMA = 0.05


class PerceptionError(ValueError):
    pass


@dataclass(frozen=True)
class Rect:
    """Planar rectangle ``corner + s*edge1 + t*edge2`` for s, t in [0, 1] (link frame)."""

    corner: np.ndarray
    edge1: np.ndarray
    edge2: np.ndarray

    @property
    def area(self) -> float:
        return float(np.linalg.norm(np.cross(self.edge1, self.edge2)))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        st = rng.random((n, 2))
        return self.corner + st[:, :1] * self.edge1 + st[:, 1:] * self.edge2


def box_faces(center, size, skip: Sequence[str] = ()) -> list[Rect]:
    """Six faces of an axis-aligned box; ``skip`` drops faces by name (+x, -x, ...)."""
    c = np.asarray(center, dtype=float)
    h = np.asarray(size, dtype=float) / 2.0
    faces = []
    for axis in range(3):
        for sign, name in ((1.0, "+"), (-1.0, "-")):
            label = name + "xyz"[axis]
            if label in skip:
                continue
            u, v = [a for a in range(3) if a != axis]
            corner = c.copy()
            corner[axis] += sign * h[axis]
            corner[u] -= h[u]
            corner[v] -= h[v]
            e1, e2 = np.zeros(3), np.zeros(3)
            e1[u] = 2 * h[u]
            e2[v] = 2 * h[v]
            faces.append(Rect(corner, e1, e2))
    return faces


@dataclass
class GroundTruthScene:
    """The "real" articulated object: true model, surfaces, current joint values."""

    model: ArticulatedModel
    q: np.ndarray
    seed: int
    surfaces: dict[int, list[Rect]]
    handles: dict[int, np.ndarray] = field(default_factory=dict)
    category: str = ""
    scene_id: str = ""

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).reshape(-1)
        if len(self.q) != len(self.model.joints):
            raise PerceptionError(f"scene has {len(self.model.joints)} joints but q has {len(self.q)} entries")

    @property
    def K(self) -> int:
        return self.model.K

    def at(self, q) -> "GroundTruthScene":
        lim = self.model.limits_array()
        q = np.clip(np.asarray(q, dtype=float), lim[:, 0], lim[:, 1])
        return replace(self, q=q)

    def moved(self, link: int, delta: float) -> tuple["GroundTruthScene", float]:
        """Move the joint into ``link`` by ``delta`` (clamped); returns (scene, achieved)."""
        i = self.model.joint_index(link)
        q = self.q.copy()
        lo, hi = self.model.limits_array()[i]
        new = float(np.clip(q[i] + delta, lo, hi))
        achieved = new - q[i]
        q[i] = new
        return replace(self, q=q), achieved


@dataclass
class PointCloud:
    points: np.ndarray
    frame_time: int = 0
    labels: np.ndarray | None = None
    # link-frame coordinates of the samples; ground-truth side only
    local: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise PerceptionError("point cloud has non-finite coordinates")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(self.labels) != len(self.points):
                raise PerceptionError("labels and points differ in length")

    def __len__(self) -> int:
        return len(self.points)


# ---------------------------------------------------------------------------
# sampling


def sample_point_cloud(scene: GroundTruthScene, n: int, seed: int, frame_time: int = 0) -> PointCloud:
    """Area-uniform samples of every link surface, posed at the scene's joint values.

    The same seed yields the same surface samples at any configuration, so
    clouds of one seed correspond index by index (tracked surface points).
    """
    K = scene.K
    if n < 8 * K:
        raise PerceptionError(f"need n >= 8*K = {8 * K}, got {n}")
    rng = np.random.default_rng(seed)
    ids = sorted(scene.surfaces)
    areas = np.array([sum(r.area for r in scene.surfaces[i]) for i in ids])
    # area-proportional allocation with a floor of 8 points per link
    counts = np.full(K, 8)
    extra = n - counts.sum()
    share = areas / areas.sum() * extra
    counts += np.floor(share).astype(int)
    rem = n - counts.sum()
    order = np.argsort(-(share - np.floor(share)), kind="stable")
    counts[order[:rem]] += 1
    local, labels = [], []
    for lid, cnt in zip(ids, counts):
        faces = scene.surfaces[lid]
        fa = np.array([f.area for f in faces])
        which = rng.choice(len(faces), size=cnt, p=fa / fa.sum())
        pts = np.empty((cnt, 3))
        for fi in range(len(faces)):
            sel = which == fi
            pts[sel] = faces[fi].sample(int(sel.sum()), rng)
        local.append(pts)
        labels.append(np.full(cnt, lid))
    local = np.concatenate(local)
    labels = np.concatenate(labels)
    return PointCloud(pose_local(scene, local, labels), frame_time, labels, local)


def pose_local(scene: GroundTruthScene, local: np.ndarray, labels: np.ndarray, q=None) -> np.ndarray:
    poses = model_poses(scene.model, scene.q if q is None else q)
    out = np.empty_like(local)
    for lid, (R, t) in poses.items():
        sel = labels == lid
        out[sel] = local[sel] @ R.T + t
    return out


def true_flow(scene_next: GroundTruthScene, cloud: PointCloud) -> np.ndarray:
    """Exact displacement of ``cloud``'s surface points when the scene moves to ``scene_next``."""
    if cloud.local is None or cloud.labels is None:
        raise PerceptionError("ground-truth flow needs a cloud sampled from a scene")
    return pose_local(scene_next, cloud.local, cloud.labels) - cloud.points


# ---------------------------------------------------------------------------
# segmentation


def corrupt_segmentation(labels, flip_rate: float, seed: int, points=None) -> np.ndarray:
    """Flip labels to a random other part, boundary points first.

    The number of flips is Binomial(N, flip_rate).  Points whose distance to
    another part lies in the closest decile are flipped before the rest.
    """
    if not 0.0 <= flip_rate < 0.5:
        raise PerceptionError(f"flip rate must be in [0, 0.5), got {flip_rate}")
    labels = np.asarray(labels, dtype=np.int64)
    parts = np.unique(labels)
    out = labels.copy()
    if len(parts) < 2 or flip_rate == 0.0:
        return out
    rng = np.random.default_rng(seed)
    N = len(labels)
    n_flip = int(rng.binomial(N, flip_rate))
    order = rng.permutation(N)
    if points is not None:
        points = np.asarray(points, dtype=float)
        dist = np.full(N, np.inf)
        for p in parts:
            mine = labels == p
            d, _ = cKDTree(points[~mine]).query(points[mine])
            dist[mine] = d
        boundary = dist <= np.quantile(dist, 0.1)
        order = np.concatenate([order[boundary[order]], order[~boundary[order]]])
    for i in order[:n_flip]:
        others = parts[parts != labels[i]]
        out[i] = others[rng.integers(len(others))]
    return out


def hard_mask(labels, K: int) -> np.ndarray:
    """One-hot N x K responsibilities from 1-based labels."""
    labels = np.asarray(labels, dtype=np.int64)
    M = np.zeros((len(labels), K))
    M[np.arange(len(labels)), labels - 1] = 1.0
    return M


# ---------------------------------------------------------------------------
# initial joint estimates


@dataclass
class FitThresholds:
    rotation_deg: float = 3.0
    translation: float = 0.01
    none_residual: float = 0.02
    temperature: float = 0.01
    moving_parent_penalty: float = 1.0
    static_motion: float = 0.01


def _check_group(pts: np.ndarray, k: int) -> None:
    if len(pts) < 3:
        raise PerceptionError(f"group {k + 1} is degenerate: fewer than 3 points")
    s = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
    if s[0] == 0 or s[1] <= 1e-9 * s[0]:
        raise PerceptionError(f"group {k + 1} is degenerate: points are collinear")


def fit_pair(src_u, dst_u, src_v, dst_v, th: FitThresholds):
    """Classify the motion of group v relative to group u.

    Returns (type, axis, origin, residual) with the line expressed in the
    frame of u at the first pose.  Both rigid fits are trimmed so that a few
    mislabelled points do not drag the estimate.
    """
    Ru, tu, _, _ = geometry.trimmed_kabsch(src_u, dst_u)
    back = (np.asarray(dst_v) - tu) @ Ru  # undo u's motion: Ru^T (x - tu)
    R, t, rms, inl = geometry.trimmed_kabsch(src_v, back)
    axis, angle, point, pitch = geometry.screw_from_rigid(R, t)
    src_v = np.asarray(src_v)[inl]
    centroid = src_v.mean(axis=0)
    if np.degrees(angle) > th.rotation_deg:
        jtype = "revolute"
        origin = point + ((centroid - point) @ axis) * axis
        off = abs(pitch)
    elif np.linalg.norm(t) > th.translation:
        jtype = "prismatic"
        axis = t / np.linalg.norm(t)
        origin = centroid
        spread = np.sqrt(np.mean(np.sum((src_v - centroid) ** 2, axis=1)))
        off = angle * spread
    else:
        jtype = "fixed"
        axis = np.array([0.0, 0.0, 1.0])
        origin = centroid
        off = 0.0
    return jtype, axis, origin, float(np.hypot(rms, off))


def init_joint_estimates(groups_t0: Sequence[np.ndarray], groups_t1: Sequence[np.ndarray], thresholds: FitThresholds | None = None):
    """Pairwise joint-type logits J (K x K x 4) and spatial params C (K x K x 9).

    Logits follow ``-residual / temperature``: the detected type scores its fit
    residual, the other movable types pay an extra ``none_residual``, and
    "None" sits at ``-none_residual / temperature`` (plus a penalty when the
    candidate parent itself moved in the world), so pairs whose residual
    exceeds the threshold prefer "None".
    """
    th = thresholds or FitThresholds()
    K = len(groups_t0)
    if len(groups_t1) != K:
        raise PerceptionError("both poses need the same number of groups")
    g0 = [np.asarray(g, dtype=float) for g in groups_t0]
    g1 = [np.asarray(g, dtype=float) for g in groups_t1]
    for k in range(K):
        _check_group(g0[k], k)
        if g0[k].shape != g1[k].shape:
            raise PerceptionError(f"group {k + 1} has no index correspondence between poses")
    # median displacement, so mislabelled points do not make a static part "move"
    moving = [float(np.median(np.linalg.norm(g1[k] - g0[k], axis=1))) > th.static_motion for k in range(K)]
    J = np.full((K, K, 4), -50.0)
    C = np.zeros((K, K, 9))
    C[..., 2] = 1.0
    slot = {"revolute": 1, "prismatic": 2, "fixed": 3}
    tau = th.temperature
    for u in range(K):
        for v in range(K):
            if u == v:
                continue
            jtype, axis, origin, resid = fit_pair(g0[u], g1[u], g0[v], g1[v], th)
            logits = np.full(4, -(resid + th.none_residual) / tau)
            logits[slot[jtype]] = -resid / tau
            logits[0] = -th.none_residual / tau + (th.moving_parent_penalty if moving[u] else 0.0)
            J[u, v] = logits
            C[u, v, 0:3] = axis
            C[u, v, 3:6] = origin
    return J, C


# ---------------------------------------------------------------------------
# scene flow and correspondence


FLOW_MODES = ("gt", "gt+noise", "nearest-neighbor")


def _uniform_ball_noise(n: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * rng.uniform(0.0, sigma, size=(n, 1))


def estimate_scene_flow(
    P_t: PointCloud,
    P_next: PointCloud,
    mode: str,
    seed: int = 0,
    sigma: float = DEFAULT_NOISE_SIGMA,
    gt: np.ndarray | None = None,
) -> np.ndarray:
    """Per-point flow of ``P_t``.

    ``gt`` is the true displacement (see :func:`true_flow`); when omitted for
    the ground-truth modes the clouds must be tracked samples of equal size,
    in which case the index-wise difference is the true flow.
    """
    if mode not in FLOW_MODES:
        raise PerceptionError(f"unknown flow mode {mode!r}")
    if len(P_t) == 0 or len(P_next) == 0:
        raise PerceptionError("empty point cloud")
    if mode == "nearest-neighbor":
        idx = nearest_indices(P_t.points, P_next.points)
        return P_next.points[idx] - P_t.points
    if gt is None:
        if P_t.local is None or P_next.local is None or not np.array_equal(P_t.local, P_next.local):
            raise PerceptionError("ground-truth flow needs `gt` or tracked clouds")
        gt = P_next.points - P_t.points
    flow = np.array(gt, dtype=float)
    if mode == "gt+noise" and sigma > 0:
        flow = flow + _uniform_ball_noise(len(flow), sigma, np.random.default_rng(seed))
    return flow


def nearest_indices(queries: np.ndarray, targets: np.ndarray, method: str = "kdtree") -> np.ndarray:
    """Index of the nearest target for each query; ties go to the smaller index."""
    queries = np.asarray(queries, dtype=float).reshape(-1, 3)
    targets = np.asarray(targets, dtype=float).reshape(-1, 3)
    if len(targets) == 0:
        raise PerceptionError("no target points")
    if method == "brute":
        d2 = ((queries[:, None, :] - targets[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(d2, axis=1)
    if method != "kdtree":
        raise PerceptionError(f"unknown search method {method!r}")
    k = min(2, len(targets))
    dist, idx = cKDTree(targets).query(queries, k=k)
    if k == 1:
        return np.asarray(idx).reshape(-1)
    # recompute squared distances the way the brute-force path does so that
    # ties are resolved identically
    d2 = ((queries[:, None, :] - targets[idx]) ** 2).sum(axis=2)
    first = np.where(
        (d2[:, 1] < d2[:, 0]) | ((d2[:, 1] == d2[:, 0]) & (idx[:, 1] < idx[:, 0])), idx[:, 1], idx[:, 0]
    )
    return first


def real_correspondence(P_t: np.ndarray, U_t: np.ndarray, P_next: np.ndarray, method: str = "kdtree") -> np.ndarray:
    """Nearest point of ``P_next`` to each flowed point ``P_t + U_t``."""
    P_t = np.asarray(P_t, dtype=float)
    U_t = np.asarray(U_t, dtype=float)
    P_next = np.asarray(P_next, dtype=float)
    if len(P_next) == 0:
        raise PerceptionError("empty next-frame cloud")
    if U_t.shape != P_t.shape:
        raise PerceptionError("flow must be indexed parallel to the source cloud")
    return P_next[nearest_indices(P_t + U_t, P_next, method)]


def groups_from_labels(points: np.ndarray, labels: np.ndarray, K: int) -> list[np.ndarray]:
    return [points[labels == k + 1] for k in range(K)]


# ---------------------------------------------------------------------------
# binary cloud files: uint64 N, N*3 float64, optional N int32 labels (little endian)


def write_cloud(path: str | Path, cloud: PointCloud, with_labels: bool = True) -> None:
    pts = np.ascontiguousarray(cloud.points, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(pts)))
        fh.write(pts.tobytes())
        if with_labels and cloud.labels is not None:
            fh.write(np.ascontiguousarray(cloud.labels, dtype="<i4").tobytes())


def read_cloud(path: str | Path) -> PointCloud:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise PerceptionError("cloud file too short")
    (n,) = struct.unpack_from("<Q", data, 0)
    body = 8 + 24 * n
    if len(data) not in (body, body + 4 * n):
        raise PerceptionError(f"cloud file size {len(data)} does not match N={n}")
    pts = np.frombuffer(data, dtype="<f8", count=3 * n, offset=8).reshape(n, 3).astype(float)
    labels = None
    if len(data) == body + 4 * n:
        labels = np.frombuffer(data, dtype="<i4", count=n, offset=body).astype(np.int64)
    return PointCloud(pts, 0, labels)


def model_from_scene(scene: GroundTruthScene) -> ArticulatedModel:
    return scene.model


__all__ = [
    "FLOW_MODES",
    "FitThresholds",
    "GroundTruthScene",
    "ModelError",
    "PerceptionError",
    "PointCloud",
    "Rect",
    "box_faces",
    "corrupt_segmentation",
    "estimate_scene_flow",
    "fit_pair",
    "groups_from_labels",
    "hard_mask",
    "init_joint_estimates",
    "nearest_indices",
    "pose_local",
    "read_cloud",
    "real_correspondence",
    "sample_point_cloud",
    "true_flow",
    "write_cloud",
]
