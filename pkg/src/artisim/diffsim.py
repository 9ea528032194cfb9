"""Differentiable forward functions: soft joint motion, kinematics, dynamics.

All functions accept either numpy arrays or :class:`artisim.autodiff.Var`
values, so the same code provides the numeric forward pass and the recorded
pass used for gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from artisim import autodiff as ad
from artisim import geometry
from artisim.scene.model import ArticulatedModel, ModelError, TreeStructure

TYPE_SLOTS = ("none", "revolute", "prismatic", "fixed")
DEFAULT_DT = 0.01
GRIP_RADIUS = 0.02


class SimError(ValueError):
    pass


# ---------------------------------------------------------------------------
# model parameters


@dataclass
class SoftJointParams:
    """Differentiable slice of (J, C) for one edge."""

    type_logits: object  # (4,)
    axis: object  # (3,), renormalised on read
    origin: object  # (3,)
    orientation: object  # (3,)

    @classmethod
    def from_slices(cls, j_uv, c_uv) -> "SoftJointParams":
        return cls(j_uv, c_uv[0:3], c_uv[3:6], c_uv[6:9])

    def unit_axis(self):
        return geometry.normalize(self.axis)

    def type_weights(self):
        """Softmax restricted to (revolute, prismatic, fixed)."""
        return ad.softmax(self.type_logits[1:4])

    def hard_type(self) -> str:
        return TYPE_SLOTS[1 + int(np.argmax(ad.value_of(self.type_logits)[1:4]))]


@dataclass
class ModelParams:
    """The optimisable parameter set {J, C, M, alpha}.

    J: K x K x 4 type logits, C: K x K x 9 spatial params (axis, origin,
    orientation), M: N x K soft segmentation, alpha: K x 3 per-link
    (mass, damping, inertia).  Fields may hold arrays or Vars.
    """

    J: object
    C: object
    M: object
    alpha: object

    @property
    def K(self) -> int:
        return int(ad.value_of(self.J).shape[0])

    def edge(self, u: int, v: int) -> SoftJointParams:
        return SoftJointParams.from_slices(self.J[u - 1, v - 1], self.C[u - 1, v - 1])

    def numeric(self) -> "ModelParams":
        return ModelParams(*(np.array(ad.value_of(x), dtype=float) for x in (self.J, self.C, self.M, self.alpha)))

    def copy(self) -> "ModelParams":
        return self.numeric()


# ---------------------------------------------------------------------------
# joint motion and kinematics


def joint_displacement(jp: SoftJointParams, q, points, axis=None, origin=None):
    """Type-blended displacement field of ``points`` for a joint change ``q``.

    ``axis``/``origin`` override the line (used to pass world-frame values).
    """
    if axis is None:
        axis = geometry.rotvec_to_matrix(jp.orientation) @ jp.unit_axis()
    if origin is None:
        origin = jp.origin
    w = jp.type_weights()
    rot = geometry.rotation_displacement(points, axis, q, origin)
    trans = axis * q
    return w[0] * rot + w[1] * trans


def joint_transform(jp: SoftJointParams, q, points):
    """Apply the soft joint motion to ``points`` expressed in the parent frame."""
    return points + joint_displacement(jp, q, points)


def _axis_rotation(axis, angle):
    k = geometry.skew(axis)
    return np.eye(3) + ad.sin(angle) * k + (1.0 - ad.cos(angle)) * (k @ k)


def _edge_motion(jtype: str, axis, origin, q):
    if jtype == "revolute":
        R = _axis_rotation(axis, q)
        return R, origin - R @ origin
    if jtype == "prismatic":
        return np.eye(3), axis * q
    return np.eye(3), np.zeros(3)


def _mount(jp: SoftJointParams):
    R = geometry.rotvec_to_matrix(jp.orientation)
    return geometry.rotation_about_point(R, jp.origin)


def _q_lookup(q, children: Sequence[int]):
    if q is None:
        return {c: 0.0 for c in children}
    if isinstance(q, Mapping):
        return {c: q.get(c, 0.0) for c in children}
    return {c: q[i] for i, c in enumerate(children)}


def forward_kinematics(Z: ModelParams, E: TreeStructure, q=None) -> dict:
    """World transform (R, t) of every link.

    ``q`` is indexed by child link in ascending id order (or a mapping
    child -> value).  Frames are chained with the argmax joint type; the
    soft blend is used only for point displacements.
    """
    children = sorted(v for _, v in E.edges)
    qd = _q_lookup(q, children)
    poses = {E.root: (np.eye(3), np.zeros(3))}
    for u, v in E.topological_edges():
        jp = Z.edge(u, v)
        mount = _mount(jp)
        motion = _edge_motion(jp.hard_type(), jp.unit_axis(), jp.origin, qd[v])
        poses[v] = geometry.compose(geometry.compose(poses[u], mount), motion)
    return poses


def joint_world_line(Z: ModelParams, E: TreeStructure, child: int, q=None, poses=None):
    """(origin, unit axis) of the joint into ``child`` in world coordinates."""
    parent = E.parent_of(child)
    if parent is None:
        raise SimError(f"link {child} has no incoming joint")
    if poses is None:
        poses = forward_kinematics(Z, E, q)
    jp = Z.edge(parent, child)
    R_u, t_u = poses[parent]
    R_m = geometry.rotvec_to_matrix(jp.orientation)
    origin = R_u @ jp.origin + t_u
    axis = R_u @ (R_m @ jp.unit_axis())
    return origin, axis


@dataclass(frozen=True)
class IPAction:
    link: int
    delta: float


def point_forward(P, Z: ModelParams, E: TreeStructure, action: IPAction, q=None, delta=None):
    """Predicted next-frame points for an interaction on ``action.link``.

    Every point moves by the displacement of the actuated joint weighted by
    its soft membership in the moved subtree.  ``delta`` overrides
    ``action.delta`` (pass a Var to differentiate w.r.t. the action).
    """
    k = action.link
    nodes = {E.root} | {v for _, v in E.edges}
    if k not in nodes:
        raise SimError(f"link {k} is not in the model")
    if k == E.root:
        raise SimError(f"link {k} is the root and has no joint to actuate")
    d = action.delta if delta is None else delta
    origin, axis = joint_world_line(Z, E, k, q)
    jp = Z.edge(E.parent_of(k), k)
    disp = joint_displacement(jp, d, P, axis=axis, origin=origin)
    moved = [c - 1 for c in E.subtree(k)]
    s = ad.sum(Z.M[:, moved], axis=1, keepdims=True)
    return P + s * disp


# ---------------------------------------------------------------------------
# object dynamics


@dataclass
class ObjectState:
    q: object
    qd: object


@dataclass
class JointDynamics:
    """Per-joint scalar inertia, damping and limits (ordered by child id)."""

    inertia: np.ndarray
    damping: np.ndarray
    limits: np.ndarray  # (n, 2)
    drag: float = 0.0

    @property
    def n(self) -> int:
        return len(self.inertia)

    def perturbed(self, mass_scale: float = 1.0, damping_add: float = 0.0, drag: float | None = None) -> "JointDynamics":
        return JointDynamics(
            self.inertia * mass_scale,
            self.damping + damping_add,
            self.limits,
            self.drag if drag is None else drag,
        )


def object_dynamics(model: ArticulatedModel, alpha=None) -> JointDynamics:
    """Joint-space dynamics from link attributes.

    The child link's inertia scalar drives revolute joints and its mass drives
    prismatic joints.  ``alpha`` (K x 3: mass, damping, inertia) overrides the
    model's link attributes.
    """
    inertia, damping = [], []
    for j in model.ordered_joints():
        if alpha is not None:
            mass, damp, inert = (float(x) for x in np.asarray(alpha)[j.child - 1])
        else:
            lk = model.link(j.child)
            mass, damp, inert = lk.mass, lk.damping, lk.inertia
        inertia.append(mass if j.type == "prismatic" else inert)
        damping.append(damp)
    return JointDynamics(np.array(inertia, dtype=float), np.array(damping, dtype=float), model.limits_array())


def euler_update(q, qd, qdd, dt: float, lo, hi):
    """Semi-implicit Euler step qd' = qd + dt qdd, q' = clip(q + dt qd', lo, hi).

    Recorded as two ops; the clamp passes gradient inside [lo, hi] inclusive,
    like :func:`autodiff.clip`.
    """
    qv, qdv, qddv = (ad.value_of(x) for x in (q, qd, qdd))
    qd_new_v = qdv + dt * qddv
    raw = qv + dt * qd_new_v
    q_new_v = np.clip(raw, lo, hi)
    if not any(ad.is_var(x) for x in (q, qd, qdd)):
        return q_new_v, qd_new_v
    qd_new = ad.primitive("euler_velocity", qd_new_v, [qd, qdd], [lambda g: g, lambda g: dt * g])
    inside = (raw >= lo) & (raw <= hi)
    q_new = ad.primitive("euler_position", q_new_v, [q, qd_new], [lambda g: g * inside, lambda g: dt * g * inside])
    return q_new, qd_new


def joint_acceleration(u, qd, dyn: JointDynamics):
    """(u - damping qd - drag qd|qd|) / inertia per joint, as one op."""
    qdv = np.asarray(ad.value_of(qd), dtype=float)
    uv = np.broadcast_to(np.asarray(ad.value_of(u), dtype=float), qdv.shape)
    qddv = (uv - dyn.damping * qdv - dyn.drag * qdv * np.abs(qdv)) / dyn.inertia
    if ad.is_var(u) and ad.value_of(u).shape != qdv.shape:
        u = u + np.zeros(qdv.shape)
    dqd = -(dyn.damping + 2.0 * dyn.drag * np.abs(qdv)) / dyn.inertia
    return ad.primitive("joint_acceleration", qddv, [u, qd], [lambda g: g / dyn.inertia, lambda g: g * dqd])


def object_dynamics_step(x: ObjectState, u, dyn: JointDynamics, dt: float = DEFAULT_DT) -> ObjectState:
    """Semi-implicit Euler per joint with clamped positions."""
    if dt <= 0:
        raise SimError("dt must be positive")
    if not np.all(np.isfinite(ad.value_of(u))):
        raise SimError("non-finite object action")
    qdd = joint_acceleration(u, x.qd, dyn)
    q, qd = euler_update(x.q, x.qd, qdd, dt, dyn.limits[:, 0], dyn.limits[:, 1])
    return ObjectState(q, qd)


# ---------------------------------------------------------------------------
# robot


@dataclass
class ArmSpec:
    """Planar serial arm of revolute joints living in the plane (base, e1, e2)."""

    base: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    lengths: np.ndarray = field(default_factory=lambda: np.array([0.3, 0.25, 0.15]))
    inertia: np.ndarray = field(default_factory=lambda: np.array([0.05, 0.03, 0.01]))
    damping: np.ndarray = field(default_factory=lambda: np.array([0.05, 0.05, 0.05]))
    limits: np.ndarray = field(default_factory=lambda: np.tile([-2.6, 2.6], (3, 1)))
    drag: float = 0.0

    def __post_init__(self):
        for name in ("base", "e1", "e2", "lengths", "inertia", "damping", "limits"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))

    @property
    def R(self) -> int:
        return len(self.lengths)

    @property
    def span(self) -> float:
        return float(self.lengths.sum())

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.e1, self.e2)

    def perturbed(self, mass_scale: float = 1.0, damping_add: float = 0.0, drag: float | None = None) -> "ArmSpec":
        return replace(
            self,
            inertia=self.inertia * mass_scale,
            damping=self.damping + damping_add,
            drag=self.drag if drag is None else drag,
        )

    def _angles(self, q):
        if ad.is_var(q):
            return np.tril(np.ones((self.R, self.R))) @ q
        return np.cumsum(q)

    def end_effector(self, q):
        qv = np.asarray(ad.value_of(q), dtype=float)
        phi = self._angles(qv)
        ee = self.base + self.e1 * np.sum(self.lengths * np.cos(phi)) + self.e2 * np.sum(self.lengths * np.sin(phi))
        if not ad.is_var(q):
            return ee
        J = self.jacobian(qv)
        return ad.primitive("end_effector", ee, [q], [lambda g: J.T @ g])

    def _planar_jacobian(self, q: np.ndarray):
        phi = self._angles(q)
        # suffix sums: dx_i = -sum_{j>=i} l_j sin(phi_j), dy_i = sum_{j>=i} l_j cos(phi_j)
        dx = -np.cumsum((self.lengths * np.sin(phi))[::-1])[::-1]
        dy = np.cumsum((self.lengths * np.cos(phi))[::-1])[::-1]
        return dx, dy

    def jacobian(self, q):
        """d(end effector)/dq, shape (3, R)."""
        qv = np.asarray(ad.value_of(q), dtype=float)
        dx, dy = self._planar_jacobian(qv)
        J = np.outer(self.e1, dx) + np.outer(self.e2, dy)
        if not ad.is_var(q):
            return J
        return ad.primitive("arm_jacobian", J, [q], [lambda G: self.jacobian_vjp(qv, G, dx, dy)])

    def jacobian_vjp(self, q: np.ndarray, G: np.ndarray, dx=None, dy=None) -> np.ndarray:
        """sum(G * d jacobian(q)/dq_k) for each k (the planar FK second derivative)."""
        if dx is None:
            dx, dy = self._planar_jacobian(q)
        # d dx_i/dq_k = -dy_max(i,k), d dy_i/dq_k = dx_max(i,k)
        idx = np.maximum.outer(np.arange(self.R), np.arange(self.R))
        return -(self.e1 @ G) @ dy[idx] + (self.e2 @ G) @ dx[idx]

    def joint_positions(self, q) -> np.ndarray:
        """Numeric positions of base, each joint and the end effector."""
        q = np.asarray(ad.value_of(q), dtype=float)
        phi = self._angles(q)
        xs = np.concatenate([[0.0], np.cumsum(self.lengths * np.cos(phi))])
        ys = np.concatenate([[0.0], np.cumsum(self.lengths * np.sin(phi))])
        return self.base + np.outer(xs, self.e1) + np.outer(ys, self.e2)

    def link_points(self, q, fractions=(0.0, 0.25, 0.5, 0.75)) -> np.ndarray:
        """Sample points along the links; the gripper tip itself is excluded."""
        P = self.joint_positions(q)
        pts = [P[i] + f * (P[i + 1] - P[i]) for i in range(self.R) for f in fractions]
        return np.array(pts)


@dataclass
class RobotState:
    q: object
    qd: object


@dataclass(frozen=True)
class Attachment:
    """Kinematic grasp of ``link``; the object joint is slaved to the gripper."""

    link: int
    joint_index: int
    kind: str
    axis: np.ndarray
    center: np.ndarray
    q_grasp: float
    ee_grasp: np.ndarray


@dataclass
class SimState:
    object: ObjectState
    robot: RobotState
    attachment: Attachment | None = None

    def vector(self):
        return ad.concatenate([self.object.q, self.object.qd, self.robot.q, self.robot.qd])

    @classmethod
    def from_vector(cls, v, n_obj: int, n_rob: int, attachment: Attachment | None = None) -> "SimState":
        a, b, c = n_obj, 2 * n_obj, 2 * n_obj + n_rob
        return cls(ObjectState(v[0:a], v[a:b]), RobotState(v[b:c], v[c:c + n_rob]), attachment)

    def numeric(self) -> "SimState":
        f = lambda x: np.array(ad.value_of(x), dtype=float)  # noqa: E731
        return SimState(ObjectState(f(self.object.q), f(self.object.qd)), RobotState(f(self.robot.q), f(self.robot.qd)), self.attachment)


@dataclass
class RobotWorld:
    """Everything robot_step needs: object geometry/dynamics, arm, handle."""

    model: ArticulatedModel
    dynamics: JointDynamics
    arm: ArmSpec
    target: int
    handle: np.ndarray  # handle point in the target link frame
    grip_radius: float = GRIP_RADIUS
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.handle = np.asarray(self.handle, dtype=float)
        if self.target not in [j.child for j in self.model.joints]:
            raise SimError(f"target link {self.target} has no joint")

    @property
    def target_index(self) -> int:
        return self.model.joint_index(self.target)

    def with_dynamics(self, dynamics: JointDynamics | None = None, arm: ArmSpec | None = None) -> "RobotWorld":
        return replace(self, dynamics=dynamics or self.dynamics, arm=arm or self.arm)

    def joint_line(self, q_obj) -> tuple[np.ndarray, np.ndarray, str]:
        """World (origin, axis, type) of the target joint for numeric object state."""
        return self._frame(np.asarray(ad.value_of(q_obj), dtype=float))[:3]

    def _frame(self, qv: np.ndarray):
        """(origin, axis, type, handle at the target's zero) for numeric joint values, memoised."""
        q_base = qv.copy()
        q_base[self.target_index] = 0.0
        key = (id(self.model), self.target, self.handle.tobytes(), q_base.tobytes())
        hit = self._cache.get(key)
        if hit is None:
            poses = model_poses(self.model, q_base)
            j = self.model.joint_into(self.target)
            R_u, t_u = poses[j.parent]
            R_m = geometry.rotvec_to_matrix(j.orientation)
            hit = (R_u @ j.origin + t_u, R_u @ R_m @ j.axis, j.type, apply_pose(poses[self.target], self.handle))
            if len(self._cache) > 4096:
                self._cache.clear()
            self._cache[key] = hit
        return hit

    def handle_position(self, q_obj):
        """World position of the handle; differentiable in the target joint value."""
        qv = np.asarray(ad.value_of(q_obj), dtype=float)
        origin, axis, jtype, h0 = self._frame(qv)
        qt = q_obj[self.target_index]
        if jtype == "revolute":
            return geometry.rotate_points(h0, axis, qt, origin)
        if jtype == "prismatic":
            return h0 + axis * qt
        return h0


def apply_pose(T, p):
    R, t = T
    return R @ np.asarray(p, dtype=float) + t


def model_poses(model: ArticulatedModel, q: np.ndarray) -> dict:
    """Numeric link poses of a concrete model at joint vector ``q`` (child-id order)."""
    q = np.asarray(q, dtype=float).reshape(-1)
    idx = {j.child: i for i, j in enumerate(model.ordered_joints())}
    tree = model.tree
    poses = {tree.root: (np.eye(3), np.zeros(3))}
    for u, v in tree.topological_edges():
        j = model.joint_into(v)
        R_m = geometry.rotvec_to_matrix(j.orientation)
        mount = geometry.rotation_about_point(R_m, j.origin)
        motion = _edge_motion(j.type, j.axis, j.origin, q[idx[v]])
        poses[v] = geometry.compose(geometry.compose(poses[u], mount), motion)
    return poses


def posed_points(model: ArticulatedModel, q: np.ndarray, exclude: Sequence[int] = ()) -> tuple[np.ndarray, np.ndarray]:
    """World points of all links at ``q`` with their link labels."""
    poses = model_poses(model, q)
    pts, labels = [], []
    for lk in model.links:
        if lk.id in exclude:
            continue
        R, t = poses[lk.id]
        pts.append(lk.points @ R.T + t)
        labels.append(np.full(len(lk.points), lk.id))
    return np.concatenate(pts), np.concatenate(labels)


def make_attachment(world: RobotWorld, s: SimState) -> Attachment:
    qo = np.asarray(ad.value_of(s.object.q), dtype=float)
    origin, axis, jtype = world.joint_line(qo)
    if jtype == "fixed":
        raise SimError(f"link {world.target} is fixed and cannot be manipulated")
    ee = np.asarray(ad.value_of(world.arm.end_effector(s.robot.q)), dtype=float)
    return Attachment(world.target, world.target_index, jtype, axis, origin, float(qo[world.target_index]), ee)


def attachment_map(att: Attachment, arm: ArmSpec, q_r):
    """Object joint value implied by the gripper position (the constraint map).

    Its derivative is :func:`attachment_jacobian`, so it is recorded as a
    single op.
    """
    qv = np.asarray(ad.value_of(q_r), dtype=float)
    ee = arm.end_effector(qv)
    if att.kind == "prismatic":
        val = att.q_grasp + float(att.axis @ (ee - att.ee_grasp))
    else:
        a = att.axis
        rg = att.ee_grasp - att.center
        rg = rg - a * (rg @ a)
        r = ee - att.center
        val = att.q_grasp + math.atan2(float(a @ np.cross(rg, r)), float(rg @ r))
    if not ad.is_var(q_r):
        return np.float64(val)
    j = attachment_jacobian(att, arm, qv)
    return ad.primitive("attachment_map", val, [q_r], [lambda g: g * j])


def _attachment_jacobian_parts(att: Attachment, arm: ArmSpec, qv: np.ndarray):
    """Numeric attachment Jacobian and the vjp of its derivative w.r.t. q_r."""
    Jee = arm.jacobian(qv)
    if att.kind == "prismatic":
        g = att.axis
        Dg = np.zeros((3, 3))
    else:
        a = att.axis
        r = arm.end_effector(qv) - att.center
        r_perp = r - a * (a @ r)
        n = float(r_perp @ r_perp)
        # g = a x r / |r_perp|^2 (a x r_perp equals a x r)
        A = np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])
        g = A @ r / n
        Dg = A / n - np.outer(g, 2.0 * r_perp) / n

    def vjp(w):
        return (Jee @ w) @ Dg @ Jee + arm.jacobian_vjp(qv, np.outer(g, w))

    return g @ Jee, vjp


def attachment_jacobian(att: Attachment, arm: ArmSpec, q_r):
    """d(attachment_map)/dq_r, shape (R,), in closed form (recorded as one op)."""
    qv = np.asarray(ad.value_of(q_r), dtype=float)
    j, vjp = _attachment_jacobian_parts(att, arm, qv)
    if not ad.is_var(q_r):
        return j
    return ad.primitive("attachment_jacobian", j, [q_r], [vjp])


def _attached_acceleration(att: Attachment, world: RobotWorld, q, qd, tau):
    """Arm acceleration with the grasped joint slaved to the gripper.

    The object joint loads the arm through the attachment Jacobian j; the
    rank-one inertia update is solved with Sherman-Morrison.  Recorded as one
    op with a hand-written reverse pass.  Returns (qdd, j, object force).
    """
    arm, dyn = world.arm, world.dynamics
    k = world.target_index
    qv, qdv, tv = (np.asarray(ad.value_of(x), dtype=float) for x in (q, qd, tau))
    j, j_vjp = _attachment_jacobian_parts(att, arm, qv)
    m, I = arm.inertia, dyn.inertia[k]
    c, d = dyn.damping[k], dyn.drag
    v = float(j @ qdv)
    f = c * v + d * v * abs(v)
    b = tv - arm.damping * qdv - arm.drag * qdv * np.abs(qdv) - j * f
    u, w = b / m, j / m
    s1, s2 = float(j @ u), float(j @ w)
    den = 1.0 + I * s2
    alpha = I * s1 / den
    qdd = u - w * alpha
    f_obj = I * float(j @ qdd) + f
    if not any(ad.is_var(x) for x in (q, qd, tau)):
        return qdd, j, f_obj

    cache = {}

    def backward(g):
        # the three input vjps share one reverse pass per incoming cotangent
        if cache.get("g") is g:
            return cache["out"]
        g_u = g.copy()
        g_w = -g * alpha
        g_alpha = -float(g @ w)
        g_s1 = g_alpha * I / den
        g_s2 = -g_alpha * alpha * I / den
        g_j = g_s1 * u + g_s2 * w
        g_u = g_u + g_s1 * j
        g_w = g_w + g_s2 * j
        g_j = g_j + g_w / m
        g_b = g_u / m
        g_tau = g_b
        g_qd = -arm.damping * g_b - 2.0 * arm.drag * np.abs(qdv) * g_b
        g_j = g_j - g_b * f
        g_v = -float(g_b @ j) * (c + 2.0 * d * abs(v))
        g_j = g_j + g_v * qdv
        g_qd = g_qd + g_v * j
        cache["g"], cache["out"] = g, (j_vjp(g_j), g_qd, g_tau)
        return cache["out"]

    qdd_var = ad.primitive(
        "attached_acceleration",
        qdd,
        [q, qd, tau],
        [lambda g: backward(g)[0], lambda g: backward(g)[1], lambda g: backward(g)[2]],
    )
    return qdd_var, j, f_obj


def robot_step(
    s: SimState,
    tau,
    world: RobotWorld,
    dt: float = DEFAULT_DT,
    grasp: bool = True,
    info: dict | None = None,
) -> SimState:
    """Advance arm and object by one step under joint torques ``tau``.

    When attached, the grasped joint is slaved to the gripper and its inertia
    and damping load the arm through the attachment Jacobian.
    """
    arm, dyn = world.arm, world.dynamics
    if ad.value_of(tau).shape != (arm.R,):
        raise SimError(f"expected {arm.R} torques, got shape {ad.value_of(tau).shape}")
    if ad.value_of(s.object.q).shape != (dyn.n,):
        raise SimError(f"object state has {ad.value_of(s.object.q).shape} entries, model has {dyn.n} joints")
    att = s.attachment
    if att is None and grasp:
        ee = arm.end_effector(np.asarray(ad.value_of(s.robot.q), dtype=float))
        h = np.asarray(world.handle_position(np.asarray(ad.value_of(s.object.q), dtype=float)), dtype=float)
        if np.linalg.norm(ee - h) <= world.grip_radius:
            att = make_attachment(world, s)
    qd_r = s.robot.qd
    k = world.target_index
    if att is not None:
        qdd, j, f_obj = _attached_acceleration(att, world, s.robot.q, qd_r, tau)
        if info is not None:
            info["object_force"] = f_obj
            info["jacobian"] = j
    else:
        b = tau - arm.damping * qd_r
        if arm.drag:
            b = b - arm.drag * qd_r * ad.absolute(qd_r)
        qdd = b / arm.inertia
    q_r_new, qd_r_new = euler_update(s.robot.q, qd_r, qdd, dt, arm.limits[:, 0], arm.limits[:, 1])
    obj = object_dynamics_step(s.object, np.zeros(dyn.n), dyn, dt)
    if att is not None:
        mask = np.zeros(dyn.n, dtype=bool)
        mask[k] = True
        q_slave = ad.clip(attachment_map(att, arm, q_r_new), dyn.limits[k, 0], dyn.limits[k, 1])
        qd_slave = (q_slave - s.object.q[k]) / dt
        obj = ObjectState(ad.where(mask, q_slave, obj.q), ad.where(mask, qd_slave, obj.qd))
    if info is not None:
        info["attached"] = att is not None
    return SimState(obj, RobotState(q_r_new, qd_r_new), att)
