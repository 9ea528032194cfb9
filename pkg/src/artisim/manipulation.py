"""Two-level model-based manipulation.

1. Object-centric: plan virtual joint forces that drive the target joint to
   its goal, ignoring the robot.
2. Robot-centric: optimise arm torques so the simulated object follows that
   plan, then wrap the optimised rollout in a time-varying affine policy.

Both levels differentiate rollouts of the simulator (BPTT).  Execution in a
"real" world records transitions for residual learning.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import least_squares, minimize

from artisim import autodiff as ad
from artisim import geometry
from artisim.diffsim import (
    DEFAULT_DT,
    ArmSpec,
    JointDynamics,
    ObjectState,
    RobotState,
    RobotWorld,
    SimState,
    object_dynamics,
    object_dynamics_step,
    posed_points,
    robot_step,
)
from artisim.residual import ResidualNet, TransitionBuffer, augmented_step, nominal_jacobians

FORMAT_VERSION = 1


class PlanningError(RuntimeError):
    """Optimisation failed; ``best`` holds the best result found."""

    def __init__(self, message: str, best=None):
        super().__init__(message)
        self.best = best


class ReachError(PlanningError):
    pass


@dataclass(frozen=True)
class Task:
    target: int
    q_goal: float
    T_steps: int = 100
    tolerance: float = math.radians(2.0)

    def __post_init__(self):
        if self.T_steps < 1:
            raise PlanningError("task horizon must be at least one step")


@dataclass
class CostWeights:
    w_g: float = 100.0
    w_v: float = 1.0
    w_u: float = 0.01
    w_track: float = 10.0
    w_reach: float = 50.0
    w_a: float = 0.01
    w_limit: float = 1e3
    w_prox: float = 1e3


@dataclass
class PlanConfig:
    dt: float = DEFAULT_DT
    method: str = "lbfgs"  # or "momentum"
    max_iters: int = 500
    robot_iters: int = 40
    lr: float = 1e-2
    momentum: float = 0.9
    grad_clip: float = 10.0
    tol: float = 1e-12
    weights: CostWeights = field(default_factory=CostWeights)
    reach_steps: int = 30
    feedback: str = "lqr"  # or "none" (feedforward only)
    limit_margin: float = math.radians(2.0)
    proximity: float = 0.03
    barrier_margin: float = math.radians(6.0)
    barrier_radius: float = 0.05
    max_replans: int = 3


# ---------------------------------------------------------------------------
# trajectories and policies


@dataclass
class ObjectTrajectory:
    x: np.ndarray  # (T+1, 2n): [q, qd]
    u: np.ndarray  # (T, n)
    dt: float = DEFAULT_DT
    cost: float = float("nan")

    @property
    def n(self) -> int:
        return self.u.shape[1]

    @property
    def T(self) -> int:
        return self.u.shape[0]

    def q(self, t: int) -> np.ndarray:
        return self.x[t, : self.n]

    def to_dict(self) -> dict:
        return {"version": FORMAT_VERSION, "kind": "object-trajectory", "dt": self.dt, "T": self.T, "n": self.n,
                "x": self.x.tolist(), "u": self.u.tolist(), "cost": self.cost}

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectTrajectory":
        _check_version(d, "object-trajectory")
        return cls(np.array(d["x"], dtype=float).reshape(d["T"] + 1, 2 * d["n"]), np.array(d["u"], dtype=float).reshape(d["T"], d["n"]), d["dt"], d["cost"])


@dataclass
class Policy:
    """Time-varying affine feedback a_t = K_t s_t + k_t."""

    K: np.ndarray  # (T, R, S)
    k: np.ndarray  # (T, R)

    @property
    def T(self) -> int:
        return self.k.shape[0]

    def act(self, t: int, s_vec) -> np.ndarray:
        return self.K[t] @ np.asarray(s_vec, dtype=float) + self.k[t]

    def to_dict(self) -> dict:
        T, R, S = self.K.shape
        return {"version": FORMAT_VERSION, "kind": "policy", "T": T, "R": R, "S": S, "K": self.K.ravel().tolist(), "k": self.k.ravel().tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Policy":
        _check_version(d, "policy")
        T, R, S = d["T"], d["R"], d["S"]
        return cls(np.array(d["K"], dtype=float).reshape(T, R, S), np.array(d["k"], dtype=float).reshape(T, R))

    @staticmethod
    def concatenate(parts: Sequence["Policy"]) -> "Policy":
        return Policy(np.concatenate([p.K for p in parts]), np.concatenate([p.k for p in parts]))


@dataclass
class RobotTrajectory:
    s: np.ndarray  # (T+1, S)
    a: np.ndarray  # (T, R)
    attached: np.ndarray  # (T+1,) bool
    n_obj: int
    cost: float = float("nan")
    replans: list = field(default_factory=list)

    @property
    def T(self) -> int:
        return self.a.shape[0]

    def object_q(self, t: int = -1) -> np.ndarray:
        return self.s[t, : self.n_obj]

    def to_dict(self) -> dict:
        return {"version": FORMAT_VERSION, "kind": "robot-trajectory", "T": self.T, "S": self.s.shape[1], "R": self.a.shape[1],
                "n_obj": self.n_obj, "s": self.s.ravel().tolist(), "a": self.a.ravel().tolist(),
                "attached": self.attached.astype(int).tolist(), "cost": self.cost, "replans": self.replans}

    @classmethod
    def from_dict(cls, d: dict) -> "RobotTrajectory":
        _check_version(d, "robot-trajectory")
        T, S, R = d["T"], d["S"], d["R"]
        return cls(np.array(d["s"], dtype=float).reshape(T + 1, S), np.array(d["a"], dtype=float).reshape(T, R),
                   np.array(d["attached"], dtype=bool), d["n_obj"], d["cost"], list(d.get("replans", [])))


def _check_version(d: dict, kind: str) -> None:
    if d.get("kind") != kind:
        raise PlanningError(f"expected a {kind} document, got {d.get('kind')!r}")
    if d.get("version") != FORMAT_VERSION:
        raise PlanningError(f"unsupported {kind} version {d.get('version')!r}")


def save_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj.to_dict(), sort_keys=True))


def load_json(path: str | Path):
    d = json.loads(Path(path).read_text())
    kinds = {"object-trajectory": ObjectTrajectory, "policy": Policy, "robot-trajectory": RobotTrajectory}
    if d.get("kind") not in kinds:
        raise PlanningError(f"unknown document kind {d.get('kind')!r}")
    return kinds[d["kind"]].from_dict(d)


# ---------------------------------------------------------------------------
# generic minimiser with best-iterate tracking


def _minimize(fun: Callable[[np.ndarray], tuple[float, np.ndarray]], x0: np.ndarray, cfg: PlanConfig):
    best = {"f": math.inf, "x": x0.copy()}

    def tracked(x):
        f, g = fun(x)
        if f < best["f"]:
            best["f"], best["x"] = f, x.copy()
        return f, g

    f0, g0 = tracked(x0)
    if cfg.method == "lbfgs":
        minimize(tracked, x0, jac=True, method="L-BFGS-B",
                 options={"maxiter": cfg.max_iters, "ftol": cfg.tol, "gtol": 1e-10, "maxcor": 20})
    elif cfg.method == "momentum":
        x, v = x0.copy(), np.zeros_like(x0)
        g = g0
        for _ in range(cfg.max_iters):
            n = np.linalg.norm(g)
            if n > cfg.grad_clip:
                g = g * (cfg.grad_clip / n)
            v = cfg.momentum * v - cfg.lr * g
            x = x + v
            _, g = tracked(x)
    else:
        raise PlanningError(f"unknown optimiser {cfg.method!r}")
    return best["x"], best["f"], f0, float(np.linalg.norm(g0))


# ---------------------------------------------------------------------------
# object-centric level


def _object_rollout(u, x0: ObjectState, dyn: JointDynamics, dt: float):
    xs = [x0]
    for t in range(ad.value_of(u).shape[0]):
        xs.append(object_dynamics_step(xs[-1], u[t], dyn, dt))
    return xs


def object_cost(u, x0: ObjectState, dyn: JointDynamics, task_index: int, q_goal: float, w: CostWeights, dt: float):
    xs = _object_rollout(u, x0, dyn, dt)
    xT = xs[-1]
    err = xT.q[task_index] - q_goal
    return w.w_u * ad.sum(u * u) + w.w_g * err * err + w.w_v * ad.sum(xT.qd * xT.qd)


def object_centric_plan(
    model,
    task: Task,
    x_init: ObjectState,
    config: PlanConfig | None = None,
    dynamics: JointDynamics | None = None,
) -> ObjectTrajectory:
    """Open-loop virtual joint forces minimising effort plus terminal goal error."""
    cfg = config or PlanConfig()
    dyn = dynamics or object_dynamics(model)
    idx = model.joint_index(task.target)
    lo, hi = dyn.limits[idx]
    if not lo - 1e-12 <= task.q_goal <= hi + 1e-12:
        raise PlanningError(f"goal {task.q_goal:.4g} outside joint limits [{lo:.4g}, {hi:.4g}]")
    x0 = ObjectState(np.array(ad.value_of(x_init.q), dtype=float), np.array(ad.value_of(x_init.qd), dtype=float))
    n, T, w = dyn.n, task.T_steps, cfg.weights

    def fun(flat):
        val, (g,) = ad.value_and_grad(lambda u: object_cost(u, x0, dyn, idx, task.q_goal, w, cfg.dt), flat.reshape(T, n))
        return val, g.ravel()

    u_best, f_best, f0, g0 = _minimize(fun, np.zeros(T * n), cfg)
    u = u_best.reshape(T, n)
    xs = _object_rollout(u, x0, dyn, cfg.dt)
    traj = ObjectTrajectory(np.array([np.concatenate([x.q, x.qd]) for x in xs]), u, cfg.dt, f_best)
    if f_best >= f0 and g0 > 1e-8:
        raise PlanningError("object-centric optimisation made no progress", traj)
    return traj


# ---------------------------------------------------------------------------
# robot geometry helpers


def arm_points(arm: ArmSpec, q, fractions=(0.0, 0.25, 0.5, 0.75)):
    """Differentiable sample points along the arm links (tip excluded)."""
    R = arm.R
    rows = []
    for i in range(R):
        for f in fractions:
            row = np.zeros(R)
            row[:i] = arm.lengths[:i]
            row[i] = f * arm.lengths[i]
            rows.append(row)
    Mf = np.array(rows)
    phi = np.tril(np.ones((R, R))) @ q
    x = Mf @ ad.cos(phi)
    y = Mf @ ad.sin(phi)
    return arm.base + ad.reshape(x, (-1, 1)) * arm.e1 + ad.reshape(y, (-1, 1)) * arm.e2


def obstacle_points(world: RobotWorld, q_obj) -> np.ndarray:
    """Object points that the arm must not approach (everything but the grasped link)."""
    pts, _ = posed_points(world.model, np.asarray(ad.value_of(q_obj), dtype=float), exclude=(world.target,))
    return pts


@dataclass
class TriggerReport:
    joint_limit: bool = False
    proximity: bool = False
    joints: list = field(default_factory=list)
    min_distance: float = math.inf

    @property
    def triggered(self) -> bool:
        return self.joint_limit or self.proximity


def check_replan_trigger(s: SimState, world: RobotWorld, config: PlanConfig | None = None, obstacles: np.ndarray | None = None) -> TriggerReport:
    """Joint within ``limit_margin`` of a limit, or an arm point within ``proximity`` of the object."""
    cfg = config or PlanConfig()
    arm = world.arm
    q = np.asarray(ad.value_of(s.robot.q), dtype=float)
    near = [i for i in range(arm.R) if q[i] - arm.limits[i, 0] < cfg.limit_margin or arm.limits[i, 1] - q[i] < cfg.limit_margin]
    obs = obstacle_points(world, s.object.q) if obstacles is None else obstacles
    P = np.asarray(ad.value_of(arm_points(arm, q)), dtype=float)
    d = float(np.sqrt(((P[:, None, :] - obs[None, :, :]) ** 2).sum(axis=2)).min()) if len(obs) else math.inf
    return TriggerReport(bool(near), d < cfg.proximity, near, d)


def inverse_kinematics(arm: ArmSpec, target, q0, margin: float = 0.05, posture_weight: float = 1e-3):
    """Joint angles placing the end effector at ``target``; returns (q, residual)."""
    target = np.asarray(target, dtype=float)
    q0 = np.asarray(q0, dtype=float)
    lo, hi = arm.limits[:, 0] + margin, arm.limits[:, 1] - margin
    q0 = np.clip(q0, lo + 1e-9, hi - 1e-9)

    def res(q):
        ee = np.asarray(arm.end_effector(q), dtype=float)
        return np.concatenate([ee - target, posture_weight * (q - q0)])

    sol = least_squares(res, q0, bounds=(lo, hi), xtol=1e-12, ftol=1e-12, gtol=1e-12)
    err = float(np.linalg.norm(np.asarray(arm.end_effector(sol.x)) - target))
    return sol.x, err


# ---------------------------------------------------------------------------
# robot-centric level


def make_stepper(world: RobotWorld, net: ResidualNet | None = None, dt: float = DEFAULT_DT):
    if net is None:
        return lambda s, a: robot_step(s, a, world, dt)
    return lambda s, a: augmented_step(s, a, net, world, dt)


def _reference(plan: ObjectTrajectory, hold: int, x_init: np.ndarray) -> np.ndarray:
    """Object reference for every step of the robot horizon: hold still, then follow the plan."""
    return np.concatenate([np.repeat(x_init[None, :], hold, axis=0), plan.x]) if hold else plan.x


def kinematic_seed(world: RobotWorld, s_init: SimState, ref: np.ndarray, hold: int, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Torques that track a smooth straight-line reach followed by the planned grasp-point path.

    Returns (torques (H, R), joint path (H+1, R)).
    """
    arm = world.arm
    n = len(ad.value_of(s_init.object.q))
    H = len(ref) - 1
    q_obj0 = np.asarray(ad.value_of(s_init.object.q), dtype=float)
    ee0 = np.asarray(ad.value_of(arm.end_effector(s_init.robot.q)), dtype=float)
    h0 = np.asarray(ad.value_of(world.handle_position(q_obj0)), dtype=float)
    path = [np.asarray(ad.value_of(s_init.robot.q), dtype=float)]
    # the grasp fires as soon as the gripper is within grip_radius, so the reach
    # decelerates into a point just inside that radius and the gripper then
    # follows the grasped point rather than the handle itself
    d0 = float(np.linalg.norm(ee0 - h0))
    grasp_pt = ee0 if d0 <= world.grip_radius else h0 + (ee0 - h0) * (0.9 * world.grip_radius / d0)
    origin, axis, jtype = world.joint_line(q_obj0)
    k = world.target_index
    for t in range(1, H + 1):
        if t <= hold:
            u = t / hold
            target = ee0 + (grasp_pt - ee0) * (3 * u**2 - 2 * u**3)
        elif jtype == "revolute":
            target = geometry.rotate_points(grasp_pt, axis, ref[t, k] - q_obj0[k], origin)
        else:
            target = grasp_pt + axis * (ref[t, k] - q_obj0[k])
        q, _ = inverse_kinematics(arm, target, path[-1], margin=0.02)
        path.append(q)
    Q = np.array(path)
    qd = np.vstack([np.asarray(ad.value_of(s_init.robot.qd), dtype=float), np.diff(Q, axis=0) / dt])
    qdd = np.diff(qd, axis=0) / dt
    tau = np.zeros((H, arm.R))
    k = world.target_index
    dyn = world.dynamics
    for t in range(H):
        tau[t] = arm.inertia * qdd[t] + arm.damping * qd[t]
        if t >= hold:
            j = _numeric_att_jacobian(world, Q[t], q_obj0, ref[t, :n])
            qd_o = j @ qd[t]
            tau[t] += j * (dyn.inertia[k] * (j @ qdd[t]) + dyn.damping[k] * qd_o)
    return tau, Q


def _numeric_att_jacobian(world: RobotWorld, q_r, q_obj0, q_obj) -> np.ndarray:
    origin, axis, jtype = world.joint_line(q_obj0)
    J = np.asarray(ad.value_of(world.arm.jacobian(q_r)), dtype=float)
    if jtype == "prismatic":
        return axis @ J
    ee = np.asarray(ad.value_of(world.arm.end_effector(q_r)), dtype=float)
    r = ee - origin
    r_perp = r - axis * (axis @ r)
    return (np.cross(axis, r_perp) / max(r_perp @ r_perp, 1e-12)) @ J


def _robot_cost(k_flat, world, stepper, s_init, ref, n_obj, H, R, w: CostWeights, barrier: dict | None):
    k = ad.reshape(k_flat, (H, R))
    s = s_init
    cost = 0.0
    arm = world.arm
    for t in range(H):
        a = k[t]
        s = stepper(s, a)
        x = ad.concatenate([s.object.q, s.object.qd])
        dx = x - ref[t + 1]
        cost = cost + w.w_track * ad.sumsq(dx) + w.w_a * ad.sumsq(a)
        if s.attachment is None:
            d = arm.end_effector(s.robot.q) - world.handle_position(s.object.q)
            cost = cost + w.w_reach * ad.sumsq(d)
        if barrier is not None:
            q = s.robot.q
            m = barrier["margin"]
            lo = ad.maximum(m - (q - arm.limits[:, 0]), 0.0)
            hi = ad.maximum(m - (arm.limits[:, 1] - q), 0.0)
            cost = cost + w.w_limit * (ad.sum(lo * lo) + ad.sum(hi * hi))
            obs = barrier["obstacles"]
            if len(obs):
                P = arm_points(arm, q)
                diff = ad.reshape(P, (-1, 1, 3)) - obs[None, :, :]
                dist = ad.norm(diff, axis=-1)
                pen = ad.maximum(barrier["radius"] - dist, 0.0)
                cost = cost + w.w_prox * ad.sum(pen * pen)
    return cost


def rollout(policy: Policy, s_init: SimState, stepper, buffer_hook=None) -> RobotTrajectory:
    """Numeric closed-loop rollout of ``policy``."""
    s = s_init.numeric()
    n_obj = len(s.object.q)
    S, A, att = [s.vector()], [], [s.attachment is not None]
    for t in range(policy.T):
        a = policy.act(t, S[-1])
        with np.errstate(all="ignore"):
            s_next = stepper(s, a).numeric()
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(s_next.vector()))):
            break  # diverged: keep the finite prefix
        if buffer_hook is not None:
            buffer_hook(s, a, s_next)
        s = s_next
        S.append(s.vector())
        A.append(a)
        att.append(s.attachment is not None)
    R = len(policy.k[0]) if policy.T else 0
    return RobotTrajectory(np.array(S), np.array(A).reshape(len(A), R), np.array(att), n_obj)


def _rollout_states(k: np.ndarray, s_init: SimState, stepper) -> list[SimState]:
    states = [s_init.numeric()]
    for t in range(len(k)):
        states.append(stepper(states[-1], k[t]).numeric())
    return states


def lqr_gains(states: Sequence[SimState], actions: np.ndarray, world: RobotWorld, n_obj: int, w: CostWeights, dt: float, net: ResidualNet | None = None) -> np.ndarray:
    """Time-varying LQR gains around a rollout (tracking the planned states)."""
    from artisim.residual import augmented_jacobians

    H, R = actions.shape
    S = len(states[0].vector())
    Q = np.zeros(S)
    Q[: 2 * n_obj] = w.w_track
    Q[2 * n_obj: 2 * n_obj + R] = 1.0
    Q[2 * n_obj + R:] = 0.1
    Qm, Rm = np.diag(Q), w.w_a * np.eye(R)
    P = Qm.copy()
    gains = np.zeros((H, R, S))
    for t in range(H - 1, -1, -1):
        if net is None:
            A, B = nominal_jacobians(states[t], actions[t], world, dt)
        else:
            A, B = augmented_jacobians(states[t], actions[t], net, world, dt)
        BtP = B.T @ P
        G = np.linalg.solve(Rm + BtP @ B, BtP @ A)
        gains[t] = -G
        P = Qm + A.T @ P @ (A - B @ G)
        P = 0.5 * (P + P.T)
    return gains


def robot_centric_optimize(
    world: RobotWorld,
    task: Task,
    plan: ObjectTrajectory,
    s_init: SimState,
    net: ResidualNet | None = None,
    config: PlanConfig | None = None,
    barrier: bool = False,
    hold: int | None = None,
    seed_actions: np.ndarray | None = None,
    trust: float = 0.0,
) -> tuple[Policy, RobotTrajectory]:
    """Optimise arm torques so the object tracks ``plan``; returns (policy, rollout).

    ``seed_actions`` replaces the kinematic seed (e.g. the torques executed in
    the real world) and ``trust`` penalises moving away from it, keeping a
    learned residual inside the data it was trained on.
    """
    cfg = config or PlanConfig()
    arm = world.arm
    s_init = s_init.numeric()
    q_obj0 = s_init.object.q
    h0 = np.asarray(ad.value_of(world.handle_position(q_obj0)), dtype=float)
    ee0 = np.asarray(ad.value_of(arm.end_effector(s_init.robot.q)), dtype=float)
    if np.linalg.norm(h0 - arm.base) > arm.span:
        raise ReachError(f"handle is {np.linalg.norm(h0 - arm.base):.3f} m from the base, beyond the arm span {arm.span:.3f} m")
    if hold is None:
        hold = 0 if (s_init.attachment is not None or np.linalg.norm(ee0 - h0) <= world.grip_radius) else cfg.reach_steps
    n_obj = len(q_obj0)
    x_init = np.concatenate([q_obj0, s_init.object.qd])
    ref = _reference(plan, hold, x_init)
    H, R = len(ref) - 1, arm.R
    stepper = make_stepper(world, net, cfg.dt)
    bar = None
    if barrier:
        bar = {"margin": cfg.barrier_margin, "radius": cfg.barrier_radius, "obstacles": obstacle_points(world, q_obj0)}
    if seed_actions is not None and np.shape(seed_actions) == (H, R):
        tau0 = np.array(seed_actions, dtype=float)
    else:
        tau0, _ = kinematic_seed(world, s_init, ref, hold, cfg.dt)
    anchor = tau0.ravel().copy()

    def fun(flat):
        def cost(k):
            c = _robot_cost(k, world, stepper, s_init, ref, n_obj, H, R, cfg.weights, bar)
            if trust:
                d = k - anchor
                c = c + trust * ad.sum(d * d)
            return c

        val, (g,) = ad.value_and_grad(cost, flat)
        return val, g

    k_best, f_best, _, _ = _minimize(fun, tau0.ravel(), replace(cfg, max_iters=cfg.robot_iters))
    k = k_best.reshape(H, R)
    states = _rollout_states(k, s_init, stepper)
    if cfg.feedback == "lqr":
        K = lqr_gains(states, k, world, n_obj, cfg.weights, cfg.dt, net)
    else:
        K = np.zeros((H, R, len(states[0].vector())))
    # affine form of a_t = k*_t + K_t (s_t - s*_t)
    offsets = np.array([k[t] - K[t] @ states[t].vector() for t in range(H)])
    policy = Policy(K, offsets)
    traj = RobotTrajectory(np.array([s.vector() for s in states]), k, np.array([s.attachment is not None for s in states]), n_obj, f_best)
    return policy, traj


# ---------------------------------------------------------------------------
# execution and the two-level loop


def guided_execute(policy: Policy, real: RobotWorld, task: Task, s_init: SimState, buffer: TransitionBuffer | None = None, dt: float = DEFAULT_DT):
    """Run ``policy`` in the real world; failed runs feed their transitions to ``buffer``."""
    recorded = []

    def hook(s, a, s_next):
        recorded.append((s, a, s_next))

    traj = rollout(policy, s_init, make_stepper(real, None, dt), hook)
    idx = real.model.joint_index(task.target)
    err = abs(float(traj.object_q(-1)[idx]) - task.q_goal)
    success = traj.T == policy.T and err <= task.tolerance
    if not success and buffer is not None:
        for s, a, s_next in recorded:
            buffer.add(s, a, s_next)
    return success, recorded, traj


@dataclass
class TwoLevelResult:
    policy: Policy
    robot: RobotTrajectory
    plans: list
    replans: list

    @property
    def object_plan(self) -> ObjectTrajectory:
        return self.plans[0]


def two_level_solve(
    world: RobotWorld,
    task: Task,
    s_init: SimState,
    config: PlanConfig | None = None,
    net: ResidualNet | None = None,
    dynamics: JointDynamics | None = None,
    seed_actions: np.ndarray | None = None,
    trust: float = 0.0,
) -> TwoLevelResult:
    """Object-centric plan, robot-centric tracking, replanning on triggers.

    ``seed_actions``/``trust`` are forwarded to the first robot-centric solve.
    """
    cfg = config or PlanConfig()
    model = world.model
    s = s_init.numeric()
    dyn = dynamics or world.dynamics
    ee0 = np.asarray(ad.value_of(world.arm.end_effector(s.robot.q)), dtype=float)
    h0 = np.asarray(ad.value_of(world.handle_position(s.object.q)), dtype=float)
    hold = 0 if np.linalg.norm(ee0 - h0) <= world.grip_radius else cfg.reach_steps
    total = hold + task.T_steps
    idx = model.joint_index(task.target)
    policies, robot_parts, plans, replans = [], [], [], []
    t0 = 0
    barrier = False
    while True:
        remaining = total - t0
        seg_hold = max(hold - t0, 0) if s.attachment is None else 0
        obj_steps = remaining - seg_hold
        if obj_steps < 1:
            raise PlanningError("no horizon left to replan", _merge(policies, robot_parts, plans, replans))
        sub = replace(task, T_steps=obj_steps)
        plan = object_centric_plan(model, sub, s.object, cfg, dyn)
        plans.append(plan)
        seed = seed_actions if t0 == 0 else None
        policy, traj = robot_centric_optimize(world, task, plan, s, net, cfg, barrier=barrier, hold=seg_hold, seed_actions=seed, trust=trust if seed is not None else 0.0)
        obs = obstacle_points(world, s.object.q)
        trig_at = None
        for t in range(1, traj.T + 1):
            st = SimState.from_vector(traj.s[t], traj.n_obj, world.arm.R)
            if check_replan_trigger(st, world, cfg, obs).triggered:
                trig_at = t
                break
        if trig_at is None:
            policies.append(policy)
            robot_parts.append(traj)
            break
        if len(replans) >= cfg.max_replans:
            policies.append(policy)
            robot_parts.append(traj)
            raise PlanningError(f"replan budget of {cfg.max_replans} exhausted", _merge(policies, robot_parts, plans, replans))
        report = check_replan_trigger(SimState.from_vector(traj.s[trig_at], traj.n_obj, world.arm.R), world, cfg, obs)
        replans.append({"step": t0 + trig_at, "joint_limit": report.joint_limit, "proximity": report.proximity})
        policies.append(Policy(policy.K[:trig_at], policy.k[:trig_at]))
        robot_parts.append(RobotTrajectory(traj.s[: trig_at + 1], traj.a[:trig_at], traj.attached[: trig_at + 1], traj.n_obj))
        # resume from the simulated state at the trigger, keeping the grasp
        stepper = make_stepper(world, net, cfg.dt)
        s = _rollout_states(traj.a[:trig_at], s, stepper)[-1]
        t0 += trig_at
        barrier = True
    result = _merge(policies, robot_parts, plans, replans)
    err = abs(float(result.robot.object_q(-1)[idx]) - task.q_goal)
    result.robot.cost = float(err)
    return result


def _merge(policies, parts, plans, replans) -> TwoLevelResult:
    if not parts:
        return TwoLevelResult(None, None, plans, replans)
    s = np.concatenate([parts[0].s] + [p.s[1:] for p in parts[1:]])
    a = np.concatenate([p.a for p in parts])
    att = np.concatenate([parts[0].attached] + [p.attached[1:] for p in parts[1:]])
    robot = RobotTrajectory(s, a, att, parts[0].n_obj, float("nan"), list(replans))
    return TwoLevelResult(Policy.concatenate(policies), robot, plans, replans)


# ---------------------------------------------------------------------------
# robot placement


@dataclass
class Placement:
    arm: ArmSpec
    q_start: np.ndarray
    clearance: float


def _plane_frames(world_line, handle0: np.ndarray, jtype: str):
    origin, axis, _ = world_line
    if jtype == "revolute":
        c = origin + axis * ((handle0 - origin) @ axis)
        e1 = handle0 - c
        e1 /= np.linalg.norm(e1)
        return [(c, e1, np.cross(axis, e1))]
    frames = []
    for ref in (np.array([0.0, 0.0, 1.0]), np.array([0.0, 1.0, 0.0]), np.array([1.0, 0.0, 0.0])):
        e2 = ref - axis * (ref @ axis)
        if np.linalg.norm(e2) < 1e-6:
            continue
        e2 /= np.linalg.norm(e2)
        frames.append((handle0, axis, e2))
        frames.append((handle0, axis, -e2))
    return frames


def place_robot(
    world: RobotWorld,
    q_obj: np.ndarray,
    q_goal: float,
    template: ArmSpec | None = None,
    clearance: float = 0.08,
    samples: int = 12,
    scales: Sequence[float] = (1.0, 1.3, 1.6),
) -> Placement:
    """Grid-search a base in the handle's plane of motion with a feasible IK path.

    The path from the current joint value to ``q_goal`` must stay inside the
    arm's comfortable reach, keep the joints off their limits and keep the
    arm points ``clearance`` away from the other links.  Longer arms (link
    lengths times ``scales``) are tried when the default cannot do the task.
    """
    base_tmpl = template or ArmSpec(np.zeros(3), np.array([1.0, 0, 0]), np.array([0, 1.0, 0]))
    for scale in scales:
        tmpl = replace(base_tmpl, lengths=base_tmpl.lengths * scale)
        try:
            return _place(world, q_obj, q_goal, tmpl, clearance, samples)
        except ReachError:
            continue
    raise ReachError("no feasible robot placement for this task")


def _place(world, q_obj, q_goal, tmpl, clearance, samples) -> Placement:
    q_obj = np.asarray(q_obj, dtype=float)
    idx = world.target_index
    path_q = np.linspace(q_obj[idx], q_goal, samples)
    handles = []
    for v in path_q:
        qq = q_obj.copy()
        qq[idx] = v
        handles.append(np.asarray(ad.value_of(world.handle_position(qq)), dtype=float))
    handles = np.array(handles)
    line = world.joint_line(q_obj)
    obs = obstacle_points(world, q_obj)
    moving = []
    for v in path_q:
        qq = q_obj.copy()
        qq[idx] = v
        pts, lab = posed_points(world.model, qq)
        moving.append(pts[lab == world.target])
    moving = np.concatenate(moving)
    span = tmpl.span
    best = None
    for c, e1, e2 in _plane_frames(line, handles[0], line[2]):
        cand = []
        for a in np.arange(-0.6, 1.01, 0.05):
            for b in np.arange(-0.9, 0.91, 0.05):
                base = c + a * e1 + b * e2
                r = np.linalg.norm(handles - base, axis=1)
                if r.min() < 0.3 * span or r.max() > 0.9 * span:
                    continue
                d_obs = np.linalg.norm(obs - base, axis=1).min() if len(obs) else np.inf
                d_mov = np.linalg.norm(moving - base, axis=1).min()
                if min(d_obs, d_mov) < 0.1:
                    continue
                margin = min(r.min() - 0.3 * span, 0.9 * span - r.max())
                cand.append((-margin, float(a), float(b), base))
        cand.sort(key=lambda x: x[:3])
        for _, _, _, base in cand[:40]:
            arm = replace(tmpl, base=base, e1=e1, e2=e2)
            q0 = _ik_start(arm, handles[0])
            if q0 is None:
                continue
            ok, worst = True, np.inf
            q = q0
            for h in handles:
                q, err = inverse_kinematics(arm, h, q, margin=math.radians(8))
                if err > 1e-4:
                    ok = False
                    break
                P = np.asarray(ad.value_of(arm_points(arm, q)), dtype=float)
                d = np.sqrt(((P[:, None, :] - obs[None, :, :]) ** 2).sum(axis=2)).min() if len(obs) else np.inf
                worst = min(worst, d)
                if d < clearance:
                    ok = False
                    break
            if ok:
                if best is None or worst > best.clearance:
                    best = Placement(arm, q0, worst)
                break
    if best is None:
        raise ReachError("no feasible robot placement for this task")
    return best


def _ik_start(arm: ArmSpec, target: np.ndarray):
    best = None
    for seed in ([0.3, 0.8, 0.8], [-0.3, -0.8, -0.8], [1.2, -1.0, -0.5], [-1.2, 1.0, 0.5], [0.0, 1.5, -1.0], [0.0, -1.5, 1.0]):
        q, err = inverse_kinematics(arm, target, np.array(seed), margin=math.radians(15))
        if err < 1e-5 and (best is None or np.abs(q).max() < np.abs(best).max()):
            best = q
    return best


def disturbed_start(arm: ArmSpec, q_grasp: np.ndarray, handle: np.ndarray, magnitude: float, rng: np.random.Generator):
    """Initial arm configuration whose end effector is ``magnitude`` m from the handle (in-plane)."""
    if magnitude <= 0:
        return np.array(q_grasp, dtype=float), True
    phi = rng.uniform(0, 2 * np.pi)
    target = handle + magnitude * (np.cos(phi) * arm.e1 + np.sin(phi) * arm.e2)
    q, err = inverse_kinematics(arm, target, q_grasp, margin=math.radians(10))
    return q, err < 1e-5
