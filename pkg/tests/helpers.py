"""Shared builders for the test suite."""

import numpy as np

from artisim.scene import ArticulatedModel, Joint, Link


def random_model(rng: np.random.Generator, k_max: int = 5, points: int = 6) -> ArticulatedModel:
    """Random valid model: random tree, joint types, axes, origins and limits."""
    K = int(rng.integers(1, k_max + 1))
    links = [Link(i + 1, rng.normal(size=(points, 3)), float(rng.uniform(0.1, 5)), float(rng.uniform(0, 1)), float(rng.uniform(0.01, 1)))
             for i in range(K)]
    order = rng.permutation(K) + 1
    joints = []
    for i in range(1, K):
        parent, child = int(order[rng.integers(0, i)]), int(order[i])
        jtype = str(rng.choice(["revolute", "prismatic", "fixed"]))
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        lo = float(rng.uniform(-2, 0))
        hi = float(rng.uniform(0, 2))
        if jtype == "fixed":
            lo = hi = 0.0
        joints.append(Joint(parent, child, jtype, axis, rng.normal(size=3), rng.normal(scale=0.3, size=3), (lo, hi)))
    return ArticulatedModel(f"model-{K}", tuple(links), tuple(joints))


def door_model(hinge=(0.0, 0.0, 0.0), axis=(0.0, 0.0, 1.0), limits=(0.0, 2.0)) -> ArticulatedModel:
    """Base box (link 1) and a door slab (link 2) hinged about ``axis`` through ``hinge``."""
    rng = np.random.default_rng(0)
    base = rng.uniform([-0.5, -0.5, 0.0], [0.0, 0.5, 0.5], size=(40, 3))
    door = rng.uniform([0.0, 0.0, 0.0], [0.02, 0.5, 0.5], size=(40, 3))
    return ArticulatedModel("door", (Link(1, base), Link(2, door, 1.0, 0.0, 0.05)),
                            (Joint(1, 2, "revolute", np.array(axis, float), np.array(hinge, float), np.zeros(3), limits),))


def gt_params(scene, labels, big: float = 50.0):
    """ModelParams equal to a scene's true model, with a hard mask from ``labels``."""
    from artisim.diffsim import ModelParams
    from artisim.perception import hard_mask

    K = scene.K
    J = np.full((K, K, 4), -big)
    J[..., 0] = big
    C = np.zeros((K, K, 9))
    C[..., 2] = 1.0
    slot = {"revolute": 1, "prismatic": 2, "fixed": 3}
    for j in scene.model.joints:
        J[j.parent - 1, j.child - 1] = -big
        J[j.parent - 1, j.child - 1, slot[j.type]] = big
        C[j.parent - 1, j.child - 1, :3] = j.axis
        C[j.parent - 1, j.child - 1, 3:6] = j.origin
        C[j.parent - 1, j.child - 1, 6:9] = j.orientation
    alpha = np.array([[lk.mass, lk.damping, lk.inertia] for lk in sorted(scene.model.links, key=lambda l: l.id)])
    return ModelParams(J, C, hard_mask(labels, K), alpha)


def arm_world(kind="prismatic", q0=(0.4, 0.6, -0.5), dynamics=None):
    """A planar arm whose gripper starts on the handle of a one-joint object."""
    from artisim.diffsim import ArmSpec, ObjectState, RobotState, RobotWorld, SimState, object_dynamics
    from artisim.scene import ArticulatedModel, Joint, Link

    arm = ArmSpec(np.array([0.0, 0.0, 0.3]), np.array([1.0, 0, 0]), np.array([0, 1.0, 0]))
    ee = arm.end_effector(np.array(q0))
    axis = np.array([1.0, 0, 0]) if kind == "prismatic" else np.array([0, 0, 1.0])
    origin = np.zeros(3) if kind == "prismatic" else ee + np.array([0.0, 0.3, 0.0])
    m = ArticulatedModel("obj", (Link(1, np.zeros((1, 3))), Link(2, np.array([ee]), 1.0, 0.1, 0.05)),
                         (Joint(1, 2, kind, axis, origin, np.zeros(3), (-1.0, 1.0)),))
    world = RobotWorld(m, dynamics or object_dynamics(m), arm, 2, ee)
    s = SimState(ObjectState(np.zeros(1), np.zeros(1)), RobotState(np.array(q0), np.zeros(3)))
    return world, s


ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, title: str, passed: bool, detail: str) -> None:
    """Record one pass/fail line for the acceptance summary."""
    line = f"criterion {criterion} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
