import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artisim import autodiff as ad
from artisim import geometry
from artisim.diffsim import (
    ArmSpec,
    IPAction,
    JointDynamics,
    ModelParams,
    ObjectState,
    RobotState,
    RobotWorld,
    SimError,
    SimState,
    SoftJointParams,
    attachment_jacobian,
    attachment_map,
    euler_update,
    joint_acceleration,
    forward_kinematics,
    joint_transform,
    make_attachment,
    object_dynamics,
    object_dynamics_step,
    point_forward,
    robot_step,
)
from artisim.scene import ArticulatedModel, Joint, Link, TreeStructure

BIG = 50.0


def _logits(kind):
    z = np.full(4, -BIG)
    z[{"revolute": 1, "prismatic": 2, "fixed": 3}[kind]] = BIG
    return z


def _jp(kind, axis=(0, 0, 1), origin=(0, 0, 0)):
    return SoftJointParams(_logits(kind), np.array(axis, float), np.array(origin, float), np.zeros(3))


def _params(K, edges, M=None):
    J = np.full((K, K, 4), 0.0)
    J[..., 0] = BIG
    C = np.zeros((K, K, 9))
    for (u, v), (kind, axis, origin) in edges.items():
        J[u - 1, v - 1] = _logits(kind)
        C[u - 1, v - 1, :3] = axis
        C[u - 1, v - 1, 3:6] = origin
    if M is None:
        M = np.eye(K)
    return ModelParams(J, C, np.asarray(M, float), np.ones((K, 3)))


def test_revolute_quarter_turn():
    p = joint_transform(_jp("revolute"), math.pi / 2, np.array([[1.0, 0, 0]]))
    np.testing.assert_allclose(p, [[0, 1, 0]], atol=1e-12)


def test_prismatic_shift():
    p = np.array([[0.2, -0.1, 0.4]])
    np.testing.assert_allclose(joint_transform(_jp("prismatic", axis=(1, 0, 0)), 0.3, p), p + [0.3, 0, 0])


def test_mixed_revolute_prismatic():
    jp = _jp("revolute")
    jp.type_logits = np.array([-BIG, 0.0, 0.0, -BIG])
    p = joint_transform(jp, math.pi, np.array([[1.0, 0, 0]]))
    np.testing.assert_allclose(p, [[0, 0, math.pi / 2]], atol=1e-12)


def test_fk_fixed_chain_is_mount_only():
    Z = _params(3, {(1, 2): ("fixed", (0, 0, 1), (0.1, 0, 0)), (2, 3): ("fixed", (1, 0, 0), (0, 0.2, 0))})
    Z.C[0, 1, 6:9] = [0, 0, 0.3]
    E = TreeStructure(((1, 2), (2, 3)), 1)
    poses = forward_kinematics(Z, E, np.array([0.7, -0.4]))
    R_m = geometry.rotvec_to_matrix([0, 0, 0.3])
    np.testing.assert_allclose(poses[2][0], R_m, atol=1e-12)
    np.testing.assert_allclose(poses[2][1], np.array([0.1, 0, 0]) - R_m @ [0.1, 0, 0], atol=1e-12)
    np.testing.assert_allclose(poses[3][0], R_m, atol=1e-12)


def test_fk_revolute_child_frame():
    Z = _params(2, {(1, 2): ("revolute", (0, 0, 1), (1.0, 0, 0))})
    poses = forward_kinematics(Z, TreeStructure(((1, 2),), 1), np.array([math.pi / 2]))
    R, t = poses[2]
    np.testing.assert_allclose(R, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-12)
    # the hinge point is a fixed point of the child transform
    np.testing.assert_allclose(R @ [1, 0, 0] + t, [1, 0, 0], atol=1e-12)
    np.testing.assert_allclose(R @ [2, 0, 0] + t, [1, 1, 0], atol=1e-12)


def test_fk_rotations_add():
    Z = _params(3, {(1, 2): ("revolute", (0, 0, 1), (0, 0, 0)), (2, 3): ("revolute", (0, 0, 1), (0, 0, 0))})
    poses = forward_kinematics(Z, TreeStructure(((1, 2), (2, 3)), 1), np.array([math.pi / 2, math.pi / 2]))
    np.testing.assert_allclose(poses[3][0], np.diag([-1.0, -1.0, 1.0]), atol=1e-12)


def _door_cloud():
    rng = np.random.default_rng(1)
    base = rng.uniform(-1, 0, size=(30, 3))
    door = rng.uniform(0, 1, size=(30, 3))
    P = np.vstack([base, door])
    M = np.zeros((60, 2))
    M[:30, 0] = 1
    M[30:, 1] = 1
    return P, M


def test_point_forward_zero_delta_identity():
    P, M = _door_cloud()
    Z = _params(2, {(1, 2): ("revolute", (0, 0, 1), (0.2, 0.1, 0))}, M)
    out = point_forward(P, Z, TreeStructure(((1, 2),), 1), IPAction(2, 0.0))
    np.testing.assert_array_equal(out, P)


def test_point_forward_fixed_joint_static():
    P, M = _door_cloud()
    Z = _params(2, {(1, 2): ("fixed", (0, 0, 1), (0, 0, 0))}, M)
    out = point_forward(P, Z, TreeStructure(((1, 2),), 1), IPAction(2, 0.8))
    np.testing.assert_allclose(out, P, atol=1e-12)


def test_point_forward_door_rodrigues():
    P, M = _door_cloud()
    hinge, axis = np.array([0.0, 0.5, 0.0]), np.array([0, 0.6, 0.8])
    Z = _params(2, {(1, 2): ("revolute", axis, hinge)}, M)
    angle = math.radians(30)
    out = point_forward(P, Z, TreeStructure(((1, 2),), 1), IPAction(2, angle))
    # independent Rodrigues rotation of each door point
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    R = np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * K @ K
    np.testing.assert_allclose(out[30:], (P[30:] - hinge) @ R.T + hinge, atol=1e-9)
    np.testing.assert_allclose(out[:30], P[:30], atol=1e-12)


def test_point_forward_root_rejected():
    P, M = _door_cloud()
    Z = _params(2, {(1, 2): ("revolute", (0, 0, 1), (0, 0, 0))}, M)
    with pytest.raises(SimError):
        point_forward(P, Z, TreeStructure(((1, 2),), 1), IPAction(1, 0.1))


def _dyn(inertia=1.0, damping=0.0, lim=10.0):
    return JointDynamics(np.array([inertia]), np.array([damping]), np.array([[-lim, lim]]))


def test_object_equilibrium():
    x = ObjectState(np.array([0.3]), np.array([0.0]))
    y = object_dynamics_step(x, np.zeros(1), _dyn(damping=0.4))
    np.testing.assert_array_equal(y.q, x.q)
    np.testing.assert_array_equal(y.qd, x.qd)


def test_object_one_euler_step():
    y = object_dynamics_step(ObjectState(np.zeros(1), np.zeros(1)), np.ones(1), _dyn(), 0.01)
    assert y.qd[0] == pytest.approx(0.01)
    assert y.q[0] == pytest.approx(1e-4)


def _damped_run(dt, steps):
    x = ObjectState(np.zeros(1), np.zeros(1))
    for _ in range(steps):
        x = object_dynamics_step(x, np.ones(1), _dyn(damping=0.5), dt)
    return x


def _fine_reference():
    # explicit Euler at dt / 10
    q = qd = 0.0
    for _ in range(1000):
        q, qd = q + 0.001 * qd, qd + 0.001 * (1.0 - 0.5 * qd)
    return q, qd


@pytest.mark.xfail(strict=True, reason="the one-step example fixes q' = q + dt*qd'; its O(dt) position bias over 1 s is ~4e-3")
def test_object_damped_against_fine_integrator():
    x = _damped_run(0.01, 100)
    q, qd = _fine_reference()
    assert abs(x.q[0] - q) < 1e-3 and abs(x.qd[0] - qd) < 1e-3


def test_object_integrator_first_order():
    # closed form for I = 1, c = 0.5, u = 1 at t = 1
    qd_exact = 2 * (1 - math.exp(-0.5))
    q_exact = 2 - 4 * (1 - math.exp(-0.5))
    errs = []
    for dt, n in ((0.01, 100), (0.005, 200), (0.0025, 400)):
        x = _damped_run(dt, n)
        errs.append(max(abs(x.q[0] - q_exact), abs(x.qd[0] - qd_exact)))
    assert errs[0] < 6e-3
    assert 1.8 < errs[0] / errs[1] < 2.2 and 1.8 < errs[1] / errs[2] < 2.2


def test_object_limits_clamp():
    y = object_dynamics_step(ObjectState(np.array([0.99]), np.array([5.0])), np.zeros(1), _dyn(lim=1.0))
    assert y.q[0] == 1.0


def test_object_dynamics_from_model():
    m = ArticulatedModel("m", (Link(1, np.zeros((1, 3))), Link(2, np.zeros((1, 3)), 2.0, 0.3, 0.07), Link(3, np.zeros((1, 3)), 1.5, 0.1, 0.02)),
                         (Joint(1, 2, "revolute", np.array([0, 0, 1.0]), limits=(0, 1)), Joint(1, 3, "prismatic", np.array([1.0, 0, 0]), limits=(0, 0.4))))
    d = object_dynamics(m)
    np.testing.assert_allclose(d.inertia, [0.07, 1.5])
    np.testing.assert_allclose(d.damping, [0.3, 0.1])


# ---------------------------------------------------------------------------
# robot


def _world(kind="prismatic", q0=(0.4, 0.6, -0.5)):
    arm = ArmSpec(np.array([0.0, 0.0, 0.3]), np.array([1.0, 0, 0]), np.array([0, 1.0, 0]))
    ee = arm.end_effector(np.array(q0))
    axis = np.array([1.0, 0, 0]) if kind == "prismatic" else np.array([0, 0, 1.0])
    origin = np.zeros(3) if kind == "prismatic" else ee + np.array([0.0, 0.3, 0.0])
    m = ArticulatedModel("obj", (Link(1, np.zeros((1, 3))), Link(2, np.array([ee]), 1.0, 0.1, 0.05)),
                         (Joint(1, 2, kind, axis, origin, np.zeros(3), (-1.0, 1.0)),))
    world = RobotWorld(m, object_dynamics(m), arm, 2, ee)
    s = SimState(ObjectState(np.zeros(1), np.zeros(1)), RobotState(np.array(q0), np.zeros(3)))
    return world, s


def test_robot_rest_unchanged():
    world, s = _world()
    s = SimState(s.object, RobotState(s.robot.q + 0.3, s.robot.qd))  # away from the handle
    out = robot_step(s, np.zeros(3), world)
    assert out.attachment is None
    np.testing.assert_array_equal(out.robot.q, s.robot.q)
    np.testing.assert_array_equal(out.object.q, s.object.q)


def test_prismatic_transmission():
    world, s = _world("prismatic")
    att = make_attachment(world, s)
    arm = world.arm
    q1 = s.robot.q + np.array([0.05, -0.02, 0.03])
    d = arm.end_effector(q1) - arm.end_effector(s.robot.q)
    assert attachment_map(att, arm, q1) == pytest.approx(d @ [1, 0, 0])
    s2 = robot_step(s, np.array([0.5, 0.2, 0.1]), world)
    assert s2.attachment is not None
    d2 = arm.end_effector(s2.robot.q) - arm.end_effector(s.robot.q)
    assert s2.object.q[0] == pytest.approx(d2[0])


@pytest.mark.parametrize("kind", ["prismatic", "revolute"])
def test_attachment_jacobian_matches_fd(kind):
    world, s = _world(kind)
    att = make_attachment(world, s)
    arm = world.arm
    q = s.robot.q + np.array([0.03, -0.05, 0.02])
    j = attachment_jacobian(att, arm, q)
    eps = 1e-6
    fd = [(attachment_map(att, arm, q + eps * e) - attachment_map(att, arm, q - eps * e)) / (2 * eps) for e in np.eye(3)]
    np.testing.assert_allclose(j, fd, rtol=1e-6, atol=1e-9)


@pytest.mark.parametrize("kind", ["prismatic", "revolute"])
def test_fused_kinematics_gradients_match_fd(kind):
    world, s = _world(kind)
    att = make_attachment(world, s)
    arm = world.arm
    q = s.robot.q + np.array([0.03, -0.05, 0.02])
    W = np.random.default_rng(0).normal(size=(3, 3))
    v = np.array([0.3, -1.2, 0.7])
    checks = [
        lambda x: ad.sum(W * arm.jacobian(x)),
        lambda x: ad.sum(v * arm.end_effector(x)),
        lambda x: ad.sum(v * attachment_jacobian(att, arm, x)),
        lambda x: attachment_map(att, arm, x) * 1.0,
    ]
    for f in checks:
        assert ad.grad_check(f, q).max_rel_err < 1e-6


@pytest.mark.parametrize("kind", ["prismatic", "revolute"])
def test_attached_steps_gradient_with_drag(kind):
    world, s = _world(kind)
    world = RobotWorld(world.model, world.dynamics.perturbed(drag=0.3), world.arm.perturbed(drag=0.2),
                       world.target, world.handle)
    s = SimState(s.object, RobotState(s.robot.q, np.array([0.2, -0.3, 0.1])), make_attachment(world, s))
    tau0 = np.array([0.4, -0.2, 0.3])
    v = np.array([0.5, -1.0, 0.8])

    def cost(x, which):
        q, qd, tau = s.robot.q, s.robot.qd, tau0
        if which == "q":
            q = x
        elif which == "qd":
            qd = x
        else:
            tau = x
        st = SimState(s.object, RobotState(q, qd), s.attachment)
        for _ in range(3):
            st = robot_step(st, tau, world)
        return ad.sum(v * st.robot.qd) + ad.sum(v * st.robot.q) + ad.sum(st.object.qd)

    for which, x in (("q", s.robot.q), ("qd", s.robot.qd), ("tau", tau0)):
        assert ad.grad_check(lambda y: cost(y, which), x).max_rel_err < 1e-5


def test_revolute_transmitted_force():
    world, s = _world("revolute")
    info = {}
    tau = np.array([0.4, -0.1, 0.2])
    s2 = robot_step(s, tau, world, info=info)
    j = info["jacobian"]
    dyn, k = world.dynamics, 0
    qdd = (s2.robot.qd - s.robot.qd) / 0.01
    # arm equation with the object load projected through j
    lhs = world.arm.inertia * qdd
    rhs = tau - world.arm.damping * s.robot.qd - j * info["object_force"]
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)
    assert info["object_force"] == pytest.approx(dyn.inertia[k] * (j @ qdd) + dyn.damping[k] * (j @ s.robot.qd))


def test_robot_step_shape_errors():
    world, s = _world()
    with pytest.raises(SimError):
        robot_step(s, np.zeros(2), world)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_robot_step_gradients(seed):
    # the grasp event freezes the attachment, so differentiate with it in place
    # (attached) and away from the handle (free)
    rng = np.random.default_rng(seed)
    world, s = _world("revolute")
    attached = bool(seed % 2)
    att = make_attachment(world, s) if attached else None
    q_r = s.robot.q + (rng.normal(scale=0.02, size=3) if attached else np.array([0.5, 0.0, 0.0]))
    s0 = SimState(ObjectState(np.zeros(1), np.zeros(1)), RobotState(q_r, rng.normal(scale=0.2, size=3)), att)
    a0 = rng.normal(scale=0.5, size=3)

    def f(v, a):
        st_ = SimState.from_vector(v, 1, 3, att)
        out = robot_step(st_, a, world)
        assert (out.attachment is not None) == attached
        return ad.sum(out.vector() * w)

    w = rng.normal(size=8)
    v0 = np.asarray(s0.vector())
    _, (gv, ga) = ad.value_and_grad(f, v0, a0)
    eps = 1e-6
    for x, g, which in ((v0, gv, 0), (a0, ga, 1)):
        for i in range(len(x)):
            p, m = x.copy(), x.copy()
            p[i] += eps
            m[i] -= eps
            args_p = (p, a0) if which == 0 else (v0, p)
            args_m = (m, a0) if which == 0 else (v0, m)
            fd = (ad.value_and_grad(f, *args_p)[0] - ad.value_and_grad(f, *args_m)[0]) / (2 * eps)
            assert abs(g[i] - fd) / max(1.0, abs(g[i])) < 1e-5


def test_fused_euler_and_acceleration_gradients():
    dyn = JointDynamics(np.array([0.5, 2.0]), np.array([0.3, 0.1]), np.array([[-1.0, 1.0], [0.0, 0.5]]), drag=0.4)
    q, qd, u = np.array([0.2, 0.1]), np.array([-0.7, 0.4]), np.array([0.5, -0.2])
    qdd = joint_acceleration(u, qd, dyn)
    np.testing.assert_allclose(qdd, (u - dyn.damping * qd - dyn.drag * qd * np.abs(qd)) / dyn.inertia)
    assert ad.grad_check(lambda x: ad.sum(joint_acceleration(x, qd, dyn) * np.array([1.0, -2.0])), u).max_rel_err < 1e-7
    assert ad.grad_check(lambda x: ad.sum(joint_acceleration(u, x, dyn) * np.array([1.0, -2.0])), qd).max_rel_err < 1e-7

    def step(x):
        qn, qdn = euler_update(x[:2], x[2:4], x[4:], 0.01, dyn.limits[:, 0], dyn.limits[:, 1])
        return ad.sum(qn * np.array([0.7, 1.3])) + ad.sum(qdn * np.array([-0.4, 0.9]))

    x = np.concatenate([q, qd, np.array([3.0, -1.0])])
    assert ad.grad_check(step, x).max_rel_err < 1e-7
    # clamped joint passes no position gradient
    _, g = ad.value_and_grad(lambda y: ad.sum(euler_update(y, np.array([0.0, 1.0]), np.zeros(2), 0.01, dyn.limits[:, 0], dyn.limits[:, 1])[0]), np.array([0.0, 0.5]))
    np.testing.assert_array_equal(g[0], [1.0, 0.0])
