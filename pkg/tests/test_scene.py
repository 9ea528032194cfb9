import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artisim.scene import (
    ArticulatedModel,
    Joint,
    Link,
    ModelError,
    TreeStructure,
    URDFError,
    canonicalize,
    check_arborescence,
    compose_model,
    edge_type,
    edge_weights,
    emit_urdf,
    greedy_tree,
    models_equal,
    parse_urdf,
)
from helpers import random_model


def _logits_from_pnone(P):
    """Logits whose softmax has P_None = P and the rest split evenly over the three types."""
    P = np.asarray(P, dtype=float)
    rest = (1 - P) / 3
    return np.log(np.stack([P, rest, rest, rest], axis=-1))


def _all_arborescences(K):
    nodes = range(1, K + 1)
    for root in nodes:
        others = [v for v in nodes if v != root]
        for parents in itertools.product(nodes, repeat=len(others)):
            edges = tuple((p, v) for p, v in zip(parents, others))
            try:
                check_arborescence(edges, root, list(nodes))
            except ModelError:
                continue
            yield TreeStructure(edges, root)


def test_two_nodes_single_tree():
    P = np.full((2, 2), 0.5)
    P[0, 1], P[1, 0] = 0.1, 0.9
    E = greedy_tree(_logits_from_pnone(P))
    assert E.edges == ((1, 2),) and E.root == 1


def test_chain_recovered_and_is_max_weight():
    P = np.full((3, 3), 0.9)
    P[0, 1] = P[1, 2] = 0.05
    J = _logits_from_pnone(P)
    E = greedy_tree(J)
    assert set(E.edges) == {(1, 2), (2, 3)} and E.root == 1
    W = edge_weights(J)
    weight = lambda T: sum(W[u - 1, v - 1] for u, v in T.edges)  # noqa: E731
    trees = list(_all_arborescences(3))
    assert len(trees) == 9
    assert weight(E) == pytest.approx(max(weight(T) for T in trees))


def test_equal_weights_tie_break():
    J = np.zeros((4, 4, 4))
    E1, E2 = greedy_tree(J), greedy_tree(J.copy())
    assert E1 == E2
    assert E1.root == 1
    assert E1.edges == ((1, 2), (1, 3), (1, 4))


def test_greedy_tree_shape_errors():
    with pytest.raises(ModelError):
        greedy_tree(np.zeros((3, 3, 3)))
    with pytest.raises(ModelError):
        greedy_tree(np.zeros((1, 1, 4)))


@settings(max_examples=100, deadline=None)
@given(K=st.integers(2, 7), seed=st.integers(0, 2**31))
def test_greedy_tree_is_arborescence(K, seed):
    J = np.random.default_rng(seed).normal(scale=3, size=(K, K, 4))
    E = greedy_tree(J)
    check_arborescence(E.edges, E.root, list(range(1, K + 1)))


@settings(max_examples=100, deadline=None)
@given(K=st.integers(2, 7), seed=st.integers(0, 2**31))
def test_dominant_ground_truth_recovered(K, seed):
    # GT edges weigh 0.9-0.99, the root's other edges 0.85 (so the root has the
    # largest outgoing weight) and every other edge at most 0.1
    rng = np.random.default_rng(seed)
    perm = rng.permutation(K) + 1
    edges = tuple((int(perm[rng.integers(0, i)]), int(perm[i])) for i in range(1, K))
    gt = TreeStructure(edges, int(perm[0]))
    W = rng.uniform(0.01, 0.1, size=(K, K))
    W[gt.root - 1, :] = 0.85
    for u, v in gt.edges:
        W[u - 1, v - 1] = rng.uniform(0.9, 0.99)
    E = greedy_tree(_logits_from_pnone(1 - W))
    assert E.root == gt.root
    assert set(E.edges) == set(gt.edges)


def test_edge_type_priority_on_uniform_logits():
    J = np.zeros((2, 2, 4))
    J[0, 1] = [-5.0, 1.0, 1.0, 1.0]
    assert edge_type(J, 1, 2) == "revolute"
    J[0, 1] = [-5.0, 0.0, 1.0, 1.0]
    assert edge_type(J, 1, 2) == "prismatic"


def _attrs(K):
    return [{"mass": 1.0, "damping": 0.0, "inertia": 0.01}] * K


def test_compose_door_is_revolute():
    J = np.full((2, 2, 4), -5.0)
    J[0, 1] = [-5.0, 5.0, 0.0, 0.0]
    C = np.zeros((2, 2, 9))
    C[0, 1, :3] = [0, 0, 1]
    groups = [np.random.default_rng(0).normal(size=(10, 3)) for _ in range(2)]
    m = compose_model(groups, J, C, TreeStructure(((1, 2),), 1), _attrs(2))
    assert [j.type for j in m.joints] == ["revolute"]
    np.testing.assert_allclose(m.joints[0].axis, [0, 0, 1])


def test_compose_drawer_is_prismatic():
    J = np.full((2, 2, 4), -5.0)
    J[0, 1] = [-5.0, 0.0, 5.0, 0.0]
    C = np.zeros((2, 2, 9))
    C[0, 1, :3] = [2.0, 0, 0]
    groups = [np.ones((4, 3)), np.zeros((4, 3))]
    m = compose_model(groups, J, C, TreeStructure(((1, 2),), 1), _attrs(2))
    j = m.joints[0]
    assert j.type == "prismatic"
    np.testing.assert_allclose(j.axis, [1, 0, 0])
    np.testing.assert_allclose(m.link(2).points, groups[1])


FIXTURE = """<?xml version="1.0"?>
<robot name="cabinet">
  <link name="link_1">
    <inertial><mass value="5"/><inertia value="0.5"/><damping value="0"/></inertial>
    <points count="2"> 0 0 0  0.5 0.5 0.5 </points>
  </link>
  <link name="link_2">
    <inertial><mass value="1"/><inertia value="0.05"/><damping value="0.1"/></inertial>
    <points count="1"> 0.5 0 0.2 </points>
  </link>
  <link name="link_3">
    <inertial><mass value="0.5"/><inertia value="0.02"/><damping value="0.2"/></inertial>
    <points count="1"> 0.3 0.1 0.1 </points>
  </link>
  <joint name="door" type="revolute">
    <parent link="link_1"/><child link="link_2"/>
    <origin xyz="0.5 0 0" rotvec="0 0 0"/><axis xyz="0 0 1"/>
    <limit lower="0" upper="1.57"/>
  </joint>
  <joint name="drawer" type="prismatic">
    <parent link="link_1"/><child link="link_3"/>
    <origin xyz="0 0 0" rotvec="0 0 0"/><axis xyz="1 0 0"/>
    <limit lower="0" upper="0.4"/>
  </joint>
</robot>
"""


def test_parse_fixture():
    m = parse_urdf(FIXTURE)
    assert m.K == 3 and m.root == 1
    assert set(m.tree.edges) == {(1, 2), (1, 3)}
    assert {j.child: j.type for j in m.joints} == {2: "revolute", 3: "prismatic"}
    assert m.joint_into(2).limits == (0.0, 1.57)
    assert m.link(3).damping == 0.2


def test_parse_rejects_floating():
    with pytest.raises(URDFError, match="unsupported joint type"):
        parse_urdf(FIXTURE.replace('type="prismatic"', 'type="floating"'))


@pytest.mark.parametrize("bad", [
    FIXTURE.replace('count="2"', 'count="3"'),
    FIXTURE.replace('<axis xyz="0 0 1"/>', '<axis xyz="0 0 2"/>'),
    FIXTURE.replace("</robot>", "<sensor/></robot>"),
    FIXTURE.replace('<child link="link_3"/>', '<child link="link_9"/>'),
    "<robot>",
])
def test_parse_rejects_malformed(bad):
    with pytest.raises(URDFError):
        parse_urdf(bad)


def test_emit_identity_model():
    m = ArticulatedModel("solo", (Link(1, np.zeros((1, 3))),), ())
    doc = emit_urdf(m)
    assert "<joint" not in doc
    assert models_equal(parse_urdf(doc), canonicalize(m))


def test_emit_revolute_element():
    m = ArticulatedModel("door", (Link(1, np.zeros((1, 3))), Link(2, np.ones((1, 3)))),
                         (Joint(1, 2, "revolute", np.array([0, 0, 1.0]), limits=(0, 1)),))
    doc = emit_urdf(m)
    assert doc.count('<joint name="joint_2" type="revolute">') == 1
    assert models_equal(parse_urdf(doc), canonicalize(m))


def test_canonicalize_flips_axis():
    m = ArticulatedModel("d", (Link(1, np.zeros((1, 3))), Link(2, np.ones((1, 3)))),
                         (Joint(1, 2, "revolute", np.array([0, 0, -1.0]), limits=(0.0, np.pi / 2)),))
    j = canonicalize(m).joints[0]
    np.testing.assert_array_equal(j.axis, [0, 0, 1])
    assert j.limits == pytest.approx((-np.pi / 2, 0.0))
    assert models_equal(canonicalize(canonicalize(m)), canonicalize(m))


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_round_trip_property(seed):
    m = random_model(np.random.default_rng(seed))
    doc = emit_urdf(m)
    back = parse_urdf(doc)
    assert models_equal(back, canonicalize(m))
    assert emit_urdf(back) == doc
    assert models_equal(canonicalize(canonicalize(m)), canonicalize(m))


def test_model_validation():
    with pytest.raises(ModelError):
        Joint(1, 1, "revolute", np.array([0, 0, 1.0]))
    with pytest.raises(ModelError):
        Joint(1, 2, "revolute", np.array([0, 0, 2.0]))
    with pytest.raises(ModelError):
        ArticulatedModel("x", (Link(1, np.zeros((1, 3))), Link(3, np.zeros((1, 3)))), ())
    with pytest.raises(ModelError):
        TreeStructure(((1, 2), (2, 1)), 1)
