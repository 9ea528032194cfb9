import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artisim import geometry
from artisim.harness.generator import make_scene
from artisim.harness.metrics import metric_miou
from artisim.perception import (
    GroundTruthScene,
    PerceptionError,
    PointCloud,
    box_faces,
    corrupt_segmentation,
    estimate_scene_flow,
    init_joint_estimates,
    nearest_indices,
    read_cloud,
    real_correspondence,
    sample_point_cloud,
    true_flow,
    write_cloud,
)
from artisim.scene import ArticulatedModel, Link


def _box_scene():
    m = ArticulatedModel("box", (Link(1, np.zeros((1, 3))),), ())
    return GroundTruthScene(m, np.zeros(0), 0, {1: box_faces([0, 0, 0.5], [0.4, 0.6, 1.0])})


def test_single_link_box_cloud():
    c = sample_point_cloud(_box_scene(), 100, 3)
    assert len(c) == 100 and np.all(c.labels == 1)
    # every point lies on a face of the box
    d = np.abs(c.points - [0, 0, 0.5]) - [0.2, 0.3, 0.5]
    assert np.all(np.isclose(d.max(axis=1), 0.0, atol=1e-12))


def test_cloud_determinism():
    sc = make_scene("microwave", 5)
    a, b = sample_point_cloud(sc, 300, 7), sample_point_cloud(sc, 300, 7)
    np.testing.assert_array_equal(a.points, b.points)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_door_points_follow_hinge():
    sc = make_scene("microwave", 5)
    j = sc.model.joints[0]
    angle = math.radians(30)
    c0 = sample_point_cloud(sc, 400, 1)
    c1 = sample_point_cloud(sc.at([angle]), 400, 1)
    door = c0.labels == j.child
    R = geometry.rotvec_to_matrix(j.axis * angle)
    np.testing.assert_allclose(c1.points[door], (c0.points[door] - j.origin) @ R.T + j.origin, atol=1e-12)
    np.testing.assert_array_equal(c1.points[~door], c0.points[~door])


def test_too_few_points():
    with pytest.raises(PerceptionError):
        sample_point_cloud(make_scene("door", 1), 10, 0)


def test_corrupt_zero_rate():
    labels = np.array([1, 1, 2, 2, 2])
    np.testing.assert_array_equal(corrupt_segmentation(labels, 0.0, 3), labels)


def test_corrupt_single_part_noop():
    labels = np.ones(50, dtype=int)
    np.testing.assert_array_equal(corrupt_segmentation(labels, 0.4, 3), labels)


@pytest.mark.parametrize("seed", range(5))
def test_corrupt_rate_bounds(seed):
    labels = np.repeat([1, 2], 200)
    m = metric_miou(corrupt_segmentation(labels, 0.3, seed), labels)
    assert 0.4 <= m < 1.0


def test_corrupt_invalid_rate():
    with pytest.raises(PerceptionError):
        corrupt_segmentation(np.array([1, 2]), 0.7, 0)


def _plate(n=60, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform([-0.3, -0.3, 0], [0.3, 0.3, 0.05], size=(n, 3))


def test_init_revolute_exact_axis():
    base = _plate(seed=0)
    door = _plate(seed=1) + [0.5, 0, 0]
    hinge, axis = np.array([0.2, 0.0, 0.0]), geometry.normalize(np.array([0.0, 0.3, 1.0]))
    R = geometry.rotvec_to_matrix(axis * math.radians(20))
    moved = (door - hinge) @ R.T + hinge
    J, C = init_joint_estimates([base, door], [base, moved])
    assert int(np.argmax(J[0, 1])) == 1  # revolute
    est = C[0, 1, :3]
    assert geometry.axis_angle_deg(est, axis) * math.pi / 180 < 1e-6
    assert geometry.line_distance(C[0, 1, 3:6], est, hinge, axis) < 1e-9


def test_init_prismatic_axis():
    base, drawer = _plate(seed=0), _plate(seed=2) + [0, 0, 0.3]
    J, C = init_joint_estimates([base, drawer], [base, drawer + [0.05, 0, 0]])
    assert int(np.argmax(J[0, 1])) == 2
    np.testing.assert_allclose(C[0, 1, :3], [1, 0, 0], atol=1e-9)


def test_init_identical_poses_fixed():
    base, other = _plate(seed=0), _plate(seed=3) + [0, 0.5, 0]
    J, _ = init_joint_estimates([base, other], [base, other])
    assert int(np.argmax(J[0, 1][1:])) + 1 == 3  # fixed among the joint types


def test_init_degenerate_group():
    line = np.outer(np.linspace(0, 1, 10), [1, 0, 0])
    with pytest.raises(PerceptionError):
        init_joint_estimates([_plate(), line], [_plate(), line])


def test_flow_static_gt_zero():
    sc = make_scene("door", 2)
    c = sample_point_cloud(sc, 200, 0)
    np.testing.assert_array_equal(estimate_scene_flow(c, sample_point_cloud(sc, 200, 0), "gt"), 0.0)


def test_flow_zero_sigma_equals_gt():
    sc = make_scene("door", 2)
    c0 = sample_point_cloud(sc, 200, 0)
    nxt = sc.at([0.4])
    gt = true_flow(nxt, c0)
    np.testing.assert_array_equal(estimate_scene_flow(c0, sample_point_cloud(nxt, 200, 0), "gt+noise", sigma=0.0, gt=gt), gt)


def test_flow_noise_magnitude_bounded():
    sc = make_scene("door", 2)
    c0 = sample_point_cloud(sc, 200, 0)
    gt = np.zeros((200, 3))
    f = estimate_scene_flow(c0, c0, "gt+noise", seed=4, sigma=0.05, gt=gt)
    r = np.linalg.norm(f, axis=1)
    assert r.max() <= 0.05 and r.max() > 0.04


def test_nn_flow_translation():
    # a plate translated 0.1 m along its normal and re-sampled densely
    rng = np.random.default_rng(0)
    src = np.column_stack([rng.uniform(0, 1, size=(300, 2)), np.zeros(300)])
    dense = np.column_stack([rng.uniform(0, 1, size=(6000, 2)), np.full(6000, 0.1)])
    f = estimate_scene_flow(PointCloud(src), PointCloud(dense), "nearest-neighbor")
    # brute-force oracle for the same quantity
    idx = np.argmin(((src[:, None] - dense[None]) ** 2).sum(-1), axis=1)
    np.testing.assert_allclose(f, dense[idx] - src)
    med = np.median(np.linalg.norm(f, axis=1))
    assert abs(med - 0.1) <= 0.02


def test_correspondence_exact_targets():
    rng = np.random.default_rng(1)
    P = rng.normal(size=(50, 3))
    U = rng.normal(scale=0.1, size=(50, 3))
    nxt = np.vstack([P + U, rng.normal(size=(20, 3)) + 10])
    np.testing.assert_array_equal(real_correspondence(P, U, nxt), P + U)


def test_correspondence_single_point():
    P = np.random.default_rng(2).normal(size=(10, 3))
    out = real_correspondence(P, np.zeros_like(P), np.array([[1.0, 2.0, 3.0]]))
    np.testing.assert_array_equal(out, np.tile([1.0, 2.0, 3.0], (10, 1)))


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 80), m=st.integers(1, 80), seed=st.integers(0, 2**31))
def test_kdtree_equals_brute_force(n, m, seed):
    rng = np.random.default_rng(seed)
    q, t = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
    np.testing.assert_array_equal(nearest_indices(q, t), nearest_indices(q, t, method="brute"))


def test_nearest_tie_goes_to_smaller_index():
    t = np.array([[1.0, 0, 0], [-1.0, 0, 0], [1.0, 0, 0]])
    assert nearest_indices(np.zeros((1, 3)), t)[0] == 0


def test_cloud_file_round_trip(tmp_path):
    c = sample_point_cloud(make_scene("oven", 3), 120, 0)
    write_cloud(tmp_path / "c.bin", c)
    back = read_cloud(tmp_path / "c.bin")
    np.testing.assert_array_equal(back.points, c.points)
    np.testing.assert_array_equal(back.labels, c.labels)
    (tmp_path / "bad.bin").write_bytes(b"\x05\x00")
    with pytest.raises(PerceptionError):
        read_cloud(tmp_path / "bad.bin")
