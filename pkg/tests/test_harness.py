import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artisim import manipulation as mp
from artisim.harness import experiments as ex
from artisim.harness.cli import main
from artisim.harness.config import ConfigError, load_config
from artisim.harness.generator import CategorySpec, GeneratorError, generate_dataset, make_scene, split_counts
from artisim.harness.metrics import (
    Instance,
    MetricError,
    instances_from_labels,
    metric_ap75,
    metric_joint_errors,
    metric_miou,
    model_metrics,
)
from artisim.ip import Observation, OptimizerConfig, optimize_params
from artisim.diffsim import IPAction
from artisim.perception import sample_point_cloud, true_flow
from helpers import gt_params


def test_miou_examples():
    gt = np.array([1, 1, 2, 2])
    assert metric_miou(gt, gt) == 1.0
    assert metric_miou(np.ones(4, int), gt) == pytest.approx(0.25)
    assert metric_miou(np.array([3, 3, 4, 4]), gt) == 0.0
    with pytest.raises(MetricError):
        metric_miou(gt[:3], gt)


def test_ap75_examples():
    gt = instances_from_labels([1, 1, 1, 1, 1, 2, 2, 2, 2, 2])
    assert metric_ap75(gt, gt) == 1.0
    # IoU 4/5 = 0.8 for the first part, nothing for the second
    pred = [Instance(frozenset({0, 1, 2, 3}), 0.9)]
    assert metric_ap75(pred, gt) == pytest.approx(0.5)
    assert metric_ap75([Instance(frozenset({0, 1, 5, 6}), 0.9)], gt) == 0.0


def test_joint_error_examples():
    o, z = np.zeros(3), np.array([0, 0, 1.0])
    assert metric_joint_errors((o, z, "revolute"), (o, z, "revolute")) == (0.0, 0.0, True)
    r, t, _ = metric_joint_errors((o, -z, "revolute"), (o, z, "revolute"))
    assert r == pytest.approx(0.0, abs=1e-6) and t == pytest.approx(0.0, abs=1e-9)
    r, t, ok = metric_joint_errors((o + [0.1, 0, 0], z, "prismatic"), (o, z, "revolute"))
    assert r == pytest.approx(0.0, abs=1e-6) and t == pytest.approx(10.0) and not ok
    with pytest.raises(MetricError):
        metric_joint_errors((o, np.zeros(3), "revolute"), (o, z, "revolute"))


unit = st.lists(st.floats(-1, 1, allow_nan=False), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 0.1)
point = st.lists(st.floats(-1, 1, allow_nan=False), min_size=3, max_size=3)


@settings(max_examples=200, deadline=None)
@given(unit, unit, point, point)
def test_joint_errors_symmetric_and_bounded(a1, a2, o1, o2):
    j1, j2 = (np.array(o1), np.array(a1), "revolute"), (np.array(o2), np.array(a2), "revolute")
    r12, t12, _ = metric_joint_errors(j1, j2)
    r21, t21, _ = metric_joint_errors(j2, j1)
    assert 0 <= r12 <= 90 + 1e-9 and t12 >= 0
    assert r12 == pytest.approx(r21, abs=1e-6) and t12 == pytest.approx(t21, abs=1e-6)
    flipped = metric_joint_errors((j1[0], -j1[1], "revolute"), j2)
    assert flipped[0] == pytest.approx(r12, abs=1e-6)


def test_generator_box_template():
    ds = generate_dataset(["box"], 5, 0)
    assert len(ds.scenes) == 5
    for sc in ds.scenes:
        assert [j.type for j in sc.model.joints] == ["revolute"]


def test_generator_deterministic_and_split():
    a, b = generate_dataset(["microwave", "storage"], 4, 3), generate_dataset(["microwave", "storage"], 4, 3)
    assert a.train == b.train and a.test == b.test
    for s1, s2 in zip(a.scenes, b.scenes):
        np.testing.assert_array_equal(s1.model.links[1].points, s2.model.links[1].points)
    assert sorted(a.train + a.test) == sorted(s.scene_id for s in a.scenes)
    assert split_counts(176) == (143, 33)


def test_generator_errors():
    with pytest.raises(GeneratorError):
        generate_dataset(["box"], 1, 0)
    with pytest.raises(GeneratorError):
        CategorySpec("toaster")
    with pytest.raises(GeneratorError):
        CategorySpec("box", (1, 2))


def test_true_model_metrics_perfect_and_gt_flow_step_keeps_them():
    sc = make_scene("microwave", 4)
    j = sc.model.joints[0]
    P0 = sample_point_cloud(sc, 300, 0)
    Z = gt_params(sc, P0.labels)
    m0 = model_metrics(Z, sc.model.tree, sc, P0.labels)
    assert (m0.mIoU, m0.AP75, m0.acc) == (1.0, 1.0, 1.0)
    assert m0.rot_deg == pytest.approx(0, abs=1e-6) and m0.tran_cm == pytest.approx(0, abs=1e-6)
    target = P0.points + true_flow(sc.at([0.6]), P0)
    Z1, E1, _ = optimize_params(Z, sc.model.tree, [Observation(P0.points, IPAction(j.child, 0.6), target)], OptimizerConfig())
    m1 = model_metrics(Z1, E1, sc, P0.labels)
    for a, b in zip(m0.as_dict().values(), m1.as_dict().values()):
        assert a == pytest.approx(b, abs=1e-6)


def test_aggregate_overall_is_count_weighted():
    rows = [{"scene-id": str(i), "category": c, "condition": "init", "mIoU": v, "AP75": v, "acc": 1.0, "rot-deg": 10 * v, "tran-cm": v}
            for i, (c, v) in enumerate([("box", 0.2), ("box", 0.4), ("door", 1.0)])]
    agg = ex.aggregate(rows)["init"]
    cats = agg["categories"]
    weighted = sum(cats[c]["mIoU"] * cats[c]["n"] for c in cats) / sum(cats[c]["n"] for c in cats)
    assert agg["overall"]["mIoU"] == pytest.approx(weighted)
    assert agg["overall"]["n"] == 3


def test_config_validation(tmp_path):
    assert load_config(kind="robustness").seed == 0
    for bad in ({"kind": "nope"}, {"kind": "robustness", "n_scenes": 0}, {"kind": "robustness", "typo": 1},
                {"kind": "robustness", "categories": ["toaster"]}, {"kind": "disturbance", "disturbances_m": [0.1, 0.0]}):
        with pytest.raises(ConfigError):
            load_config(**bad)
    p = tmp_path / "c.yaml"
    p.write_text("kind: robustness\nseed: 7\nn_scenes: 2\n")
    cfg = load_config(p, noise_sigma=0.01)
    assert (cfg.seed, cfg.n_scenes, cfg.noise_sigma) == (7, 2, 0.01)
    p.write_text("- a list\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_identical_config_identical_csv_bytes(tmp_path):
    cfg = load_config(kind="robustness", n_scenes=1, flow_modes=["gt"], categories=["microwave"])
    a = ex.run_experiment(cfg)
    b = ex.run_experiment(cfg)
    assert a.csv_text() == b.csv_text()
    csv_path, json_path = a.write(tmp_path)
    assert csv_path.read_text().splitlines()[0] == "scene-id,category,condition,mIoU,AP75,acc,rot-deg,tran-cm"
    manifest = json.loads(json_path.read_text())
    assert manifest["config"]["seed"] == 0 and manifest["config"]["kind"] == "robustness"


def test_cli_exit_codes(tmp_path, capsys):
    out = str(tmp_path)
    assert main(["gen", "--out", out, "--categories", "microwave", "--n-per-category", "2"]) == 0
    index = json.loads((tmp_path / "dataset.json").read_text())
    sid = index["scenes"][0]["scene-id"]
    assert (tmp_path / "urdf" / f"{sid}.urdf").exists()
    assert main(["init-model", "--out", out, "--scene", sid, "--seed", "1"]) == 0
    assert (tmp_path / f"{sid}.init.npz").exists() and (tmp_path / f"{sid}.init.urdf").exists()
    assert main(["run-ip", "--out", out, "--scene", sid, "--belief", str(tmp_path / f"{sid}.init.npz"), "--steps", "1"]) == 0
    # config errors
    assert main(["gen", "--out", out, "--n-per-category", "1"]) == 2
    assert main(["nonsense"]) == 2
    assert main(["init-model", "--out", out, "--scene", "missing"]) == 2
    (tmp_path / "bad.yaml").write_text("kind: robustness\nn_scenes: -3\n")
    assert main(["eval", "--config", str(tmp_path / "bad.yaml"), "--out", out]) == 2
    # a zero-torque policy cannot open the door: experiment failure under --strict
    policy = mp.Policy(np.zeros((5, 3, 8)), np.zeros((5, 3)))
    mp.save_json(tmp_path / "zero.json", policy)
    code = main(["exec", "--out", out, "--scene", sid, "--policy", str(tmp_path / "zero.json"), "--strict"])
    assert code == 3
