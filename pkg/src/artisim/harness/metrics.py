"""Evaluation metrics: segmentation mIoU, instance AP75 and joint errors."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from artisim import autodiff as ad
from artisim import geometry
from artisim.diffsim import ModelParams, joint_world_line
from artisim.perception import GroundTruthScene
from artisim.scene import TreeStructure


class MetricError(ValueError):
    pass


def metric_miou(pred, gt) -> float:
    """Per-part IoU averaged over the parts present in ``gt``."""
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise MetricError(f"label length mismatch: {pred.shape[0]} vs {gt.shape[0]}")
    parts = np.unique(gt)
    if len(parts) == 0:
        raise MetricError("empty labeling")
    ious = []
    for k in parts:
        p, g = pred == k, gt == k
        ious.append((p & g).sum() / (p | g).sum())
    return float(np.mean(ious))


@dataclass(frozen=True)
class Instance:
    points: frozenset
    score: float = 1.0


def instances_from_mask(M: np.ndarray) -> list[Instance]:
    """One instance per predicted part; confidence is the mean responsibility of its points."""
    M = np.asarray(M, dtype=float)
    arg = M.argmax(axis=1)
    out = []
    for k in range(M.shape[1]):
        idx = np.flatnonzero(arg == k)
        if len(idx):
            out.append(Instance(frozenset(idx.tolist()), float(M[idx, k].mean())))
    return out


def instances_from_labels(labels) -> list[Instance]:
    labels = np.asarray(labels).reshape(-1)
    return [Instance(frozenset(np.flatnonzero(labels == k).tolist())) for k in np.unique(labels)]


def _iou(a: frozenset, b: frozenset) -> float:
    union = len(a | b)
    return len(a & b) / union if union else 0.0


def metric_ap(pred: Sequence[Instance], gt: Sequence[Instance], threshold: float = 0.75) -> float:
    """Average precision at an IoU threshold with greedy confidence-ordered matching.

    Precision is made monotone over recall (all-point interpolation) before
    averaging over the recall steps.
    """
    if not gt:
        return 1.0 if not pred else 0.0
    order = sorted(range(len(pred)), key=lambda i: (-pred[i].score, i))
    matched = set()
    tp = []
    for i in order:
        best, best_j = threshold, None
        for j, g in enumerate(gt):
            if j in matched:
                continue
            iou = _iou(pred[i].points, g.points)
            if iou >= best:
                best, best_j = iou, j
        if best_j is None:
            tp.append(0)
        else:
            matched.add(best_j)
            tp.append(1)
    tp = np.array(tp, dtype=float)
    if tp.sum() == 0:
        return 0.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float((envelope * tp).sum() / len(gt))


def metric_ap75(pred: Sequence[Instance], gt: Sequence[Instance]) -> float:
    return metric_ap(pred, gt, 0.75)


def metric_joint_errors(pred: tuple, gt: tuple) -> tuple[float, float, bool]:
    """(Rot. deg, Tran. cm, type match) for joints given as (origin, axis, type)."""
    (o1, a1, t1), (o2, a2, t2) = pred, gt
    for a in (a1, a2):
        if not np.all(np.isfinite(a)) or np.linalg.norm(a) < 1e-9:
            raise MetricError("degenerate joint axis")
    return geometry.axis_angle_deg(a1, a2), 100.0 * geometry.line_distance(o1, a1, o2, a2), t1 == t2


@dataclass
class SceneMetrics:
    mIoU: float
    AP75: float
    acc: float
    rot_deg: float
    tran_cm: float

    def as_dict(self) -> dict:
        return asdict(self)


def model_metrics(Z: ModelParams, E: TreeStructure, scene: GroundTruthScene, labels: np.ndarray, joints: Sequence[int] | None = None) -> SceneMetrics:
    """Compare a belief (Z, E) with the true scene.

    Joint errors are averaged over the true joints; Tran. uses revolute joints
    only, since a prismatic axis has no meaningful position.
    ``labels`` are the true labels of the points M was defined on and
    ``joints`` optionally restricts the joint errors to some child links.
    """
    Z = Z.numeric()
    M = np.asarray(Z.M)
    pred = M.argmax(axis=1) + 1
    miou = metric_miou(pred, labels)
    ap = metric_ap75(instances_from_mask(M), instances_from_labels(labels))
    rots, trans, accs = [], [], []
    for j in scene.model.joints:
        if joints is not None and j.child not in joints:
            continue
        u = E.parent_of(j.child)
        if u is None:
            rots.append(90.0)
            accs.append(False)
            continue
        o, a = joint_world_line(Z, E, j.child, None)
        ptype = Z.edge(u, j.child).hard_type()
        r, t, ok = metric_joint_errors((np.asarray(ad.value_of(o)), np.asarray(ad.value_of(a)), ptype), (j.origin, j.axis, j.type))
        rots.append(r)
        accs.append(ok and u == j.parent)
        if j.type == "revolute":
            trans.append(t)
    return SceneMetrics(miou, ap, float(np.mean(accs)), float(np.mean(rots)), float(np.mean(trans)) if trans else 0.0)
