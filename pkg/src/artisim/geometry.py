"""Rigid-body helpers usable on plain arrays or on autodiff Vars."""

from __future__ import annotations

import numpy as np

from artisim import autodiff as ad


def normalize(v, eps: float = 1e-12):
    """Unit vector along the last axis (differentiable)."""
    n = ad.norm(v, axis=-1, keepdims=True)
    if np.any(ad.value_of(n) < eps):
        raise ValueError("cannot normalize a zero-length vector")
    return v / n


def skew(v):
    """3x3 cross-product matrix of a 3-vector."""
    x, y, z = v[0], v[1], v[2]
    zero = 0.0 * x
    return ad.stack([
        ad.stack([zero, -z, y]),
        ad.stack([z, zero, -x]),
        ad.stack([-y, x, zero]),
    ])


def rotvec_to_matrix(r):
    """Rotation matrix of an axis-angle vector (Rodrigues)."""
    theta = ad.norm(r)
    if float(ad.value_of(theta)) < 1e-10:
        # first-order expansion keeps the derivative at the identity exact
        return np.eye(3) + skew(r)
    k = skew(r / theta)
    return np.eye(3) + ad.sin(theta) * k + (1.0 - ad.cos(theta)) * (k @ k)


def rotate_points(points, axis, angle, origin):
    """Rotate ``points`` (N,3) by ``angle`` about the line through ``origin`` along unit ``axis``."""
    v = points - origin
    c, s = ad.cos(angle), ad.sin(angle)
    kv = ad.sum(v * axis, axis=-1, keepdims=True)
    return origin + v * c + ad.cross(axis, v) * s + axis * kv * (1.0 - c)


def rotation_displacement(points, axis, angle, origin):
    """Displacement of ``points`` under that rotation; exactly zero at angle 0."""
    v = points - origin
    c, s = ad.cos(angle), ad.sin(angle)
    kv = ad.sum(v * axis, axis=-1, keepdims=True)
    return v * (c - 1.0) + ad.cross(axis, v) * s + axis * kv * (1.0 - c)


def apply_rigid(R, t, points):
    """Apply x -> R x + t to row-vector points (N,3)."""
    return points @ ad.transpose(R) + t


def compose(a, b):
    """(R_a, t_a) o (R_b, t_b)."""
    Ra, ta = a
    Rb, tb = b
    return Ra @ Rb, Ra @ tb + ta


def invert(T):
    R, t = T
    Rt = ad.transpose(R)
    return Rt, -(Rt @ t)


def rotation_about_point(R, point):
    """Rigid transform rotating by ``R`` about a fixed ``point``."""
    return R, point - R @ point


# --- numeric-only helpers -------------------------------------------------


def matrix_to_rotvec(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = float(np.arccos(cos))
    if theta < 1e-12:
        return np.zeros(3)
    if np.pi - theta < 1e-6:
        # near 180 degrees: axis from the symmetric part
        M = (R + np.eye(3)) / 2.0
        i = int(np.argmax(np.diag(M)))
        axis = M[:, i] / np.sqrt(max(M[i, i], 1e-300))
        return axis / np.linalg.norm(axis) * theta
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return w / (2.0 * np.sin(theta)) * theta


def kabsch(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Least-squares rigid fit dst ~ R src + t.  Returns (R, t, rms residual)."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    t = cd - R @ cs
    resid = dst - (src @ R.T + t)
    return R, t, float(np.sqrt(np.mean(np.sum(resid**2, axis=1))))


def trimmed_kabsch(src: np.ndarray, dst: np.ndarray, iters: int = 5, factor: float = 3.0, floor: float = 0.005):
    """Kabsch fit that repeatedly drops points far off the current fit.

    Points with residual above ``max(factor * median, floor)`` are excluded
    from the next fit.  Returns (R, t, rms over inliers, inlier mask).
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mask = np.ones(len(src), dtype=bool)
    for _ in range(iters):
        R, t, _ = kabsch(src[mask], dst[mask])
        r = np.linalg.norm(dst - (src @ R.T + t), axis=1)
        new = r <= max(factor * np.median(r), floor)
        if new.sum() < 3 or np.array_equal(new, mask):
            break
        mask = new
    R, t, rms = kabsch(src[mask], dst[mask])
    return R, t, rms, mask


def screw_from_rigid(R: np.ndarray, t: np.ndarray):
    """Decompose x -> R x + t into (axis, angle, point on axis, translation along axis).

    For a near-identity rotation the axis is the translation direction and the
    point is the origin.
    """
    r = matrix_to_rotvec(R)
    angle = float(np.linalg.norm(r))
    if angle < 1e-9:
        tn = float(np.linalg.norm(t))
        axis = t / tn if tn > 0 else np.array([0.0, 0.0, 1.0])
        return axis, 0.0, np.zeros(3), tn
    axis = r / angle
    pitch = float(axis @ t)
    t_perp = t - pitch * axis
    # point c on the axis solves (I - R) c = t_perp within the plane normal to axis
    A = np.eye(3) - R
    c, *_ = np.linalg.lstsq(A, t_perp, rcond=None)
    c = c - (c @ axis) * axis
    return axis, angle, c, pitch


def line_distance(o1, a1, o2, a2) -> float:
    """Minimum distance between two infinite lines."""
    o1, a1, o2, a2 = (np.asarray(x, dtype=float) for x in (o1, a1, o2, a2))
    a1 = a1 / np.linalg.norm(a1)
    a2 = a2 / np.linalg.norm(a2)
    n = np.cross(a1, a2)
    nn = np.linalg.norm(n)
    d = o2 - o1
    if nn < 1e-9:
        return float(np.linalg.norm(d - (d @ a1) * a1))
    return float(abs(d @ n) / nn)


def axis_angle_deg(a1, a2) -> float:
    """Angle between two axis directions, ignoring sign, in degrees."""
    a1 = np.asarray(a1, dtype=float)
    a2 = np.asarray(a2, dtype=float)
    c = abs(float(a1 @ a2)) / (np.linalg.norm(a1) * np.linalg.norm(a2))
    return float(np.degrees(np.arccos(np.clip(c, 0.0, 1.0))))


def rotate_vector_toward(v: np.ndarray, angle: float, rng: np.random.Generator) -> np.ndarray:
    """Tilt unit ``v`` by ``angle`` radians in a random direction."""
    v = np.asarray(v, dtype=float)
    v = v / np.linalg.norm(v)
    w = rng.normal(size=3)
    w -= (w @ v) * v
    w /= np.linalg.norm(w)
    return np.cos(angle) * v + np.sin(angle) * w


def random_perpendicular_offset(axis: np.ndarray, dist: float, rng: np.random.Generator) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    w = rng.normal(size=3)
    w -= (w @ axis) * axis / (axis @ axis)
    return w / np.linalg.norm(w) * dist
