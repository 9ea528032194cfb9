"""Interactive perception: refine the model by poking the world and comparing.

Each interaction moves one joint in the real scene, the resulting clouds give
per-point targets (flow + nearest-point lookup), and the model parameters are
fitted by gradient descent on the sim/real point discrepancy.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from artisim import autodiff as ad
from artisim import geometry
from artisim.diffsim import IPAction, ModelParams, joint_world_line, point_forward
from artisim.perception import (
    DEFAULT_NOISE_SIGMA,
    GroundTruthScene,
    estimate_scene_flow,
    real_correspondence,
    sample_point_cloud,
    true_flow,
)
from artisim.scene.model import DEFAULT_LIMITS, TreeStructure
from artisim.scene.tree import greedy_tree


class IPError(RuntimeError):
    pass


class DivergenceError(IPError):
    def __init__(self, message: str, history: list[float]):
        super().__init__(message)
        self.history = history


@dataclass
class Observation:
    """One interaction: source points, the action taken, F_real targets, joint state before."""

    points: np.ndarray
    action: IPAction
    target: np.ndarray
    q: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        self.target = np.asarray(self.target, dtype=float)
        if self.points.shape != self.target.shape:
            raise IPError(f"cloud size mismatch: {self.points.shape} vs {self.target.shape}")


def observe(P_t, P_next, flow_mode: str, seed: int = 0, sigma: float = DEFAULT_NOISE_SIGMA, gt=None) -> np.ndarray:
    """F_real targets: flow estimate followed by nearest-point lookup in the next cloud."""
    U = estimate_scene_flow(P_t, P_next, flow_mode, seed, sigma, gt)
    return real_correspondence(P_t.points, U, P_next.points)


def modeling_loss(action: IPAction, Z: ModelParams, E: TreeStructure, P_t, target, q=None, delta=None):
    """Mean squared distance between predicted and observed next-frame points."""
    P_t = np.asarray(P_t, dtype=float)
    target = np.asarray(target, dtype=float)
    if P_t.shape != target.shape:
        raise IPError(f"cloud size mismatch: {P_t.shape} vs {target.shape}")
    if ad.value_of(Z.M).shape[0] != len(P_t):
        raise IPError(f"segmentation has {ad.value_of(Z.M).shape[0]} rows for {len(P_t)} points")
    pred = point_forward(P_t, Z, E, action, q=q, delta=delta)
    diff = pred - target
    return ad.sum(diff * diff) / len(P_t)


def buffer_loss(Z: ModelParams, E: TreeStructure, observations: Sequence[Observation]):
    total = 0.0
    for ob in observations:
        total = total + modeling_loss(ob.action, Z, E, ob.points, ob.target, q=ob.q)
    return total


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class OptimizerConfig:
    steps: int = 100
    method: str = "adam"  # "adam" (momentum + per-parameter normalisation) or "momentum"
    lr: float = 0.05
    decay_every: int = 100
    decay: float = 0.5
    momentum: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-12
    scale_spatial: float = 1.0
    scale_logits: float = 5.0
    scale_alpha: float = 0.1
    scale_mask: float = 2.0  # plain momentum on M, times N
    divergence_factor: float = 1e3
    divergence_floor: float = 1e-10
    tol: float = 1e-16  # stop once the loss is at round-off level
    min_alpha: float = 1e-6


def project_simplex_rows(M: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row onto the probability simplex."""
    M = np.asarray(M, dtype=float)
    n, k = M.shape
    s = -np.sort(-M, axis=1)
    css = np.cumsum(s, axis=1) - 1.0
    idx = np.arange(1, k + 1)
    cond = s - css / idx > 0
    rho = k - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(n), rho] / (rho + 1)
    return np.maximum(M - theta[:, None], 0.0)


def _normalize_axes(C: np.ndarray) -> np.ndarray:
    C = C.copy()
    n = np.linalg.norm(C[..., 0:3], axis=-1, keepdims=True)
    C[..., 0:3] = np.where(n > 1e-12, C[..., 0:3] / np.maximum(n, 1e-12), np.array([0.0, 0.0, 1.0]))
    return C


def _loss_and_grads(Z: ModelParams, E: TreeStructure, observations):
    tape = ad.Tape()
    leaves = [tape.var(np.array(x, dtype=float)) for x in (Z.J, Z.C, Z.M, Z.alpha)]
    Zv = ModelParams(*leaves)
    loss = buffer_loss(Zv, E, observations)
    if not ad.is_var(loss):
        return float(loss), [np.zeros_like(np.asarray(x, dtype=float)) for x in (Z.J, Z.C, Z.M, Z.alpha)]
    grads = ad.backward(loss)
    out = [grads.get(v.id, np.zeros_like(v.value)) for v in leaves]
    return float(ad.value_of(loss)), out


def _valid_tree(E: TreeStructure, observations) -> bool:
    return all(ob.action.link != E.root for ob in observations)


def optimize_params(Z: ModelParams, E: TreeStructure, observations: Sequence[Observation], config: OptimizerConfig | None = None):
    """Momentum gradient descent on the buffered modeling loss.

    The tree is held fixed during the inner loop and recomputed from the
    optimised J at the end (kept unchanged if the new root would be an
    actuated link).  Returns (Z', E', info) with the best iterate.
    """
    cfg = config or OptimizerConfig()
    if not observations:
        raise IPError("optimize_params needs at least one observation")
    if cfg.steps < 1:
        raise IPError("steps must be >= 1")
    Z = Z.numeric()
    N = Z.M.shape[0]
    if cfg.method not in ("adam", "momentum"):
        raise IPError(f"unknown optimizer method {cfg.method!r}")
    scales = [cfg.scale_logits, cfg.scale_spatial, cfg.scale_mask * N, cfg.scale_alpha]
    params = [Z.J.copy(), Z.C.copy(), Z.M.copy(), Z.alpha.copy()]
    vel = [np.zeros_like(p) for p in params]
    sq = [np.zeros_like(p) for p in params]
    best = (math.inf, Z)
    history = []
    initial = None
    for step in range(cfg.steps + 1):
        cur = ModelParams(*params)
        loss, grads = _loss_and_grads(cur, E, observations)
        history.append(loss)
        if initial is None:
            initial = loss
        if not np.isfinite(loss) or loss > cfg.divergence_factor * max(initial, cfg.divergence_floor):
            raise DivergenceError(f"modeling loss diverged at step {step}: {loss:.3g} (initial {initial:.3g})", history)
        if loss < best[0]:
            best = (loss, cur if step else Z)
        if step == cfg.steps or loss <= cfg.tol:
            break
        lr = cfg.lr * cfg.decay ** (step // cfg.decay_every)
        new = []
        for i, (p, g, v, m2, s) in enumerate(zip(params, grads, vel, sq, scales)):
            if cfg.method == "momentum" or i == 2:
                v *= cfg.momentum
                v -= lr * s * g
                new.append(p + v)
            else:
                v *= cfg.momentum
                v += (1.0 - cfg.momentum) * g
                m2 *= cfg.beta2
                m2 += (1.0 - cfg.beta2) * g * g
                v_hat = v / (1.0 - cfg.momentum ** (step + 1))
                m2_hat = m2 / (1.0 - cfg.beta2 ** (step + 1))
                new.append(p - lr * s * v_hat / (np.sqrt(m2_hat) + cfg.eps))
        new[1] = _normalize_axes(new[1])
        new[2] = project_simplex_rows(new[2])
        new[3] = np.maximum(new[3], cfg.min_alpha)
        params = new
    Z_best = best[1]
    E_new = greedy_tree(Z_best.J)
    if not _valid_tree(E_new, observations):
        E_new = E
    return Z_best, E_new, {"history": history, "best_loss": best[0], "initial_loss": initial}


def ip_reward(action: IPAction, Z, E, Z_new, E_new, observations: Sequence[Observation]) -> float:
    """Loss improvement on the given observations (usually the triggering pair)."""
    del action  # the observations carry the action
    return float(ad.value_of(buffer_loss(Z, E, observations))) - float(ad.value_of(buffer_loss(Z_new, E_new, observations)))


# ---------------------------------------------------------------------------
# action selection


POLICIES = ("round-robin", "epsilon-greedy-bandit", "random")


@dataclass
class IPRecord:
    step: int
    link: int
    delta: float
    achieved: float
    loss_before: float
    loss_after: float
    reward: float
    metrics: dict = field(default_factory=dict)


@dataclass
class IPEpisodeLog:
    records: list[IPRecord] = field(default_factory=list)

    def append(self, rec: IPRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise IPError("log steps must increase")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def mean_rewards(self) -> dict[int, float]:
        sums: dict[int, list[float]] = {}
        for r in self.records:
            sums.setdefault(r.link, []).append(r.reward)
        return {k: float(np.mean(v)) for k, v in sums.items()}

    def direction_counts(self, link: int) -> tuple[int, int]:
        pos = sum(1 for r in self.records if r.link == link and r.delta > 0)
        neg = sum(1 for r in self.records if r.link == link and r.delta < 0)
        return pos, neg

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.records)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def read(cls, path: str | Path) -> "IPEpisodeLog":
        log = cls()
        for line in Path(path).read_text().splitlines():
            if line.strip():
                log.append(IPRecord(**json.loads(line)))
        return log


@dataclass
class SelectionConfig:
    policy: str = "epsilon-greedy-bandit"
    epsilon: float = 0.2
    range_fraction: tuple[float, float] = (0.3, 0.7)
    max_step: dict = field(default_factory=lambda: {"revolute": 1.0, "prismatic": 0.2, "fixed": 0.0})


def movable_links(Z: ModelParams, E: TreeStructure) -> list[int]:
    out = []
    for u, v in E.edges:
        if Z.edge(u, v).hard_type() in ("revolute", "prismatic"):
            out.append(v)
    return sorted(out)


def select_action(
    Z: ModelParams,
    E: TreeStructure,
    history: IPEpisodeLog,
    policy: str,
    seed: int,
    q: dict | None = None,
    limits: dict | None = None,
    config: SelectionConfig | None = None,
) -> IPAction:
    cfg = config or SelectionConfig()
    links = movable_links(Z, E)
    if not links:
        raise IPError("no movable joints to interact with")
    if policy not in POLICIES:
        raise IPError(f"unknown selection policy {policy!r}")
    rng = np.random.default_rng([seed, len(history)])
    if policy == "round-robin":
        link = links[len(history) % len(links)]
    elif policy == "random":
        link = links[int(rng.integers(len(links)))]
    else:
        explore = rng.random() < cfg.epsilon
        if explore:
            link = links[int(rng.integers(len(links)))]
        else:
            means = history.mean_rewards()
            # untried links count as infinitely promising; ties go to the smallest id
            link = max(links, key=lambda k: (means.get(k, math.inf), -k))
    jtype = Z.edge(E.parent_of(link), link).hard_type()
    qk = (q or {}).get(link, 0.0)
    lo, hi = (limits or {}).get(link, DEFAULT_LIMITS[jtype])
    up, down = max(hi - qk, 0.0), max(qk - lo, 0.0)
    pos, neg = history.direction_counts(link)
    if pos != neg:
        sign = 1.0 if pos < neg else -1.0
    else:
        sign = 1.0 if up >= down else -1.0
    if (up if sign > 0 else down) <= 0.0:
        sign = -sign
    remaining = up if sign > 0 else down
    frac = rng.uniform(*cfg.range_fraction)
    delta = sign * min(frac * remaining, cfg.max_step[jtype])
    return IPAction(link, float(delta))


# ---------------------------------------------------------------------------
# episodes


@dataclass
class IPConfig:
    n_points: int = 600
    cloud_seed: int = 0
    lookup_factor: int = 4
    flow_mode: str = "gt"
    noise_sigma: float = DEFAULT_NOISE_SIGMA
    policy: str = "epsilon-greedy-bandit"
    seed: int = 0
    actuation: str = "oracle"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)


@dataclass
class IPState:
    """Model belief during an episode: parameters, tree, joint values and known limits."""

    Z: ModelParams
    E: TreeStructure
    q: dict = field(default_factory=dict)
    limits: dict = field(default_factory=dict)


def _axis_sign(Z: ModelParams, E: TreeStructure, scene: GroundTruthScene, link: int) -> float:
    """Sign relating a model joint coordinate to the ground-truth one (oracle knowledge)."""
    _, a_model = joint_world_line(Z, E, link, None)
    j = scene.model.joint_into(link)
    return 1.0 if float(np.dot(ad.value_of(a_model), j.axis)) >= 0 else -1.0


def oracle_actuate(scene: GroundTruthScene, state: IPState, action: IPAction):
    """Move the true joint into ``action.link``; returns (new scene, achieved model-frame delta)."""
    if action.link not in [j.child for j in scene.model.joints]:
        return scene, 0.0
    sign = _axis_sign(state.Z, state.E, scene, action.link)
    new, achieved = scene.moved(action.link, sign * action.delta)
    return new, sign * achieved


def run_ip_episode(
    scene: GroundTruthScene,
    Z0: ModelParams,
    E0: TreeStructure,
    n_actions: int,
    config: IPConfig | None = None,
    metrics_fn: Callable[[ModelParams, TreeStructure], dict] | None = None,
    actuate: Callable | None = None,
    state: IPState | None = None,
):
    """Interact ``n_actions`` times; returns (Z, E, log, state).

    ``actuate(scene, state, action) -> (scene, achieved)`` defaults to oracle
    actuation.  On a component failure the episode stops and the partial log
    is returned with ``state`` reflecting the last good model.
    """
    cfg = config or IPConfig()
    actuate = actuate or oracle_actuate
    st = state or IPState(Z0.numeric(), E0)
    log = IPEpisodeLog()
    if n_actions <= 0:
        return Z0, E0, log, st
    buffer: list[Observation] = []
    P_t = sample_point_cloud(scene, cfg.n_points, cfg.cloud_seed)
    for step in range(n_actions):
        try:
            action = select_action(st.Z, st.E, log, cfg.policy, cfg.seed, st.q, st.limits, cfg.selection)
            scene_next, achieved = actuate(scene, st, action)
            k = action.link
            if abs(achieved) < abs(action.delta) - 1e-9:
                # the joint saturated: record the discovered limit in model coordinates
                lo, hi = st.limits.get(k, DEFAULT_LIMITS[st.Z.edge(st.E.parent_of(k), k).hard_type()])
                reached = st.q.get(k, 0.0) + achieved
                st.limits[k] = (lo, reached) if action.delta > 0 else (reached, hi)
            P_next = sample_point_cloud(scene_next, cfg.n_points, cfg.cloud_seed, frame_time=step + 1)
            if abs(achieved) < 1e-9:
                log.append(IPRecord(step, k, action.delta, 0.0, 0.0, 0.0, 0.0, metrics_fn(st.Z, st.E) if metrics_fn else {}))
                scene, P_t = scene_next, P_next
                continue
            gt = true_flow(scene_next, P_t)
            # the correspondence lookup uses a fresh, denser scan of the next frame
            scan = sample_point_cloud(scene_next, cfg.lookup_factor * cfg.n_points, cfg.cloud_seed + 1000 + step, frame_time=step + 1)
            target = observe(P_t, scan, cfg.flow_mode, seed=cfg.seed * 1009 + step, sigma=cfg.noise_sigma, gt=gt)
            ob = Observation(P_t.points, IPAction(k, achieved), target, dict(st.q))
            buffer.append(ob)
            before = float(ad.value_of(modeling_loss(ob.action, st.Z, st.E, ob.points, ob.target, q=ob.q)))
            Z_new, E_new, _ = optimize_params(st.Z, st.E, buffer, cfg.optimizer)
            reward = ip_reward(ob.action, st.Z, st.E, Z_new, E_new, [ob])
            st.Z, st.E = Z_new, E_new
            st.q[k] = st.q.get(k, 0.0) + achieved
            log.append(IPRecord(step, k, action.delta, achieved, before, before - reward, reward, metrics_fn(st.Z, st.E) if metrics_fn else {}))
            scene, P_t = scene_next, P_next
        except (IPError, ValueError) as exc:
            st.limits.setdefault("_error", str(exc))
            break
    return st.Z, st.E, log, st


def perturb_joint(Z: ModelParams, u: int, v: int, angle: float, offset: float, rng: np.random.Generator) -> ModelParams:
    """Tilt the (u, v) axis by ``angle`` rad and shift its line by ``offset`` m perpendicular to it."""
    Z = Z.numeric()
    c = Z.C[u - 1, v - 1]
    axis = c[0:3] / np.linalg.norm(c[0:3])
    new_axis = geometry.rotate_vector_toward(axis, angle, rng)
    n = np.cross(axis, new_axis)
    if np.linalg.norm(n) < 1e-9:
        n = geometry.random_perpendicular_offset(axis, 1.0, rng)
    # shifting along axis x new_axis makes the line-to-line distance exactly ``offset``
    shift = n / np.linalg.norm(n) * offset
    c[0:3] = new_axis
    c[3:6] = c[3:6] + shift
    return Z
