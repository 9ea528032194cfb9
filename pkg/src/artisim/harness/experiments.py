"""Experiment runners: robustness, IP performance, manipulation, closed loop, disturbance sweep.

Every runner returns a :class:`RunResult` whose rows are written as CSV and
whose manifest (config echo, seeds, aggregates) is written as JSON.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from artisim.diffsim import ArmSpec, ModelParams, ObjectState, RobotState, RobotWorld, SimState, object_dynamics
from artisim.harness.config import ExperimentConfig, dump_config
from artisim.harness.generator import make_scene
from artisim.harness.metrics import SceneMetrics, model_metrics
from artisim.ip import IPAction, IPConfig, IPState, Observation, OptimizerConfig, observe, optimize_params, oracle_actuate, perturb_joint, run_ip_episode
from artisim import manipulation as mp
from artisim.perception import (
    GroundTruthScene,
    corrupt_segmentation,
    groups_from_labels,
    hard_mask,
    init_joint_estimates,
    sample_point_cloud,
    true_flow,
)
from artisim.residual import ResidualNet, TrainConfig, TransitionBuffer, augmented_loss, nominal_error, train_residual
from artisim.scene import TreeStructure, greedy_tree

METRIC_COLUMNS = ("scene-id", "category", "condition", "mIoU", "AP75", "acc", "rot-deg", "tran-cm")
MANIP_COLUMNS = ("scene-id", "category", "condition", "success", "final-error", "replans")
SWEEP_COLUMNS = ("disturbance-m", "feasible", "successes", "success-rate")
RESIDUAL_COLUMNS = ("scene-id", "category", "transitions", "nominal-error", "residual-error", "ratio")
DEFAULT_ALPHA = (1.0, 0.05, 0.05)  # mass, damping, inertia before identification
REAL_PERTURBATION = {"mass_scale": 1.2, "damping_add": 0.1, "drag": 0.05}


class ExperimentError(RuntimeError):
    pass


@dataclass
class RunResult:
    kind: str
    columns: tuple
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    solved: list = field(default_factory=list)  # in-memory manipulation results, not serialised

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in self.columns])
        return buf.getvalue()

    def manifest(self) -> dict:
        return {"kind": self.kind, "config": self.config, "seed": self.config.get("seed"), "summary": self.summary, "n_rows": len(self.rows)}

    def write(self, out_dir: str | Path, stem: str | None = None) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = stem or self.kind
        csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
        csv_path.write_text(self.csv_text())
        json_path.write_text(json.dumps(self.manifest(), indent=2, sort_keys=True))
        return csv_path, json_path


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def _metric_row(scene: GroundTruthScene, condition: str, m: SceneMetrics) -> dict:
    return {"scene-id": scene.scene_id, "category": scene.category, "condition": condition, "mIoU": m.mIoU,
            "AP75": m.AP75, "acc": m.acc, "rot-deg": m.rot_deg, "tran-cm": m.tran_cm}


# ---------------------------------------------------------------------------
# scenes and the initial model


def seeded_scenes(categories, n: int, seed: int, require: str | None = None) -> list[GroundTruthScene]:
    """``n`` scenes cycling through ``categories``; ``require`` keeps scenes with such a joint."""
    scenes, i = [], 0
    while len(scenes) < n:
        if i > 100 * n:
            raise ExperimentError(f"cannot find {n} scenes with a {require} joint in {categories}")
        cat = categories[i % len(categories)]
        sub = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        sc = make_scene(cat, sub, f"{cat}-{seed}-{i:03d}")
        i += 1
        if require is None or any(j.type == require for j in sc.model.joints):
            scenes.append(sc)
    return scenes


def second_pose(scene: GroundTruthScene) -> np.ndarray:
    """A configuration with every joint visibly moved (used to bootstrap joint estimates)."""
    lim = scene.model.limits_array()
    q = []
    for j, (lo, hi) in zip(scene.model.ordered_joints(), lim):
        q.append(min(0.6, 0.5 * hi) if j.type == "revolute" else 0.5 * hi)
    return np.array(q)


@dataclass
class InitialModel:
    Z: ModelParams
    E: TreeStructure
    labels: np.ndarray  # true labels of the cloud M is defined on
    perturbed: list


def initial_model(scene: GroundTruthScene, cfg: ExperimentConfig, index: int, perturb: str = "all") -> InitialModel:
    """Two-pose bootstrap with corrupted segmentation, then joint perturbation.

    ``perturb`` is "all" (every true joint), "first-revolute" or "none".
    """
    seed = cfg.seed
    P0 = sample_point_cloud(scene, cfg.n_points, 0)
    P1 = sample_point_cloud(scene.at(second_pose(scene)), cfg.n_points, 0)
    K = scene.K
    noisy = corrupt_segmentation(P0.labels, cfg.flip_rate, seed * 7919 + index, points=P0.points)
    J, C = init_joint_estimates(groups_from_labels(P0.points, noisy, K), groups_from_labels(P1.points, noisy, K))
    E = greedy_tree(J)
    Z = ModelParams(J, C, hard_mask(noisy, K), np.tile(DEFAULT_ALPHA, (K, 1)))
    rng = np.random.default_rng([seed, index, 17])
    targets = []
    if perturb == "all":
        targets = [j.child for j in scene.model.joints]
    elif perturb == "first-revolute":
        targets = [j.child for j in scene.model.joints if j.type == "revolute"][:1]
    done = []
    for v in targets:
        u = E.parent_of(v)
        if u is None:
            continue
        angle = math.radians(rng.uniform(*cfg.init_rot_deg))
        offset = rng.uniform(*cfg.init_tran_cm) / 100.0
        Z = perturb_joint(Z, u, v, angle, offset, rng)
        done.append(v)
    return InitialModel(Z, E, P0.labels, done)


def _optimizer(cfg: ExperimentConfig) -> OptimizerConfig:
    o = OptimizerConfig()
    return replace(o, **{k: v for k, v in cfg.optimizer.model_dump().items() if v is not None})


# ---------------------------------------------------------------------------
# perception experiments


def run_robustness(cfg: ExperimentConfig) -> RunResult:
    """One optimize_params invocation per flow mode after a single probing action."""
    res = RunResult("robustness", METRIC_COLUMNS, config=dump_config(cfg))
    scenes = seeded_scenes([c for c in cfg.categories if c != "storage"] or cfg.categories, cfg.n_scenes, cfg.seed, "revolute")
    opt = _optimizer(cfg)
    for i, sc in enumerate(scenes):
        init = initial_model(sc, cfg, i, perturb="first-revolute")
        if not init.perturbed:
            continue
        v = init.perturbed[0]
        res.rows.append(_metric_row(sc, "init", model_metrics(init.Z, init.E, sc, init.labels, [v])))
        nxt, achieved = oracle_actuate(sc, IPState(init.Z, init.E), IPAction(v, cfg.probe_delta))
        P0 = sample_point_cloud(sc, cfg.n_points, 0)
        scan = sample_point_cloud(nxt, 4 * cfg.n_points, 1000, frame_time=1)
        gt = true_flow(nxt, P0)
        for mode in cfg.flow_modes:
            target = observe(P0, scan, mode, seed=cfg.seed * 1009 + i, sigma=cfg.noise_sigma, gt=gt)
            ob = Observation(P0.points, IPAction(v, achieved), target, {})
            Z, E, _ = optimize_params(init.Z, init.E, [ob], opt)
            res.rows.append(_metric_row(sc, f"opt-{mode}", model_metrics(Z, E, sc, init.labels, [v])))
    res.summary = aggregate(res.rows)
    return res


def run_ip_performance(cfg: ExperimentConfig) -> RunResult:
    """Full IP episodes from a perturbed initial model; init vs opt metrics."""
    res = RunResult("ip-performance", METRIC_COLUMNS, config=dump_config(cfg))
    scenes = seeded_scenes(cfg.categories, cfg.n_scenes, cfg.seed)
    ipc = IPConfig(n_points=cfg.n_points, flow_mode=cfg.flow_modes[0], noise_sigma=cfg.noise_sigma,
                   policy=cfg.ip_policy, seed=cfg.seed, optimizer=_optimizer(cfg))
    for i, sc in enumerate(scenes):
        init = initial_model(sc, cfg, i)
        res.rows.append(_metric_row(sc, "init", model_metrics(init.Z, init.E, sc, init.labels)))
        Z, E, log, st = run_ip_episode(sc, init.Z, init.E, cfg.ip_steps, replace(ipc, seed=cfg.seed * 1000 + i))
        res.rows.append(_metric_row(sc, "opt", model_metrics(Z, E, sc, init.labels)))
    res.summary = aggregate(res.rows)
    return res


def aggregate(rows: list[dict]) -> dict:
    """Mean metrics per (condition, category) and overall (scene-count weighted)."""
    out: dict = {}
    keys = ("mIoU", "AP75", "acc", "rot-deg", "tran-cm")
    for cond in sorted({r["condition"] for r in rows}):
        sub = [r for r in rows if r["condition"] == cond]
        cats = {}
        for cat in sorted({r["category"] for r in sub}):
            cs = [r for r in sub if r["category"] == cat]
            cats[cat] = {k: float(np.mean([r[k] for r in cs])) for k in keys} | {"n": len(cs)}
        overall = {k: float(np.mean([r[k] for r in sub])) for k in keys} | {"n": len(sub)}
        out[cond] = {"categories": cats, "overall": overall}
    return out


# ---------------------------------------------------------------------------
# manipulation


@dataclass
class ManipulationCase:
    scene: GroundTruthScene
    world: RobotWorld
    task: mp.Task
    s_init: SimState
    q_grasp: np.ndarray


def setup_manipulation(
    scene: GroundTruthScene,
    kind: str = "revolute",
    goal_deg: float = 60.0,
    goal_m: float = 0.15,
    horizon: int = 100,
    disturbance: float = 0.0,
    seed: int = 0,
    model=None,
) -> ManipulationCase:
    """Place the arm for the first ``kind`` joint and build the task.

    ``model`` (defaults to the true model) is what the planner believes.
    Raises ReachError when no placement or disturbed start is feasible.
    """
    joints = [j for j in scene.model.joints if j.type == kind]
    if not joints:
        raise mp.PlanningError(f"scene {scene.scene_id} has no {kind} joint")
    j = joints[0]
    model = model or scene.model
    dyn = object_dynamics(model)
    lo, hi = scene.model.limits_array()[scene.model.joint_index(j.child)]
    if kind == "revolute":
        goal, tol = min(math.radians(goal_deg), hi), math.radians(2.0)
    else:
        goal, tol = min(goal_m, 0.8 * hi), 0.01
    template = ArmSpec(np.zeros(3), np.array([1.0, 0, 0]), np.array([0, 1.0, 0]))
    w0 = RobotWorld(model, dyn, template, j.child, scene.handles[j.child])
    q_obj = np.zeros(dyn.n)
    pl = mp.place_robot(w0, q_obj, goal)
    world = w0.with_dynamics(arm=pl.arm)
    q_start = pl.q_start
    if disturbance > 0:
        h0 = np.asarray(world.handle_position(q_obj), dtype=float)
        q_start, ok = mp.disturbed_start(pl.arm, pl.q_start, h0, disturbance, np.random.default_rng(seed))
        if not ok:
            raise mp.ReachError(f"disturbed start of {disturbance} m is not reachable")
    s0 = SimState(ObjectState(q_obj.copy(), np.zeros(dyn.n)), RobotState(q_start, np.zeros(pl.arm.R)))
    if disturbance > 0 and mp.check_replan_trigger(s0, world).triggered:
        raise mp.ReachError(f"disturbed start of {disturbance} m starts inside a replanning trigger")
    return ManipulationCase(scene, world, mp.Task(j.child, goal, horizon, tol), s0, pl.q_start)


def real_world(world: RobotWorld, mass_scale=1.2, damping_add=0.1, drag=0.05) -> RobotWorld:
    """The perturbed "real" dynamics for both the object and the arm."""
    return world.with_dynamics(world.dynamics.perturbed(mass_scale, damping_add, drag), world.arm.perturbed(mass_scale, damping_add, drag))


def _final_error(case: ManipulationCase, traj: mp.RobotTrajectory) -> float:
    return abs(float(traj.object_q(-1)[case.world.target_index]) - case.task.q_goal)


@dataclass
class SolvedCase:
    case: ManipulationCase
    result: mp.TwoLevelResult | None
    success: bool
    error: float
    message: str = ""


def solve_case(case: ManipulationCase, pcfg: mp.PlanConfig, net=None, seed_actions=None, trust: float = 0.0, real: RobotWorld | None = None) -> SolvedCase:
    """two_level_solve then guided execution in ``real`` (defaults to the planning world)."""
    try:
        result = mp.two_level_solve(case.world, case.task, case.s_init, pcfg, net=net, seed_actions=seed_actions, trust=trust)
    except mp.PlanningError as exc:
        return SolvedCase(case, None, False, math.nan, str(exc))
    ok, _, traj = mp.guided_execute(result.policy, real or case.world, case.task, case.s_init, dt=pcfg.dt)
    return SolvedCase(case, result, ok, _final_error(case, traj))


def _manip_row(sc: SolvedCase, condition: str) -> dict:
    return {"scene-id": sc.case.scene.scene_id, "category": sc.case.scene.category, "condition": condition,
            "success": sc.success, "final-error": sc.error, "replans": len(sc.result.replans) if sc.result else -1}


def manipulation_cases(cfg: ExperimentConfig, kind: str = "revolute") -> list[ManipulationCase]:
    cats = [c for c in cfg.categories if c != "storage"] if kind == "revolute" else [c for c in cfg.categories if c in ("storage", "oven")]
    cases, i = [], 0
    pool = seeded_scenes(cats or cfg.categories, 4 * cfg.n_scenes, cfg.seed, kind)
    while len(cases) < cfg.n_scenes and i < len(pool):
        try:
            cases.append(setup_manipulation(pool[i], kind, cfg.goal_deg, cfg.goal_m, cfg.horizon))
        except mp.ReachError:
            pass
        i += 1
    return cases


def run_manipulation(cfg: ExperimentConfig, kind: str = "revolute", cases=None) -> RunResult:
    """Matched-world success of two_level_solve + guided execution."""
    res = RunResult("manipulation", MANIP_COLUMNS, config=dump_config(cfg) | {"joint_kind": kind})
    pcfg = mp.PlanConfig(robot_iters=cfg.robot_iters)
    cases = cases if cases is not None else manipulation_cases(cfg, kind)
    solved = [solve_case(c, pcfg) for c in cases]
    res.rows = [_manip_row(s, "matched") for s in solved]
    plan_ok = [bool(s.result and abs(s.result.object_plan.x[-1, s.case.world.target_index] - s.case.task.q_goal) <= s.case.task.tolerance) for s in solved]
    res.summary = {"n": len(solved), "successes": int(sum(s.success for s in solved)),
                   "success_rate": float(np.mean([s.success for s in solved])) if solved else 0.0,
                   "object_plan_within_tolerance": int(sum(plan_ok))}
    res.solved = solved
    return res


def closed_loop_case(solved: SolvedCase, pcfg: mp.PlanConfig, real: RobotWorld, trust: float, epochs: int, seed: int):
    """Execute in ``real``; on failure train a residual on the run and replan once.

    Returns (success before, success after, error before, error after).
    """
    case, result = solved.case, solved.result
    if result is None:
        return False, False, math.nan, math.nan
    buffer = TransitionBuffer()
    ok, recorded, traj = mp.guided_execute(result.policy, real, case.task, case.s_init, buffer, dt=pcfg.dt)
    err = _final_error(case, traj)
    if ok:
        return True, True, err, err
    if len(buffer) < 8:
        return False, False, err, err
    S = len(case.s_init.vector())
    net = ResidualNet.create(S, case.world.arm.R, seed=seed)
    net, _ = train_residual(net, buffer, case.world, TrainConfig(epochs=epochs, seed=seed, dt=pcfg.dt))
    seed_actions = np.array([a for _, a, _ in recorded]) if len(recorded) == result.policy.T else None
    after = solve_case(case, pcfg, net=net, seed_actions=seed_actions, trust=trust, real=real)
    return False, after.success, err, after.error


def run_closed_loop(cfg: ExperimentConfig, solved: list[SolvedCase] | None = None) -> RunResult:
    """plan -> fail -> residual-train -> replan in the perturbed world, per perturbation seed."""
    res = RunResult("closed-loop", MANIP_COLUMNS, config=dump_config(cfg) | {"real": REAL_PERTURBATION})
    pcfg = mp.PlanConfig(robot_iters=cfg.robot_iters)
    if solved is None:
        solved = run_manipulation(cfg).solved
    per_seed = {}
    for ps in cfg.perturbation_seeds:
        rng = np.random.default_rng([cfg.seed, ps])
        pick = sorted(rng.choice(len(solved), size=min(cfg.scenes_per_seed, len(solved)), replace=False).tolist())
        before = after = 0
        for idx in pick:
            s = solved[idx]
            real = real_world(s.case.world, **REAL_PERTURBATION)
            b, a, eb, ea = closed_loop_case(s, pcfg, real, cfg.trust, cfg.residual_epochs, seed=ps)
            before += b
            after += a
            for cond, ok, e in ((f"seed{ps}-before", b, eb), (f"seed{ps}-after", a, ea)):
                res.rows.append({"scene-id": s.case.scene.scene_id, "category": s.case.scene.category, "condition": cond,
                                 "success": ok, "final-error": e, "replans": 0})
        per_seed[ps] = {"before": before, "after": after, "scenes": pick}
    res.summary = {"per_seed": per_seed,
                   "non_decreasing": all(v["after"] >= v["before"] for v in per_seed.values()),
                   "improved_seeds": int(sum(v["after"] > v["before"] for v in per_seed.values()))}
    return res


def run_disturbance(cfg: ExperimentConfig) -> RunResult:
    """Success rate against the initial end-effector disturbance (matched world)."""
    res = RunResult("disturbance", SWEEP_COLUMNS, config=dump_config(cfg))
    pcfg = mp.PlanConfig(robot_iters=cfg.robot_iters)
    base = manipulation_cases(cfg)
    for mag in cfg.disturbances_m:
        feasible = succ = 0
        for i, c in enumerate(base):
            try:
                case = setup_manipulation(c.scene, "revolute", cfg.goal_deg, cfg.goal_m, cfg.horizon, mag, seed=cfg.seed * 1000 + i)
            except mp.ReachError:
                continue
            feasible += 1
            succ += solve_case(case, pcfg).success
        res.rows.append({"disturbance-m": float(mag), "feasible": feasible, "successes": succ,
                         "success-rate": succ / feasible if feasible else math.nan})
    pts = [(r["disturbance-m"], r["success-rate"]) for r in res.rows if r["feasible"]]
    slope = float(np.polyfit(*zip(*pts), 1)[0]) if len(pts) > 1 else 0.0
    res.summary = {"rates": [p[1] for p in pts], "disturbances": [p[0] for p in pts], "slope": slope}
    return res


def collect_transitions(policy: mp.Policy, world: RobotWorld, s_init: SimState, n: int, noise: float, seed: int, dt: float = mp.DEFAULT_DT) -> TransitionBuffer:
    """``n`` transitions from noisy executions of ``policy`` in ``world``.

    Each step adds Gaussian torque noise of ``noise`` times the per-joint RMS of
    the noise-free executed torques; episodes restart from ``s_init`` when the
    horizon ends or the state diverges.
    """
    rng = np.random.default_rng(seed)
    step = mp.make_stepper(world, None, dt)
    clean = mp.rollout(policy, s_init, step).a
    scale = noise * np.sqrt(np.mean(np.square(clean), axis=0)) + 1e-6
    buf = TransitionBuffer()
    while len(buf) < n:
        s = s_init.numeric()
        for t in range(policy.T):
            a = policy.act(t, s.vector()) + rng.normal(0.0, scale)
            with np.errstate(all="ignore"):
                s_next = step(s, a).numeric()
            if not np.all(np.isfinite(s_next.vector())):
                break
            buf.add(s, a, s_next)
            s = s_next
            if len(buf) >= n:
                break
    return buf


def run_residual(cfg: ExperimentConfig) -> RunResult:
    """Held-out one-step error of a residual trained on real-world transitions vs the nominal simulator."""
    res = RunResult("residual", RESIDUAL_COLUMNS, config=dump_config(cfg) | {"real": REAL_PERTURBATION})
    pcfg = mp.PlanConfig(robot_iters=cfg.robot_iters)
    cases = manipulation_cases(cfg)
    ratios = []
    for i, case in enumerate(cases):
        solved = solve_case(case, pcfg)
        if solved.result is None:
            continue
        real = real_world(case.world, **REAL_PERTURBATION)
        base = cfg.seed * 1000 + i
        train = collect_transitions(solved.result.policy, real, case.s_init, cfg.transitions, cfg.action_noise, base)
        held = collect_transitions(solved.result.policy, real, case.s_init, cfg.heldout, cfg.action_noise, base + 500)
        net = ResidualNet.create(len(case.s_init.vector()), case.world.arm.R, seed=base)
        net, _ = train_residual(net, train, case.world, TrainConfig(epochs=cfg.residual_epochs, seed=base, dt=pcfg.dt))
        nominal = nominal_error(list(held), case.world, pcfg.dt)
        learned = augmented_loss(net, list(held), case.world, pcfg.dt)
        ratios.append(learned / nominal)
        res.rows.append({"scene-id": case.scene.scene_id, "category": case.scene.category, "transitions": len(train),
                         "nominal-error": nominal, "residual-error": learned, "ratio": learned / nominal})
    res.summary = {"ratios": ratios, "max_ratio": float(max(ratios)) if ratios else math.nan}
    return res


RUNNERS = {
    "robustness": run_robustness,
    "ip-performance": run_ip_performance,
    "manipulation": run_manipulation,
    "closed-loop": run_closed_loop,
    "disturbance": run_disturbance,
    "residual": run_residual,
}


def run_experiment(cfg: ExperimentConfig) -> RunResult:
    return RUNNERS[cfg.kind](cfg)
