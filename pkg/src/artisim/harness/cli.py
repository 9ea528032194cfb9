"""Command line interface: dataset generation, perception, residual fitting, planning and evaluation.

Every subcommand reads and writes files under ``--out``.  Scenes are
addressed by id through the ``dataset.json`` index written by ``gen``.
Exit codes: 0 success, 2 configuration error, 3 experiment failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from artisim import manipulation as mp
from artisim.diffsim import ModelParams
from artisim.harness import experiments as ex
from artisim.harness.config import ConfigError, ExperimentConfig, load_config
from artisim.harness.generator import CATEGORIES, GeneratorError, generate_dataset, make_scene
from artisim.harness.metrics import model_metrics
from artisim.ip import IPConfig, IPError, run_ip_episode
from artisim.perception import GroundTruthScene, PerceptionError, groups_from_labels, sample_point_cloud
from artisim.residual import (
    ResidualError,
    ResidualNet,
    TrainConfig,
    TransitionBuffer,
    augmented_loss,
    nominal_error,
    read_weights,
    split_buffer,
    train_residual,
    write_weights,
)
from artisim.scene import ModelError, TreeStructure, compose_model, emit_urdf, parse_urdf

log = logging.getLogger("artisim")

EXIT_OK, EXIT_CONFIG, EXIT_FAILURE = 0, 2, 3
INDEX = "dataset.json"


class ExperimentFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# files


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def load_scene(data_dir: Path, scene_id: str) -> GroundTruthScene:
    index = data_dir / INDEX
    if not index.exists():
        raise ConfigError(f"no {INDEX} in {data_dir}; run `gen` first")
    entries = {e["scene-id"]: e for e in json.loads(index.read_text())["scenes"]}
    if scene_id not in entries:
        raise ConfigError(f"unknown scene {scene_id!r}")
    e = entries[scene_id]
    return make_scene(e["category"], e["seed"], scene_id)


def save_belief(path: Path, Z: ModelParams, E: TreeStructure, labels: np.ndarray) -> None:
    Z = Z.numeric()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, J=Z.J, C=Z.C, M=Z.M, alpha=Z.alpha, edges=np.array(E.edges, dtype=int).reshape(-1, 2),
                 root=E.root, labels=labels)


def load_belief(path: Path) -> tuple[ModelParams, TreeStructure, np.ndarray]:
    try:
        d = np.load(path)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read belief {path}: {exc}") from exc
    Z = ModelParams(d["J"], d["C"], d["M"], d["alpha"])
    E = TreeStructure(tuple((int(u), int(v)) for u, v in d["edges"]), int(d["root"]))
    return Z, E, d["labels"]


def belief_urdf(Z: ModelParams, E: TreeStructure, points: np.ndarray, name: str) -> str:
    """URDF of a belief: links from the argmax segmentation, joints from (J, C) along E."""
    Z = Z.numeric()
    K = Z.K
    labels = np.asarray(Z.M).argmax(axis=1) + 1
    groups = groups_from_labels(points, labels, K)
    groups = [g if len(g) else np.zeros((1, 3)) for g in groups]
    attrs = [{"mass": float(a[0]), "damping": float(a[1]), "inertia": float(a[2])} for a in np.asarray(Z.alpha)]
    return emit_urdf(compose_model(groups, np.asarray(Z.J), np.asarray(Z.C), E, attrs, name=name))


def _metrics_dict(Z, E, scene, labels) -> dict:
    return model_metrics(Z, E, scene, labels).as_dict()


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args, cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    ds = generate_dataset(args.categories or cfg.categories, args.n_per_category, cfg.seed)
    split = {sid: "train" for sid in ds.train} | {sid: "test" for sid in ds.test}
    for sc in ds.scenes:
        (out / "urdf").mkdir(parents=True, exist_ok=True)
        (out / "urdf" / f"{sc.scene_id}.urdf").write_text(emit_urdf(sc.model))
    _write_json(out / INDEX, {"seed": cfg.seed, "scenes": [
        {"scene-id": s.scene_id, "category": s.category, "seed": s.seed, "split": split[s.scene_id]} for s in ds.scenes]})
    print(f"{len(ds.scenes)} scenes ({len(ds.train)} train / {len(ds.test)} test) -> {out}")
    return EXIT_OK


def cmd_init_model(args, cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    scene = load_scene(Path(args.data or cfg.out), args.scene)
    init = ex.initial_model(scene, cfg, args.index)
    stem = out / f"{scene.scene_id}.init"
    save_belief(Path(f"{stem}.npz"), init.Z, init.E, init.labels)
    P0 = sample_point_cloud(scene, cfg.n_points, 0)
    Path(f"{stem}.urdf").write_text(belief_urdf(init.Z, init.E, P0.points, scene.scene_id))
    m = _metrics_dict(init.Z, init.E, scene, init.labels)
    _write_json(Path(f"{stem}.json"), {"scene-id": scene.scene_id, "metrics": m, "config": cfg.model_dump(mode="json")})
    print(json.dumps(m, sort_keys=True))
    return EXIT_OK


def cmd_run_ip(args, cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    scene = load_scene(Path(args.data or cfg.out), args.scene)
    Z, E, labels = load_belief(Path(args.belief))
    if Z.K != scene.K or len(labels) != np.asarray(Z.M).shape[0]:
        raise ConfigError("belief does not match the scene")
    ipc = IPConfig(n_points=len(labels), flow_mode=cfg.flow_modes[0], noise_sigma=cfg.noise_sigma,
                   policy=cfg.ip_policy, seed=cfg.seed, optimizer=ex._optimizer(cfg))
    Z1, E1, episode, state = run_ip_episode(scene, Z, E, args.steps if args.steps is not None else cfg.ip_steps, ipc)
    if "_error" in state.limits:
        raise ExperimentFailure(f"IP episode stopped: {state.limits['_error']}")
    stem = out / f"{scene.scene_id}.ip"
    save_belief(Path(f"{stem}.npz"), Z1, E1, labels)
    P0 = sample_point_cloud(scene, len(labels), 0)
    Path(f"{stem}.urdf").write_text(belief_urdf(Z1, E1, P0.points, scene.scene_id))
    episode.write(Path(f"{stem}.jsonl"))
    report = {"init": _metrics_dict(Z, E, scene, labels), "opt": _metrics_dict(Z1, E1, scene, labels)}
    _write_json(Path(f"{stem}.json"), {"scene-id": scene.scene_id, **report, "config": cfg.model_dump(mode="json")})
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def _case(args, cfg: ExperimentConfig, scene: GroundTruthScene) -> ex.ManipulationCase:
    model = parse_urdf(Path(args.model).read_text()) if getattr(args, "model", None) else None
    return ex.setup_manipulation(scene, args.joint, cfg.goal_deg, cfg.goal_m, cfg.horizon, args.disturbance, seed=cfg.seed, model=model)


def _world(case: ex.ManipulationCase, which: str):
    return ex.real_world(case.world, **ex.REAL_PERTURBATION) if which == "perturbed" else case.world


def cmd_fit_residual(args, cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    scene = load_scene(Path(args.data or cfg.out), args.scene)
    case = _case(args, cfg, scene)
    pcfg = mp.PlanConfig(robot_iters=cfg.robot_iters)
    if args.buffer:
        items = list(TransitionBuffer.read(args.buffer))
        train, held = split_buffer(items, 0.2, cfg.seed)
    else:
        policy = mp.two_level_solve(case.world, case.task, case.s_init, pcfg).policy
        real = _world(case, "perturbed")
        train = list(ex.collect_transitions(policy, real, case.s_init, cfg.transitions, cfg.action_noise, cfg.seed))
        held = list(ex.collect_transitions(policy, real, case.s_init, cfg.heldout, cfg.action_noise, cfg.seed + 500))
    net = ResidualNet.create(len(case.s_init.vector()), case.world.arm.R, seed=cfg.seed)
    net, curve = train_residual(net, train, case.world, TrainConfig(epochs=cfg.residual_epochs, seed=cfg.seed, dt=pcfg.dt))
    stem = out / f"{scene.scene_id}.residual"
    stem.parent.mkdir(parents=True, exist_ok=True)
    write_weights(Path(f"{stem}.bin"), net)
    buf = TransitionBuffer()
    buf.extend(train)
    buf.write(Path(f"{stem}.jsonl"))
    report = {"nominal-error": nominal_error(held, case.world, pcfg.dt), "residual-error": augmented_loss(net, held, case.world, pcfg.dt),
              "train": len(train), "heldout": len(held)}
    _write_json(Path(f"{stem}.json"), {"scene-id": scene.scene_id, **report, "config": cfg.model_dump(mode="json")})
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_plan(args, cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    scene = load_scene(Path(args.data or cfg.out), args.scene)
    case = _case(args, cfg, scene)
    net = read_weights(args.residual) if args.residual else None
    pcfg = mp.PlanConfig(robot_iters=cfg.robot_iters)
    res = mp.two_level_solve(case.world, case.task, case.s_init, pcfg, net=net)
    stem = out / f"{scene.scene_id}"
    out.mkdir(parents=True, exist_ok=True)
    mp.save_json(f"{stem}.policy.json", res.policy)
    mp.save_json(f"{stem}.plan.json", res.object_plan)
    mp.save_json(f"{stem}.robot.json", res.robot)
    print(json.dumps({"final-error-deg-or-m": float(res.robot.cost), "replans": len(res.replans)}))
    return EXIT_OK


def cmd_exec(args, cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    scene = load_scene(Path(args.data or cfg.out), args.scene)
    case = _case(args, cfg, scene)
    policy = mp.load_json(args.policy)
    if not isinstance(policy, mp.Policy):
        raise ConfigError(f"{args.policy} is not a policy file")
    buffer = TransitionBuffer()
    ok, _, traj = mp.guided_execute(policy, _world(case, args.world), case.task, case.s_init, buffer)
    stem = out / f"{scene.scene_id}.exec"
    out.mkdir(parents=True, exist_ok=True)
    mp.save_json(Path(f"{stem}.json"), traj)
    if len(buffer):
        buffer.write(Path(f"{stem}.jsonl"))
    err = abs(float(traj.object_q(-1)[case.world.target_index]) - case.task.q_goal)
    print(json.dumps({"success": ok, "final-error": err, "steps": traj.T, "recorded": len(buffer)}))
    return EXIT_OK if ok or not args.strict else EXIT_FAILURE


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    res = ex.run_experiment(cfg)
    if not res.rows:
        raise ExperimentFailure(f"{cfg.kind} produced no rows")
    csv_path, json_path = res.write(cfg.out, args.stem)
    print(json.dumps(res.summary, sort_keys=True, default=float))
    print(f"wrote {csv_path} and {json_path}")
    return EXIT_OK


def cmd_report(args, cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    lines = []
    for path in sorted(out.glob("*.json")):
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError:
            continue
        if not isinstance(d, dict) or "kind" not in d or "summary" not in d:
            continue
        lines.append(f"## {path.stem} ({d['kind']}, seed {d.get('seed')})")
        lines.append("")
        lines.append("```json")
        lines.append(json.dumps(d["summary"], indent=2, sort_keys=True))
        lines.append("```")
        lines.append("")
    if not lines:
        raise ExperimentFailure(f"no run manifests in {out}")
    text = "\n".join(lines)
    (out / "report.md").write_text(text)
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--flow-mode", choices=["gt", "gt+noise", "nearest-neighbor"])
    common.add_argument("--noise-sigma", type=float)
    common.add_argument("-v", "--verbose", action="store_true")

    scene = argparse.ArgumentParser(add_help=False)
    scene.add_argument("--scene", required=True, help="scene id from dataset.json")
    scene.add_argument("--data", help="directory holding dataset.json (default: --out)")

    task = argparse.ArgumentParser(add_help=False)
    task.add_argument("--joint", choices=["revolute", "prismatic"], default="revolute")
    task.add_argument("--disturbance", type=float, default=0.0, help="initial gripper offset (m)")
    task.add_argument("--model", help="URDF the planner believes (default: the true model)")

    p = argparse.ArgumentParser(prog="artisim", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen", parents=[common], help="generate a seeded dataset")
    g.add_argument("--categories", nargs="+", choices=CATEGORIES)
    g.add_argument("--n-per-category", type=int, default=5)
    g.set_defaults(func=cmd_gen)
    i = sub.add_parser("init-model", parents=[common, scene], help="bootstrap an initial belief")
    i.add_argument("--index", type=int, default=0, help="perturbation stream index")
    i.set_defaults(func=cmd_init_model)
    r = sub.add_parser("run-ip", parents=[common, scene], help="interactive perception episode")
    r.add_argument("--belief", required=True, help="belief .npz from init-model or run-ip")
    r.add_argument("--steps", type=int)
    r.set_defaults(func=cmd_run_ip)
    f = sub.add_parser("fit-residual", parents=[common, scene, task], help="train a residual on real-world transitions")
    f.add_argument("--buffer", help="transition JSONL (default: collect in the perturbed world)")
    f.set_defaults(func=cmd_fit_residual)
    pl = sub.add_parser("plan", parents=[common, scene, task], help="two-level trajectory optimisation")
    pl.add_argument("--residual", help="residual weights for the augmented simulator")
    pl.set_defaults(func=cmd_plan)
    e = sub.add_parser("exec", parents=[common, scene, task], help="guided execution of a policy")
    e.add_argument("--policy", required=True)
    e.add_argument("--world", choices=["matched", "perturbed"], default="matched")
    e.add_argument("--strict", action="store_true", help="exit 3 when execution fails")
    e.set_defaults(func=cmd_exec)
    ev = sub.add_parser("eval", parents=[common], help="run an experiment and write CSV + JSON")
    ev.add_argument("--kind", choices=list(ex.RUNNERS))
    ev.add_argument("--n-scenes", type=int)
    ev.add_argument("--stem", help="output file stem (default: the experiment kind)")
    ev.set_defaults(func=cmd_eval)
    rp = sub.add_parser("report", parents=[common], help="summarise run manifests in --out")
    rp.set_defaults(func=cmd_report)
    return p


def _load(args) -> ExperimentConfig:
    overrides = {"seed": args.seed, "out": args.out, "noise_sigma": args.noise_sigma,
                 "flow_modes": [args.flow_mode] if args.flow_mode else None}
    if args.command == "eval":
        overrides |= {"kind": args.kind, "n_scenes": args.n_scenes}
    return load_config(args.config, default_kind="ip-performance", **overrides)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _load(args)
        return args.func(args, cfg)
    except (ConfigError, GeneratorError, ModelError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ExperimentFailure, ex.ExperimentError, mp.PlanningError, IPError, ResidualError, PerceptionError) as exc:
        print(f"experiment failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
