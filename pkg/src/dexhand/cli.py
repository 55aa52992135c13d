"""``dexhand`` command-line entry point.

Angles on the command line are degrees; the kinematics layer works in
radians and the conversion happens here only.
"""

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import Config, build_config, load_config
from .control import binarize_deltas, replay_trajectory
from .demodata import (
    Dataset,
    build_dataset,
    preprocess_image,
    read_recording,
    record_task_corpus,
    write_recording,
)
from .errors import DexHandError
from .kinematics import coupled_dip_angle, coupling_oracle, forward_kinematics
from .policy import (
    TrainConfig,
    joint_accuracy,
    load_checkpoint,
    predict_commands,
    save_checkpoint,
    train,
)
from .simplant import (
    TASK_KINDS,
    evaluation_scenes,
    render_scene,
    run_task,
    scripted_expert,
    zero_policy,
)
from .workspace import estimate_volume, export_cloud, sample_workspace

SUBCOMMANDS = ("fk", "couple", "workspace", "replay", "binarize", "build-dataset", "train", "eval",
               "simulate")


def _floats(text: str):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _tasks(text: str):
    tasks = list(TASK_KINDS) if text == "all" else text.split(",")
    for t in tasks:
        if t not in TASK_KINDS:
            raise argparse.ArgumentTypeError(f"unknown task {t!r}; choose from {', '.join(TASK_KINDS)}")
    return tasks


# --- subcommands ------------------------------------------------------------


def cmd_fk(args, cfg: Config, out):
    if len(args.angles) != 3:
        raise argparse.ArgumentTypeError("--angles needs three values: roll,pitch,pip")
    t1, t2, t3 = (math.radians(a) for a in args.angles)
    tf = forward_kinematics(cfg.finger, t1, t2, t3)
    if args.matrix:
        for row in tf.matrix:
            print(" ".join(f"{v:.6f}" for v in row), file=out)
    else:
        print(" ".join(f"{v:.6f}" for v in tf.translation), file=out)
    return 0


def cmd_couple(args, cfg: Config, out):
    theta3 = np.radians(np.asarray(args.theta3, dtype=float))
    fn = coupling_oracle if args.oracle else coupled_dip_angle
    theta4 = np.atleast_1d(fn(cfg.finger.coupling, theta3))
    for a, b in zip(np.atleast_1d(args.theta3), theta4):
        print(f"{a:.6f} {math.degrees(b):.6f}", file=out)
    return 0


def cmd_workspace(args, cfg: Config, out):
    seed = cfg.seed("workspace", args.seed)
    cloud = sample_workspace(cfg.finger, args.samples, seed, workers=args.workers)
    stats = estimate_volume(cloud, args.voxel)
    if args.out:
        export_cloud(cloud, args.format, args.out)
    print(json.dumps({
        "samples": args.samples,
        "seed": seed,
        "voxel_mm": stats.voxel_mm,
        "occupied_voxels": stats.occupied_voxels,
        "volume_mm3": stats.volume_mm3,
        "bbox_min": [round(float(v), 6) for v in stats.bbox_min],
        "bbox_max": [round(float(v), 6) for v in stats.bbox_max],
    }, sort_keys=True), file=out)
    return 0


def cmd_replay(args, cfg: Config, out):
    rec = read_recording(args.recording)
    log = replay_trajectory(rec.trajectory(), cfg.plant, cfg.gains, dt=args.dt)
    if args.out:
        log.write_csv(args.out)
    err = np.abs(log.q_m - log.q_d) if len(log) else np.zeros((0, 15))
    print(json.dumps({
        "steps": len(log),
        "final_max_abs_error_deg": float(err[-1].max()) if len(err) else 0.0,
        "saturated_samples": int(log.saturated.sum()),
    }, sort_keys=True), file=out)
    return 0


def cmd_binarize(args, cfg: Config, out):
    rec = read_recording(args.recording)
    threshold = cfg.threshold_deg if args.threshold is None else args.threshold
    bits = binarize_deltas(rec.trajectory(), threshold)
    lines = ["".join(str(int(b)) for b in row) for row in bits]
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        Path(args.out).write_text(text)
    else:
        out.write(text)
    return 0


def cmd_build_dataset(args, cfg: Config, out):
    seed = cfg.seed("demo", args.seed)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    if args.recordings:
        recordings = [read_recording(p) for p in args.recordings]
        base_dir = Path(args.recordings[0]).parent
    else:
        recordings = []
        for task in args.task:
            recordings.extend(record_task_corpus(task, args.samples, seed=seed))
        base_dir = None
        if args.save_recordings:
            rec_dir = outdir / "recordings"
            rec_dir.mkdir(exist_ok=True)
            for k, rec in enumerate(recordings):
                write_recording(rec, rec_dir / f"{k:04d}_{rec.metadata['task']}.jsonl")
    ds = build_dataset(recordings, cfg.preprocess, cfg.threshold_deg, base_dir=base_dir)
    np.save(outdir / "inputs.npy", ds.inputs)
    np.save(outdir / "labels.npy", ds.labels)
    manifest = ds.manifest(cfg.preprocess, cfg.threshold_deg)
    manifest["seed"] = seed
    manifest["recordings"] = len(recordings)
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(json.dumps({"samples": manifest["samples"], "positive_rate": manifest["positive_rate"]},
                     sort_keys=True), file=out)
    return 0


def _load_dataset(path) -> Dataset:
    path = Path(path)
    return Dataset(np.load(path / "inputs.npy", mmap_mode="r"), np.load(path / "labels.npy"))


def cmd_train(args, cfg: Config, out):
    ds = _load_dataset(args.dataset)
    doc = cfg.train.to_dict()
    for key in ("epochs", "steps_per_epoch", "batch_size", "lr"):
        if getattr(args, key) is not None:
            doc[key] = getattr(args, key)
    doc["seed"] = cfg.seed("train", args.seed)
    tcfg = TrainConfig.from_dict(doc)

    def progress(epoch, loss):
        if args.verbose:
            print(f"epoch {epoch + 1}/{tcfg.epochs} loss {loss:.5f}", file=sys.stderr)

    model, report = train(ds, tcfg, callback=progress)
    save_checkpoint(model, args.out, tcfg.to_dict())
    Path(str(args.out) + ".report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    print(json.dumps({"final_loss": report.epoch_loss[-1] if report.epoch_loss else None,
                      "mean_joint_accuracy": float(np.mean(report.joint_accuracy)),
                      "config_hash": report.config_hash}, sort_keys=True), file=out)
    return 0


def model_policy(model, preprocess):
    def policy(scene, guide, hand):
        return predict_commands(model, preprocess_image(render_scene(scene, guide, hand), preprocess))
    return policy


def cmd_eval(args, cfg: Config, out):
    model = load_checkpoint(args.model)
    seed = cfg.seed("eval", args.seed)
    policy = model_policy(model, cfg.preprocess)
    result = {}
    for task in args.task:
        scenes = evaluation_scenes(task, args.trials, seed)
        wins = [run_task(s, policy, plant=cfg.plant, seed=seed + k, max_steps=args.max_steps,
                         gains=cfg.gains).success for k, s in enumerate(scenes)]
        result[task] = sum(wins) / len(wins)
    summary = {"seed": seed, "success": result, "mean_success": float(np.mean(list(result.values())))}
    if args.dataset:
        ds = _load_dataset(args.dataset)
        summary["joint_accuracy"] = [float(v) for v in joint_accuracy(model, ds.inputs, ds.labels)]
    print(json.dumps(summary, sort_keys=True), file=out)
    return 0


def cmd_simulate(args, cfg: Config, out):
    seed = cfg.seed("eval", args.seed)
    scene = evaluation_scenes(args.task, 1, seed)[0]
    if args.policy == "expert":
        policy = scripted_expert
    elif args.policy == "zero":
        policy = zero_policy
    else:
        policy = model_policy(load_checkpoint(args.policy), cfg.preprocess)
    result = run_task(scene, policy, plant=cfg.plant, seed=seed, max_steps=args.max_steps,
                      gains=cfg.gains)
    if args.log:
        result.log.write_csv(args.log)
    print(json.dumps({"task": args.task, "success": result.success, "steps": result.steps},
                     sort_keys=True), file=out)
    return 0


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dexhand", description="Tendon-driven hand simulator and tools.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="JSON config file; unknown keys are rejected")
    parser.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")

    p = sub.add_parser("fk", help="fingertip position for joint angles (degrees)")
    p.add_argument("--angles", type=_floats, required=True, help="roll,pitch,pip in degrees")
    p.add_argument("--matrix", action="store_true", help="print the full 4x4 transform")
    p.set_defaults(func=cmd_fk)

    p = sub.add_parser("couple", help="coupled DIP angle for PIP angles (degrees)")
    p.add_argument("--theta3", type=_floats, required=True, help="comma-separated PIP angles")
    p.add_argument("--oracle", action="store_true", help="solve by bisection instead of the closed form")
    p.set_defaults(func=cmd_couple)

    p = sub.add_parser("workspace", help="Monte Carlo fingertip workspace")
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--seed", type=int)
    p.add_argument("--voxel", type=float, default=2.0, help="voxel edge in mm")
    p.add_argument("--out", help="export the point cloud here")
    p.add_argument("--format", choices=("csv", "ply", "ppm-scatter"), default="csv")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_workspace)

    p = sub.add_parser("replay", help="PID replay of a recording against the simulated plant")
    p.add_argument("--recording", required=True)
    p.add_argument("--dt", type=float, default=1 / 30)
    p.add_argument("--out", help="CSV log path")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("binarize", help="per-step 15-bit commands from a recording")
    p.add_argument("--recording", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_binarize)

    p = sub.add_parser("build-dataset", help="preprocessed images and labels from demonstrations")
    p.add_argument("--task", type=_tasks, default=list(TASK_KINDS), help="task name, list or 'all'")
    p.add_argument("--samples", type=int, default=600, help="samples per task")
    p.add_argument("--seed", type=int)
    p.add_argument("--recordings", nargs="+", help="use these recordings instead of the scripted expert")
    p.add_argument("--save-recordings", action="store_true")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("train", help="behaviour-cloning training")
    p.add_argument("--dataset", required=True, help="directory written by build-dataset")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps-per-epoch", dest="steps_per_epoch", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="closed-loop evaluation of a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--task", type=_tasks, default=list(TASK_KINDS))
    p.add_argument("--trials", type=int, default=4)
    p.add_argument("--max-steps", dest="max_steps", type=int, default=250)
    p.add_argument("--seed", type=int)
    p.add_argument("--dataset", help="also report per-joint accuracy on this dataset")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("simulate", help="one closed-loop trial")
    p.add_argument("--task", choices=TASK_KINDS, required=True)
    p.add_argument("--policy", default="expert", help="'expert', 'zero' or a checkpoint path")
    p.add_argument("--max-steps", dest="max_steps", type=int, default=400)
    p.add_argument("--seed", type=int)
    p.add_argument("--log", help="CSV log path")
    p.set_defaults(func=cmd_simulate)
    return parser


def dispatch(argv=None, out=None) -> int:
    """Run one command; returns the process exit code."""
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config) if args.config else build_config()
        if args.print_config:
            print(cfg.dumps(), file=out)
            return 0
        if args.command is None:
            parser.print_usage(sys.stderr)
            print("dexhand: error: a subcommand is required", file=sys.stderr)
            return 2
        return args.func(args, cfg, out)
    except argparse.ArgumentTypeError as exc:
        print(f"dexhand: error: {exc}", file=sys.stderr)
        return 2
    except (DexHandError, OSError, ValueError, KeyError) as exc:
        print(f"dexhand: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
