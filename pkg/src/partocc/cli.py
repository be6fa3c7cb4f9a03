"""Command-line entry points tying the pipeline together.

Every command resolves its configuration from defaults < config file < flags,
rejects unknown config keys, and logs the fully resolved configuration next to
its outputs. Exit codes: 0 success, 2 bad input, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .body import (CapsuleBody, body_digest, forward_kinematics, load_body,
                   make_capsule_body, regress_joints, save_body)
from .errors import DivergenceError, InputError, NumericError
from .field import FieldConfig, build_state, load_checkpoint, refresh_codes
from .meshio import load_scan, save_ply
from .metrics import bench_throughput, extract_mesh, iou_report
from .training import (CapsuleOracle, MeshOracle, TrainConfig, random_poses, train)
from .untangle import (ResolveConfig, displace_scan, resolve_scene_collisions,
                       resolve_self_intersections)

# schema: key -> (type, default, help). Types: int, float, str, bool, path.
SCHEMAS = {
    "synth": {
        "parts": (int, 8, "number of bones/parts (>= 2)"),
        "seed": (int, 0, "generator seed"),
        "branching": (bool, True, "allow branching skeletons"),
        "out": (str, None, "output body JSON path"),
    },
    "train": {
        "body": (str, None, "body JSON path"),
        "poses": (str, "random", "poses JSON path or 'random'"),
        "n_poses": (int, 500, "pose count when poses=random"),
        "pose_sigma": (float, 0.35, "axis-angle stddev for random poses"),
        "pose_seed": (int, 123, "seed for random poses"),
        "preset": (str, "desk", "paper or desk"),
        "mode": (str, "parts", "parts or holistic (single-part ablation)"),
        "out_dir": (str, None, "run directory"),
        "resume": (str, "", "checkpoint to resume from"),
        "seed": (int, 0, "training seed"),
        "learning_rate": (float, -1.0, "override preset learning rate"),
        "iterations": (int, -1, "override preset iterations"),
        "batch_size_bodies": (int, -1, "override preset batch size"),
        "queries_per_body": (int, -1, "override preset query count"),
        "cloud_points": (int, -1, "override preset cloud samples per part"),
        "checkpoint_every": (int, -1, "override checkpoint interval"),
        "latent": (int, -1, "override latent size"),
        "encoder_width": (int, -1, "override encoder width"),
        "decoder_width": (int, -1, "override decoder width"),
        "threads": (int, 0, "torch threads (0 = library default)"),
        "quiet": (bool, True, "suppress per-iteration logging"),
    },
    "eval": {
        "ckpt": (str, None, "checkpoint path"),
        "body": (str, None, "body JSON path"),
        "poses": (str, "random", "poses JSON path or 'random'"),
        "n_poses": (int, 10, "pose count when poses=random"),
        "pose_sigma": (float, 0.35, "axis-angle stddev for random poses"),
        "pose_seed": (int, 321, "seed for random poses"),
        "n_uniform": (int, 20000, "uniform IoU samples per pose"),
        "n_surface": (int, 20000, "surface IoU samples per pose"),
        "seed": (int, 0, "sampling seed"),
        "bench": (bool, True, "benchmark query throughput"),
        "bench_threads": (int, 1, "threads for the throughput benchmark"),
        "stub_oracle": (bool, False, "score the oracle against itself (sanity)"),
        "out": (str, None, "metrics CSV path"),
        "threads": (int, 0, "torch threads (0 = library default)"),
        "pose_set": (str, "eval", "pose-set name recorded in the CSV"),
    },
    "mesh": {
        "ckpt": (str, None, "checkpoint path"),
        "body": (str, None, "body JSON path"),
        "pose": (str, None, "pose JSON path"),
        "resolution": (int, 64, "marching-cubes grid resolution (>= 16)"),
        "out": (str, None, "output PLY path"),
        "labels_out": (str, "", "sidecar JSON for per-vertex part labels"),
        "threads": (int, 0, "torch threads (0 = library default)"),
    },
    "resolve-self": {
        "ckpt": (str, None, "checkpoint path"),
        "body": (str, None, "body JSON path"),
        "pose": (str, None, "pose JSON path"),
        "out": (str, None, "output pose JSON path"),
        "trace": (str, "", "per-step CSV trace path"),
        "learning_rate": (float, 0.007, "gradient descent rate"),
        "sample_budget": (int, 1300, "overlap sample budget"),
        "max_steps": (int, 200, "step cap"),
        "seed": (int, 0, "sampling seed"),
        "threads": (int, 0, "torch threads (0 = library default)"),
    },
    "resolve-scene": {
        "ckpt": (str, None, "checkpoint path"),
        "body": (str, None, "body JSON path"),
        "pose": (str, None, "pose JSON path"),
        "scan": (str, None, "scan point cloud (PLY or XYZ)"),
        "out": (str, None, "output pose JSON path"),
        "trace": (str, "", "per-step CSV trace path"),
        "weight": (float, 100.0, "collision term weight"),
        "displace": (bool, False, "shift scan points inward along -normals"),
        "displace_seed": (int, 0, "seed for displacement draws"),
        "optimizer": (str, "gd", "gd or lbfgs"),
        "learning_rate": (float, 0.007, "gradient descent rate"),
        "max_steps": (int, 200, "step cap"),
        "seed": (int, 0, "sampling seed"),
        "threads": (int, 0, "torch threads (0 = library default)"),
    },
}

REQUIRED = {
    "synth": ["out"],
    "train": ["body", "out_dir"],
    "eval": ["ckpt", "body", "out"],
    "mesh": ["ckpt", "body", "pose", "out"],
    "resolve-self": ["ckpt", "body", "pose", "out"],
    "resolve-scene": ["ckpt", "body", "pose", "scan", "out"],
}


def _parse_value(kind, raw, key):
    if kind is bool:
        if isinstance(raw, bool):
            return raw
        low = str(raw).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise InputError(f"config key {key!r}: cannot parse boolean {raw!r}")
    try:
        return kind(raw)
    except (TypeError, ValueError) as exc:
        raise InputError(f"config key {key!r}: {exc}") from exc


def _load_config_file(path, schema):
    resolved = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise InputError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in text.split("=", 1))
        if key not in schema:
            raise InputError(f"{path}:{lineno}: unknown config key {key!r}")
        resolved[key] = _parse_value(schema[key][0], raw, key)
    return resolved


def _resolve_config(command, args):
    schema = SCHEMAS[command]
    resolved = {key: default for key, (_, default, _) in schema.items()}
    if args.config:
        resolved.update(_load_config_file(args.config, schema))
    for key in schema:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    missing = [key for key in REQUIRED[command] if not resolved.get(key)]
    if missing:
        raise InputError(f"{command}: missing required option(s): "
                         + ", ".join("--" + m.replace("_", "-") for m in missing))
    return resolved


def _log_run(out_path, command, resolved):
    out_path = Path(out_path)
    run_dir = out_path if out_path.suffix == "" else out_path.parent
    run_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"# partocc {__version__} | torch {torch.__version__} | numpy {np.__version__}",
             f"command = {command}"]
    lines += [f"{key} = {value}" for key, value in sorted(resolved.items())]
    (run_dir / f"resolved_config_{command.replace('-', '_')}.txt").write_text(
        "\n".join(lines) + "\n")


def _set_threads(n):
    if n and n > 0:
        torch.set_num_threads(int(n))


def _load_poses(source, body, count, sigma, seed):
    if source == "random":
        return random_poses(body.num_joints, count, sigma=sigma, seed=seed)
    try:
        doc = json.loads(Path(source).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read poses file {source}: {exc}") from exc
    poses = np.asarray(doc["poses"] if "poses" in doc else doc["pose"],
                       dtype=np.float64)
    if poses.ndim == 2:
        poses = poses[None]
    if poses.ndim != 3 or poses.shape[1:] != (body.num_joints, 3):
        raise InputError(f"poses in {source} must be (P,{body.num_joints},3)")
    return poses


def _load_pose(path, body):
    return _load_poses(path, body, 1, 0.0, 0)[0]


def _save_pose(path, theta):
    Path(path).write_text(json.dumps({"pose": np.asarray(theta).tolist()}))


def _load_trained(cfg):
    loaded = load_body(cfg["body"])
    pbody = loaded.body if isinstance(loaded, CapsuleBody) else loaded
    field, boxes, header, _ = load_checkpoint(cfg["ckpt"])
    mode = header["extra"].get("mode", "parts")
    from .parts import decompose_holistic, decompose_parts
    decomp = decompose_holistic(pbody) if mode == "holistic" else decompose_parts(pbody)
    cloud_points = int(header["extra"].get("train_config", {}).get("cloud_points", 1000))
    state = build_state(field, loaded, decomp=decomp, boxes=boxes,
                        cloud_count=cloud_points)
    return loaded, pbody, state


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg) -> int:
    body = make_capsule_body(cfg["parts"], cfg["seed"], branching=cfg["branching"])
    save_body(cfg["out"], body)
    _log_run(cfg["out"], "synth", cfg)
    print(f"wrote {cfg['out']} (digest {body_digest(body)[:12]})")
    return 0


def cmd_train(cfg) -> int:
    _set_threads(cfg["threads"])
    loaded = load_body(cfg["body"])
    pbody = loaded.body if isinstance(loaded, CapsuleBody) else loaded
    poses = _load_poses(cfg["poses"], pbody, cfg["n_poses"], cfg["pose_sigma"],
                        cfg["pose_seed"])
    if cfg["preset"] == "desk":
        tc = TrainConfig.desk(seed=cfg["seed"])
        n_parts = 1 if cfg["mode"] == "holistic" else pbody.num_joints
        fc = FieldConfig.desk(n_parts)
    elif cfg["preset"] == "paper":
        tc = TrainConfig(seed=cfg["seed"])
        n_parts = 1 if cfg["mode"] == "holistic" else pbody.num_joints
        fc = FieldConfig(num_parts=n_parts)
    else:
        raise InputError(f"unknown preset {cfg['preset']!r}")
    for key in ("learning_rate", "iterations", "batch_size_bodies",
                "queries_per_body", "cloud_points", "checkpoint_every"):
        if cfg[key] is not None and cfg[key] > 0:
            setattr(tc, key, type(getattr(tc, key))(cfg[key]))
    for key in ("latent", "encoder_width", "decoder_width"):
        if cfg[key] is not None and cfg[key] > 0:
            setattr(fc, key, int(cfg[key]))
    tc.__post_init__()

    _log_run(cfg["out_dir"], "train", cfg)
    result = train(loaded, poses, tc, field_config=fc, mode=cfg["mode"],
                   out_dir=cfg["out_dir"], resume_from=cfg["resume"] or None,
                   quiet=cfg["quiet"])
    first, last = result.loss_history[0][1], result.loss_history[-1][1]
    print(f"trained {result.iterations} iterations in {result.seconds:.1f}s; "
          f"loss {first:.5f} -> {last:.5f}; checkpoint {result.checkpoint_path}")
    return 0


def cmd_eval(cfg) -> int:
    _set_threads(cfg["threads"])
    loaded, pbody, state = _load_trained(cfg)
    poses = _load_poses(cfg["poses"], pbody, cfg["n_poses"], cfg["pose_sigma"],
                        cfg["pose_seed"])
    joints = regress_joints(pbody)
    rows = []
    bench = None
    for p, theta in enumerate(poses):
        G = forward_kinematics(pbody.tree, theta, joints)
        refresh_codes(state, G, seed=cfg["seed"] + p)
        if isinstance(loaded, CapsuleBody):
            oracle = CapsuleOracle(loaded, G)
        else:
            from .body import pose_vertices_from_transforms
            oracle = MeshOracle(pose_vertices_from_transforms(pbody, G), pbody.faces)
        predictor = (lambda pts, o=oracle: np.where(o.contains(pts), 1.0, -1.0)) \
            if cfg["stub_oracle"] else state
        report = iou_report(predictor, oracle, n_uniform=cfg["n_uniform"],
                            n_surface=cfg["n_surface"], seed=cfg["seed"] + 17 * p,
                            transforms=G)
        if bench is None and cfg["bench"] and not cfg["stub_oracle"]:
            bench = bench_throughput(state, G, threads=cfg["bench_threads"],
                                     seed=cfg["seed"])
        rows.append((p, report.iou_uniform, report.iou_surface))

    method = "oracle-stub" if cfg["stub_oracle"] else "partocc"
    t_ms = "" if bench is None else f"{bench['ms_per_10k']:.2f}"
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "pose_set", "iou_uniform", "iou_surface", "t_ms"])
        for p, iu, isf in rows:
            writer.writerow([method, f"{cfg['pose_set']}[{p}]", f"{iu:.6f}",
                             f"{isf:.6f}", ""])
        mean_u = float(np.mean([r[1] for r in rows]))
        mean_s = float(np.mean([r[2] for r in rows]))
        writer.writerow([method, cfg["pose_set"], f"{mean_u:.6f}", f"{mean_s:.6f}", t_ms])
    _log_run(cfg["out"], "eval", cfg)
    print(f"mean IoU uniform {mean_u:.4f} surface {mean_s:.4f}"
          + (f"; {t_ms} ms/10k queries" if t_ms else ""))
    return 0


def cmd_mesh(cfg) -> int:
    _set_threads(cfg["threads"])
    loaded, pbody, state = _load_trained(cfg)
    if cfg["resolution"] < 16:
        raise InputError("mesh resolution must be >= 16")
    theta = _load_pose(cfg["pose"], pbody)
    joints = regress_joints(pbody)
    G = forward_kinematics(pbody.tree, theta, joints)
    refresh_codes(state, G)
    mesh = extract_mesh(state, G, resolution=cfg["resolution"])
    save_ply(cfg["out"], mesh.vertices, mesh.faces)
    if cfg["labels_out"]:
        Path(cfg["labels_out"]).write_text(json.dumps(
            {"labels": mesh.labels.tolist()}))
    _log_run(cfg["out"], "mesh", cfg)
    if mesh.is_empty:
        print("warning: field has no surface in bounds; wrote an empty mesh",
              file=sys.stderr)
    print(f"wrote {cfg['out']} ({mesh.vertices.shape[0]} vertices)")
    return 0


def cmd_resolve_self(cfg) -> int:
    _set_threads(cfg["threads"])
    loaded, pbody, state = _load_trained(cfg)
    theta = _load_pose(cfg["pose"], pbody)
    rc = ResolveConfig(learning_rate=cfg["learning_rate"],
                       sample_budget=cfg["sample_budget"],
                       max_steps=cfg["max_steps"], seed=cfg["seed"])
    result = resolve_self_intersections(state, theta, rc)
    _save_pose(cfg["out"], result.theta)
    if cfg["trace"]:
        _write_trace(cfg["trace"], result.trace, ["step", "loss", "n_samples"])
    _log_run(cfg["out"], "resolve-self", cfg)
    print(f"{'converged' if result.converged else 'step cap reached'} "
          f"after {result.steps} steps")
    return 0


def cmd_resolve_scene(cfg) -> int:
    _set_threads(cfg["threads"])
    loaded, pbody, state = _load_trained(cfg)
    theta = _load_pose(cfg["pose"], pbody)
    points, normals = load_scan(cfg["scan"])
    if cfg["displace"]:
        points = displace_scan(points, normals, seed=cfg["displace_seed"])
    rc = ResolveConfig(learning_rate=cfg["learning_rate"],
                       max_steps=cfg["max_steps"], seed=cfg["seed"])
    result = resolve_scene_collisions(state, theta, points, rc,
                                      weight=cfg["weight"],
                                      optimizer=cfg["optimizer"])
    _save_pose(cfg["out"], result.theta)
    if cfg["trace"]:
        _write_trace(cfg["trace"], result.trace, ["step", "loss", "n_penetrating"])
    _log_run(cfg["out"], "resolve-scene", cfg)
    print(f"{'converged' if result.converged else 'step cap reached'} "
          f"after {result.steps} steps")
    return 0


def _write_trace(path, rows, header):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "mesh": cmd_mesh,
    "resolve-self": cmd_resolve_self,
    "resolve-scene": cmd_resolve_scene,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="partocc",
        description="Part-wise articulated occupancy fields: synthesize bodies, "
                    "train, evaluate, extract meshes, and untangle poses.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for command, schema in SCHEMAS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", default=None, help="key=value config file")
        for key, (kind, default, help_text) in schema.items():
            flag = "--" + key.replace("_", "-")
            if kind is bool:
                p.add_argument(flag, action=argparse.BooleanOptionalAction,
                               default=None, help=f"{help_text} (default {default})")
            else:
                p.add_argument(flag, type=kind, default=None,
                               help=f"{help_text} (default {default})")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _resolve_config(args.command, args)
        return COMMANDS[args.command](cfg)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, DivergenceError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


def console_entry():
    sys.exit(main())
