"""Batch entry points for every pipeline stage and the two scripted
experiment reproductions.

Every subcommand is deterministic given --seed: outputs carry no timestamps
or absolute paths, JSON is key-sorted, and images are bit-exact PPM, so two
runs with the same arguments produce byte-identical output trees. Outputs
land under --out together with a manifest.json listing artifacts and seeds.

Exit codes: 0 ok, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import cloud as cloud_mod
from .camera import CameraIntrinsics
from .errors import BlockwindError
from .render import (
    field_heatmap_image,
    line_chart_image,
    render_tracked_frame,
    render_wind_overlay,
    write_image,
)
from .scene import Scene, read_observation_log, write_observation_log
from .se3 import Pose, pose_from_dict, pose_to_dict, compose
from .synth import (
    amplification_study,
    evaluate,
    fixed_camera_trajectory,
    generate_observations,
    generate_scene,
    orbit_trajectory,
)
from .tracking import (
    LogSource,
    SyntheticEstimator,
    TrackerConfig,
    refine_multi_pass,
    read_trajectories,
    write_pass_metrics_csv,
    write_trajectories,
)
from .wind import (
    GridSpec,
    read_field,
    run_to_steady,
    voxelize,
    write_field,
    write_field_csv,
)

DEFAULT_INTRINSICS = CameraIntrinsics(
    fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480
)

# Dotted-key registry for config files; flags override these.
KNOWN_CONFIG_KEYS = {
    "scene.blocks",
    "scene.layout",
    "camera.kind",
    "camera.frames",
    "camera.orbit_radius",
    "camera.height",
    "camera.span_deg",
    "estimator.sigma_rot_deg",
    "estimator.sigma_trans_m",
    "estimator.beta",
    "estimator.prior_rot_deg",
    "estimator.prior_trans_m",
    "tracker.mode",
    "tracker.passes",
    "tracker.anchor_rule",
    "tracker.fixed_anchor_id",
    "tracker.window",
    "study.sigma_deg",
    "study.distances",
    "study.trials",
    "wind.nx",
    "wind.ny",
    "wind.dx",
    "wind.tau",
    "wind.inlet",
    "wind.slice_height",
    "wind.origin_x",
    "wind.origin_y",
    "wind.tol",
    "wind.max_iters",
    "wind.physical_inlet_speed",
    "render.alpha",
    "render.frames",
}


class UsageError(Exception):
    pass


class RunConfig:
    """Dotted-key settings from an optional JSON file; flags override."""

    def __init__(self, values: dict | None = None):
        self.values = dict(values or {})
        unknown = set(self.values) - KNOWN_CONFIG_KEYS
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")

    @classmethod
    def from_file(cls, path: str | None) -> RunConfig:
        if path is None:
            return cls({})
        try:
            return cls(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {path}: {e}") from None

    def resolve(self, flag_value, key: str, default):
        """Flag (when given) beats config file beats default."""
        if flag_value is not None:
            return flag_value
        return self.values.get(key, default)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _write_manifest(out: Path, command: str, seeds: dict, config: dict) -> None:
    artifacts = sorted(
        str(p.relative_to(out))
        for p in out.rglob("*")
        if p.is_file() and p.name != "manifest.json"
    )
    _write_json(
        out / "manifest.json",
        {"command": command, "seeds": seeds, "config": config, "artifacts": artifacts},
    )


def _load_intrinsics(path: str | None) -> CameraIntrinsics:
    if path is None:
        return DEFAULT_INTRINSICS
    return CameraIntrinsics.from_json(path)


def _write_camera(path: Path, trajectory) -> None:
    with open(path, "w") as f:
        for pose in trajectory.poses:
            f.write(json.dumps(pose_to_dict(pose), sort_keys=True) + "\n")


def _read_camera(path: Path) -> list[Pose]:
    poses = []
    with open(path) as f:
        for line in f:
            if line.strip():
                poses.append(pose_from_dict(json.loads(line)))
    return poses


def _parse_occlusions(specs: list[str] | None) -> dict[str, list[tuple[int, int]]]:
    """Parse --occlude block:start-end items."""
    out: dict[str, list[tuple[int, int]]] = {}
    for item in specs or []:
        try:
            block, interval = item.split(":")
            a, b = interval.split("-")
            out.setdefault(block, []).append((int(a), int(b)))
        except ValueError:
            raise UsageError(f"bad --occlude '{item}', expected block:start-end") from None
    return out


def _make_trajectory(kind, frames, cfg):
    if kind == "orbit":
        return orbit_trajectory(
            frames,
            orbit_radius=float(cfg.resolve(None, "camera.orbit_radius", 1.2)),
            height=float(cfg.resolve(None, "camera.height", 0.7)),
            angular_span=math.radians(float(cfg.resolve(None, "camera.span_deg", 120.0))),
        )
    if kind == "fixed":
        return fixed_camera_trajectory(frames)
    raise UsageError(f"unknown camera kind '{kind}'")


def _grid_spec_from(cfg: RunConfig, args, scene: Scene | None = None) -> GridSpec:
    nx = int(cfg.resolve(getattr(args, "nx", None), "wind.nx", 128))
    ny = int(cfg.resolve(getattr(args, "ny", None), "wind.ny", 64))
    dx = float(cfg.resolve(getattr(args, "dx", None), "wind.dx", 0.01))
    origin_x = cfg.resolve(None, "wind.origin_x", None)
    origin_y = cfg.resolve(None, "wind.origin_y", None)
    if origin_x is None:
        origin_x = -nx * dx / 2.0
    if origin_y is None:
        origin_y = -ny * dx / 2.0
    return GridSpec(
        nx=nx,
        ny=ny,
        dx=dx,
        slice_height=float(cfg.resolve(None, "wind.slice_height", 0.0075)),
        inlet_velocity=float(cfg.resolve(None, "wind.inlet", 0.05)),
        tau=float(cfg.resolve(None, "wind.tau", 0.9)),
        origin_x=float(origin_x),
        origin_y=float(origin_y),
        physical_inlet_speed=float(cfg.resolve(None, "wind.physical_inlet_speed", 1.0)),
    )


# -- subcommands ---------------------------------------------------------------


def cmd_normalize(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    cloud = cloud_mod.load_cloud(args.cloud)
    if args.crop_box:
        box = json.loads(Path(args.crop_box).read_text())
        cloud = cloud_mod.crop(cloud, box["min"], box["max"])
    normalized, params = cloud_mod.normalize(cloud)
    cloud_mod.save_cloud(normalized, out / "normalized.ply", binary=args.binary)
    _write_json(out / "normalization.json", params.to_json_dict())
    _write_manifest(out, "normalize", {}, {"crop_box": bool(args.crop_box)})
    return 0


def cmd_synth(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    seed = int(args.seed)
    n_blocks = int(cfg.resolve(args.blocks, "scene.blocks", 3))
    layout = cfg.resolve(args.layout, "scene.layout", "row")
    frames = int(cfg.resolve(args.frames, "camera.frames", 60))
    camera_kind = cfg.resolve(args.camera, "camera.kind", "orbit")
    sigma_rot = math.radians(float(cfg.resolve(args.sigma_deg, "estimator.sigma_rot_deg", 0.0)))
    sigma_trans = float(cfg.resolve(args.sigma_trans, "estimator.sigma_trans_m", 0.0))
    scene = generate_scene(n_blocks, layout, seed=seed)
    trajectory = _make_trajectory(camera_kind, frames, cfg)
    occlusions = _parse_occlusions(args.occlude)
    estimator = SyntheticEstimator(
        scene,
        list(trajectory.poses),
        sigma_rot=sigma_rot,
        sigma_trans=sigma_trans,
        occlusions=occlusions,
        seed=seed,
        intrinsics=_load_intrinsics(args.intrinsics),
    )
    observations = generate_observations(scene, trajectory, estimator)
    _write_json(out / "scene.json", scene.to_json_dict())
    write_observation_log(out / "observations.jsonl", scene, observations)
    _write_camera(out / "camera.jsonl", trajectory)
    truth = {
        b: [compose(cam, scene.world_poses[b]) for cam in trajectory.poses]
        for b in scene.block_ids
    }
    with open(out / "truth.jsonl", "w") as f:
        for b in sorted(truth):
            for i, pose in enumerate(truth[b]):
                f.write(
                    json.dumps(
                        {"block": b, "frame": i, "pose": pose_to_dict(pose)}, sort_keys=True
                    )
                    + "\n"
                )
    _write_manifest(
        out,
        "synth",
        {"seed": seed},
        {
            "blocks": n_blocks,
            "layout": layout,
            "frames": frames,
            "camera": camera_kind,
            "sigma_rot_deg": math.degrees(sigma_rot),
            "sigma_trans_m": sigma_trans,
        },
    )
    return 0


def _read_truth(path: Path) -> dict[str, list[Pose]]:
    rows: dict[str, dict[int, Pose]] = {}
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            d = json.loads(line)
            rows.setdefault(d["block"], {})[int(d["frame"])] = pose_from_dict(d["pose"])
    return {b: [frames[i] for i in sorted(frames)] for b, frames in rows.items()}


def cmd_track(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    scene, observations = read_observation_log(args.log)
    source = LogSource(observations)
    config = TrackerConfig(
        mode=cfg.resolve(args.mode, "tracker.mode", "fixed_camera"),
        refinement_passes=int(cfg.resolve(args.passes, "tracker.passes", 2)),
        anchor_rule=cfg.resolve(args.anchor_rule, "tracker.anchor_rule", "nearest_at_occlusion_start"),
        fixed_anchor_id=cfg.resolve(None, "tracker.fixed_anchor_id", None),
        window=cfg.resolve(None, "tracker.window", None),
    )
    truth = _read_truth(Path(args.truth)) if args.truth else None
    result = refine_multi_pass(source, scene, config, truth=truth)
    write_trajectories(out / "trajectories.jsonl", result.trajectories)
    if result.pass_metrics:
        write_pass_metrics_csv(out / "metrics.csv", result.pass_metrics)
    _write_manifest(
        out, "track", {}, {"mode": config.mode, "passes": config.refinement_passes}
    )
    return 0


def cmd_study(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    seed = int(args.seed or 0)
    sigma_deg = float(cfg.resolve(args.sigma_deg, "study.sigma_deg", 1.0))
    distances = [
        float(v)
        for v in str(cfg.resolve(args.distances, "study.distances", "0.1,0.2,0.4")).split(",")
    ]
    trials = int(cfg.resolve(args.trials, "study.trials", 500))
    report = amplification_study(
        distances, sigma_rot=math.radians(sigma_deg), trials=trials, seed=seed
    )
    report.to_csv(out / "amplification.csv")
    chart = line_chart_image(
        distances,
        {
            "empirical": [r.mean_trans_err_m for r in report.rows],
            "predicted": [r.predicted_err_m for r in report.rows],
        },
    )
    write_image(chart, out / "amplification.ppm")
    _write_manifest(
        out,
        "study",
        {"seed": seed},
        {"sigma_deg": sigma_deg, "distances": distances, "trials": trials},
    )
    return 0


def cmd_wind(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    scene = Scene.from_json_dict(json.loads(Path(args.scene).read_text()))
    spec = _grid_spec_from(cfg, args, scene)
    mask = voxelize(scene, spec)
    field = run_to_steady(
        mask,
        spec,
        tol=float(cfg.resolve(None, "wind.tol", 1e-4)),
        max_iters=int(cfg.resolve(None, "wind.max_iters", 20_000)),
    )
    write_field(out / "field.wnd", field, spec)
    if spec.nx * spec.ny <= 64 * 64:
        write_field_csv(out / "field.csv", field, spec)
    write_image(field_heatmap_image(field, spec, mask), out / "heatmap.ppm")
    _write_manifest(
        out,
        "wind",
        {},
        {"nx": spec.nx, "ny": spec.ny, "converged": field.converged, "iterations": field.iterations},
    )
    return 0


def cmd_overlay(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    scene = Scene.from_json_dict(json.loads(Path(args.scene).read_text()))
    trajectories = read_trajectories(args.trajectories)
    cameras = _read_camera(Path(args.camera_file))
    k = _load_intrinsics(args.intrinsics)
    field = spec = mask = None
    if args.field:
        field, spec = read_field(args.field)
        mask = voxelize(scene, spec)
    alpha = float(cfg.resolve(args.alpha, "render.alpha", 0.55))
    frames = range(len(cameras))
    if args.frames:
        frames = [int(v) for v in args.frames.split(",")]
    frame_dir = out / "frames"
    frame_dir.mkdir(exist_ok=True)
    for i in frames:
        img = render_tracked_frame(trajectories, i, scene, k)
        if field is not None:
            img = render_wind_overlay(field, spec, cameras[i], k, img, alpha, mask=mask)
        write_image(img, frame_dir / f"frame_{i:05d}.ppm")
    _write_manifest(out, "overlay", {}, {"alpha": alpha, "frames": list(frames)})
    return 0


def cmd_serve(args, cfg: RunConfig) -> int:
    from .service import serve_forever

    serve_forever(
        host=args.host,
        port=args.port,
        snapshot_path=args.snapshot,
        static_dir=args.static,
    )
    return 0


def _render_experiment_frames(out, trajectories, scene, k, cameras, field, spec, mask, alpha, n=4):
    frame_dir = out / "frames"
    frame_dir.mkdir(exist_ok=True)
    picks = np.linspace(0, len(cameras) - 1, n).astype(int)
    for i in picks:
        img = render_tracked_frame(trajectories, int(i), scene, k)
        if field is not None:
            img = render_wind_overlay(field, spec, cameras[int(i)], k, img, alpha, mask=mask)
        write_image(img, frame_dir / f"frame_{int(i):05d}.ppm")


def cmd_repro_exp1(args, cfg: RunConfig) -> int:
    """Fixed camera: blocks enter one after another; occlusion holds the
    last pose; two refinement passes improve accuracy."""
    out = _out_dir(args)
    seed = int(args.seed or 0)
    frames = 60
    scene = generate_scene(3, "row", seed=seed)
    trajectory = fixed_camera_trajectory(frames)
    # blue is on the table from the start; red and yellow enter later
    occlusions = {
        "red": [(0, frames // 3 - 1)],
        "yellow": [(0, 2 * frames // 3 - 1)],
        "blue": [(int(frames * 0.75), int(frames * 0.85))],
    }
    estimator = SyntheticEstimator(
        scene,
        list(trajectory.poses),
        sigma_rot=math.radians(2.0),
        sigma_trans=0.004,
        beta=0.5,
        occlusions=occlusions,
        seed=seed,
        intrinsics=DEFAULT_INTRINSICS,
    )
    observations = generate_observations(scene, trajectory, estimator)
    write_observation_log(out / "observations.jsonl", scene, observations)
    truth = {
        b: [compose(cam, scene.world_poses[b]) for cam in trajectory.poses]
        for b in scene.block_ids
    }
    config = TrackerConfig(mode="fixed_camera", refinement_passes=2)
    result = refine_multi_pass(estimator, scene, config, truth=truth)
    write_trajectories(out / "trajectories.jsonl", result.trajectories)
    write_pass_metrics_csv(out / "metrics.csv", result.pass_metrics)
    report = evaluate(result.trajectories, truth, scene)
    _write_json(
        out / "evaluation.json",
        {
            "aggregate": report.aggregate.__dict__,
            "per_block": {b: m.__dict__ for b, m in report.per_block.items()},
        },
    )
    _write_json(out / "scene.json", scene.to_json_dict())
    _render_experiment_frames(
        out, result.trajectories, scene, DEFAULT_INTRINSICS,
        list(trajectory.poses), None, None, None, 0.0,
    )
    _write_manifest(out, "repro-exp1", {"seed": seed}, {"frames": frames})
    return 0


def cmd_repro_exp2(args, cfg: RunConfig) -> int:
    """Moving camera: blue is occluded mid-orbit and inferred from the red
    anchor; the recovered scene drives a wind solve overlaid on the frames."""
    out = _out_dir(args)
    seed = int(args.seed or 0)
    frames = 60
    scene = generate_scene(3, "row", seed=seed)
    trajectory = orbit_trajectory(frames, orbit_radius=1.2, height=0.7,
                                  angular_span=math.radians(120.0))
    occlusions = {"blue": [(frames // 3, 2 * frames // 3)]}
    estimator = SyntheticEstimator(
        scene,
        list(trajectory.poses),
        sigma_rot=math.radians(1.0),
        sigma_trans=0.002,
        beta=0.5,
        occlusions=occlusions,
        seed=seed,
        intrinsics=DEFAULT_INTRINSICS,
    )
    observations = generate_observations(scene, trajectory, estimator)
    write_observation_log(out / "observations.jsonl", scene, observations)
    truth = {
        b: [compose(cam, scene.world_poses[b]) for cam in trajectory.poses]
        for b in scene.block_ids
    }
    config = TrackerConfig(mode="moving_camera", refinement_passes=2)
    result = refine_multi_pass(estimator, scene, config, truth=truth)
    write_trajectories(out / "trajectories.jsonl", result.trajectories)
    write_pass_metrics_csv(out / "metrics.csv", result.pass_metrics)
    report = evaluate(result.trajectories, truth, scene)
    _write_json(
        out / "evaluation.json",
        {
            "aggregate": report.aggregate.__dict__,
            "per_block": {b: m.__dict__ for b, m in report.per_block.items()},
        },
    )
    _write_json(out / "scene.json", scene.to_json_dict())
    spec = _grid_spec_from(cfg, args, scene)
    mask = voxelize(scene, spec)
    field = run_to_steady(mask, spec, tol=1e-4, max_iters=20_000)
    write_field(out / "field.wnd", field, spec)
    write_image(field_heatmap_image(field, spec, mask), out / "heatmap.ppm")
    _write_camera(out / "camera.jsonl", trajectory)
    _render_experiment_frames(
        out, result.trajectories, scene, DEFAULT_INTRINSICS,
        list(trajectory.poses), field, spec, mask, 0.55,
    )
    _write_manifest(
        out,
        "repro-exp2",
        {"seed": seed},
        {"frames": frames, "wind_converged": field.converged},
    )
    return 0


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blockwind",
        description="Block-scene pose tracking coupled to a desk-scale wind solver.",
    )
    parser.add_argument("--config", help="JSON config file with dotted keys")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("normalize", help="crop and unit-sphere-normalize a PLY cloud")
    p.add_argument("--cloud", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--crop-box", help='JSON file {"min": [..], "max": [..]}')
    p.add_argument("--binary", action="store_true", help="write binary PLY")
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser("synth", help="generate a scene and a synthetic detection log")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--blocks", type=int)
    p.add_argument("--layout", choices=["row", "stack", "random"])
    p.add_argument("--frames", type=int)
    p.add_argument("--camera", choices=["orbit", "fixed"])
    p.add_argument("--sigma-deg", type=float, dest="sigma_deg")
    p.add_argument("--sigma-trans", type=float, dest="sigma_trans")
    p.add_argument("--occlude", action="append", help="block:start-end (repeatable)")
    p.add_argument("--intrinsics", help="intrinsics JSON file")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("track", help="track an observation log into trajectories")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["fixed_camera", "moving_camera"])
    p.add_argument("--passes", type=int)
    p.add_argument("--anchor-rule", dest="anchor_rule",
                   choices=["nearest_at_occlusion_start", "fixed_id", "highest_confidence"])
    p.add_argument("--truth", help="truth.jsonl for per-pass metrics")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("study", help="anchor-distance error amplification study")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma-deg", type=float, dest="sigma_deg")
    p.add_argument("--distances", help="comma-separated meters")
    p.add_argument("--trials", type=int)
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("wind", help="solve the wind field over a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--nx", type=int)
    p.add_argument("--ny", type=int)
    p.add_argument("--dx", type=float)
    p.set_defaults(func=cmd_wind)

    p = sub.add_parser("overlay", help="render tracked frames with a wind overlay")
    p.add_argument("--scene", required=True)
    p.add_argument("--trajectories", required=True)
    p.add_argument("--camera-file", dest="camera_file", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--field", help="field.wnd to composite")
    p.add_argument("--alpha", type=float)
    p.add_argument("--frames", help="comma-separated frame indices")
    p.add_argument("--intrinsics")
    p.set_defaults(func=cmd_overlay)

    p = sub.add_parser("repro-exp1", help="fixed-camera experiment reproduction")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_repro_exp1)

    p = sub.add_parser("repro-exp2", help="moving-camera experiment reproduction")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_repro_exp2)

    p = sub.add_parser("serve", help="start the local design-loop service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7780)
    p.add_argument("--snapshot", help="JSON snapshot path (saved on shutdown)")
    p.add_argument("--static", help="static bundle directory served at /")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = RunConfig.from_file(args.config)
        return args.func(args, cfg)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except BlockwindError as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1
    except OSError as e:
        print(json.dumps({"error": "IoError", "message": str(e)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
