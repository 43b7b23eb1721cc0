"""The tracking loop: pluggable estimator, prior-threaded multi-pass
refinement, hold-last-pose for fixed cameras, and anchor-transfer inference
for moving cameras.

A pass walks the frame sequence once. Within a pass, the prior for frame i
is the pass's own output at frame i-1; in later passes it is the previous
pass's output at frame i, so re-predicting from the first frame starts from
an already-good pose. Occluded blocks are filled by rule: with a fixed
camera the last tracked pose is held bitwise; with a moving camera the pose
is inferred from a visible anchor via rigid anchor transfer, referenced at
the occlusion start.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .camera import CameraIntrinsics, sphere_bbox
from .errors import (
    EmptyCandidates,
    NoObservationsEver,
    NoVisibleAnchor,
    SphereIntersectsImagePlane,
)
from .scene import (
    Observation,
    Provenance,
    Scene,
    TrackedEntry,
    TrackedTrajectory,
)
from .se3 import (
    Pose,
    Rotation,
    anchor_transfer,
    compose,
    pose_from_dict,
    pose_to_dict,
    rotation_angle_between,
)

__all__ = [
    "EstimatorPort",
    "SyntheticEstimator",
    "LogSource",
    "TrackerConfig",
    "PassMetrics",
    "TrackingResult",
    "run_pass",
    "refine_multi_pass",
    "infer_occluded_moving",
    "select_anchor",
    "write_trajectories",
    "read_trajectories",
    "write_pass_metrics_csv",
]

MAX_REFINEMENT_PASSES = 10


class EstimatorPort(Protocol):
    """Anything that yields per-frame observations, optionally prior-guided.

    Implementations must be deterministic for identical (frame, block, prior)
    inputs so multi-pass refinement is reproducible.
    """

    supports_priors: bool

    def estimate(self, frame_index: int, block_id: str, prior: Pose | None) -> Observation:
        ...


def _derived_rng(seed: int, frame_index: int, block_id: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}:{frame_index}:{block_id}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def _unit_vector(rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(3)
    n = np.linalg.norm(v)
    while n < 1e-9:
        v = rng.standard_normal(3)
        n = np.linalg.norm(v)
    return v / n


@dataclass
class SyntheticEstimator:
    """A verifiable stand-in for a neural pose estimator.

    Perturbs the true object->camera pose by a rotation of exactly
    ``sigma_rot`` radians about a random axis and a translation step of
    exactly ``sigma_trans`` meters in a random direction. When a prior within
    ``prior_threshold`` of the truth is supplied, both magnitudes shrink to
    ``sigma * (1 - beta)`` -- the prior-sensitivity that makes re-prediction
    passes improve accuracy. Deterministic per (seed, frame, block): the
    prior changes only the noise magnitude, never the draw.

    Occlusion is scripted: ``occlusions`` maps block id to closed frame
    intervals during which the estimator reports the block invisible.
    """

    scene: Scene
    camera_trajectory: list[Pose]
    sigma_rot: float = 0.0
    sigma_trans: float = 0.0
    beta: float = 0.0
    prior_threshold: tuple[float, float] = (math.radians(15.0), 0.10)
    occlusions: dict[str, list[tuple[int, int]]] = field(default_factory=dict)
    seed: int = 0
    intrinsics: CameraIntrinsics | None = None

    supports_priors: bool = True

    def __post_init__(self) -> None:
        if not (0.0 <= self.beta < 1.0):
            raise ValueError("beta must be in [0, 1)")
        if self.sigma_rot < 0 or self.sigma_trans < 0:
            raise ValueError("noise magnitudes must be non-negative")

    @property
    def n_frames(self) -> int:
        return len(self.camera_trajectory)

    def is_occluded(self, frame_index: int, block_id: str) -> bool:
        return any(a <= frame_index <= b for a, b in self.occlusions.get(block_id, ()))

    def true_pose(self, frame_index: int, block_id: str) -> Pose:
        cam = self.camera_trajectory[frame_index]
        return compose(cam, self.scene.world_poses[block_id])

    def estimate(self, frame_index: int, block_id: str, prior: Pose | None = None) -> Observation:
        if self.is_occluded(frame_index, block_id):
            return Observation(frame_index=frame_index, block_id=block_id, visible=False)
        truth = self.true_pose(frame_index, block_id)
        eff = 1.0
        if prior is not None and self._prior_qualifies(prior, truth):
            eff = 1.0 - self.beta
        rng = _derived_rng(self.seed, frame_index, block_id)
        axis = _unit_vector(rng)
        direction = _unit_vector(rng)
        if self.sigma_rot * eff > 0.0:
            rot = Rotation.from_axis_angle(axis, self.sigma_rot * eff).multiply(truth.rotation)
        else:
            rot = truth.rotation
        trans = truth.translation + direction * (self.sigma_trans * eff)
        pose = Pose(rot, trans, src=block_id, dst=truth.dst)
        confidence = math.exp(-(self.sigma_rot + self.sigma_trans) * eff)
        bbox = None
        if self.intrinsics is not None:
            block = self.scene.block(block_id)
            try:
                bbox = sphere_bbox(pose.translation, block.diameter / 2.0, self.intrinsics)
            except SphereIntersectsImagePlane:
                bbox = None
        return Observation(
            frame_index=frame_index,
            block_id=block_id,
            pose=pose,
            bbox=bbox,
            visible=True,
            confidence=confidence,
        )

    def _prior_qualifies(self, prior: Pose, truth: Pose) -> bool:
        rot_tol, trans_tol = self.prior_threshold
        if rotation_angle_between(prior.rotation, truth.rotation) > rot_tol:
            return False
        return float(np.linalg.norm(prior.translation - truth.translation)) <= trans_tol


class LogSource:
    """Replays a recorded observation log; priors have no effect."""

    supports_priors = False

    def __init__(self, observations):
        self._by_key: dict[tuple[int, str], Observation] = {}
        self.n_frames = 0
        self.block_ids: list[str] = []
        seen: set[str] = set()
        for obs in observations:
            self._by_key[(obs.frame_index, obs.block_id)] = obs
            self.n_frames = max(self.n_frames, obs.frame_index + 1)
            if obs.block_id not in seen:
                seen.add(obs.block_id)
                self.block_ids.append(obs.block_id)

    def estimate(self, frame_index: int, block_id: str, prior: Pose | None = None) -> Observation:
        obs = self._by_key.get((frame_index, block_id))
        if obs is None:
            return Observation(frame_index=frame_index, block_id=block_id, visible=False)
        return obs


@dataclass(frozen=True)
class TrackerConfig:
    """Tracking-run settings.

    ``window`` bounds how many leading frames later passes re-predict
    (the re-prediction range); None means the full sequence.
    """

    mode: str = "fixed_camera"
    refinement_passes: int = 2
    anchor_rule: str = "nearest_at_occlusion_start"
    fixed_anchor_id: str | None = None
    prior_threshold: tuple[float, float] = (math.radians(15.0), 0.10)
    window: int | None = None

    def __post_init__(self) -> None:
        if self.mode not in ("fixed_camera", "moving_camera"):
            raise ValueError(f"unknown mode '{self.mode}'")
        if not (1 <= self.refinement_passes <= MAX_REFINEMENT_PASSES):
            raise ValueError(f"refinement_passes must be in [1, {MAX_REFINEMENT_PASSES}]")
        if self.anchor_rule not in ("nearest_at_occlusion_start", "fixed_id", "highest_confidence"):
            raise ValueError(f"unknown anchor rule '{self.anchor_rule}'")
        if self.anchor_rule == "fixed_id" and self.fixed_anchor_id is None:
            raise ValueError("fixed_id anchor rule requires fixed_anchor_id")


@dataclass(frozen=True)
class PassMetrics:
    pass_n: int
    block_id: str
    mean_rot_err_deg: float
    mean_trans_err_m: float


@dataclass
class TrackingResult:
    trajectories: dict[str, TrackedTrajectory]
    pass_metrics: list[PassMetrics] = field(default_factory=list)


def select_anchor(
    candidates,
    target_id: str,
    scene: Scene,
    rule: str = "nearest_at_occlusion_start",
    confidences: dict[str, float] | None = None,
    fixed_anchor_id: str | None = None,
) -> str:
    """Pick the anchor block used to infer an occluded target.

    nearest_at_occlusion_start minimizes world-frame center distance to the
    target (error amplification grows with distance); ties break to the
    lexicographically smaller id.

    Raises:
        EmptyCandidates: if no candidate is available.
    """
    candidates = sorted(candidates)
    if not candidates:
        raise EmptyCandidates(f"no anchor candidates for '{target_id}'")
    if rule == "fixed_id":
        if fixed_anchor_id in candidates:
            return fixed_anchor_id
        raise EmptyCandidates(f"fixed anchor '{fixed_anchor_id}' not among candidates")
    if rule == "highest_confidence":
        if not confidences:
            return candidates[0]
        return max(candidates, key=lambda c: confidences.get(c, 0.0))
    target_center = scene.world_poses[target_id].translation
    return min(
        candidates,
        key=lambda c: (float(np.linalg.norm(scene.world_poses[c].translation - target_center)), c),
    )


def _estimate_sweep(source, scene, config, n_frames, prev_pass, pass_n):
    """One left-to-right estimation sweep; returns per-block frame entries,
    per-(frame, block) confidences, and visibility flags."""
    entries: dict[str, dict[int, TrackedEntry]] = {b: {} for b in scene.block_ids}
    confidences: dict[tuple[int, str], float] = {}
    refinable = getattr(source, "supports_priors", False)
    window = config.window if (config.window is not None and pass_n > 1) else None
    for i in range(n_frames):
        for block_id in scene.block_ids:
            if window is not None and i >= window:
                # Outside the re-prediction window: carry the previous pass.
                prev = prev_pass[block_id]
                if prev.has_frame(i):
                    entries[block_id][i] = prev.entry_at(i)
                continue
            prior = None
            if prev_pass is not None:
                prev = prev_pass.get(block_id)
                if prev is not None and prev.has_frame(i):
                    prior = prev.pose_at(i)
            elif (i - 1) in entries[block_id]:
                prior = entries[block_id][i - 1].pose
            obs = source.estimate(i, block_id, prior)
            if obs.visible:
                if refinable and pass_n > 1 and prior is not None:
                    prov = Provenance.prior_refined(pass_n)
                else:
                    prov = Provenance.observed()
                entries[block_id][i] = TrackedEntry(obs.pose, prov)
                confidences[(i, block_id)] = obs.confidence
    return entries, confidences


def _fill_held_last(entries: dict[str, dict[int, TrackedEntry]], n_frames: int) -> None:
    """Fixed-camera occlusion rule: hold the last tracked pose bitwise."""
    for block_id, frames in entries.items():
        if not frames:
            continue
        first = min(frames)
        for i in range(first + 1, n_frames):
            if i not in frames:
                frames[i] = TrackedEntry(frames[i - 1].pose, Provenance.held_last())


def infer_occluded_moving(
    entries: dict[str, dict[int, TrackedEntry]],
    scene: Scene,
    n_frames: int,
    anchor_rule: str = "nearest_at_occlusion_start",
    confidences: dict[tuple[int, str], float] | None = None,
    fixed_anchor_id: str | None = None,
) -> None:
    """Fill occlusion gaps (in place) by rigid anchor transfer.

    For a block last seen at frame s and occluded at frame i, the pose is
    anchor_transfer(anchor@s, anchor@i, target@s) with the anchor chosen by
    rule among blocks directly observed at both s and i.

    Raises:
        NoVisibleAnchor: when some occluded frame has no usable anchor.
    """
    confidences = confidences or {}
    directly_seen = {
        block_id: {f for f, e in frames.items() if e.provenance.kind != "anchor_inferred"}
        for block_id, frames in entries.items()
    }
    for block_id in sorted(entries):
        frames = entries[block_id]
        if not frames:
            continue
        first = min(frames)
        i = first + 1
        while i < n_frames:
            if i in frames:
                i += 1
                continue
            occl_start = i - 1  # last tracked frame before the gap
            gap_end = i
            while gap_end < n_frames and gap_end not in frames:
                gap_end += 1
            for j in range(i, gap_end):
                candidates = [
                    other
                    for other in entries
                    if other != block_id
                    and occl_start in directly_seen[other]
                    and j in directly_seen[other]
                ]
                if not candidates:
                    raise NoVisibleAnchor(j)
                anchor_id = select_anchor(
                    candidates,
                    block_id,
                    scene,
                    rule=anchor_rule,
                    confidences={c: confidences.get((j, c), 0.0) for c in candidates},
                    fixed_anchor_id=fixed_anchor_id,
                )
                inferred = anchor_transfer(
                    entries[anchor_id][occl_start].pose,
                    entries[anchor_id][j].pose,
                    frames[occl_start].pose,
                )
                frames[j] = TrackedEntry(inferred, Provenance.anchor_inferred(anchor_id))
            i = gap_end


def _finalize(entries: dict[str, dict[int, TrackedEntry]]) -> dict[str, TrackedTrajectory]:
    out = {}
    for block_id, frames in entries.items():
        if not frames:
            raise NoObservationsEver(
                f"block '{block_id}' was never observed and could not be inferred"
            )
        first, last = min(frames), max(frames)
        missing = [i for i in range(first, last + 1) if i not in frames]
        if missing:
            raise NoObservationsEver(
                f"block '{block_id}' has untracked frames {missing[:5]} inside its range"
            )
        out[block_id] = TrackedTrajectory(
            block_id, first, tuple(frames[i] for i in range(first, last + 1))
        )
    return out


def run_pass(
    source,
    scene: Scene,
    config: TrackerConfig,
    priors: dict[str, TrackedTrajectory] | None = None,
    n_frames: int | None = None,
    pass_n: int = 1,
) -> dict[str, TrackedTrajectory]:
    """One tracking pass over the full frame sequence.

    ``source`` is an estimator port or a LogSource; ``priors`` maps block ids
    to the previous pass's trajectories (absent on the first pass, where the
    prior for frame i is this pass's own frame i-1 output).

    Raises:
        NoObservationsEver: if a block is never observed nor inferable.
        NoVisibleAnchor: moving-camera mode, when an occluded frame has no
            visible anchor.
    """
    if n_frames is None:
        n_frames = getattr(source, "n_frames", None)
        if n_frames is None:
            raise ValueError("n_frames is required when the source does not declare it")
    if n_frames < 1:
        raise ValueError("need at least one frame")
    if not scene.blocks:
        raise ValueError("need at least one block")
    entries, confidences = _estimate_sweep(source, scene, config, n_frames, priors, pass_n)
    if config.mode == "fixed_camera":
        _fill_held_last(entries, n_frames)
    else:
        infer_occluded_moving(
            entries,
            scene,
            n_frames,
            anchor_rule=config.anchor_rule,
            confidences=confidences,
            fixed_anchor_id=config.fixed_anchor_id,
        )
    return _finalize(entries)


def refine_multi_pass(
    source,
    scene: Scene,
    config: TrackerConfig,
    n_frames: int | None = None,
    truth: dict[str, list[Pose]] | None = None,
) -> TrackingResult:
    """Run ``config.refinement_passes`` passes, threading priors between them.

    When ``truth`` (block id -> per-frame object->camera poses) is supplied,
    per-pass mean rotation/translation errors are recorded per block.
    """
    result = TrackingResult(trajectories={})
    prev: dict[str, TrackedTrajectory] | None = None
    for pass_n in range(1, config.refinement_passes + 1):
        prev = run_pass(source, scene, config, priors=prev, n_frames=n_frames, pass_n=pass_n)
        if truth is not None:
            result.pass_metrics.extend(_pass_metrics(pass_n, prev, truth))
    result.trajectories = prev
    return result


def _pass_metrics(pass_n, trajectories, truth):
    rows = []
    for block_id in sorted(trajectories):
        traj = trajectories[block_id]
        true_poses = truth[block_id]
        rot_errs, trans_errs = [], []
        for i in range(traj.first_frame, traj.last_frame + 1):
            got = traj.pose_at(i)
            want = true_poses[i]
            rot_errs.append(rotation_angle_between(got.rotation, want.rotation))
            trans_errs.append(float(np.linalg.norm(got.translation - want.translation)))
        rows.append(
            PassMetrics(
                pass_n=pass_n,
                block_id=block_id,
                mean_rot_err_deg=math.degrees(float(np.mean(rot_errs))),
                mean_trans_err_m=float(np.mean(trans_errs)),
            )
        )
    return rows


def write_pass_metrics_csv(path: str | Path, rows: list[PassMetrics]) -> None:
    with open(path, "w") as f:
        f.write("pass,block,mean_rot_err_deg,mean_trans_err_m\n")
        for r in rows:
            f.write(f"{r.pass_n},{r.block_id},{r.mean_rot_err_deg!r},{r.mean_trans_err_m!r}\n")


def write_trajectories(path: str | Path, trajectories: dict[str, TrackedTrajectory]) -> None:
    """JSON-lines: one entry per (block, frame) with pose and provenance."""
    import json

    with open(path, "w") as f:
        for block_id in sorted(trajectories):
            traj = trajectories[block_id]
            for i in range(traj.first_frame, traj.last_frame + 1):
                entry = traj.entry_at(i)
                f.write(
                    json.dumps(
                        {
                            "block": block_id,
                            "frame": i,
                            "pose": pose_to_dict(entry.pose),
                            "provenance": entry.provenance.to_str(),
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )


def read_trajectories(path: str | Path) -> dict[str, TrackedTrajectory]:
    import json

    entries: dict[str, dict[int, TrackedEntry]] = {}
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            d = json.loads(line)
            entries.setdefault(d["block"], {})[int(d["frame"])] = TrackedEntry(
                pose_from_dict(d["pose"]), Provenance.from_str(d["provenance"])
            )
    return _finalize(entries)
