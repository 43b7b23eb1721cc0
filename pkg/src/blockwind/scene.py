"""The block scene: geometry, ground truth, observations, trajectories.

Ground-truth block poses live in the world frame; estimator output lives in
the camera frame. Observation logs are JSON-lines files (one scene header
line, then one observation per line) so real estimator output can be ingested
without linking any estimation code.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .camera import BoundingBox
from .se3 import Pose, pose_from_dict, pose_to_dict

__all__ = [
    "ColorTag",
    "Block",
    "Scene",
    "Observation",
    "Provenance",
    "TrackedEntry",
    "TrackedTrajectory",
    "validate_scene",
    "obb_overlap",
    "write_observation_log",
    "read_observation_log",
]

# Default half extents: a standard Jenga block (75 x 25 x 15 mm).
JENGA_HALF_EXTENTS = (0.0375, 0.0125, 0.0075)


class ColorTag(str, Enum):
    BLUE = "blue"
    RED = "red"
    YELLOW = "yellow"
    OTHER = "other"


@dataclass(frozen=True)
class Block:
    """A rigid box with an id, half extents in meters, and a color tag.

    ``diameter`` is the bounding-sphere diameter of the box,
    2 * ||half_extents||; it is derived unless explicitly provided, in which
    case it must agree with the geometry.
    """

    id: str
    half_extents: NDArray[np.float64] = field(default_factory=lambda: np.array(JENGA_HALF_EXTENTS))
    color_tag: ColorTag = ColorTag.OTHER
    diameter: float | None = None

    def __post_init__(self) -> None:
        he = np.asarray(self.half_extents, dtype=np.float64).reshape(3)
        if not (he > 0).all():
            raise ValueError("half_extents must be positive componentwise")
        object.__setattr__(self, "half_extents", he)
        he.setflags(write=False)
        derived = 2.0 * float(np.linalg.norm(he))
        if self.diameter is None:
            object.__setattr__(self, "diameter", derived)
        elif abs(self.diameter - derived) > 1e-9:
            raise ValueError(
                f"diameter {self.diameter} inconsistent with half_extents (expect {derived})"
            )

    def corners(self) -> NDArray[np.float64]:
        """The 8 box corners in the object frame, (8, 3)."""
        h = self.half_extents
        signs = np.array(
            [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
            dtype=np.float64,
        )
        return signs * h

    def to_json_dict(self) -> dict:
        return {
            "id": self.id,
            "half_extents": [float(v) for v in self.half_extents],
            "color_tag": self.color_tag.value,
            "diameter": float(self.diameter),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> Block:
        return cls(
            id=str(d["id"]),
            half_extents=np.asarray(d["half_extents"], dtype=np.float64),
            color_tag=ColorTag(d.get("color_tag", "other")),
            diameter=d.get("diameter"),
        )


@dataclass(frozen=True)
class Scene:
    """Blocks plus one object->world pose per block."""

    blocks: tuple[Block, ...]
    world_poses: dict[str, Pose]

    def __post_init__(self) -> None:
        object.__setattr__(self, "blocks", tuple(self.blocks))
        ids = [b.id for b in self.blocks]
        if len(set(ids)) != len(ids):
            raise ValueError("block ids must be unique")
        missing = [i for i in ids if i not in self.world_poses]
        if missing:
            raise ValueError(f"blocks without world poses: {missing}")

    def block(self, block_id: str) -> Block:
        for b in self.blocks:
            if b.id == block_id:
                return b
        raise KeyError(block_id)

    @property
    def block_ids(self) -> list[str]:
        return [b.id for b in self.blocks]

    def with_pose(self, block_id: str, pose: Pose) -> Scene:
        """New scene version with one block's world pose replaced."""
        if block_id not in self.world_poses:
            raise KeyError(block_id)
        poses = dict(self.world_poses)
        poses[block_id] = pose
        return Scene(self.blocks, poses)

    def to_json_dict(self) -> dict:
        return {
            "blocks": [b.to_json_dict() for b in self.blocks],
            "world_poses": {k: pose_to_dict(p) for k, p in sorted(self.world_poses.items())},
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> Scene:
        return cls(
            blocks=tuple(Block.from_json_dict(b) for b in d["blocks"]),
            world_poses={k: pose_from_dict(p) for k, p in d["world_poses"].items()},
        )


@dataclass(frozen=True)
class Observation:
    """Per-frame estimator output for one block.

    Invariants: a visible observation carries a pose, and confidence is
    present exactly when a pose is.
    """

    frame_index: int
    block_id: str
    pose: Pose | None = None
    bbox: BoundingBox | None = None
    visible: bool = False
    confidence: float | None = None

    def __post_init__(self) -> None:
        if self.visible and self.pose is None:
            raise ValueError("visible observation must carry a pose")
        if (self.confidence is None) != (self.pose is None):
            raise ValueError("confidence must be present exactly when pose is")
        if self.confidence is not None and not (0.0 <= self.confidence <= 1.0):
            raise ValueError("confidence must be in [0, 1]")

    def to_json_dict(self) -> dict:
        d: dict = {"frame": self.frame_index, "block": self.block_id, "visible": self.visible}
        if self.pose is not None:
            d["pose"] = pose_to_dict(self.pose)
            d["confidence"] = self.confidence
        if self.bbox is not None:
            d["bbox"] = [self.bbox.min_x, self.bbox.min_y, self.bbox.max_x, self.bbox.max_y]
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> Observation:
        bbox = None
        if "bbox" in d:
            bbox = BoundingBox(*[float(v) for v in d["bbox"]])
        return cls(
            frame_index=int(d["frame"]),
            block_id=str(d["block"]),
            pose=pose_from_dict(d["pose"]) if "pose" in d else None,
            bbox=bbox,
            visible=bool(d["visible"]),
            confidence=d.get("confidence"),
        )


class Provenance:
    """Which rule produced a tracked pose entry.

    One of: observed, held_last, anchor_inferred(anchor_id),
    prior_refined(pass_n).
    """

    __slots__ = ("kind", "anchor_id", "pass_n")

    def __init__(self, kind: str, anchor_id: str | None = None, pass_n: int | None = None):
        if kind not in ("observed", "held_last", "anchor_inferred", "prior_refined"):
            raise ValueError(f"unknown provenance kind '{kind}'")
        if (kind == "anchor_inferred") != (anchor_id is not None):
            raise ValueError("anchor_id is required exactly for anchor_inferred")
        if (kind == "prior_refined") != (pass_n is not None):
            raise ValueError("pass_n is required exactly for prior_refined")
        self.kind = kind
        self.anchor_id = anchor_id
        self.pass_n = pass_n

    @classmethod
    def observed(cls) -> Provenance:
        return cls("observed")

    @classmethod
    def held_last(cls) -> Provenance:
        return cls("held_last")

    @classmethod
    def anchor_inferred(cls, anchor_id: str) -> Provenance:
        return cls("anchor_inferred", anchor_id=anchor_id)

    @classmethod
    def prior_refined(cls, pass_n: int) -> Provenance:
        return cls("prior_refined", pass_n=pass_n)

    def to_str(self) -> str:
        if self.kind == "anchor_inferred":
            return f"anchor_inferred({self.anchor_id})"
        if self.kind == "prior_refined":
            return f"prior_refined({self.pass_n})"
        return self.kind

    @classmethod
    def from_str(cls, s: str) -> Provenance:
        if s.startswith("anchor_inferred(") and s.endswith(")"):
            return cls.anchor_inferred(s[len("anchor_inferred(") : -1])
        if s.startswith("prior_refined(") and s.endswith(")"):
            return cls.prior_refined(int(s[len("prior_refined(") : -1]))
        return cls(s)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Provenance):
            return NotImplemented
        return (self.kind, self.anchor_id, self.pass_n) == (
            other.kind,
            other.anchor_id,
            other.pass_n,
        )

    def __hash__(self) -> int:
        return hash((self.kind, self.anchor_id, self.pass_n))

    def __repr__(self) -> str:
        return f"Provenance({self.to_str()})"


@dataclass(frozen=True)
class TrackedEntry:
    pose: Pose
    provenance: Provenance


@dataclass(frozen=True)
class TrackedTrajectory:
    """Per-frame tracked poses for one block, contiguous from first_frame."""

    block_id: str
    first_frame: int
    entries: tuple[TrackedEntry, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))

    @property
    def last_frame(self) -> int:
        return self.first_frame + len(self.entries) - 1

    def has_frame(self, frame_index: int) -> bool:
        return self.first_frame <= frame_index <= self.last_frame

    def entry_at(self, frame_index: int) -> TrackedEntry:
        if not self.has_frame(frame_index):
            raise IndexError(
                f"frame {frame_index} outside tracked range "
                f"[{self.first_frame}, {self.last_frame}] of block '{self.block_id}'"
            )
        return self.entries[frame_index - self.first_frame]

    def pose_at(self, frame_index: int) -> Pose:
        return self.entry_at(frame_index).pose


def obb_overlap(
    half_a, pose_a: Pose, half_b, pose_b: Pose, tol: float = 1e-9
) -> bool:
    """Separating-axis interpenetration test for two oriented boxes.

    Touching contact (shared face/edge) does not count as overlap. Poses are
    object->world for each box.
    """
    ra = np.asarray(half_a, dtype=np.float64)
    rb = np.asarray(half_b, dtype=np.float64)
    a_mat = pose_a.rotation.as_matrix()
    b_mat = pose_b.rotation.as_matrix()
    r = a_mat.T @ b_mat
    t = a_mat.T @ (pose_b.translation - pose_a.translation)
    abs_r = np.abs(r)

    # Face axes of A and of B.
    for i in range(3):
        if abs(t[i]) >= ra[i] + float(abs_r[i] @ rb) - tol:
            return False
    for j in range(3):
        if abs(float(t @ r[:, j])) >= float(ra @ abs_r[:, j]) + rb[j] - tol:
            return False
    # Cross products of edge axes; near-parallel edge pairs give a
    # degenerate axis already covered by the face axes and are skipped.
    for i in range(3):
        for j in range(3):
            axis_norm_sq = 1.0 - r[i, j] * r[i, j]
            if axis_norm_sq < 1e-12:
                continue
            i1, i2 = (i + 1) % 3, (i + 2) % 3
            j1, j2 = (j + 1) % 3, (j + 2) % 3
            lhs = abs(t[i2] * r[i1, j] - t[i1] * r[i2, j])
            rhs = (
                ra[i1] * abs_r[i2, j]
                + ra[i2] * abs_r[i1, j]
                + rb[j1] * abs_r[i, j2]
                + rb[j2] * abs_r[i, j1]
            )
            if lhs >= rhs - tol * math.sqrt(axis_norm_sq):
                return False
    return True


def validate_scene(s: Scene) -> list[str]:
    """Report (not raise) scene problems: duplicate ids, missing poses,
    interpenetrating blocks. Order-independent in the block list."""
    violations: list[str] = []
    # Scene's constructor enforces unique ids and pose coverage for its own
    # blocks, but poses may name unknown blocks.
    known = set(s.block_ids)
    for pose_id in sorted(s.world_poses):
        if pose_id not in known:
            violations.append(f"pose for unknown block '{pose_id}'")
    blocks = sorted(s.blocks, key=lambda b: b.id)
    for i in range(len(blocks)):
        for j in range(i + 1, len(blocks)):
            a, b = blocks[i], blocks[j]
            if obb_overlap(
                a.half_extents, s.world_poses[a.id], b.half_extents, s.world_poses[b.id]
            ):
                violations.append(f"blocks '{a.id}' and '{b.id}' interpenetrate")
    return violations


def write_observation_log(path: str | Path, scene: Scene, observations) -> None:
    """JSON-lines log: one scene header line, then one observation per line."""
    with open(path, "w") as f:
        f.write(json.dumps({"scene": scene.to_json_dict()}, sort_keys=True) + "\n")
        for obs in observations:
            f.write(json.dumps(obs.to_json_dict(), sort_keys=True) + "\n")


def read_observation_log(path: str | Path) -> tuple[Scene, list[Observation]]:
    with open(path) as f:
        header = f.readline()
        if not header.strip():
            raise ValueError(f"{path}: empty observation log")
        scene = Scene.from_json_dict(json.loads(header)["scene"])
        observations = [Observation.from_json_dict(json.loads(line)) for line in f if line.strip()]
    return scene, observations
