"""Rigid-transform algebra: rotations, frame-tagged poses, anchor transfer.

Rotations are stored as unit quaternions (w, x, y, z) and exported as 3x3
row-major matrices; q and -q denote the same rotation. Poses carry explicit
(source, target) frame tags and composing poses whose frames do not chain
raises :class:`FrameMismatch` instead of silently producing garbage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .errors import FrameMismatch

__all__ = [
    "Rotation",
    "Pose",
    "compose",
    "inverse",
    "anchor_transfer",
    "rotation_angle_between",
    "pose_to_dict",
    "pose_from_dict",
]

# Orthonormality repair threshold: matrices further from SO(3) than this
# are rejected rather than renormalized.
ORTHONORMALITY_TOL = 1e-6


def _normalize_quat(q: NDArray[np.float64]) -> NDArray[np.float64]:
    n = float(np.linalg.norm(q))
    if n < 1e-12:
        raise ValueError("zero-norm quaternion")
    q = q / n
    # Canonical sign: w >= 0 so that q and -q serialize identically.
    if q[0] < 0.0:
        q = -q
    return q


@dataclass(frozen=True)
class Rotation:
    """An element of SO(3), stored as a canonical unit quaternion.

    Attributes:
        quat: (4,) array (w, x, y, z) with unit norm and w >= 0.
    """

    quat: NDArray[np.float64]

    def __post_init__(self) -> None:
        q = np.asarray(self.quat, dtype=np.float64).reshape(4)
        object.__setattr__(self, "quat", _normalize_quat(q))
        self.quat.setflags(write=False)

    @classmethod
    def identity(cls) -> Rotation:
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_axis_angle(cls, axis, angle_rad: float) -> Rotation:
        """Rotation by ``angle_rad`` about ``axis`` (need not be unit length)."""
        axis = np.asarray(axis, dtype=np.float64).reshape(3)
        n = float(np.linalg.norm(axis))
        if n < 1e-12:
            raise ValueError("rotation axis must be nonzero")
        half = 0.5 * angle_rad
        return cls(np.concatenate([[math.cos(half)], math.sin(half) / n * axis]))

    @classmethod
    def rot_x(cls, angle_rad: float) -> Rotation:
        return cls.from_axis_angle([1.0, 0.0, 0.0], angle_rad)

    @classmethod
    def rot_y(cls, angle_rad: float) -> Rotation:
        return cls.from_axis_angle([0.0, 1.0, 0.0], angle_rad)

    @classmethod
    def rot_z(cls, angle_rad: float) -> Rotation:
        return cls.from_axis_angle([0.0, 0.0, 1.0], angle_rad)

    @classmethod
    def from_matrix(cls, m) -> Rotation:
        """Build from a 3x3 matrix, repairing mild non-orthonormality.

        Raises:
            ValueError: if the matrix is further than ORTHONORMALITY_TOL from
                an orthonormal matrix with determinant +1.
        """
        m = np.asarray(m, dtype=np.float64).reshape(3, 3)
        err = float(np.abs(m.T @ m - np.eye(3)).max())
        if err > ORTHONORMALITY_TOL:
            raise ValueError(f"matrix is not orthonormal (max |R'R - I| = {err:.3e})")
        if np.linalg.det(m) < 0.0:
            raise ValueError("matrix has determinant -1 (reflection, not rotation)")
        return cls(_quat_from_matrix(m))

    def as_matrix(self) -> NDArray[np.float64]:
        w, x, y, z = self.quat
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )

    def multiply(self, other: Rotation) -> Rotation:
        """Hamilton product: (self * other) applies ``other`` first."""
        w1, x1, y1, z1 = self.quat
        w2, x2, y2, z2 = other.quat
        return Rotation(
            np.array(
                [
                    w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
                    w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                    w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
                    w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
                ]
            )
        )

    def conjugate(self) -> Rotation:
        w, x, y, z = self.quat
        return Rotation(np.array([w, -x, -y, -z]))

    def apply(self, v) -> NDArray[np.float64]:
        """Rotate a 3-vector (or an (N, 3) stack of vectors)."""
        v = np.asarray(v, dtype=np.float64)
        return v @ self.as_matrix().T

    def angle_to(self, other: Rotation) -> float:
        return rotation_angle_between(self, other)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Rotation):
            return NotImplemented
        # Canonical sign makes q == -q compare equal.
        return bool(np.array_equal(self.quat, other.quat))

    def __hash__(self) -> int:
        return hash(self.quat.tobytes())

    def __repr__(self) -> str:
        w, x, y, z = self.quat
        return f"Rotation(w={w:.6f}, x={x:.6f}, y={y:.6f}, z={z:.6f})"


def _quat_from_matrix(m: NDArray[np.float64]) -> NDArray[np.float64]:
    # Shepperd's method: pick the largest pivot for numerical safety.
    t = np.trace(m)
    if t > 0.0:
        s = math.sqrt(t + 1.0) * 2.0
        return np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    i = int(np.argmax(np.diag(m)))
    if i == 0:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        return np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    if i == 1:
        s = math.sqrt(1.0 - m[0, 0] + m[1, 1] - m[2, 2]) * 2.0
        return np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    s = math.sqrt(1.0 - m[0, 0] - m[1, 1] + m[2, 2]) * 2.0
    return np.array(
        [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    )


@dataclass(frozen=True)
class Pose:
    """A rigid transform mapping points in frame ``src`` into frame ``dst``.

    ``p_dst = rotation @ p_src + translation``. Translation is in meters.
    """

    rotation: Rotation
    translation: NDArray[np.float64]
    src: str = "object"
    dst: str = "camera"

    def __post_init__(self) -> None:
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "translation", t)
        t.setflags(write=False)

    @classmethod
    def identity(cls, frame: str = "world") -> Pose:
        return cls(Rotation.identity(), np.zeros(3), src=frame, dst=frame)

    @property
    def frame(self) -> tuple[str, str]:
        return (self.src, self.dst)

    def as_matrix(self) -> NDArray[np.float64]:
        """4x4 homogeneous matrix form."""
        m = np.eye(4)
        m[:3, :3] = self.rotation.as_matrix()
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_matrix(cls, m, src: str = "object", dst: str = "camera") -> Pose:
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        if np.abs(m[3] - [0.0, 0.0, 0.0, 1.0]).max() > 1e-9:
            raise ValueError("homogeneous matrix must have last row [0,0,0,1]")
        return cls(Rotation.from_matrix(m[:3, :3]), m[:3, 3].copy(), src=src, dst=dst)

    def apply(self, p) -> NDArray[np.float64]:
        """Map a 3-vector (or (N, 3) stack) from ``src`` into ``dst``."""
        return self.rotation.apply(p) + self.translation

    def retag(self, src: str | None = None, dst: str | None = None) -> Pose:
        """Same transform with replaced frame tags."""
        return Pose(
            self.rotation,
            self.translation,
            src=self.src if src is None else src,
            dst=self.dst if dst is None else dst,
        )

    def __repr__(self) -> str:
        t = self.translation
        return f"Pose({self.src}->{self.dst}, t=({t[0]:.4f}, {t[1]:.4f}, {t[2]:.4f}), {self.rotation!r})"


def compose(a: Pose, b: Pose) -> Pose:
    """Compose two poses: the result applies ``b`` first, then ``a``.

    Requires ``a.src == b.dst``; the result maps ``b.src`` to ``a.dst``.

    Raises:
        FrameMismatch: if the frame chain does not connect.
    """
    if a.src != b.dst:
        raise FrameMismatch(
            f"cannot compose ({a.src}->{a.dst}) after ({b.src}->{b.dst}): "
            f"'{a.src}' != '{b.dst}'"
        )
    return Pose(
        a.rotation.multiply(b.rotation),
        a.rotation.apply(b.translation) + a.translation,
        src=b.src,
        dst=a.dst,
    )


def inverse(p: Pose) -> Pose:
    """Inverse transform: rotation transposed, frames swapped."""
    rot_inv = p.rotation.conjugate()
    return Pose(rot_inv, -rot_inv.apply(p.translation), src=p.dst, dst=p.src)


def anchor_transfer(anchor_at_0: Pose, anchor_at_i: Pose, target_at_0: Pose) -> Pose:
    """Infer a static target's pose at frame i from a static anchor's motion.

    All poses are object->camera. With both objects rigidly fixed in a common
    world frame while only the camera moves, the target's pose at frame i is

        target_at_i = anchor_at_i * inverse(anchor_at_0) * target_at_0,

    whose rotation part is the anchor-transfer product of the two anchor
    rotations and the target's reference rotation. Exact (no approximation)
    under the rigid-scene assumption.

    Raises:
        FrameMismatch: if the anchor poses name different objects, or the two
            frame-0 poses name different camera frames.
    """
    if anchor_at_0.src != anchor_at_i.src:
        raise FrameMismatch(
            f"anchor poses name different objects: '{anchor_at_0.src}' vs '{anchor_at_i.src}'"
        )
    if anchor_at_0.dst != target_at_0.dst:
        raise FrameMismatch(
            f"reference poses name different camera frames: "
            f"'{anchor_at_0.dst}' vs '{target_at_0.dst}'"
        )
    return compose(compose(anchor_at_i, inverse(anchor_at_0)), target_at_0)


def rotation_angle_between(a: Rotation, b: Rotation) -> float:
    """Geodesic angle in radians between two rotations, in [0, pi].

    Computed from the relative quaternion via atan2, which stays well
    conditioned near pi where the arccos-of-trace form loses digits.
    """
    if np.array_equal(a.quat, b.quat):
        return 0.0
    rel = a.conjugate().multiply(b).quat
    return 2.0 * math.atan2(float(np.linalg.norm(rel[1:])), abs(float(rel[0])))


def pose_to_dict(p: Pose) -> dict:
    """JSON-ready form: {"q": [w,x,y,z], "t": [x,y,z], "src": ..., "dst": ...}."""
    return {
        "q": [float(v) for v in p.rotation.quat],
        "t": [float(v) for v in p.translation],
        "src": p.src,
        "dst": p.dst,
    }


def pose_from_dict(d: dict) -> Pose:
    try:
        return Pose(
            Rotation(np.asarray(d["q"], dtype=np.float64)),
            np.asarray(d["t"], dtype=np.float64),
            src=str(d["src"]),
            dst=str(d["dst"]),
        )
    except KeyError as e:
        raise ValueError(f"pose dict missing key {e}") from e
