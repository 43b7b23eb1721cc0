"""Pinhole projection, sphere silhouettes, and depth recovery from box size.

The estimator normalizes every object into a unit-diameter bounding sphere,
so the pixel size of a detected box encodes range: ``depth = f * d / s`` with
``f`` the mean focal length, ``d`` the sphere diameter and ``s`` the larger
box side. This is a small-angle approximation; its relative error is about
``(d / 2 depth)^2 / 2``, i.e. <= 2% once depth exceeds 2.5 diameters.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .errors import BehindCamera, EmptyBox, SphereIntersectsImagePlane
from .se3 import Pose, Rotation

__all__ = [
    "CameraIntrinsics",
    "BoundingBox",
    "project_point",
    "sphere_bbox",
    "depth_from_bbox",
    "pose_from_detection",
]

# z below this is "at the camera plane" for projection purposes.
MIN_DEPTH = 1e-6

# depth / diameter ratio below which depth_from_bbox emits a near-field warning.
NEAR_FIELD_RATIO = 2.5


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole parameters: focal lengths, principal point, image size (pixels)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def f_mean(self) -> float:
        return 0.5 * (self.fx + self.fy)

    @classmethod
    def from_json(cls, path: str | Path) -> CameraIntrinsics:
        d = json.loads(Path(path).read_text())
        return cls(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
        )

    def to_json_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned pixel-space box; sub-pixel coordinates allowed."""

    min_x: float
    min_y: float
    max_x: float
    max_y: float

    def __post_init__(self) -> None:
        if not (self.min_x < self.max_x and self.min_y < self.max_y):
            raise ValueError("bounding box must have positive width and height")

    @property
    def width(self) -> float:
        return self.max_x - self.min_x

    @property
    def height(self) -> float:
        return self.max_y - self.min_y

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.min_x + self.max_x), 0.5 * (self.min_y + self.max_y))


def project_point(
    p_world, extrinsic: Pose, k: CameraIntrinsics
) -> NDArray[np.float64]:
    """Project a world point through a world->camera pose onto the image.

    Raises:
        BehindCamera: if the camera-frame z is below MIN_DEPTH.
    """
    p_cam = extrinsic.apply(np.asarray(p_world, dtype=np.float64))
    x, y, z = p_cam
    if z <= MIN_DEPTH:
        raise BehindCamera(f"point at camera-frame z={z:.3e} is not in front of the camera")
    return np.array([k.fx * x / z + k.cx, k.fy * y / z + k.cy])


def _silhouette_extent(ca: float, cb: float, cz: float, r: float) -> tuple[float, float]:
    """Extent along one normalized image axis of a sphere's silhouette.

    For a sphere centered at camera-frame (ca, cb, cz) with radius r, the
    tangent-ray cone meets the image plane in an ellipse whose extent along
    the axis of ``ca`` depends only on (ca, cz): the extreme normalized
    coordinates solve (cz^2 - r^2) x^2 - 2 ca cz x + (ca^2 - r^2) = 0.
    """
    denom = cz * cz - r * r
    root = r * math.sqrt(ca * ca + cz * cz - r * r)
    return ((ca * cz - root) / denom, (ca * cz + root) / denom)


def sphere_bbox(center_cam, radius: float, k: CameraIntrinsics) -> BoundingBox:
    """Exact pixel-space silhouette box of a sphere under perspective.

    Args:
        center_cam: sphere center in the camera frame, meters.
        radius: sphere radius, meters.

    Raises:
        SphereIntersectsImagePlane: unless center z > radius, the condition
            for the silhouette to project to a bounded ellipse.
    """
    c = np.asarray(center_cam, dtype=np.float64).reshape(3)
    if radius < 0:
        raise ValueError("radius must be non-negative")
    if c[2] <= radius or c[2] <= MIN_DEPTH:
        raise SphereIntersectsImagePlane(
            f"sphere (z={c[2]:.4f}, r={radius:.4f}) is not strictly in front of the camera"
        )
    x_lo, x_hi = _silhouette_extent(c[0], c[1], c[2], radius)
    y_lo, y_hi = _silhouette_extent(c[1], c[0], c[2], radius)
    return BoundingBox(
        min_x=k.fx * x_lo + k.cx,
        min_y=k.fy * y_lo + k.cy,
        max_x=k.fx * x_hi + k.cx,
        max_y=k.fy * y_hi + k.cy,
    )


def depth_from_bbox(b: BoundingBox, sphere_diameter: float, k: CameraIntrinsics) -> float:
    """Recover range to the sphere center from its detected box size.

    ``depth = f_mean * sphere_diameter / max(box width, box height)``. The max
    side is robust to partial truncation at image borders. Emits a warning in
    the near field (depth < 2.5 diameters) where the approximation degrades.

    Raises:
        EmptyBox: if the box has no extent.
    """
    if sphere_diameter <= 0:
        raise ValueError("sphere_diameter must be positive")
    s = max(b.width, b.height)
    if s <= 0:
        raise EmptyBox("bounding box has no extent")
    depth = k.f_mean * sphere_diameter / s
    if depth < NEAR_FIELD_RATIO * sphere_diameter:
        warnings.warn(
            f"near-field depth estimate ({depth:.3f} m < "
            f"{NEAR_FIELD_RATIO}x diameter); error may exceed 2%",
            stacklevel=2,
        )
    return depth


def pose_from_detection(
    b: BoundingBox,
    viewpoint_rotation: Rotation,
    sphere_diameter: float,
    k: CameraIntrinsics,
    object_id: str = "object",
    camera_frame: str = "camera",
) -> Pose:
    """Assemble an initial object->camera pose from a detection.

    Translation is the back-projected box-center ray, scaled so its length
    equals the range recovered by :func:`depth_from_bbox`; rotation comes
    from the viewpoint selector.
    """
    depth = depth_from_bbox(b, sphere_diameter, k)
    u0, v0 = b.center
    ray = np.array([(u0 - k.cx) / k.fx, (v0 - k.cy) / k.fy, 1.0])
    t = depth * ray / np.linalg.norm(ray)
    return Pose(viewpoint_rotation, t, src=object_id, dst=camera_frame)
