"""Point-cloud ingest and pre-processing: PLY I/O, crop, unit-sphere
normalization, and manual object-frame assignment.

The reconstruction step upstream (structure-from-motion) emits PLY clouds of
scanned objects; this module crops away the environment, rescales the object
into a unit sphere so box size encodes depth, and builds the object frame
from two manually recorded axis directions.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .errors import DegenerateAxes, DegenerateCloud, EmptyCloud, ParseError
from .se3 import Rotation

__all__ = [
    "PointCloud",
    "NormalizationParams",
    "ObjectFrame",
    "load_cloud",
    "save_cloud",
    "crop",
    "normalize",
    "object_frame_from_axes",
]

# Manual axes closer than this to (anti-)parallel are rejected.
MIN_AXIS_ANGLE_DEG = 5.0

_PLY_SCALAR = {
    "char": ("b", 1), "int8": ("b", 1),
    "uchar": ("B", 1), "uint8": ("B", 1),
    "short": ("h", 2), "int16": ("h", 2),
    "ushort": ("H", 2), "uint16": ("H", 2),
    "int": ("i", 4), "int32": ("i", 4),
    "uint": ("I", 4), "uint32": ("I", 4),
    "float": ("f", 4), "float32": ("f", 4),
    "double": ("d", 8), "float64": ("d", 8),
}


@dataclass(frozen=True)
class PointCloud:
    """Points in meters, with optional per-point RGB bytes."""

    points: NDArray[np.float64]
    colors: NDArray[np.uint8] | None = None

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("points must be finite")
        object.__setattr__(self, "points", pts)
        if self.colors is not None:
            col = np.asarray(self.colors, dtype=np.uint8)
            if col.shape != (pts.shape[0], 3):
                raise ValueError("colors must be (N, 3) uint8")
            object.__setattr__(self, "colors", col)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class NormalizationParams:
    """Affine map (p - center) * scale that sends the cloud into a unit sphere."""

    center: NDArray[np.float64]
    radius: float

    def __post_init__(self) -> None:
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        object.__setattr__(self, "center", c)

    @property
    def scale(self) -> float:
        return 1.0 / self.radius

    def to_json_dict(self) -> dict:
        return {"center": [float(v) for v in self.center], "radius": self.radius}

    @classmethod
    def from_json_dict(cls, d: dict) -> NormalizationParams:
        return cls(np.asarray(d["center"], dtype=np.float64), float(d["radius"]))


@dataclass(frozen=True)
class ObjectFrame:
    """Rotation mapping object axes to cloud axes (columns are x, y, z)."""

    rotation: Rotation


def _parse_error(path: Path, line_no: int, msg: str) -> ParseError:
    return ParseError(f"{path}:{line_no}: {msg}")


def load_cloud(path: str | Path) -> PointCloud:
    """Load a PLY point cloud (ASCII or binary little-endian).

    Requires a vertex element with x, y, z properties; red/green/blue are
    loaded when present; other scalar vertex properties are skipped.

    Raises:
        ParseError: on malformed headers or truncated data.
        EmptyCloud: if the file declares zero vertices.
    """
    path = Path(path)
    raw = path.read_bytes()
    header_end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or header_end < 0:
        raise _parse_error(path, 1, "not a PLY file (missing 'ply'/'end_header')")
    newline_after = raw.find(b"\n", header_end)
    if newline_after < 0:
        raise _parse_error(path, 1, "header not terminated by newline")
    header_lines = raw[:header_end].decode("ascii", errors="replace").splitlines()
    body = raw[newline_after + 1 :]

    fmt = None
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    for idx, line in enumerate(header_lines, start=1):
        tokens = line.split()
        if not tokens or tokens[0] in ("ply", "comment", "obj_info"):
            continue
        if tokens[0] == "format":
            if len(tokens) < 2 or tokens[1] not in ("ascii", "binary_little_endian"):
                raise _parse_error(path, idx, f"unsupported format {tokens[1:]}")
            fmt = tokens[1]
        elif tokens[0] == "element":
            if len(tokens) != 3:
                raise _parse_error(path, idx, "malformed element line")
            try:
                count = int(tokens[2])
            except ValueError:
                raise _parse_error(path, idx, f"bad element count '{tokens[2]}'") from None
            elements.append((tokens[1], count, []))
        elif tokens[0] == "property":
            if not elements:
                raise _parse_error(path, idx, "property before any element")
            if tokens[1] == "list":
                elements[-1][2].append(("list", tokens[-1]))
            else:
                if tokens[1] not in _PLY_SCALAR:
                    raise _parse_error(path, idx, f"unknown property type '{tokens[1]}'")
                elements[-1][2].append((tokens[1], tokens[2]))
    if fmt is None:
        raise _parse_error(path, 1, "missing format line")

    vertex = next((e for e in elements if e[0] == "vertex"), None)
    if vertex is None:
        raise _parse_error(path, 1, "no vertex element")
    _, count, props = vertex
    if elements and elements[0][0] != "vertex":
        raise _parse_error(path, 1, "vertex must be the first element")
    if count == 0:
        raise EmptyCloud(f"{path}: vertex element declares zero vertices")
    names = [n for _, n in props]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise _parse_error(path, 1, f"vertex element lacks property '{axis}'")
    if any(t == "list" for t, _ in props):
        raise _parse_error(path, 1, "list properties on vertex element are unsupported")

    has_color = all(c in names for c in ("red", "green", "blue"))
    if fmt == "ascii":
        pts, cols = _read_ascii_vertices(path, body, count, names, has_color)
    else:
        pts, cols = _read_binary_vertices(path, body, count, props, has_color)
    return PointCloud(pts, cols)


def _read_ascii_vertices(path, body, count, names, has_color):
    lines = body.decode("ascii", errors="replace").splitlines()
    if len(lines) < count:
        raise _parse_error(path, count, f"expected {count} vertex lines, found {len(lines)}")
    ix, iy, iz = names.index("x"), names.index("y"), names.index("z")
    pts = np.empty((count, 3))
    cols = np.empty((count, 3), dtype=np.uint8) if has_color else None
    for i in range(count):
        fields = lines[i].split()
        if len(fields) < len(names):
            raise _parse_error(path, i + 1, f"vertex line has {len(fields)} fields, expected {len(names)}")
        try:
            pts[i] = (float(fields[ix]), float(fields[iy]), float(fields[iz]))
            if cols is not None:
                cols[i] = (
                    int(fields[names.index("red")]),
                    int(fields[names.index("green")]),
                    int(fields[names.index("blue")]),
                )
        except ValueError as e:
            raise _parse_error(path, i + 1, f"bad vertex value: {e}") from None
    return pts, cols


def _read_binary_vertices(path, body, count, props, has_color):
    codes = [_PLY_SCALAR[t] for t, _ in props]
    names = [n for _, n in props]
    stride = sum(size for _, size in codes)
    if len(body) < count * stride:
        raise _parse_error(
            path, 0, f"binary payload truncated at byte {len(body)} of {count * stride}"
        )
    fmt = "<" + "".join(code for code, _ in codes)
    unpack = struct.Struct(fmt)
    ix, iy, iz = names.index("x"), names.index("y"), names.index("z")
    pts = np.empty((count, 3))
    cols = np.empty((count, 3), dtype=np.uint8) if has_color else None
    for i in range(count):
        rec = unpack.unpack_from(body, i * stride)
        pts[i] = (rec[ix], rec[iy], rec[iz])
        if cols is not None:
            cols[i] = (
                rec[names.index("red")],
                rec[names.index("green")],
                rec[names.index("blue")],
            )
    return pts, cols


def save_cloud(cloud: PointCloud, path: str | Path, binary: bool = False) -> None:
    """Write a cloud as PLY (float32 xyz, optional uchar rgb)."""
    path = Path(path)
    n = len(cloud)
    header = ["ply"]
    header.append("format binary_little_endian 1.0" if binary else "format ascii 1.0")
    header.append(f"element vertex {n}")
    header += ["property float x", "property float y", "property float z"]
    if cloud.colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        pts32 = cloud.points.astype(np.float32)
        if binary:
            for i in range(n):
                f.write(struct.pack("<fff", *pts32[i]))
                if cloud.colors is not None:
                    f.write(struct.pack("<BBB", *cloud.colors[i]))
        else:
            for i in range(n):
                row = " ".join(repr(float(v)) for v in pts32[i])
                if cloud.colors is not None:
                    row += " " + " ".join(str(int(v)) for v in cloud.colors[i])
                f.write((row + "\n").encode("ascii"))


def crop(c: PointCloud, box_min, box_max) -> PointCloud:
    """Keep points inside or on an axis-aligned box, preserving order.

    Raises:
        EmptyCloud: if nothing survives the crop.
    """
    lo = np.asarray(box_min, dtype=np.float64).reshape(3)
    hi = np.asarray(box_max, dtype=np.float64).reshape(3)
    if not (lo < hi).all():
        raise ValueError("crop box must have min < max on every axis")
    keep = ((c.points >= lo) & (c.points <= hi)).all(axis=1)
    if not keep.any():
        raise EmptyCloud("crop box contains no points")
    return PointCloud(c.points[keep], None if c.colors is None else c.colors[keep])


def normalize(c: PointCloud) -> tuple[PointCloud, NormalizationParams]:
    """Rescale the cloud into the unit sphere.

    Center is the axis-aligned bounding-box midpoint; radius is the max
    distance from that center, so the output's max norm is exactly 1.

    Raises:
        DegenerateCloud: if all points coincide.
    """
    if len(c) == 0:
        raise EmptyCloud("cannot normalize an empty cloud")
    center = 0.5 * (c.points.min(axis=0) + c.points.max(axis=0))
    dist = np.linalg.norm(c.points - center, axis=1)
    radius = float(dist.max())
    if radius < 1e-12:
        raise DegenerateCloud("all points coincide; no scale can be derived")
    return (
        PointCloud((c.points - center) / radius, c.colors),
        NormalizationParams(center, radius),
    )


def object_frame_from_axes(x_dir, z_dir) -> ObjectFrame:
    """Build a right-handed object frame from recorded x and z directions.

    x is the normalized x_dir; z is z_dir with its x-component removed
    (Gram-Schmidt) and renormalized; y completes the right-handed triad.

    Raises:
        DegenerateAxes: if either direction is near zero or the two are
            within 5 degrees of (anti-)parallel.
    """
    x = np.asarray(x_dir, dtype=np.float64).reshape(3)
    z = np.asarray(z_dir, dtype=np.float64).reshape(3)
    nx_, nz_ = np.linalg.norm(x), np.linalg.norm(z)
    if nx_ < 1e-12 or nz_ < 1e-12:
        raise DegenerateAxes("axis directions must be nonzero")
    x = x / nx_
    z = z / nz_
    angle = math.degrees(math.acos(min(1.0, max(-1.0, float(np.dot(x, z))))))
    if not (MIN_AXIS_ANGLE_DEG < angle < 180.0 - MIN_AXIS_ANGLE_DEG):
        raise DegenerateAxes(
            f"axes are {angle:.2f} deg apart; need ({MIN_AXIS_ANGLE_DEG}, "
            f"{180.0 - MIN_AXIS_ANGLE_DEG})"
        )
    z = z - np.dot(z, x) * x
    z = z / np.linalg.norm(z)
    y = np.cross(z, x)
    return ObjectFrame(Rotation.from_matrix(np.column_stack([x, y, z])))
