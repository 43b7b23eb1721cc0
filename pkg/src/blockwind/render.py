"""Deterministic CPU rendering: block wireframes, wind-field overlays, and
bit-exact PPM output for golden-image testing.

Rasterization is integer midpoint line drawing with no anti-aliasing, so
identical inputs produce bit-identical images on any platform. Inferred
poses draw dashed; the wind overlay maps each image pixel back through the
camera onto the slice plane (exact per-pixel coverage of the projected
slice polygon).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .camera import CameraIntrinsics
from .scene import ColorTag, Scene, TrackedTrajectory
from .se3 import Pose, compose, inverse
from .wind import GridSpec, ObstacleMask, WindField

__all__ = [
    "Image",
    "BLOCK_COLORS",
    "SPEED_COLORMAP",
    "speed_to_color",
    "draw_line",
    "render_wireframe",
    "render_tracked_frame",
    "render_wind_overlay",
    "field_heatmap_image",
    "line_chart_image",
    "write_image",
    "read_ppm",
]

BLOCK_COLORS: dict[ColorTag, tuple[int, int, int]] = {
    ColorTag.BLUE: (50, 90, 230),
    ColorTag.RED: (225, 55, 40),
    ColorTag.YELLOW: (235, 200, 40),
    ColorTag.OTHER: (150, 150, 150),
}

# Five-stop speed color map, positions in [0, 1] of max speed.
SPEED_COLORMAP: list[tuple[float, tuple[int, int, int]]] = [
    (0.00, (12, 18, 60)),
    (0.25, (30, 90, 220)),
    (0.50, (40, 200, 180)),
    (0.75, (245, 220, 50)),
    (1.00, (230, 40, 30)),
]

# Dash pattern for inferred poses: pixels on, pixels off.
_DASH_ON, _DASH_OFF = 4, 3

_EDGE_PAIRS = [
    (0, 1), (0, 2), (0, 4), (1, 3), (1, 5), (2, 3),
    (2, 6), (3, 7), (4, 5), (4, 6), (5, 7), (6, 7),
]


@dataclass
class Image:
    """8-bit RGB raster, row-major (height, width, 3)."""

    pixels: NDArray[np.uint8]

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.uint8)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"pixels must be (h, w, 3) uint8, got {px.shape}")
        self.pixels = px

    @classmethod
    def blank(cls, width: int, height: int, color=(0, 0, 0)) -> Image:
        px = np.empty((height, width, 3), dtype=np.uint8)
        px[:] = np.asarray(color, dtype=np.uint8)
        return cls(px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def copy(self) -> Image:
        return Image(self.pixels.copy())


def speed_to_color(fraction: NDArray[np.float64]) -> NDArray[np.uint8]:
    """Map speed fractions in [0, 1] through the 5-stop color map."""
    frac = np.clip(np.asarray(fraction, dtype=np.float64), 0.0, 1.0)
    stops = np.array([s for s, _ in SPEED_COLORMAP])
    out = np.empty((*frac.shape, 3), dtype=np.uint8)
    for c in range(3):
        vals = np.array([rgb[c] for _, rgb in SPEED_COLORMAP], dtype=np.float64)
        out[..., c] = np.floor(np.interp(frac, stops, vals) + 0.5).astype(np.uint8)
    return out


def draw_line(img: Image, p0, p1, color, dashed: bool = False) -> None:
    """Integer midpoint (Bresenham) segment from p0 to p1, in place.

    Endpoints are continuous pixel coordinates; they are rounded half-up.
    Pixels outside the image are skipped.
    """
    x0 = int(np.floor(p0[0] + 0.5))
    y0 = int(np.floor(p0[1] + 0.5))
    x1 = int(np.floor(p1[0] + 0.5))
    y1 = int(np.floor(p1[1] + 0.5))
    col = np.asarray(color, dtype=np.uint8)
    dx = abs(x1 - x0)
    dy = -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    count = 0
    period = _DASH_ON + _DASH_OFF
    while True:
        if not dashed or (count % period) < _DASH_ON:
            if 0 <= x0 < img.width and 0 <= y0 < img.height:
                img.pixels[y0, x0] = col
        count += 1
        if x0 == x1 and y0 == y1:
            break
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def _project_edge(a_cam, b_cam, k: CameraIntrinsics):
    """Clip a camera-frame segment to z > eps and project; None if fully behind."""
    eps = 1e-6
    a = np.asarray(a_cam, dtype=np.float64)
    b = np.asarray(b_cam, dtype=np.float64)
    if a[2] <= eps and b[2] <= eps:
        return None
    if a[2] <= eps:
        t = (eps - a[2]) / (b[2] - a[2])
        a = a + t * (b - a)
    elif b[2] <= eps:
        t = (eps - b[2]) / (a[2] - b[2])
        b = b + t * (a - b)
    pa = (k.fx * a[0] / a[2] + k.cx, k.fy * a[1] / a[2] + k.cy)
    pb = (k.fx * b[0] / b[2] + k.cx, k.fy * b[1] / b[2] + k.cy)
    return pa, pb


def _draw_box_edges(img, corners_cam, k, color, dashed):
    for i, j in _EDGE_PAIRS:
        seg = _project_edge(corners_cam[i], corners_cam[j], k)
        if seg is not None:
            draw_line(img, seg[0], seg[1], color, dashed=dashed)


def render_wireframe(
    scene: Scene,
    extrinsic: Pose,
    k: CameraIntrinsics,
    base: Image | None = None,
) -> Image:
    """Draw every block's 12 box edges through a world->camera pose.

    Geometry behind the camera is clipped away silently.
    """
    img = base.copy() if base is not None else Image.blank(k.width, k.height)
    for block in scene.blocks:
        obj_to_cam = compose(extrinsic, scene.world_poses[block.id])
        corners_cam = obj_to_cam.apply(block.corners())
        _draw_box_edges(img, corners_cam, k, BLOCK_COLORS[block.color_tag], dashed=False)
    return img


def render_tracked_frame(
    trajectories: dict[str, TrackedTrajectory],
    frame_index: int,
    scene: Scene,
    k: CameraIntrinsics,
    base: Image | None = None,
) -> Image:
    """Draw tracked blocks at one frame; anchor-inferred poses draw dashed."""
    img = base.copy() if base is not None else Image.blank(k.width, k.height)
    for block_id in sorted(trajectories):
        traj = trajectories[block_id]
        if not traj.has_frame(frame_index):
            continue
        entry = traj.entry_at(frame_index)
        block = scene.block(block_id)
        corners_cam = entry.pose.apply(block.corners())
        dashed = entry.provenance.kind == "anchor_inferred"
        _draw_box_edges(img, corners_cam, k, BLOCK_COLORS[block.color_tag], dashed=dashed)
    return img


def render_wind_overlay(
    field: WindField,
    spec: GridSpec,
    extrinsic: Pose,
    k: CameraIntrinsics,
    base: Image,
    alpha: float,
    mask: ObstacleMask | None = None,
) -> Image:
    """Blend the wind slice into a camera view.

    Every pixel is mapped through the camera onto the plane z = slice_height;
    pixels landing on a fluid cell blend that cell's speed color at the given
    alpha. Solid cells and off-grid pixels are untouched.
    """
    if not (0.0 <= alpha <= 1.0):
        raise ValueError("alpha must be in [0, 1]")
    img = base.copy()
    if alpha == 0.0:
        return img
    cam_to_world = inverse(extrinsic)
    origin = cam_to_world.translation
    rot = cam_to_world.rotation.as_matrix()

    us, vs = np.meshgrid(np.arange(img.width), np.arange(img.height))
    dirs_cam = np.stack(
        [(us - k.cx) / k.fx, (vs - k.cy) / k.fy, np.ones_like(us, dtype=np.float64)], axis=-1
    )
    dirs_world = dirs_cam @ rot.T
    dz = dirs_world[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (spec.slice_height - origin[2]) / dz
    hit = np.isfinite(t) & (t > 1e-9)
    px = origin[0] + t * dirs_world[..., 0]
    py = origin[1] + t * dirs_world[..., 1]
    ci = np.floor((px - spec.origin_x) / spec.dx).astype(np.int64)
    cj = np.floor((py - spec.origin_y) / spec.dx).astype(np.int64)
    hit &= (ci >= 0) & (ci < spec.nx) & (cj >= 0) & (cj < spec.ny)
    ci = np.clip(ci, 0, spec.nx - 1)
    cj = np.clip(cj, 0, spec.ny - 1)
    if mask is not None:
        hit &= ~mask.solid[cj, ci]
    speed = field.speed
    max_speed = float(speed.max())
    frac = speed[cj, ci] / max_speed if max_speed > 0 else np.zeros_like(px)
    colors = speed_to_color(frac)
    blended = np.floor(
        img.pixels.astype(np.float64) * (1.0 - alpha) + colors.astype(np.float64) * alpha + 0.5
    ).astype(np.uint8)
    img.pixels[hit] = blended[hit]
    return img


def field_heatmap_image(
    field: WindField,
    spec: GridSpec,
    mask: ObstacleMask | None = None,
    cell_px: int = 4,
) -> Image:
    """Top-down plan view: one colored tile per cell, solids in gray."""
    speed = field.speed
    max_speed = float(speed.max())
    frac = speed / max_speed if max_speed > 0 else np.zeros_like(speed)
    colors = speed_to_color(frac)
    if mask is not None:
        colors[mask.solid] = (90, 90, 90)
    tiles = np.repeat(np.repeat(colors, cell_px, axis=0), cell_px, axis=1)
    return Image(tiles[::-1])  # row 0 at the top => flip so +y points up


def line_chart_image(
    xs,
    series: dict[str, list[float]],
    width: int = 480,
    height: int = 320,
    margin: int = 40,
) -> Image:
    """Minimal deterministic line chart (axes plus one polyline per series)."""
    img = Image.blank(width, height, (255, 255, 255))
    axis_color = (40, 40, 40)
    draw_line(img, (margin, height - margin), (width - 10, height - margin), axis_color)
    draw_line(img, (margin, height - margin), (margin, 10), axis_color)
    xs = np.asarray(list(xs), dtype=np.float64)
    all_vals = np.concatenate([np.asarray(v, dtype=np.float64) for v in series.values()])
    x_lo, x_hi = float(xs.min()), float(xs.max())
    y_lo, y_hi = 0.0, float(all_vals.max()) if all_vals.size else 1.0
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    palette = [(50, 90, 230), (225, 55, 40), (40, 160, 60), (235, 200, 40)]
    for idx, name in enumerate(sorted(series)):
        ys = np.asarray(series[name], dtype=np.float64)
        color = palette[idx % len(palette)]
        pts = [
            (
                margin + (x - x_lo) / (x_hi - x_lo) * (width - margin - 10),
                (height - margin) - (y - y_lo) / (y_hi - y_lo) * (height - margin - 10),
            )
            for x, y in zip(xs, ys)
        ]
        for a, b in zip(pts, pts[1:]):
            draw_line(img, a, b, color)
        for p in pts:
            x, y = int(p[0]), int(p[1])
            img.pixels[max(0, y - 1) : y + 2, max(0, x - 1) : x + 2] = color
    return img


def write_image(img: Image, path: str | Path) -> None:
    """Write PPM (P6) bit-exactly; .png paths use Pillow when installed.

    Raises:
        OSError: on unwritable paths.
        RuntimeError: for .png output without Pillow available.
    """
    path = Path(path)
    if path.suffix.lower() == ".png":
        try:
            from PIL import Image as PILImage
        except ImportError as e:
            raise RuntimeError("PNG output requires Pillow; use .ppm instead") from e
        PILImage.fromarray(img.pixels, mode="RGB").save(path)
        return
    with open(path, "wb") as f:
        f.write(f"P6\n{img.width} {img.height}\n255\n".encode("ascii"))
        f.write(img.pixels.tobytes(order="C"))


def read_ppm(path: str | Path) -> Image:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P6"):
        raise ValueError(f"{path}: not a P6 PPM")
    # Header: magic, width, height, maxval, single whitespace, then data.
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(v) for v in fields)
    if maxval != 255:
        raise ValueError("only maxval 255 supported")
    data = np.frombuffer(raw[pos : pos + w * h * 3], dtype=np.uint8)
    if data.size != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return Image(data.reshape(h, w, 3).copy())
