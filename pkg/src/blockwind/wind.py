"""Desk-scale wind prediction over the tracked block scene: a D2Q9
lattice-Boltzmann solver (BGK collision, halfway bounce-back) on a single
horizontal slice through the scene.

Boundary modes: ``channel`` drives flow with a fixed-velocity equilibrium
inlet on the left column (imposed velocity, local density) and a
zero-gradient outlet on the right (copied velocity, density anchored at the
reference so pressure cannot drift); ``closed`` bounce-backs on all four
walls (mass-conservation testbed); ``periodic_x`` wraps the x direction and
is driven by a uniform body force (the Poiseuille benchmark). Top and bottom walls bounce back in every mode, placing the
no-slip planes half a cell outside the first and last rows, so the effective
channel height is ``ny`` lattice units.

Lattice-to-physical conversion: lengths scale by ``dx`` and speeds by
``physical_inlet_speed / inlet_velocity``; kinematic viscosity in lattice
units is ``(tau - 0.5) / 3``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from numba import njit
from numpy.typing import NDArray

from .errors import Diverged, FullyBlocked, OutOfDomain
from .scene import Scene

__all__ = [
    "GridSpec",
    "ObstacleMask",
    "WindField",
    "voxelize",
    "initial_field",
    "step",
    "run_to_steady",
    "probe",
    "write_field",
    "read_field",
    "write_field_csv",
]

# Lattice Mach guard: any fluid speed at or above this is a divergence.
MAX_LATTICE_SPEED = 0.3

# D2Q9 velocity set, weights, and opposite directions.
_CX = np.array([0, 1, 0, -1, 0, 1, -1, -1, 1], dtype=np.int64)
_CY = np.array([0, 0, 1, 0, -1, 1, 1, -1, -1], dtype=np.int64)
_W = np.array(
    [4 / 9, 1 / 9, 1 / 9, 1 / 9, 1 / 9, 1 / 36, 1 / 36, 1 / 36, 1 / 36], dtype=np.float64
)
_OPP = np.array([0, 3, 4, 1, 2, 7, 8, 5, 6], dtype=np.int64)

_MODES = {"channel": 0, "closed": 1, "periodic_x": 2}


@dataclass(frozen=True)
class GridSpec:
    """Solver grid and regime parameters.

    The grid covers world x in [origin_x, origin_x + nx*dx] and y in
    [origin_y, origin_y + ny*dx] on the plane z = slice_height.
    """

    nx: int
    ny: int
    dx: float = 0.01
    slice_height: float = 0.02
    inlet_velocity: float = 0.05
    tau: float = 0.9
    origin_x: float = 0.0
    origin_y: float = 0.0
    boundary: str = "channel"
    body_force: tuple[float, float] = (0.0, 0.0)
    physical_inlet_speed: float = 1.0

    def __post_init__(self) -> None:
        if self.nx < 16 or self.ny < 16:
            raise ValueError("grid must be at least 16x16")
        if self.dx <= 0:
            raise ValueError("dx must be positive")
        if self.tau <= 0.5:
            raise ValueError("tau must exceed 0.5 for stability")
        if not (0.0 < self.inlet_velocity <= MAX_LATTICE_SPEED):
            raise ValueError(f"inlet velocity must be in (0, {MAX_LATTICE_SPEED}]")
        if self.inlet_velocity > 0.1:
            warnings.warn(
                f"inlet velocity {self.inlet_velocity} exceeds the incompressibility "
                "guideline of 0.1 lattice units; expect compressibility error or divergence",
                stacklevel=2,
            )
        if self.boundary not in _MODES:
            raise ValueError(f"unknown boundary mode '{self.boundary}'")

    @property
    def viscosity(self) -> float:
        """Kinematic viscosity in lattice units."""
        return (self.tau - 0.5) / 3.0

    def cell_centers(self) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        """World x and y coordinates of cell centers, shapes (nx,), (ny,)."""
        xs = self.origin_x + (np.arange(self.nx) + 0.5) * self.dx
        ys = self.origin_y + (np.arange(self.ny) + 0.5) * self.dx
        return xs, ys

    def to_json_dict(self) -> dict:
        return {
            "nx": self.nx,
            "ny": self.ny,
            "dx": self.dx,
            "slice_height": self.slice_height,
            "inlet_velocity": self.inlet_velocity,
            "tau": self.tau,
            "origin_x": self.origin_x,
            "origin_y": self.origin_y,
            "boundary": self.boundary,
            "body_force": list(self.body_force),
            "physical_inlet_speed": self.physical_inlet_speed,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> GridSpec:
        d = dict(d)
        if "body_force" in d:
            d["body_force"] = tuple(d["body_force"])
        return cls(**d)


@dataclass(frozen=True)
class ObstacleMask:
    """Boolean (ny, nx) grid; True marks solid cells."""

    solid: NDArray[np.bool_]

    def __post_init__(self) -> None:
        s = np.ascontiguousarray(np.asarray(self.solid, dtype=bool))
        if s.ndim != 2:
            raise ValueError("mask must be 2-D (ny, nx)")
        object.__setattr__(self, "solid", s)
        s.setflags(write=False)

    @classmethod
    def empty(cls, spec: GridSpec) -> ObstacleMask:
        return cls(np.zeros((spec.ny, spec.nx), dtype=bool))

    def matches(self, spec: GridSpec) -> bool:
        return self.solid.shape == (spec.ny, spec.nx)


@dataclass(frozen=True)
class WindField:
    """Macroscopic state plus the distribution functions that evolve it."""

    rho: NDArray[np.float64]
    ux: NDArray[np.float64]
    uy: NDArray[np.float64]
    f: NDArray[np.float64]
    iterations: int = 0
    converged: bool = False

    @property
    def speed(self) -> NDArray[np.float64]:
        return np.hypot(self.ux, self.uy)


def voxelize(scene: Scene, spec: GridSpec) -> ObstacleMask:
    """Rasterize posed blocks onto the slice plane as an obstacle mask.

    A cell is solid iff its center, lifted to z = slice_height, lies inside
    some block's oriented box.

    Raises:
        FullyBlocked: if the inlet or outlet column ends up entirely solid.
    """
    xs, ys = spec.cell_centers()
    gx, gy = np.meshgrid(xs, ys)  # (ny, nx)
    pts = np.stack([gx, gy, np.full_like(gx, spec.slice_height)], axis=-1).reshape(-1, 3)
    solid = np.zeros(pts.shape[0], dtype=bool)
    for block in scene.blocks:
        pose = scene.world_poses[block.id]
        local = (pts - pose.translation) @ pose.rotation.as_matrix()
        inside = (np.abs(local) <= block.half_extents + 1e-12).all(axis=1)
        solid |= inside
    mask = solid.reshape(spec.ny, spec.nx)
    if spec.boundary == "channel":
        if mask[:, 0].all():
            raise FullyBlocked("inlet column is entirely solid")
        if mask[:, -1].all():
            raise FullyBlocked("outlet column is entirely solid")
    return ObstacleMask(mask)


@njit(cache=True)
def _kernel(f, f_new, solid, tau, u_in, gx, gy, mode, rho_out, ux_out, uy_out):
    ny, nx = solid.shape
    inv_tau = 1.0 / tau

    # BGK collision with a first-order body-force term (writes back into f).
    for j in range(ny):
        for i in range(nx):
            if solid[j, i]:
                continue
            rho = 0.0
            mx = 0.0
            my = 0.0
            for k in range(9):
                v = f[k, j, i]
                rho += v
                mx += v * _CX[k]
                my += v * _CY[k]
            ux = mx / rho
            uy = my / rho
            for k in range(9):
                cu = _CX[k] * ux + _CY[k] * uy
                feq = _W[k] * rho * (1.0 + 3.0 * cu + 4.5 * cu * cu - 1.5 * (ux * ux + uy * uy))
                force = 3.0 * _W[k] * rho * (_CX[k] * gx + _CY[k] * gy)
                f[k, j, i] += (feq - f[k, j, i]) * inv_tau + force

    # Streaming with halfway bounce-back at walls and obstacles.
    for j in range(ny):
        for i in range(nx):
            if solid[j, i]:
                for k in range(9):
                    f_new[k, j, i] = f[k, j, i]
                continue
            for k in range(9):
                si = i - _CX[k]
                sj = j - _CY[k]
                bounce = False
                if sj < 0 or sj >= ny:
                    bounce = True  # top/bottom wall in every mode
                elif si < 0 or si >= nx:
                    if mode == 2:
                        si = si % nx  # periodic in x
                    elif mode == 1:
                        bounce = True  # closed box: side walls
                    else:
                        # channel: the inlet/outlet columns are rewritten
                        # below, so the off-grid source value is irrelevant
                        bounce = True
                elif solid[sj, si]:
                    bounce = True
                if bounce:
                    f_new[k, j, i] = f[_OPP[k], j, i]
                else:
                    f_new[k, j, i] = f[k, sj, si]

    if mode == 0:
        # Inlet: fixed-velocity equilibrium at the local (neighbor-column)
        # density, so only the velocity is imposed and pressure can adjust;
        # outlet: zero-gradient copy.
        for j in range(ny):
            if not solid[j, 0]:
                rho_in = 0.0
                if not solid[j, 1]:
                    for k in range(9):
                        rho_in += f_new[k, j, 1]
                else:
                    rho_in = 1.0
                for k in range(9):
                    cu = _CX[k] * u_in
                    f_new[k, j, 0] = _W[k] * rho_in * (
                        1.0 + 3.0 * cu + 4.5 * cu * cu - 1.5 * u_in * u_in
                    )
            if not solid[j, nx - 1]:
                # Zero-gradient copy of the normalized distribution: same
                # velocity as the neighbor, density anchored at 1 so the
                # global pressure level cannot drift.
                rho_n = 0.0
                for k in range(9):
                    rho_n += f_new[k, j, nx - 2]
                scale = 1.0 / rho_n if rho_n > 0.0 else 1.0
                for k in range(9):
                    f_new[k, j, nx - 1] = f_new[k, j, nx - 2] * scale

    # Macroscopics of the streamed state; solids report rho 1, u 0.
    max_speed_sq = 0.0
    min_rho = 1.0e300
    for j in range(ny):
        for i in range(nx):
            if solid[j, i]:
                rho_out[j, i] = 1.0
                ux_out[j, i] = 0.0
                uy_out[j, i] = 0.0
                continue
            rho = 0.0
            mx = 0.0
            my = 0.0
            for k in range(9):
                v = f_new[k, j, i]
                rho += v
                mx += v * _CX[k]
                my += v * _CY[k]
            rho_out[j, i] = rho
            if rho > 0.0:
                ux_out[j, i] = mx / rho
                uy_out[j, i] = my / rho
            else:
                ux_out[j, i] = 0.0
                uy_out[j, i] = 0.0
            sp = ux_out[j, i] ** 2 + uy_out[j, i] ** 2
            if sp > max_speed_sq:
                max_speed_sq = sp
            if rho < min_rho:
                min_rho = rho
    return max_speed_sq, min_rho


def initial_field(spec: GridSpec, mask: ObstacleMask | None = None) -> WindField:
    """Quiescent equilibrium state (rho = 1, u = 0)."""
    if mask is not None and not mask.matches(spec):
        raise ValueError("mask dimensions do not match the grid spec")
    shape = (spec.ny, spec.nx)
    f = np.empty((9, *shape), dtype=np.float64)
    for k in range(9):
        f[k].fill(_W[k])
    return WindField(
        rho=np.ones(shape), ux=np.zeros(shape), uy=np.zeros(shape), f=f,
        iterations=0, converged=False,
    )


def step(state: WindField, mask: ObstacleMask, spec: GridSpec) -> WindField:
    """One collide-stream cycle.

    Raises:
        Diverged: if any fluid speed reaches 0.3 lattice units or density
            drops to zero or below, or values stop being finite.
    """
    if not mask.matches(spec):
        raise ValueError("mask dimensions do not match the grid spec")
    f = state.f.copy()
    f_new = np.empty_like(f)
    shape = (spec.ny, spec.nx)
    rho = np.empty(shape)
    ux = np.empty(shape)
    uy = np.empty(shape)
    solid = np.ascontiguousarray(mask.solid, dtype=np.bool_)
    max_speed_sq, min_rho = _kernel(
        f,
        f_new,
        solid,
        spec.tau,
        spec.inlet_velocity,
        spec.body_force[0],
        spec.body_force[1],
        _MODES[spec.boundary],
        rho,
        ux,
        uy,
    )
    if not math.isfinite(max_speed_sq) or not math.isfinite(min_rho):
        raise Diverged(f"non-finite state after iteration {state.iterations + 1}")
    if min_rho <= 0.0:
        raise Diverged(f"density {min_rho:.3e} <= 0 after iteration {state.iterations + 1}")
    if max_speed_sq >= MAX_LATTICE_SPEED**2:
        raise Diverged(
            f"lattice speed {math.sqrt(max_speed_sq):.3f} >= {MAX_LATTICE_SPEED} "
            f"after iteration {state.iterations + 1}"
        )
    return WindField(
        rho=rho, ux=ux, uy=uy, f=f_new, iterations=state.iterations + 1, converged=False
    )


def run_to_steady(
    mask: ObstacleMask,
    spec: GridSpec,
    tol: float = 1e-5,
    max_iters: int = 40_000,
    check_every: int = 100,
    progress=None,
) -> WindField:
    """Iterate until the windowed velocity change falls below tol.

    Convergence: every ``check_every`` steps, the max cellwise velocity
    change since the previous check, relative to the current max speed, must
    fall below ``tol``. Returns with converged=False if max_iters runs out.
    ``progress``, when given, is called as progress(iteration, residual).

    Raises:
        Diverged: propagated from stepping.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    state = initial_field(spec, mask)
    if max_iters == 0:
        return state
    prev_ux = state.ux.copy()
    prev_uy = state.uy.copy()
    while state.iterations < max_iters:
        state = step(state, mask, spec)
        if state.iterations % check_every == 0 or state.iterations == max_iters:
            du = np.hypot(state.ux - prev_ux, state.uy - prev_uy).max()
            scale = max(float(state.speed.max()), 1e-12)
            residual = float(du) / scale
            if progress is not None:
                progress(state.iterations, residual)
            if residual < tol:
                return replace(state, converged=True)
            prev_ux = state.ux.copy()
            prev_uy = state.uy.copy()
    return state


def probe(field: WindField, world_point, spec: GridSpec) -> NDArray[np.float64]:
    """Bilinear velocity sample at a world (x, y) point, in m/s.

    Physical scaling: lattice speeds multiply by
    physical_inlet_speed / inlet_velocity.

    Raises:
        OutOfDomain: if the point lies outside the grid extent.
    """
    p = np.asarray(world_point, dtype=np.float64).reshape(-1)
    x, y = float(p[0]), float(p[1])
    if not (
        spec.origin_x <= x <= spec.origin_x + spec.nx * spec.dx
        and spec.origin_y <= y <= spec.origin_y + spec.ny * spec.dx
    ):
        raise OutOfDomain(f"point ({x}, {y}) outside the grid extent")
    # Continuous cell coordinates; cell centers sit at half-integers.
    ci = (x - spec.origin_x) / spec.dx - 0.5
    cj = (y - spec.origin_y) / spec.dx - 0.5
    ci = min(max(ci, 0.0), spec.nx - 1.0)
    cj = min(max(cj, 0.0), spec.ny - 1.0)
    i0, j0 = int(ci), int(cj)
    i1, j1 = min(i0 + 1, spec.nx - 1), min(j0 + 1, spec.ny - 1)
    wx, wy = ci - i0, cj - j0
    out = np.empty(2)
    for axis, u in enumerate((field.ux, field.uy)):
        out[axis] = (
            u[j0, i0] * (1 - wx) * (1 - wy)
            + u[j0, i1] * wx * (1 - wy)
            + u[j1, i0] * (1 - wx) * wy
            + u[j1, i1] * wx * wy
        )
    return out * (spec.physical_inlet_speed / spec.inlet_velocity)


def write_field(path: str | Path, field: WindField, spec: GridSpec) -> None:
    """Binary export: header line "WND1 nx ny dx", then rho, ux, uy planes
    as row-major little-endian float64; spec and run info in a JSON sidecar."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(f"WND1 {spec.nx} {spec.ny} {spec.dx!r}\n".encode("ascii"))
        for plane in (field.rho, field.ux, field.uy):
            f.write(plane.astype("<f8").tobytes(order="C"))
    sidecar = {
        "spec": spec.to_json_dict(),
        "iterations": field.iterations,
        "converged": field.converged,
    }
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, sort_keys=True, indent=2) + "\n"
    )


def read_field(path: str | Path) -> tuple[WindField, GridSpec]:
    path = Path(path)
    raw = path.read_bytes()
    nl = raw.index(b"\n")
    tokens = raw[:nl].decode("ascii").split()
    if len(tokens) != 4 or tokens[0] != "WND1":
        raise ValueError(f"{path}: not a WND1 field file")
    nx, ny, _dx = int(tokens[1]), int(tokens[2]), float(tokens[3])
    body = np.frombuffer(raw[nl + 1 :], dtype="<f8")
    if body.size != 3 * nx * ny:
        raise ValueError(f"{path}: expected {3 * nx * ny} floats, found {body.size}")
    planes = body.reshape(3, ny, nx)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    spec = GridSpec.from_json_dict(sidecar["spec"])
    rho, ux, uy = (np.ascontiguousarray(p) for p in planes)
    f = np.empty((9, ny, nx))
    for k in range(9):
        cu = _CX[k] * ux + _CY[k] * uy
        f[k] = _W[k] * rho * (1.0 + 3.0 * cu + 4.5 * cu * cu - 1.5 * (ux**2 + uy**2))
    return (
        WindField(
            rho=rho, ux=ux, uy=uy, f=f,
            iterations=int(sidecar["iterations"]), converged=bool(sidecar["converged"]),
        ),
        spec,
    )


def write_field_csv(path: str | Path, field: WindField, spec: GridSpec) -> None:
    """Plain-text export for small grids: x,y,rho,ux,uy per cell."""
    xs, ys = spec.cell_centers()
    with open(path, "w") as f:
        f.write("x,y,rho,ux,uy\n")
        for j in range(spec.ny):
            for i in range(spec.nx):
                f.write(
                    f"{xs[i]!r},{ys[j]!r},{field.rho[j, i]!r},"
                    f"{field.ux[j, i]!r},{field.uy[j, i]!r}\n"
                )
