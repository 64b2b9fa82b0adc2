"""First-order upwind finite-volume solver for thickness transport.

Solves dH/dt + div(H v) = M_s + M_b on a regular grid with a prescribed
face velocity field.  The solver exists to produce physically consistent
synthetic truth (ice-dynamic thickness change driven by surface balance);
it is deliberately simple and monotone rather than accurate.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

__all__ = [
    "Grid",
    "TransportState",
    "CflError",
    "cfl_number",
    "step",
    "run",
    "uniform_velocity",
    "TruthConfig",
    "SyntheticTruth",
    "generate_synthetic_truth",
    "write_grid",
    "read_grid",
]

PERIODIC = "periodic"
FREE_FLUX = "free"
CFL_MAX = 0.9


class CflError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    nx: int
    ny: int
    dx: float
    origin: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1 or not self.dx > 0:
            raise ValueError("grid needs nx, ny >= 1 and dx > 0")

    @property
    def shape(self) -> tuple:
        return (self.ny, self.nx)

    @property
    def cell_area(self) -> float:
        return self.dx * self.dx

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Cell-centre coordinates as (ny, nx) arrays."""
        x = self.origin[0] + (np.arange(self.nx) + 0.5) * self.dx
        y = self.origin[1] + (np.arange(self.ny) + 0.5) * self.dx
        return np.meshgrid(x, y)

    def cell_index(self, points) -> tuple[np.ndarray, np.ndarray]:
        """(row, col) of the cells containing the points, clamped to the grid."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        col = np.floor((p[:, 0] - self.origin[0]) / self.dx).astype(int)
        row = np.floor((p[:, 1] - self.origin[1]) / self.dx).astype(int)
        return np.clip(row, 0, self.ny - 1), np.clip(col, 0, self.nx - 1)

    def bilinear(self, values: np.ndarray, points) -> np.ndarray:
        """Bilinear interpolation of cell-centred values, constant beyond the outer centres."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        fx = (p[:, 0] - self.origin[0]) / self.dx - 0.5
        fy = (p[:, 1] - self.origin[1]) / self.dx - 0.5
        fx = np.clip(fx, 0.0, self.nx - 1.0)
        fy = np.clip(fy, 0.0, self.ny - 1.0)
        i0 = np.minimum(np.floor(fx).astype(int), max(self.nx - 2, 0))
        j0 = np.minimum(np.floor(fy).astype(int), max(self.ny - 2, 0))
        i1 = np.minimum(i0 + 1, self.nx - 1)
        j1 = np.minimum(j0 + 1, self.ny - 1)
        tx, ty = fx - i0, fy - j0
        v = values
        return (
            v[j0, i0] * (1 - tx) * (1 - ty)
            + v[j0, i1] * tx * (1 - ty)
            + v[j1, i0] * (1 - tx) * ty
            + v[j1, i1] * tx * ty
        )


@dataclass(frozen=True)
class TransportState:
    """Thickness and forcing on a grid.

    ``vx`` lives on the x-faces, shape (ny, nx + 1); ``vy`` on the y-faces,
    shape (ny + 1, nx).  For periodic boundaries the first and last face
    columns (rows) are the same face and must agree.  The ledger fields
    accumulate mass (volume times cell area) for budget checks.
    """

    grid: Grid
    H: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    Ms: np.ndarray
    Mb: np.ndarray
    boundary: str = PERIODIC
    time: float = 0.0
    source_mass: float = 0.0
    outflow_mass: float = 0.0
    clipped_mass: float = 0.0
    inflow_thickness: float = 0.0

    def __post_init__(self):
        g = self.grid
        for name, shape in (("H", g.shape), ("Ms", g.shape), ("Mb", g.shape)):
            arr = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), shape).copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for name, shape in (("vx", (g.ny, g.nx + 1)), ("vy", (g.ny + 1, g.nx))):
            arr = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), shape).copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.boundary not in (PERIODIC, FREE_FLUX):
            raise ValueError(f"unknown boundary {self.boundary!r}")
        if self.boundary == PERIODIC and (
            not np.array_equal(self.vx[:, 0], self.vx[:, -1]) or not np.array_equal(self.vy[0], self.vy[-1])
        ):
            raise ValueError("periodic boundaries need matching velocities on opposite faces")
        if np.any(self.H < 0):
            raise ValueError("thickness must be non-negative")

    @property
    def total_mass(self) -> float:
        return float(self.H.sum() * self.grid.cell_area)


def uniform_velocity(grid: Grid, u: float, v: float) -> tuple[np.ndarray, np.ndarray]:
    return np.full((grid.ny, grid.nx + 1), float(u)), np.full((grid.ny + 1, grid.nx), float(v))


def cfl_number(state: TransportState, dt: float) -> float:
    """dt / dx times the largest per-cell sum of x- and y-face speeds.

    For flow along one axis this is the usual max|v| dt / dx; for oblique flow
    it is the bound that keeps the unsplit upwind update monotone.
    """
    sx = np.maximum(np.abs(state.vx[:, :-1]), np.abs(state.vx[:, 1:]))
    sy = np.maximum(np.abs(state.vy[:-1, :]), np.abs(state.vy[1:, :]))
    return float(dt / state.grid.dx * np.max(sx + sy))


def _face_fluxes(state: TransportState) -> tuple[np.ndarray, np.ndarray]:
    H, vx, vy = state.H, state.vx, state.vy
    if state.boundary == PERIODIC:
        left = np.concatenate([H[:, -1:], H], axis=1)
        right = np.concatenate([H, H[:, :1]], axis=1)
        below = np.concatenate([H[-1:, :], H], axis=0)
        above = np.concatenate([H, H[:1, :]], axis=0)
    else:
        pad_c = np.full((H.shape[0], 1), state.inflow_thickness)
        pad_r = np.full((1, H.shape[1]), state.inflow_thickness)
        left = np.concatenate([pad_c, H], axis=1)
        right = np.concatenate([H, pad_c], axis=1)
        below = np.concatenate([pad_r, H], axis=0)
        above = np.concatenate([H, pad_r], axis=0)
    Fx = np.where(vx > 0, vx * left, vx * right)
    Fy = np.where(vy > 0, vy * below, vy * above)
    return Fx, Fy


def step(state: TransportState, dt: float) -> TransportState:
    """Advance one explicit upwind step; negative thickness is clipped and accounted."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    c = cfl_number(state, dt)
    if c > CFL_MAX:
        safe = dt * CFL_MAX / c
        raise CflError(f"CFL number {c:.3f} exceeds {CFL_MAX}; use dt <= {safe:.6g}")
    g = state.grid
    Fx, Fy = _face_fluxes(state)
    div = (Fx[:, 1:] - Fx[:, :-1] + Fy[1:, :] - Fy[:-1, :]) / g.dx
    source = state.Ms + state.Mb
    H = state.H - dt * div + dt * source
    clipped = -H[H < 0].sum() * g.cell_area
    H = np.maximum(H, 0.0)
    outflow = 0.0
    if state.boundary == FREE_FLUX:
        net = Fx[:, -1].sum() - Fx[:, 0].sum() + Fy[-1, :].sum() - Fy[0, :].sum()
        outflow = float(net * g.dx * dt)
    return replace(
        state,
        H=H,
        time=state.time + dt,
        source_mass=state.source_mass + float(source.sum() * g.cell_area * dt),
        outflow_mass=state.outflow_mass + outflow,
        clipped_mass=state.clipped_mass + float(clipped),
    )


def run(state: TransportState, dt: float, n_steps: int) -> TransportState:
    for _ in range(n_steps):
        state = step(state, dt)
    return state


# -- synthetic truth ------------------------------------------------------------


@dataclass(frozen=True)
class TruthConfig:
    """Grid, flow, and forcing for a synthetic thickness-change experiment.

    ``velocity`` is a callable (x, y) -> (u, v) evaluated on faces, or a
    constant pair.  The SMB, firn and GIA fields come in as callables
    t -> (ny, nx) array (SMB, firn) and a single array (GIA), usually
    interpolated prior draws.
    """

    grid: Grid
    n_epochs: int = 7
    epoch_length: float = 1.0
    steps_per_epoch: int = 20
    initial_thickness: float | np.ndarray = 1.0
    velocity: object = (0.0, 0.0)
    boundary: str = FREE_FLUX
    inflow_thickness: float = 0.0


@dataclass
class SyntheticTruth:
    """Per-process elevation-change rates on the grid, one (ny, nx) array per epoch."""

    grid: Grid
    smb: list
    firn: list
    ice: list
    gia: np.ndarray
    thickness: list = field(default_factory=list)

    def altimetry(self, t: int) -> np.ndarray:
        return self.smb[t] + self.firn[t] + self.ice[t] + self.gia

    def process(self, role: str, t: int) -> np.ndarray:
        if role == "gia":
            return self.gia
        return getattr(self, role)[t]


def _face_velocity(grid: Grid, velocity) -> tuple[np.ndarray, np.ndarray]:
    if not callable(velocity):
        return uniform_velocity(grid, *velocity)
    x0, y0 = grid.origin
    xf = x0 + np.arange(grid.nx + 1) * grid.dx
    yc = y0 + (np.arange(grid.ny) + 0.5) * grid.dx
    X, Y = np.meshgrid(xf, yc)
    vx = np.asarray(velocity(X, Y)[0], dtype=float)
    xc = x0 + (np.arange(grid.nx) + 0.5) * grid.dx
    yf = y0 + np.arange(grid.ny + 1) * grid.dx
    X, Y = np.meshgrid(xc, yf)
    vy = np.asarray(velocity(X, Y)[1], dtype=float)
    return vx, vy


def generate_synthetic_truth(config: TruthConfig, smb, firn, gia) -> SyntheticTruth:
    """Run the transport model under the given SMB and split the thickness change.

    Over epoch t the SMB field smb(t) is applied as the surface source.  The
    ice-dynamic rate is the thickness change over the epoch minus the SMB
    contribution (i.e. minus the flux divergence), so that S + I equals the
    total thickness change rate.  Firn and GIA rates are taken as given.
    """
    g = config.grid
    vx, vy = _face_velocity(g, config.velocity)
    state = TransportState(
        g,
        np.broadcast_to(np.asarray(config.initial_thickness, dtype=float), g.shape),
        vx,
        vy,
        np.zeros(g.shape),
        np.zeros(g.shape),
        boundary=config.boundary,
        inflow_thickness=config.inflow_thickness,
    )
    dt = config.epoch_length / config.steps_per_epoch
    out_s, out_f, out_i, thick = [], [], [], [state.H]
    gia = np.broadcast_to(np.asarray(gia, dtype=float), g.shape).copy()
    for t in range(config.n_epochs):
        s = np.broadcast_to(np.asarray(smb(t), dtype=float), g.shape).copy()
        state = replace(state, Ms=s)
        before = state.H
        state = run(state, dt, config.steps_per_epoch)
        rate = (state.H - before) / config.epoch_length
        out_s.append(s)
        out_i.append(rate - s)
        out_f.append(np.broadcast_to(np.asarray(firn(t), dtype=float), g.shape).copy())
        thick.append(state.H)
    return SyntheticTruth(g, out_s, out_f, out_i, gia, thick)


# -- grid files ---------------------------------------------------------------


def write_grid(path, grid: Grid, values: np.ndarray) -> None:
    """Header ``nx,ny,dx,origin_x,origin_y`` then one row of values per grid row."""
    values = np.asarray(values, dtype=float).reshape(grid.shape)
    with open(path, "w") as fh:
        fh.write("nx,ny,dx,origin_x,origin_y\n")
        fh.write(f"{grid.nx},{grid.ny},{grid.dx!r},{float(grid.origin[0])!r},{float(grid.origin[1])!r}\n")
        for row in values:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_grid(path) -> tuple[Grid, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "nx,ny,dx,origin_x,origin_y":
        raise ValueError(f"{path}: not a grid file")
    nx, ny, dx, ox, oy = lines[1].split(",")
    grid = Grid(int(nx), int(ny), float(dx), (float(ox), float(oy)))
    values = np.array([[float(v) for v in ln.split(",")] for ln in lines[2 : 2 + grid.ny]])
    if values.shape != grid.shape:
        raise ValueError(f"{path}: expected {grid.shape} values, got {values.shape}")
    return grid, values
