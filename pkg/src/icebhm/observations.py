"""Linear observation operators: Z = H eta + offset + noise.

Two data models are covered.  Point data with fixed-effect covariates
(stake mass balance: intercept, s1, s2, elevation plus a latent field) and
footprint data from several instruments, where each datum integrates every
process it can see over its footprint with an instrument- and process-specific
weight (unit, zero, or a density for volume-to-mass conversion).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .mesh import Footprint, footprint_matrix, make_footprint, point_eval_matrix, read_polygon
from .processes import StackedPrior
from .sparse_chol import SparseCholesky

__all__ = [
    "RHO_ICE",
    "SMB_FIXED_EFFECT_PRECISIONS",
    "INSTRUMENTS",
    "ObservationError",
    "PointObs",
    "FootprintObs",
    "InstrumentMask",
    "point_operator",
    "footprint_operator",
    "simulate_data",
    "read_observations",
    "write_observations",
]

RHO_ICE = 917.0
RHO_SURFACE = 350.0
RHO_ROCK = 3400.0

# intercept effectively flat; elevation and coordinate weights as used for the stake data
SMB_FIXED_EFFECT_PRECISIONS = {"intercept": 1e-6, "s1": 1.0, "s2": 1.0, "elevation": 0.1}

GPS = "GPS"
ALTIMETRY = "Altimetry"
GRAVIMETRY = "Gravimetry"
INSTRUMENTS = (GPS, ALTIMETRY, GRAVIMETRY)


class ObservationError(ValueError):
    pass


@dataclass(frozen=True)
class PointObs:
    location: tuple
    value: float
    epoch: int
    noise_sd: float
    covariates: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.noise_sd > 0:
            raise ObservationError("noise_sd must be positive")


@dataclass(frozen=True)
class FootprintObs:
    """A datum integrating the processes over ``footprint``.

    A point instrument (a GPS station, an altimetry crossover) gives a
    ``location`` instead; its weights are then point evaluations.
    """

    instrument: str
    value: float
    epoch: int
    noise_sd: float
    footprint: Footprint | None = None
    location: tuple | None = None

    def __post_init__(self):
        if not self.noise_sd > 0:
            raise ObservationError("noise_sd must be positive")
        if (self.footprint is None) == (self.location is None):
            raise ObservationError("give exactly one of footprint or location")


Weight = float | Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class InstrumentMask:
    """Weight function for every (instrument, process role) pair.

    The defaults encode: GPS sees only bedrock motion; altimetry sees every
    elevation change with unit weight; gravimetry sees mass, so ice dynamics
    carries the ice density, surface balance the surface-snow density, GIA a
    rock density, and firn compaction (mass preserving) nothing.
    """

    weights: Mapping[tuple[str, str], Weight]

    @classmethod
    def default(
        cls, rho_ice: float = RHO_ICE, rho_surface: float = RHO_SURFACE, rho_rock: float = RHO_ROCK
    ) -> "InstrumentMask":
        w = {}
        for role in ("smb", "firn", "ice", "gia"):
            w[(GPS, role)] = 1.0 if role == "gia" else 0.0
            w[(ALTIMETRY, role)] = 1.0
        w[(GRAVIMETRY, "smb")] = rho_surface
        w[(GRAVIMETRY, "firn")] = 0.0
        w[(GRAVIMETRY, "ice")] = rho_ice
        w[(GRAVIMETRY, "gia")] = rho_rock
        return cls(w)

    @property
    def instruments(self) -> set[str]:
        return {i for i, _ in self.weights}

    def weight(self, instrument: str, role: str) -> Weight:
        if instrument not in self.instruments:
            raise ObservationError(f"unknown instrument {instrument!r}")
        try:
            return self.weights[(instrument, role)]
        except KeyError:
            raise ObservationError(f"mask has no weight for ({instrument}, {role})") from None

    def without(self, instrument: str) -> "InstrumentMask":
        return InstrumentMask({k: v for k, v in self.weights.items() if k[0] != instrument})


def _is_zero(w: Weight) -> bool:
    return not callable(w) and float(w) == 0.0


def _check_rows(H: sp.csr_matrix) -> None:
    empty = np.flatnonzero(np.diff(H.indptr) == 0)
    if len(empty):
        raise ObservationError(f"observation {int(empty[0])} sees no latent process")


class _Triplets:
    def __init__(self):
        self.rows, self.cols, self.vals = [], [], []

    def add(self, i: int, cols, vals) -> None:
        cols = np.asarray(cols)
        self.rows.append(np.full(len(cols), i))
        self.cols.append(cols)
        self.vals.append(np.asarray(vals, dtype=float))

    def matrix(self, shape) -> sp.csr_matrix:
        if not self.rows:
            return sp.csr_matrix(shape)
        M = sp.coo_matrix(
            (np.concatenate(self.vals), (np.concatenate(self.rows), np.concatenate(self.cols))), shape=shape
        ).tocsr()
        M.sum_duplicates()
        return M


def point_operator(
    obs: Sequence[PointObs],
    prior: StackedPrior,
    field_process: str | None = "U",
    fixed_effects: str | None = "beta",
    offsets: np.ndarray | None = None,
):
    """H rows ``[1, s1, s2, z(s), ...] ++ barycentric weights`` for point data.

    Fixed-effect names other than ``intercept``, ``s1``, ``s2`` are looked up
    in each observation's covariates.
    """
    n_obs = len(obs)
    trip = _Triplets()
    if fixed_effects is not None:
        block = prior.block(fixed_effects)
        for i, o in enumerate(obs):
            cols, vals = [], []
            for name in block.names:
                if name == "intercept":
                    v = 1.0
                elif name in ("s1", "s2"):
                    v = o.location[0 if name == "s1" else 1]
                else:
                    try:
                        v = o.covariates[name]
                    except KeyError:
                        raise ObservationError(f"observation {i} is missing covariate {name!r}") from None
                cols.append(prior.segment(fixed_effects, name).start)
                vals.append(v)
            trip.add(i, cols, vals)
    if field_process is not None and n_obs:
        spec = prior.block(field_process).spec
        locs = np.array([o.location for o in obs], dtype=float).reshape(n_obs, 2)
        A = point_eval_matrix(spec.mesh, locs).tocsr()
        for i, o in enumerate(obs):
            a = A[i]
            for start, coef in prior.epoch_map(field_process, o.epoch):
                trip.add(i, start + a.indices, coef * a.data)
    H = trip.matrix((n_obs, prior.size))
    _check_rows(H)
    noise_var = np.array([o.noise_sd**2 for o in obs])
    offset = np.zeros(n_obs) if offsets is None else np.asarray(offsets, dtype=float)
    return H, noise_var, offset


def footprint_operator(obs: Sequence, mask: InstrumentMask, prior: StackedPrior):
    """Stack the weighted footprint integrals of all processes into H."""
    roles = {b.name: b.spec.role for b in prior.blocks if b.spec is not None}
    cache: dict = {}
    trip = _Triplets()
    for j, o in enumerate(obs):
        for name, role in roles.items():
            w = mask.weight(o.instrument, role)
            if _is_zero(w):
                continue
            b = prior.block(name)
            if not 0 <= o.epoch < len(b.epoch_terms):
                raise ObservationError(f"observation {j} epoch {o.epoch} outside process {name!r}")
            key = (name, o.instrument, id(o.footprint) if o.footprint is not None else tuple(o.location))
            if key not in cache:
                mesh = b.spec.mesh
                if o.footprint is not None:
                    local = footprint_matrix(mesh, o.footprint, w)
                else:
                    f = w(np.atleast_2d(o.location))[0] if callable(w) else float(w)
                    local = f * point_eval_matrix(mesh, [o.location])
                cache[key] = sp.csr_matrix(local)
            local = cache[key]
            for start, coef in prior.epoch_map(name, o.epoch):
                trip.add(j, start + local.indices, coef * local.data)
    H = trip.matrix((len(obs), prior.size))
    _check_rows(H)
    noise_var = np.array([o.noise_sd**2 for o in obs])
    return H, noise_var


def simulate_data(prior, H, noise_var, seed, offset=None):
    """Draw eta ~ N(mean, Q^{-1}) and return (H eta + offset + noise, eta)."""
    rng = np.random.default_rng(seed)
    chol = SparseCholesky(prior.Q, getattr(prior, "dense_indices", ()))
    eta = np.asarray(prior.mean) + chol.sample(rng)
    noise = rng.standard_normal(H.shape[0]) * np.sqrt(np.asarray(noise_var, dtype=float))
    z = H @ eta + noise
    if offset is not None:
        z = z + offset
    return z, eta


# -- observation files --------------------------------------------------------

_BASE_COLUMNS = ["type", "epoch", "value", "noise_sd", "instrument", "s1", "s2", "footprint"]


def write_observations(obs: Sequence, path, footprint_files: Mapping[int, str] | None = None) -> None:
    """Write observations; footprints are referenced by polygon file name."""
    covs = sorted({k for o in obs if isinstance(o, PointObs) for k in o.covariates})
    footprint_files = footprint_files or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_BASE_COLUMNS + covs)
        for o in obs:
            if isinstance(o, PointObs):
                row = ["point", o.epoch, repr(o.value), repr(o.noise_sd), "", repr(o.location[0]), repr(o.location[1]), ""]
                row += [repr(float(o.covariates[k])) if k in o.covariates else "" for k in covs]
            else:
                kind = "footprint" if o.footprint is not None else "point"
                s1, s2 = ("", "") if o.location is None else (repr(o.location[0]), repr(o.location[1]))
                ref = footprint_files.get(id(o.footprint), "") if o.footprint is not None else ""
                row = [kind, o.epoch, repr(o.value), repr(o.noise_sd), o.instrument, s1, s2, ref] + [""] * len(covs)
            w.writerow(row)


def read_observations(path, cell_size: float = 0.01) -> list:
    """Read an observation file; footprint polygon paths are relative to it."""
    path = Path(path)
    out = []
    footprints: dict[str, Footprint] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(_BASE_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise ObservationError(f"observation file lacks columns {sorted(missing)}")
        covs = [c for c in reader.fieldnames if c not in _BASE_COLUMNS]
        for k, r in enumerate(reader):
            epoch, value, sd = int(r["epoch"]), float(r["value"]), float(r["noise_sd"])
            inst = r["instrument"].strip()
            if r["type"] == "footprint":
                ref = r["footprint"]
                if ref not in footprints:
                    footprints[ref] = make_footprint(read_polygon(path.parent / ref), cell_size)
                out.append(FootprintObs(inst, value, epoch, sd, footprint=footprints[ref]))
            elif r["type"] == "point":
                loc = (float(r["s1"]), float(r["s2"]))
                if inst:
                    out.append(FootprintObs(inst, value, epoch, sd, location=loc))
                else:
                    cv = {c: float(r[c]) for c in covs if r[c] not in ("", None)}
                    out.append(PointObs(loc, value, epoch, sd, cv))
            else:
                raise ObservationError(f"row {k}: unknown observation type {r['type']!r}")
    return out
