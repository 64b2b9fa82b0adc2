"""Latent process priors and their stacking into one joint GMRF.

Three process kinds are supported:

* ``spatial_only``  a single time-invariant SPDE field, read at every epoch (GIA);
* ``ar1``           an AR(1) in time with spatially correlated innovations (SMB, firn);
* ``trend``         spatially varying intercept and slope on x_t = (1, t), plus
                    iid residual coefficients per epoch (ice dynamics).

Fixed-effect regression weights (intercept, coordinates, elevation) are a
fourth, mesh-free block type used by the point-data model.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp

from .matern import MaternParams, build_precision
from .mesh import FemMatrices, TriMesh, assemble_fem
from .sparse_chol import SparseCholesky

__all__ = [
    "SPATIAL_ONLY",
    "AR1",
    "TREND",
    "ProcessSpec",
    "PriorBlock",
    "Segment",
    "StackedPrior",
    "spatial_only_prior",
    "ar1_precision",
    "ar1_prior",
    "trend_regression_prior",
    "fixed_effects_prior",
    "build_block",
    "stack",
    "trend_variance_from_speed",
    "process_marginal_variance",
]

SPATIAL_ONLY = "spatial_only"
AR1 = "ar1"
TREND = "trend"
FIXED = "fixed"


@dataclass(frozen=True)
class ProcessSpec:
    """Declarative description of one latent process.

    ``role`` ties the process to instrument masks (``smb``, ``firn``, ``ice``,
    ``gia``, or anything else a mask knows about); it defaults to ``name``.
    ``weight_variances`` holds the prior variances of the intercept and slope
    fields of a trend process, as scalars or per-vertex arrays.
    """

    name: str
    kind: str
    mesh: TriMesh
    matern: MaternParams
    n_epochs: int = 1
    ar_coefficient: float | np.ndarray = 0.0
    weight_variances: tuple = (1.0, 1.0)
    white_noise_var: float = 1.0
    role: str | None = None
    fem: FemMatrices | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in (SPATIAL_ONLY, AR1, TREND):
            raise ValueError(f"unknown process kind {self.kind!r}")
        if self.n_epochs < 1:
            raise ValueError("n_epochs must be at least 1")
        a = np.asarray(self.ar_coefficient, dtype=float)
        if np.any(np.abs(a) >= 1.0):
            raise ValueError("AR coefficient must satisfy |a| < 1 at every vertex")
        if any(np.any(np.asarray(v) < 0) for v in self.weight_variances):
            raise ValueError("weight-prior variances must be non-negative")
        if self.white_noise_var <= 0:
            raise ValueError("white_noise_var must be positive")
        if self.role is None:
            object.__setattr__(self, "role", self.name)
        if self.fem is None:
            object.__setattr__(self, "fem", assemble_fem(self.mesh))

    @property
    def n_vertices(self) -> int:
        return self.mesh.n_vertices


class Segment(NamedTuple):
    process: str
    component: str
    time: int | None
    start: int
    size: int


@dataclass(frozen=True)
class PriorBlock:
    """Prior of one process: local component layout, precision, and epoch map.

    ``epoch_terms[t]`` lists ``(component, time, coefficient)`` triples whose
    weighted sum gives the process's basis coefficients at epoch t.
    """

    name: str
    kind: str
    components: tuple  # of (component, time, size)
    Q: sp.csc_matrix
    epoch_terms: tuple
    spec: ProcessSpec | None = None
    names: tuple = ()

    @property
    def size(self) -> int:
        return self.Q.shape[0]


def _spde(spec: ProcessSpec, params: MaternParams | None = None) -> sp.csc_matrix:
    return build_precision(spec.fem, params or spec.matern, check=False).Q


def spatial_only_prior(spec: ProcessSpec) -> PriorBlock:
    """One time-invariant SPDE field shared by all epochs."""
    if spec.kind != SPATIAL_ONLY:
        raise ValueError("spatial_only_prior needs a spatial_only spec")
    n = spec.n_vertices
    terms = tuple(((("field", None, 1.0),)) for _ in range(spec.n_epochs))
    return PriorBlock(spec.name, SPATIAL_ONLY, (("field", None, n),), _spde(spec), terms, spec)


def ar1_precision(Qw: sp.spmatrix, a, n_epochs: int) -> sp.csc_matrix:
    """Joint precision of x_t = a x_{t-1} + w_t, w_t ~ N(0, Qw^{-1}), x_0 = (1 - a^2)^{-1/2} w_0.

    With a constant ``a`` the start is exactly stationary.  A per-vertex ``a``
    scales the initial innovation vertex-wise, which keeps the precision sparse.
    """
    n = Qw.shape[0]
    a = np.broadcast_to(np.asarray(a, dtype=float), (n,))
    A = sp.diags(a)
    D = sp.diags(np.sqrt(1.0 - a * a))
    AQA = A @ Qw @ A
    QA = Qw @ A
    blocks = [[None] * n_epochs for _ in range(n_epochs)]
    for t in range(n_epochs):
        diag = D @ Qw @ D if t == 0 else Qw
        if t < n_epochs - 1:
            diag = diag + AQA
            blocks[t + 1][t] = -QA
            blocks[t][t + 1] = -QA.T
        blocks[t][t] = diag
    Q = sp.bmat(blocks, format="csc")
    return ((Q + Q.T) * 0.5).tocsc()


def ar1_prior(spec: ProcessSpec) -> PriorBlock:
    if spec.kind != AR1:
        raise ValueError("ar1_prior needs an ar1 spec")
    n, T = spec.n_vertices, spec.n_epochs
    Q = ar1_precision(_spde(spec), spec.ar_coefficient, T)
    comps = tuple(("field", t, n) for t in range(T))
    terms = tuple(((("field", t, 1.0),)) for t in range(T))
    return PriorBlock(spec.name, AR1, comps, Q, terms, spec)


def _scaled_field_precision(Q1: sp.spmatrix, variances) -> sp.csc_matrix:
    sd = np.sqrt(np.broadcast_to(np.asarray(variances, dtype=float), (Q1.shape[0],)))
    Dinv = sp.diags(1.0 / sd)
    return (Dinv @ Q1 @ Dinv).tocsc()


def trend_regression_prior(spec: ProcessSpec) -> PriorBlock:
    """Y_t = beta0(s) + t * beta1(s) + w_t(s).

    Each weight field is a unit-variance SPDE field (range from ``spec.matern``)
    scaled vertex-wise by the square root of its prior variance; a weight whose
    variance is identically zero is dropped.  Residuals w_t are iid per
    coefficient with variance ``white_noise_var``.
    """
    if spec.kind != TREND:
        raise ValueError("trend_regression_prior needs a trend spec")
    n, T = spec.n_vertices, spec.n_epochs
    unit = _spde(spec, MaternParams(1.0, spec.matern.rho, spec.matern.nu))
    comps, blocks, weights = [], [], []
    for k, var in enumerate(spec.weight_variances):
        var = np.broadcast_to(np.asarray(var, dtype=float), (n,))
        if np.all(var == 0):
            continue
        if np.any(var == 0):
            raise ValueError("weight variances must be all zero or all positive")
        comps.append((f"beta{k}", None, n))
        blocks.append(_scaled_field_precision(unit, var))
        weights.append(k)
    for t in range(T):
        comps.append(("w", t, n))
        blocks.append(sp.identity(n, format="csc") / spec.white_noise_var)
    terms = []
    for t in range(T):
        x_t = (1.0, float(t))
        row = [(f"beta{k}", None, x_t[k]) for k in weights if x_t[k] != 0.0]
        row.append(("w", t, 1.0))
        terms.append(tuple(row))
    Q = sp.block_diag(blocks, format="csc")
    return PriorBlock(spec.name, TREND, tuple(comps), Q, tuple(terms), spec)


def fixed_effects_prior(name: str, precisions: dict[str, float]) -> PriorBlock:
    """Independent zero-mean Gaussian regression weights."""
    names = tuple(precisions)
    prec = np.array([precisions[k] for k in names], dtype=float)
    if np.any(prec <= 0):
        raise ValueError("fixed-effect precisions must be positive")
    comps = tuple((k, None, 1) for k in names)
    return PriorBlock(name, FIXED, comps, sp.diags(prec, format="csc"), (), None, names)


def build_block(spec: ProcessSpec) -> PriorBlock:
    return {SPATIAL_ONLY: spatial_only_prior, AR1: ar1_prior, TREND: trend_regression_prior}[spec.kind](spec)


def trend_variance_from_speed(speed, base_variance: float, gain: float, power: float = 1.0) -> np.ndarray:
    """Trend-weight prior variance that increases monotonically with ice speed."""
    if base_variance <= 0 or gain < 0:
        raise ValueError("base_variance must be positive and gain non-negative")
    return base_variance + gain * np.abs(np.asarray(speed, dtype=float)) ** power


def process_marginal_variance(block: PriorBlock, t: int) -> np.ndarray:
    """Prior variance of the process value at every vertex at epoch t.

    Uses the structure of each kind so that only the spatial precision has to
    be inverted: stationary AR(1) variance is diag(Qw^-1) / (1 - a^2); a trend
    process adds var(beta0) + t^2 var(beta1) + residual variance.  Blocks with
    vertex-varying AR coefficients fall back to the joint selected inverse.
    """
    spec = block.spec
    if spec is None:
        raise ValueError("fixed-effect blocks have no spatial process")
    if block.kind == SPATIAL_ONLY:
        return SparseCholesky(block.Q).marginal_variances()
    if block.kind == AR1:
        a = np.asarray(spec.ar_coefficient, dtype=float)
        if a.ndim == 0:
            return SparseCholesky(_spde(spec)).marginal_variances() / (1.0 - float(a) ** 2)
        n = spec.n_vertices
        return SparseCholesky(block.Q).marginal_variances()[t * n : (t + 1) * n]
    unit = SparseCholesky(_spde(spec, MaternParams(1.0, spec.matern.rho, spec.matern.nu))).marginal_variances()
    var = np.zeros(spec.n_vertices)
    for c, _, coef in block.epoch_terms[t]:
        if c.startswith("beta"):
            k = int(c[4:])
            var += coef**2 * np.broadcast_to(np.asarray(spec.weight_variances[k], dtype=float), var.shape) * unit
        else:
            var += coef**2 * spec.white_noise_var
    return var


@dataclass(frozen=True)
class StackedPrior:
    """Joint zero-mean GMRF over all process coefficients.

    ``segments`` is the global layout in order: process, then component/time,
    then vertex.  ``dense_indices`` flags mesh-free coefficients (fixed
    effects) that should be eliminated last.
    """

    blocks: tuple
    segments: tuple
    Q: sp.csc_matrix
    mean: np.ndarray
    dense_indices: tuple = ()

    @property
    def size(self) -> int:
        return self.Q.shape[0]

    def block(self, name: str) -> PriorBlock:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    def segment(self, process: str, component: str, time: int | None = None) -> Segment:
        for s in self.segments:
            if s.process == process and s.component == component and s.time == time:
                return s
        raise KeyError((process, component, time))

    def index(self, process: str, component: str, time: int | None, offset: int) -> int:
        s = self.segment(process, component, time)
        if not 0 <= offset < s.size:
            raise IndexError(offset)
        return s.start + offset

    def lookup(self, index: int) -> tuple:
        for s in self.segments:
            if s.start <= index < s.start + s.size:
                return s.process, s.component, s.time, index - s.start
        raise IndexError(index)

    def epoch_map(self, process: str, t: int) -> list[tuple[int, float]]:
        """(segment start, coefficient) pairs giving the process at epoch t."""
        terms = self.block(process).epoch_terms[t]
        return [(self.segment(process, c, tt).start, coef) for c, tt, coef in terms]

    def process_field_matrix(self, process: str, t: int) -> sp.csr_matrix:
        """Sparse map from the stacked vector to the process's vertex coefficients at epoch t."""
        b = self.block(process)
        n = b.spec.n_vertices
        M = sp.csr_matrix((n, self.size))
        for start, coef in self.epoch_map(process, t):
            M = M + sp.csr_matrix(
                (np.full(n, coef), (np.arange(n), start + np.arange(n))), shape=(n, self.size)
            )
        return M

    def log_density(self, x: np.ndarray) -> float:
        chol = SparseCholesky(self.Q, self.dense_indices)
        r = np.asarray(x) - self.mean
        return float(0.5 * chol.logdet() - 0.5 * self.size * np.log(2 * np.pi) - 0.5 * r @ (self.Q @ r))


def stack(blocks: Sequence[PriorBlock]) -> StackedPrior:
    """Block-diagonal joint prior, laid out in the order given."""
    names = [b.name for b in blocks]
    dup = {n for n in names if names.count(n) > 1}
    if dup:
        raise ValueError(f"duplicate process id(s): {sorted(dup)}")
    segments, dense = [], []
    start = 0
    for b in blocks:
        for comp, t, size in b.components:
            segments.append(Segment(b.name, comp, t, start, size))
            if b.kind == FIXED:
                dense.extend(range(start, start + size))
            start += size
    Q = sp.block_diag([b.Q for b in blocks], format="csc")
    mean = np.zeros(start)
    mean.setflags(write=False)
    return StackedPrior(tuple(blocks), tuple(segments), Q, mean, tuple(dense))
