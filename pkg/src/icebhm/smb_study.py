"""Desk-scale stake-network study of seasonal surface mass balance.

A glacier-shaped polygon carries a fixed network of stake sites.  For every
year and season the synthetic truth is linear in (s1, s2, elevation) plus a
Matérn residual; a random subset of 22-25 stakes is observed with noise.
Each (year, season) gets its own fit: four fixed effects and an SPDE field,
with the field's (sigma, rho) at their posterior mode under PC priors.
Prediction and prediction-SD maps go onto a regular grid; the net map is the
sum of the winter and summer maps.
"""
from __future__ import annotations

import logging
import math
import tempfile
import time

import numpy as np
import scipy.sparse as sp
import shapely
from scipy import stats
from shapely.geometry import Polygon

from .config import SmbStudyConfig
from .inference import gaussian_condition
from .matern import MaternParams, PcPrior
from .mesh import assemble_fem, build_mesh, point_eval_matrix
from .models import SpdeRegressionModel
from .observations import SMB_FIXED_EFFECT_PRECISIONS
from .processes import ProcessSpec, build_block, fixed_effects_prior, stack
from .results import Report, ResultWriter
from .scoring import grid_rmse, holdout_coverage
from .sparse_chol import NotPositiveDefiniteError, SparseCholesky
from .transport import Grid

__all__ = ["glacier_polygon", "elevation_model", "run_smb_study"]

log = logging.getLogger(__name__)

FIXED = ("intercept", "s1", "s2", "elevation")


def glacier_polygon(n: int = 72) -> Polygon:
    """An elongated, lobed ice-cap outline inside the unit square."""
    th = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
    r = 0.36 * (1.0 + 0.10 * np.cos(3 * th + 0.4) + 0.06 * np.sin(5 * th))
    x = 0.5 + 1.15 * r * np.cos(th)
    y = 0.5 + 0.85 * r * np.sin(th)
    c, s = math.cos(0.5), math.sin(0.5)
    xr = 0.5 + c * (x - 0.5) - s * (y - 0.5)
    yr = 0.5 + s * (x - 0.5) + c * (y - 0.5)
    return Polygon(np.column_stack([xr, yr]))


def elevation_model(poly: Polygon, low: float, high: float):
    """Smooth dome: ``high`` at the polygon's centroid falling to about ``low`` at its edge (metres)."""
    cx, cy = poly.centroid.x, poly.centroid.y
    radius = math.sqrt(poly.area / math.pi)

    def elev(points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        q = np.hypot(p[:, 0] - cx, p[:, 1] - cy) / radius
        return low + (high - low) * np.exp(-0.9 * q**2) + 40.0 * (p[:, 0] - cx)

    return elev


def _sample_in_polygon(poly: Polygon, n: int, rng: np.random.Generator, margin: float = 0.0) -> np.ndarray:
    inner = poly.buffer(-margin) if margin > 0 else poly
    x0, y0, x1, y1 = inner.bounds
    out = np.empty((0, 2))
    while len(out) < n:
        cand = rng.uniform([x0, y0], [x1, y1], size=(4 * n, 2))
        cand = cand[shapely.contains_xy(inner, cand[:, 0], cand[:, 1])]
        out = np.vstack([out, cand])
    return out[:n]


def _design(layout, A_field, locs: np.ndarray, elev: np.ndarray) -> sp.csr_matrix:
    """Rows [fixed effects ++ field weights] in the stacked layout."""
    n = len(locs)
    values = {"intercept": np.ones(n), "s1": locs[:, 0], "s2": locs[:, 1], "elevation": elev}
    rows = [np.arange(n)] * len(FIXED)
    cols = [np.full(n, layout.segment("beta", name).start) for name in FIXED]
    vals = [values[name] for name in FIXED]
    if A_field is not None:
        A = sp.coo_matrix(A_field)
        rows.append(A.row)
        cols.append(A.col + layout.segment("U", "field").start)
        vals.append(A.data)
    M = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, layout.size))
    return M.tocsr()


class _Study:
    def __init__(self, cfg: SmbStudyConfig, seed: int, writer: ResultWriter):
        self.cfg = cfg
        self.writer = writer
        self.ss = np.random.SeedSequence(seed)
        self.poly = Polygon(cfg.polygon) if cfg.polygon else glacier_polygon()
        if not self.poly.is_valid or self.poly.area <= 0:
            raise ValueError("study polygon must be simple with positive area")
        lo, hi = cfg.elevation_range_m
        self.elev = elevation_model(self.poly, lo, hi)
        ranges = [s.residual_rho for s in cfg.seasons.values()] + [cfg.pc_prior.rho0 * 3]
        self.mesh = build_mesh(self.poly, cfg.mesh_edge, cfg.mesh_extension, max(ranges))
        self.fem = assemble_fem(self.mesh)
        self.pc = PcPrior(cfg.pc_prior.rho0, cfg.pc_prior.alpha_rho, cfg.pc_prior.sigma0, cfg.pc_prior.alpha_sigma)
        site_rng = np.random.default_rng(self.ss.spawn(1)[0])
        self.sites = _sample_in_polygon(self.poly, cfg.n_sites, site_rng, margin=0.02)
        self.site_elev = self.elev(self.sites)
        # prediction grid over the polygon's bounding box; cells outside are NaN
        h = cfg.grid_spacing
        x0, y0, x1, y1 = self.poly.bounds
        self.grid = Grid(int(math.ceil((x1 - x0) / h)), int(math.ceil((y1 - y0) / h)), h, (x0, y0))
        X, Y = self.grid.centers()
        inside = shapely.contains_xy(self.poly, X.ravel(), Y.ravel())
        self.inside = inside
        self.grid_pts = np.column_stack([X.ravel(), Y.ravel()])[inside]
        self.grid_elev = self.elev(self.grid_pts)
        self.A_grid = point_eval_matrix(self.mesh, self.grid_pts)
        self.A_sites = point_eval_matrix(self.mesh, self.sites)

    def layout(self, sigma: float, rho: float, with_field: bool):
        blocks = []
        if with_field:
            spec = ProcessSpec("U", "spatial_only", self.mesh, MaternParams(sigma, rho), fem=self.fem, role="smb")
            blocks.append(build_block(spec))
        blocks.append(fixed_effects_prior("beta", SMB_FIXED_EFFECT_PRECISIONS))
        return stack(blocks)

    def to_grid(self, values: np.ndarray) -> np.ndarray:
        out = np.full(self.grid.nx * self.grid.ny, np.nan)
        out[self.inside] = values
        return out.reshape(self.grid.shape)

    def truth(self, season: str, rng: np.random.Generator):
        """Coefficients and residual draw; returns site and grid truth."""
        s = self.cfg.seasons[season]
        beta = np.array([s.intercept + s.intercept_year_sd * rng.standard_normal(), s.s1, s.s2, s.elevation])
        u = np.zeros(self.mesh.n_vertices)
        if s.residual_sigma > 0:
            spec = ProcessSpec(
                "U", "spatial_only", self.mesh, MaternParams(s.residual_sigma, s.residual_rho), fem=self.fem
            )
            u = SparseCholesky(build_block(spec).Q).sample(rng)

        def value(locs, elev, A):
            lin = beta[0] + beta[1] * locs[:, 0] + beta[2] * locs[:, 1] + beta[3] * elev
            return lin + A @ u

        return value(self.sites, self.site_elev, self.A_sites), value(self.grid_pts, self.grid_elev, self.A_grid)

    def fit(self, season: str, idx: np.ndarray, z: np.ndarray):
        """Posterior for one (year, season) from the stakes ``idx``; returns (result, layout, theta)."""
        cfg = self.cfg
        s = cfg.seasons[season]
        with_field = cfg.fit_field
        if cfg.hyperparameters == "truth" and s.residual_sigma > 0:
            init = (s.residual_sigma, s.residual_rho)
        else:
            # start the mode search at the PC prior's reference scales
            init = (0.5 * self.pc.sigma0, 3.0 * self.pc.rho0)
        layout = self.layout(*init, with_field)
        H = _design(layout, self.A_sites[idx] if with_field else None, self.sites[idx], self.site_elev[idx])
        nv = np.full(len(idx), cfg.noise_sd**2)
        if not with_field:
            return gaussian_condition(layout, H, nv, z), layout, {}
        model = SpdeRegressionModel(layout, "U", H, nv, self.pc, init=init)
        if cfg.hyperparameters == "truth":
            theta = {"sigma": init[0], "rho": init[1]}
            return model.condition(z, theta), layout, theta
        theta, res = model.fit_map(z)
        return res, layout, theta

    def predict(self, res, layout, with_field: bool, locs, elev, A):
        D = _design(layout, A if with_field else None, locs, elev)
        mean = D @ res.mean
        var = res.linear_combination_variance(D)
        return mean, np.sqrt(np.maximum(var, 0.0))


def run_smb_study(cfg: SmbStudyConfig, seed: int, out_dir=None) -> Report:
    """Fit every (year, season), write maps and holdout tables, and score them from the files."""
    t0 = time.perf_counter()
    if out_dir is None:
        out_dir = tempfile.mkdtemp(prefix="smb_study_")
    writer = ResultWriter(out_dir)
    st = _Study(cfg, seed, writer)
    z95 = stats.norm.ppf(0.975)
    writer.table(
        "sites.csv",
        ["site", "s1", "s2", "elevation_m"],
        [(i, *st.sites[i], st.site_elev[i]) for i in range(cfg.n_sites)],
    )
    fits, failed, holdout_files, rmse = [], [], [], {}
    year_seeds = st.ss.spawn(1 + len(cfg.years))[1:]
    for year, yss in zip(cfg.years, year_seeds):
        rng = np.random.default_rng(yss)
        k = int(rng.integers(cfg.min_sites, cfg.n_sites + 1))
        observed = np.sort(rng.choice(cfg.n_sites, size=k, replace=False))
        held = np.sort(rng.choice(observed, size=cfg.n_holdout, replace=False)) if cfg.n_holdout else np.zeros(0, int)
        used = np.setdiff1d(observed, held)
        maps = {}
        for season in cfg.seasons:
            site_truth, grid_truth = st.truth(season, rng)
            noise = cfg.noise_sd * rng.standard_normal(cfg.n_sites) if cfg.truth_noise else np.zeros(cfg.n_sites)
            z_all = site_truth + noise
            tag = f"{year}_{season}"
            try:
                res, layout, theta = st.fit(season, used, z_all[used])
            except (NotPositiveDefiniteError, np.linalg.LinAlgError, FloatingPointError) as exc:
                log.warning("fit %s failed: %s", tag, exc)
                failed.append({"year": year, "season": season, "error": str(exc)})
                continue
            wf = cfg.fit_field
            mean, sd = st.predict(res, layout, wf, st.grid_pts, st.grid_elev, st.A_grid)
            maps[season] = (mean, sd)
            if cfg.write_maps:
                writer.grid(f"maps/{tag}_truth.csv", st.grid, st.to_grid(grid_truth))
                writer.grid(f"maps/{tag}_mean.csv", st.grid, st.to_grid(mean))
                writer.grid(f"maps/{tag}_sd.csv", st.grid, st.to_grid(sd))
                rmse[tag] = grid_rmse(writer.root / f"maps/{tag}_truth.csv", writer.root / f"maps/{tag}_mean.csv")
            if len(held):
                hm, hsd = st.predict(res, layout, wf, st.sites[held], st.site_elev[held], st.A_sites[held])
                psd = np.sqrt(hsd**2 + cfg.noise_sd**2)
                name = f"holdout/{tag}.csv"
                writer.table(
                    name,
                    ["site", "value", "mean", "sd"],
                    [(int(i), z_all[i], hm[j], psd[j]) for j, i in enumerate(held)],
                )
                holdout_files.append(writer.root / name)
            betas = {n: float(res.mean[layout.segment("beta", n).start]) for n in FIXED}
            fits.append({"year": year, "season": season, "n_fit": int(len(used)), **theta, **betas})
        if cfg.write_maps and len(maps) == len(cfg.seasons) and {"winter", "summer"} <= set(maps):
            (mw, sw), (ms, ss_) = maps["winter"], maps["summer"]
            writer.grid(f"maps/{year}_net_mean.csv", st.grid, st.to_grid(mw + ms))
            writer.grid(f"maps/{year}_net_sd.csv", st.grid, st.to_grid(np.sqrt(sw**2 + ss_**2)))
    cov, n_held = holdout_coverage(holdout_files, 0.95) if holdout_files else (float("nan"), 0)
    writer.table(
        "fits.csv",
        ["year", "season", "n_fit", "sigma", "rho", *FIXED],
        [(f["year"], f["season"], f["n_fit"], f.get("sigma", ""), f.get("rho", ""), *(f[n] for n in FIXED)) for f in fits],
    )
    summary = {
        "n_vertices": st.mesh.n_vertices,
        "grid": {"nx": st.grid.nx, "ny": st.grid.ny, "dx": st.grid.dx, "cells_inside": int(st.inside.sum())},
        "n_fits": len(fits),
        "failed_fits": failed,
        "grid_rmse": rmse,
        "mean_grid_rmse": float(np.mean(list(rmse.values()))) if rmse else float("nan"),
        "holdout_coverage_95": cov,
        "holdout_count": n_held,
        "interval_z": float(z95),
    }
    return Report("smb-study", summary, writer, cfg.model_dump(), seed, time.perf_counter() - t0)
