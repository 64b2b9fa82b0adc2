"""Command-line entry point.

    icebhm --config run.yaml [--seed N] [--threads N] [--out DIR]

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 input/output failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import ConfigError, FitConfig, RunConfig, SimulateConfig, TransportConfig, parse_config
from .inference import run_chains, split_rhat
from .matern import MaternParams, PcPrior
from .mesh import (
    MeshError,
    assemble_fem,
    build_mesh,
    point_eval_matrix,
    read_mesh,
    read_polygon,
    write_mesh,
    write_polygon,
)
from .models import SpdeRegressionModel
from .observations import ObservationError, PointObs, point_operator, read_observations, write_observations
from .processes import SPATIAL_ONLY, ProcessSpec, build_block, fixed_effects_prior, stack
from .rates_study import run_rates_study
from .results import Report, ResultWriter, emit_results
from .smb_study import _sample_in_polygon, elevation_model, glacier_polygon, run_smb_study
from .sparse_chol import SparseCholesky
from .transport import CflError, Grid, TransportState, run, uniform_velocity

__all__ = ["main", "EXIT_OK", "EXIT_CONFIG", "EXIT_NUMERICAL", "EXIT_IO"]

log = logging.getLogger("icebhm")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
RHAT_LIMIT = 1.05


class InputError(Exception):
    """A declared input file could not be read or parsed."""


def _read(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (OSError, ObservationError, MeshError, KeyError, ValueError) as exc:
        raise InputError(f"{type(exc).__name__}: {exc}") from exc


# -- fit ------------------------------------------------------------------------


def _fit_mesh(cfg: FitConfig):
    if cfg.vertices is not None:
        poly = _read(read_polygon, cfg.polygon) if cfg.polygon else None
        return _read(read_mesh, cfg.vertices, cfg.triangles, poly)
    poly = _read(read_polygon, cfg.polygon)
    return build_mesh(poly, cfg.mesh_edge, cfg.mesh_extension, max(cfg.init_rho, 3 * cfg.pc_prior.rho0))


def _run_fit(cfg: FitConfig, seed: int, out: Path) -> Report:
    t0 = time.perf_counter()
    obs = _read(read_observations, cfg.observations)
    if not obs or not all(isinstance(o, PointObs) for o in obs):
        raise InputError("fit mode needs point observations without an instrument column")
    mesh = _fit_mesh(cfg)
    writer = ResultWriter(out)
    spec = ProcessSpec("U", SPATIAL_ONLY, mesh, MaternParams(cfg.init_sigma, cfg.init_rho), fem=assemble_fem(mesh))
    blocks = [build_block(spec)]
    if cfg.fixed_effects:
        blocks.append(fixed_effects_prior("beta", dict(cfg.fixed_effects)))
    prior = stack(blocks)
    try:
        H, nv, offset = point_operator(obs, prior, "U", "beta" if cfg.fixed_effects else None)
    except ObservationError as exc:
        raise InputError(str(exc)) from exc
    z = np.array([o.value for o in obs]) - offset
    pc = PcPrior(cfg.pc_prior.rho0, cfg.pc_prior.alpha_rho, cfg.pc_prior.sigma0, cfg.pc_prior.alpha_sigma)
    model = SpdeRegressionModel(prior, "U", H, nv, pc, init=(cfg.init_sigma, cfg.init_rho))
    names = [h.name for h in model.hyper]
    summary: dict = {"method": cfg.method, "n_obs": len(obs), "n_vertices": mesh.n_vertices}
    seg = prior.segment("U", "field")
    field_sl = slice(seg.start, seg.start + seg.size)

    if cfg.method == "map":
        theta, res = model.fit_map(z)
        mean = res.mean
        var = res.marginal_sd**2
        summary["hyperparameters"] = theta
    else:
        sc = cfg.sampler
        chains = run_chains(
            model.latent_model(), z, sc.chains, seed,
            n_iter=sc.iterations, burn_in=sc.burn_in, thin=sc.thin, target_acceptance=sc.target_acceptance,
        )
        for k, ch in enumerate(chains):
            ch.write(writer.path(f"chains/chain_{k}.csv"))
        hyper = {}
        for j, name in enumerate(names):
            draws = np.concatenate([c.samples[:, j] for c in chains])
            lo, med, hi = np.quantile(draws, [0.05, 0.5, 0.95])
            rhat = split_rhat([c.samples[:, j] for c in chains]) if sc.chains > 1 else float("nan")
            hyper[name] = {"median": med, "q05": lo, "q95": hi, "rhat": rhat}
        summary["hyperparameters"] = hyper
        summary["acceptance_rates"] = [c.acceptance_rate for c in chains]
        bad = [n for n, h in hyper.items() if np.isfinite(h["rhat"]) and h["rhat"] >= RHAT_LIMIT]
        summary["converged"] = not bad
        if bad:
            log.warning("split R-hat >= %.2f for %s; run longer chains", RHAT_LIMIT, ", ".join(bad))
        latent = np.concatenate([c.latent for c in chains])
        mean = latent.mean(axis=0)
        var = latent.var(axis=0, ddof=1)

    sd = np.sqrt(np.maximum(var, 0.0))
    writer.table(
        "field.csv",
        ["index", "s1", "s2", "mean", "sd"],
        [(i, *mesh.vertices[i], mean[field_sl][i], sd[field_sl][i]) for i in range(mesh.n_vertices)],
    )
    if cfg.fixed_effects:
        writer.table(
            "fixed_effects.csv",
            ["name", "mean", "sd"],
            [(n, mean[prior.segment("beta", n).start], sd[prior.segment("beta", n).start]) for n in cfg.fixed_effects],
        )
    write_mesh(mesh, writer.path("mesh_vertices.csv"), writer.path("mesh_triangles.csv"))
    return Report("fit", summary, writer, cfg.model_dump(), seed, time.perf_counter() - t0)


# -- simulate ---------------------------------------------------------------------


def _run_simulate(cfg: SimulateConfig, seed: int, out: Path) -> Report:
    t0 = time.perf_counter()
    poly = _read(read_polygon, cfg.polygon) if cfg.polygon else glacier_polygon()
    mesh = build_mesh(poly, cfg.mesh_edge, cfg.mesh_extension, cfg.rho)
    writer = ResultWriter(out)
    ss = np.random.SeedSequence(seed)
    site_ss, field_ss, noise_ss = ss.spawn(3)
    lo, hi = cfg.elevation_range_m
    elev = elevation_model(poly, lo, hi)
    sites = _sample_in_polygon(poly, cfg.n_sites, np.random.default_rng(site_ss), margin=0.02)
    site_elev = elev(sites)
    spec = ProcessSpec("U", SPATIAL_ONLY, mesh, MaternParams(cfg.sigma, cfg.rho))
    block = build_block(spec)
    field = SparseCholesky(block.Q).sample(np.random.default_rng(field_ss))
    u = point_eval_matrix(mesh, sites) @ field
    coef = cfg.coefficients
    covs = {"intercept": np.ones(len(sites)), "s1": sites[:, 0], "s2": sites[:, 1], "elevation": site_elev}
    unknown = set(coef) - set(covs)
    if unknown:
        raise ConfigError([f"simulate.coefficients: unknown term(s) {sorted(unknown)}"])
    mean = sum(coef[k] * covs[k] for k in coef)
    rng = np.random.default_rng(noise_ss)
    obs, truth_rows = [], []
    for t in range(cfg.n_epochs):
        truth = mean + u
        vals = truth + cfg.noise_sd * rng.standard_normal(len(sites))
        for i, (s, e) in enumerate(zip(sites, site_elev)):
            obs.append(PointObs((float(s[0]), float(s[1])), float(vals[i]), t, cfg.noise_sd, {"elevation": float(e)}))
            truth_rows.append((t, i, s[0], s[1], truth[i]))
    write_observations(obs, writer.path("observations.csv"))
    writer.table("truth.csv", ["epoch", "site", "s1", "s2", "value"], truth_rows)
    write_polygon(poly, writer.path("polygon.csv"))
    write_mesh(mesh, writer.path("mesh_vertices.csv"), writer.path("mesh_triangles.csv"))
    writer.table("field_truth.csv", ["index", "value"], list(enumerate(field)))
    summary = {"n_obs": len(obs), "n_vertices": mesh.n_vertices, "sigma": cfg.sigma, "rho": cfg.rho}
    return Report("simulate", summary, writer, cfg.model_dump(), seed, time.perf_counter() - t0)


# -- transport --------------------------------------------------------------------


def _run_transport(cfg: TransportConfig, seed: int, out: Path) -> Report:
    t0 = time.perf_counter()
    grid = Grid(cfg.nx, cfg.ny, cfg.dx)
    X, Y = grid.centers()
    cx, cy = cfg.bump_center
    H0 = cfg.base_thickness + cfg.bump_amplitude * np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2 * cfg.bump_width**2))
    vx, vy = uniform_velocity(grid, *cfg.velocity)
    state = TransportState(grid, H0, vx, vy, cfg.surface_balance, cfg.basal_balance, boundary=cfg.boundary)
    m0 = state.total_mass
    end = run(state, cfg.dt, cfg.n_steps)
    writer = ResultWriter(out)
    writer.grid("thickness_initial.csv", grid, H0)
    writer.grid("thickness_final.csv", grid, end.H)
    budget = m0 + end.source_mass - end.outflow_mass + end.clipped_mass
    summary = {
        "initial_mass": m0,
        "final_mass": end.total_mass,
        "source_mass": end.source_mass,
        "outflow_mass": end.outflow_mass,
        "clipped_mass": end.clipped_mass,
        "budget_residual": end.total_mass - budget,
        "relative_budget_residual": (end.total_mass - budget) / max(abs(m0), 1e-300),
        "time": end.time,
    }
    return Report("transport", summary, writer, cfg.model_dump(), seed, time.perf_counter() - t0)


# -- entry point ------------------------------------------------------------------


def _dispatch(cfg: RunConfig, out: Path) -> Report:
    sec = cfg.section
    if cfg.mode == "smb-study":
        return run_smb_study(sec, cfg.seed, out)
    if cfg.mode == "rates-study":
        return run_rates_study(sec, cfg.seed, out)
    if cfg.mode == "fit":
        return _run_fit(sec, cfg.seed, out)
    if cfg.mode == "simulate":
        return _run_simulate(sec, cfg.seed, out)
    return _run_transport(sec, cfg.seed, out)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="icebhm", description="Latent Gaussian models for ice-sheet source separation.")
    p.add_argument("--config", required=True, help="YAML run configuration")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--threads", type=int, help="override the config thread count")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = parse_config(args.config, {"seed": args.seed, "threads": args.threads, "out": args.out})
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    out = Path(cfg.out)
    if not out.is_absolute() and args.out is None:
        out = Path(args.config).parent / out
    try:
        with threadpool_limits(limits=cfg.threads):
            report = _dispatch(cfg, out)
            # the echo is the whole validated run config, defaults included
            report.config = cfg.model_dump(mode="json")
            manifest = emit_results(report, out)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (CflError, np.linalg.LinAlgError, FloatingPointError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"{cfg.mode}: wrote {len(manifest['files'])} files to {out.resolve()}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
