"""Run configuration: strict YAML schema with accumulated errors.

Every section is a pydantic model with unknown keys forbidden.  Validation
problems are collected into one ``ConfigError`` listing all of them rather
than stopping at the first.
"""
from __future__ import annotations

from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

__all__ = [
    "ConfigError",
    "PcPriorConfig",
    "SeasonTruth",
    "SmbStudyConfig",
    "FieldPrior",
    "ArPrior",
    "TrendPrior",
    "RatesStudyConfig",
    "SamplerConfig",
    "FitConfig",
    "SimulateConfig",
    "TransportConfig",
    "RunConfig",
    "parse_config",
    "load_config",
]

MODES = ("smb-study", "rates-study", "fit", "simulate", "transport")


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` holds one message per problem."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class PcPriorConfig(Strict):
    """P(rho < rho0) = alpha_rho, P(sigma > sigma0) = alpha_sigma."""

    rho0: float = Field(0.1, gt=0)
    alpha_rho: float = Field(0.05, gt=0, lt=1)
    sigma0: float = Field(1.0, gt=0)
    alpha_sigma: float = Field(0.05, gt=0, lt=1)


class SeasonTruth(Strict):
    """Synthetic seasonal balance: linear in (s1, s2, elevation) plus a Matérn residual."""

    intercept: float
    s1: float = 0.0
    s2: float = 0.0
    elevation: float = 0.0  # per metre
    intercept_year_sd: float = Field(0.3, ge=0)
    residual_sigma: float = Field(0.3, ge=0)
    residual_rho: float = Field(0.3, gt=0)


def _default_seasons() -> dict:
    return {
        "winter": SeasonTruth(intercept=0.6, s1=0.3, s2=-0.2, elevation=0.0015),
        "summer": SeasonTruth(intercept=-5.0, s1=-0.2, s2=0.1, elevation=0.0025),
    }


class SmbStudyConfig(Strict):
    polygon: list[tuple[float, float]] | None = None
    n_sites: int = Field(25, ge=3)
    min_sites_per_year: int | None = Field(None, ge=3)
    first_year: int = 1997
    last_year: int = 2015
    seasons: dict[str, SeasonTruth] = Field(default_factory=_default_seasons)
    noise_sd: float = Field(0.15, gt=0)
    truth_noise: bool = True
    elevation_range_m: tuple[float, float] = (500.0, 1450.0)
    extent_m: float = Field(10_000.0, gt=0)
    grid_resolution_m: float = Field(100.0, gt=0)
    mesh_edge: float = Field(0.05, gt=0)
    mesh_extension: float = Field(1.0, ge=0)
    fit_field: bool = True
    hyperparameters: Literal["map", "truth"] = "map"
    pc_prior: PcPriorConfig = PcPriorConfig()
    n_holdout: int = Field(3, ge=0)
    write_maps: bool = True

    @model_validator(mode="after")
    def _check(self):
        errs = []
        if self.last_year < self.first_year:
            errs.append("last_year must not precede first_year (need at least one epoch)")
        lo = self.min_sites if self.min_sites_per_year is None else self.min_sites_per_year
        if lo > self.n_sites:
            errs.append("min_sites_per_year exceeds n_sites")
        if lo - self.n_holdout < 3:
            errs.append("n_holdout leaves fewer than 3 fitting sites in some years")
        if not self.seasons:
            errs.append("at least one season is required")
        if errs:
            raise ValueError("; ".join(errs))
        return self

    @property
    def min_sites(self) -> int:
        return min(22, self.n_sites) if self.min_sites_per_year is None else self.min_sites_per_year

    @property
    def years(self) -> list[int]:
        return list(range(self.first_year, self.last_year + 1))

    @property
    def grid_spacing(self) -> float:
        return self.grid_resolution_m / self.extent_m


class FieldPrior(Strict):
    sigma: float = Field(gt=0)
    rho: float = Field(gt=0)


class ArPrior(FieldPrior):
    ar_coefficient: float = Field(0.5, gt=-1, lt=1)


class TrendPrior(Strict):
    rho: float = Field(0.3, gt=0)
    intercept_variance: float = Field(1.0, ge=0)
    trend_base_variance: float = Field(0.01, gt=0)
    trend_speed_gain: float = Field(0.1, ge=0)
    white_noise_var: float = Field(0.02, gt=0)


INSTRUMENT_NAMES = Literal["GPS", "Altimetry", "Gravimetry"]


class RatesStudyConfig(Strict):
    n_epochs: int = Field(7, ge=1, le=10)
    instruments: list[INSTRUMENT_NAMES] = ["GPS", "Altimetry", "Gravimetry"]
    coarse_edge: float = Field(0.2, gt=0)
    fine_edge: float = Field(0.07, gt=0)
    mesh_extension: float = Field(0.5, ge=0)
    gia: FieldPrior = FieldPrior(sigma=0.5, rho=0.6)
    smb: ArPrior = ArPrior(sigma=0.5, rho=0.25, ar_coefficient=0.9)
    firn: ArPrior = ArPrior(sigma=0.3, rho=0.35, ar_coefficient=0.6)
    ice: TrendPrior = TrendPrior()
    spreading_rate: float = Field(0.01, ge=0)
    initial_thickness: float = Field(20.0, gt=0)
    truth_cells: int = Field(50, ge=4)
    n_gps: int = Field(15, ge=0)
    gps_noise: float = Field(0.05, gt=0)
    n_altimetry: int = Field(150, ge=0)
    altimetry_noise: float = Field(0.1, gt=0)
    gravimetry_tiles: int = Field(16, ge=1)
    gravimetry_noise: float = Field(1.0, gt=0)
    gravimetry_cell: float = Field(0.0125, gt=0)
    rho_ice: float = Field(917.0, gt=0)
    rho_surface: float = Field(350.0, gt=0)
    rho_rock: float = Field(3400.0, gt=0)
    n_replicates: int = Field(1, ge=1)
    n_posterior_draws: int = Field(200, ge=10)
    compare_without_gravimetry: bool = True
    write_maps: bool = True

    @field_validator("instruments")
    @classmethod
    def _two_instruments(cls, v):
        if len(set(v)) < 2:
            raise ValueError("at least two instrument types are needed to separate processes")
        return v


class SamplerConfig(Strict):
    iterations: int = Field(2000, ge=10)
    burn_in: int | None = Field(None, ge=0)
    chains: int = Field(4, ge=1)
    thin: int = Field(1, ge=1)
    target_acceptance: float = Field(0.35, gt=0, lt=1)

    @model_validator(mode="after")
    def _burn(self):
        if self.burn_in is not None and self.burn_in >= self.iterations:
            raise ValueError("burn_in must be smaller than iterations")
        return self


class FitConfig(Strict):
    """Fit an SPDE regression (fixed effects plus one Matérn field) to point data."""

    vertices: str | None = None
    triangles: str | None = None
    polygon: str | None = None
    mesh_edge: float = Field(0.05, gt=0)
    mesh_extension: float = Field(1.0, ge=0)
    observations: str
    fixed_effects: dict[str, float] = {"intercept": 1e-6, "s1": 1.0, "s2": 1.0, "elevation": 0.1}
    init_sigma: float = Field(1.0, gt=0)
    init_rho: float = Field(0.3, gt=0)
    pc_prior: PcPriorConfig = PcPriorConfig()
    method: Literal["mcmc", "map"] = "mcmc"
    sampler: SamplerConfig = SamplerConfig()

    @model_validator(mode="after")
    def _mesh_source(self):
        if (self.vertices is None) != (self.triangles is None):
            raise ValueError("vertices and triangles files go together")
        if self.vertices is None and self.polygon is None:
            raise ValueError("give a mesh (vertices + triangles) or a polygon to mesh")
        return self


class SimulateConfig(Strict):
    """Draw synthetic point data from an SPDE regression prior."""

    polygon: str | None = None
    mesh_edge: float = Field(0.05, gt=0)
    mesh_extension: float = Field(1.0, ge=0)
    sigma: float = Field(1.0, gt=0)
    rho: float = Field(0.3, gt=0)
    coefficients: dict[str, float] = {"intercept": 1.0, "s1": 0.5, "s2": -0.5, "elevation": 0.001}
    elevation_range_m: tuple[float, float] = (500.0, 1450.0)
    n_sites: int = Field(50, ge=1)
    n_epochs: int = Field(1, ge=1)
    noise_sd: float = Field(0.1, gt=0)


class TransportConfig(Strict):
    nx: int = Field(64, ge=1)
    ny: int = Field(64, ge=1)
    dx: float = Field(1.0 / 64, gt=0)
    velocity: tuple[float, float] = (1.0, 0.5)
    boundary: Literal["periodic", "free"] = "periodic"
    dt: float = Field(0.005, gt=0)
    n_steps: int = Field(1000, ge=1)
    base_thickness: float = Field(1.0, ge=0)
    bump_amplitude: float = Field(1.0, ge=0)
    bump_center: tuple[float, float] = (0.3, 0.5)
    bump_width: float = Field(0.1, gt=0)
    surface_balance: float = 0.0
    basal_balance: float = 0.0


_SECTIONS = {
    "smb-study": ("smb_study", SmbStudyConfig),
    "rates-study": ("rates_study", RatesStudyConfig),
    "fit": ("fit", FitConfig),
    "simulate": ("simulate", SimulateConfig),
    "transport": ("transport", TransportConfig),
}


class RunConfig(Strict):
    mode: Literal["smb-study", "rates-study", "fit", "simulate", "transport"]
    seed: int = Field(ge=0)
    threads: int = Field(1, ge=1)
    out: str = "results"
    smb_study: SmbStudyConfig | None = None
    rates_study: RatesStudyConfig | None = None
    fit: FitConfig | None = None
    simulate: SimulateConfig | None = None
    transport: TransportConfig | None = None

    @model_validator(mode="after")
    def _fill_section(self):
        key, model = _SECTIONS[self.mode]
        if getattr(self, key) is None:
            try:
                object.__setattr__(self, key, model())
            except ValidationError as exc:
                raise ValueError(f"mode {self.mode!r} needs a '{key}' section: {_messages(exc)}") from None
        return self

    @property
    def section(self):
        return getattr(self, _SECTIONS[self.mode][0])


def _messages(exc: ValidationError) -> list[str]:
    out = []
    for e in exc.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        msg = e["msg"]
        if e["type"] == "missing":
            msg = "field required"
        elif e["type"] == "extra_forbidden":
            msg = "unknown key"
        out.append(f"{loc}: {msg}")
    return out


_PATH_KEYS = {"fit": ("vertices", "triangles", "polygon", "observations"), "simulate": ("polygon",)}


def load_config(data: dict, base_dir=None) -> RunConfig:
    """Validate a config mapping; relative file paths resolve against ``base_dir``."""
    if not isinstance(data, dict):
        raise ConfigError(["<root>: config must be a mapping"])
    errors = []
    base = Path(base_dir) if base_dir is not None else Path.cwd()
    data = dict(data)
    for section, keys in _PATH_KEYS.items():
        sec = data.get(section)
        if not isinstance(sec, dict):
            continue
        sec = dict(sec)
        for k in keys:
            v = sec.get(k)
            if isinstance(v, str):
                p = Path(v) if Path(v).is_absolute() else base / v
                if not p.exists():
                    errors.append(f"{section}.{k}: file not found: {v}")
                sec[k] = str(p)
        data[section] = sec
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(errors + _messages(exc)) from None
    if errors:
        raise ConfigError(errors)
    return cfg


def parse_config(path, overrides: dict | None = None) -> RunConfig:
    """Read and validate a YAML run config, optionally overriding top-level keys."""
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError([f"<root>: not valid YAML: {exc}"]) from None
    data = {} if data is None else data
    if isinstance(data, dict) and overrides:
        data = {**data, **{k: v for k, v in overrides.items() if v is not None}}
    return load_config(data, path.parent)
