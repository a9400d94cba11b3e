"""Flat, typed run configuration.

The file format is one ``key = value`` pair per line, the value being a JSON
literal; ``#`` starts a comment.  Keys carry their units (``bau_cell_m``,
``threshold_ug_m3``).  Serialisation writes every key in sorted order, so
``dumps(loads(text))`` is a fixed point.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .frk import DEFAULT_BASIS_COUNTS, DEFAULT_CELL_SIZE
from .indicators import DAY_LIMIT, METHODS, THRESHOLD
from .ingest import MIN_HOURLY, MIN_SERIES_LENGTH
from .mqsr import DEFAULT_EPS, check_levels, parse_levels
from .sde import DEFAULT_BINS, DEFAULT_KNOTS, DEFAULT_SMOOTHING, DEFAULT_VARIANCE_TARGET


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # inputs and outputs
    measurements_csv: str | None = None
    registry_csv: str | None = None
    boundary_geojson: str | None = None
    municipalities_geojson: str | None = None
    altitude_asc: str | None = None
    mesh_stem: str | None = None
    output_dir: str = "airdist_out"
    # stages
    methods: list = field(default_factory=lambda: list(METHODS))
    consensus: bool = True
    # regulatory constants
    threshold_ug_m3: float = THRESHOLD
    day_limit_days: int = DAY_LIMIT
    # ingest
    min_hourly_readings: int = MIN_HOURLY
    min_series_length: int = MIN_SERIES_LENGTH
    popdensity_lambda: float = 1e-6
    trim_lambda: float = 1.0
    # mesh
    mesh_edge_m: float = 5000.0
    # quantile regression
    mqsr_alphas: str = "0.01:0.99:0.01"
    mqsr_lambda_grid: list = field(default_factory=lambda: [1.0])
    mqsr_gamma: float | None = None
    mqsr_eps_ug_m3: float = DEFAULT_EPS
    mqsr_tol: float = 1e-6
    mqsr_max_iter: int = 500
    cv_folds: int = 10
    # fixed rank kriging
    bau_cell_m: float = DEFAULT_CELL_SIZE
    frk_basis_counts: list = field(default_factory=lambda: list(DEFAULT_BASIS_COUNTS))
    frk_tol: float = 1e-6
    frk_max_iter: int = 200
    cfrk_mode: str = "plugin"
    # density estimation
    sde_knots: int = DEFAULT_KNOTS
    sde_bins: int = DEFAULT_BINS
    sde_smoothing: float = DEFAULT_SMOOTHING
    sde_variance_target: float = DEFAULT_VARIANCE_TARGET
    support_spacing_m: float = 500.0
    # reproducibility
    seed: int = 0
    threads: int = 0  # worker cap, 0 leaves the BLAS default

    # -- validation ---------------------------------------------------------
    def validate(self) -> "RunConfig":
        def pos(name, strict=True):
            v = getattr(self, name)
            if v is None or not np.isfinite(v) or (v <= 0 if strict else v < 0):
                raise ConfigError(f"{name} must be {'positive' if strict else 'non-negative'}, got {v!r}")

        bad = set(self.methods) - set(METHODS)
        if bad or not self.methods:
            raise ConfigError(f"methods must be a non-empty subset of {list(METHODS)}, got {self.methods}")
        if self.consensus and set(self.methods) != set(METHODS):
            raise ConfigError("consensus needs all three methods")
        for name in ("threshold_ug_m3", "mesh_edge_m", "bau_cell_m", "popdensity_lambda", "trim_lambda",
                     "mqsr_eps_ug_m3", "mqsr_tol", "frk_tol", "sde_smoothing", "support_spacing_m"):
            pos(name)
        pos("day_limit_days", strict=False)
        for name in ("min_hourly_readings", "mqsr_max_iter", "frk_max_iter", "sde_knots", "sde_bins"):
            if int(getattr(self, name)) != getattr(self, name) or getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.threads < 0:
            raise ConfigError("threads must be non-negative")
        if not 1 <= self.min_hourly_readings <= 24:
            raise ConfigError("min_hourly_readings must lie in 1..24")
        if self.min_series_length < 0:
            raise ConfigError("min_series_length must be non-negative")
        if self.mqsr_gamma is not None:
            if isinstance(self.mqsr_gamma, bool) or not isinstance(self.mqsr_gamma, (int, float)):
                raise ConfigError("mqsr_gamma must be a number or null")
            pos("mqsr_gamma")
        if not self.mqsr_lambda_grid or any(not (lam > 0) for lam in self.mqsr_lambda_grid):
            raise ConfigError("mqsr_lambda_grid must hold positive values")
        if self.cv_folds < 2:
            raise ConfigError("cv_folds must be at least 2")
        try:
            self.levels()
        except ValueError as exc:
            raise ConfigError(f"mqsr_alphas: {exc}") from None
        if len(self.frk_basis_counts) < 1 or any(int(c) < 2 for c in self.frk_basis_counts):
            raise ConfigError("frk_basis_counts needs at least two centres per level")
        if self.cfrk_mode not in ("plugin", "predictive"):
            raise ConfigError("cfrk_mode must be 'plugin' or 'predictive'")
        if not 0 < self.sde_variance_target <= 1:
            raise ConfigError("sde_variance_target must lie in (0, 1]")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        return self

    def levels(self) -> np.ndarray:
        return check_levels(parse_levels(self.mqsr_alphas))

    def require_inputs(self):
        need = ["measurements_csv", "registry_csv", "boundary_geojson", "altitude_asc", "municipalities_geojson"]
        missing = [k for k in need if not getattr(self, k)]
        if missing:
            what = "consensus requested but " if self.consensus and "municipalities_geojson" in missing else ""
            raise ConfigError(f"{what}missing input paths: {', '.join(missing)}")
        for k in need:
            if not Path(getattr(self, k)).exists():
                raise ConfigError(f"{k}: file {getattr(self, k)} not found")

    # -- serialisation ------------------------------------------------------
    def dumps(self) -> str:
        return "".join(f"{k} = {json.dumps(v)}\n" for k, v in sorted(asdict(self).items()))

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    def with_overrides(self, **kw) -> "RunConfig":
        d = asdict(self)
        for k, v in kw.items():
            if k not in d:
                raise ConfigError(f"unknown configuration key {k!r}")
            d[k] = v
        return from_dict(d)

    def seeds(self) -> dict:
        """Per-module seeds split deterministically from the root seed."""
        names = ("frk_basis", "mqsr_cv", "sde_basis")
        kids = np.random.SeedSequence(self.seed).spawn(len(names))
        return {n: int(k.generate_state(1)[0]) for n, k in zip(names, kids)}


_TYPES = {f.name: f for f in fields(RunConfig)}


def _coerce(key, value):
    default = RunConfig.__dataclass_fields__[key].default
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{key} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number")
        return float(value)
    return value


def from_dict(d: dict) -> RunConfig:
    unknown = set(d) - set(_TYPES)
    if unknown:
        raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
    return RunConfig(**{k: _coerce(k, v) for k, v in d.items()})


def loads(text: str) -> RunConfig:
    d = {}
    for no, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {no}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in d:
            raise ConfigError(f"line {no}: duplicate key {key}")
        try:
            d[key] = json.loads(raw)
        except json.JSONDecodeError:
            try:  # trailing comment
                d[key] = json.loads(raw.split("#", 1)[0])
            except json.JSONDecodeError:
                raise ConfigError(f"line {no}: value for {key} is not a JSON literal: {raw}") from None
    return from_dict(d)


def load(path) -> RunConfig:
    return loads(Path(path).read_text())


def dump(cfg: RunConfig, path):
    Path(path).write_text(cfg.dumps())
