"""Run configuration: JSON file and command-line overrides."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path as FsPath

import jsonschema

from .errors import ConfigurationError
from .fields import CoefficientField, PhysicalScale, builtin_field, constant_field, expression_field
from .grid import TimeGrid, make_grid
from .schemas import ANALYSES, CONFIG_SCHEMA, SCHEMA_VERSION
from .walker import X0Spec

DEFAULT_FRACTAL_SCALES = [16, 64, 256, 1024, 4096]
DEFAULT_COMPARISON_FRACTIONS = (0.25, 0.5, 1.0)
MARKERS_PER_RUN = 1000


@dataclass
class RunConfig:
    scenario: str = "free"
    hbar: float = 1.0
    mass: float = 1.0
    omega: float | None = None
    drift: float | str | None = None
    volatility: float | str | None = None
    x0: float | dict = 0.0
    n_steps: int = 1_000_000
    horizon: float = 1.0
    n_paths: int = 10_000
    seed: int = 1
    reference_seed: int | None = None
    analyses: list = field(default_factory=lambda: list(ANALYSES))
    out_dir: str = "zitterwalk-out"
    k_low: float | None = None
    k_high: float | None = None
    ks_threshold: float | str = "auto"
    w1_threshold: float | None = None
    min_count: int = 1000
    n_xbins: int = 16
    window: int | str = "auto"
    markov_min_group: int = 50
    comparison_times: list | None = None
    calibration_pairs: int = 100
    calibration_quantile: float = 0.99
    delta_b: float = 1e-6
    delta_sigma: float = 1e-6
    delta_x0: float = 0.0
    lipschitz_bound: float | None = None
    fractal_scales: list = field(default_factory=lambda: list(DEFAULT_FRACTAL_SCALES))
    expected_dimension: float = 2.0
    dimension_tolerance: float = 0.05
    storage: str = "auto"
    write_ensemble: bool = False
    ensemble_stride: int = 1
    noise_draws: int = 1_000_000
    reference_method: str = "auto"

    # -- derived ------------------------------------------------------------------

    @property
    def scale(self) -> PhysicalScale:
        return PhysicalScale(self.hbar, self.mass)

    @property
    def grid(self) -> TimeGrid:
        return make_grid(self.n_steps, self.horizon)

    @property
    def band(self) -> tuple[float, float]:
        d = self.scale.diffusion
        lo = 0.1 * d if self.k_low is None else self.k_low
        hi = 10.0 * d if self.k_high is None else self.k_high
        return lo, hi

    @property
    def x0_spec(self) -> X0Spec:
        return X0Spec.parse(self.x0)

    @property
    def effective_window(self) -> int:
        if self.window == "auto":
            return max(1, self.n_steps // MARKERS_PER_RUN)
        return int(self.window)

    @property
    def effective_reference_seed(self) -> int:
        if self.reference_seed is not None:
            return self.reference_seed
        return (self.seed + 1) % 2**63

    @property
    def effective_times(self) -> list[float]:
        if self.comparison_times is None:
            return [f * self.horizon for f in DEFAULT_COMPARISON_FRACTIONS]
        return [float(t) for t in self.comparison_times]

    def field(self) -> CoefficientField:
        if self.scenario == "free":
            return builtin_field("free", self.scale)
        if self.scenario == "ou_nelson":
            return builtin_field("ou_nelson", self.scale, self.omega)
        b, s = self.drift, self.volatility
        if isinstance(b, (int, float)) and isinstance(s, (int, float)):
            return constant_field(float(b), float(s))
        return expression_field(b, s)

    def effective_lipschitz(self) -> float:
        if self.lipschitz_bound is not None:
            return float(self.lipschitz_bound)
        if self.scenario == "free":
            return 0.0
        if self.scenario == "ou_nelson":
            return float(self.omega)
        if isinstance(self.drift, (int, float)) and isinstance(self.volatility, (int, float)):
            return 0.0
        raise ConfigurationError("lipschitz_bound: required for the stability analysis "
                                 "of a custom expression field")

    def to_dict(self) -> dict:
        d = {"schema_version": SCHEMA_VERSION}
        d.update(asdict(self))
        return d

    def with_overrides(self, **changes) -> "RunConfig":
        data = self.to_dict()
        data.update(changes)
        return config_from_dict(data)


FIELD_NAMES = tuple(f.name for f in fields(RunConfig))


def _key_path(err: jsonschema.ValidationError) -> str:
    path = ".".join(str(p) for p in err.absolute_path)
    return path or "<root>"


def config_from_dict(data: dict, source: str = "config") -> RunConfig:
    """Validate ``data`` against the schema and the cross-field rules."""
    if not isinstance(data, dict):
        raise ConfigurationError(f"{source}: top level must be a JSON object")
    unknown = sorted(set(data) - set(FIELD_NAMES) - {"schema_version"})
    if unknown:
        raise ConfigurationError(f"{source}: unknown key(s) {', '.join(map(repr, unknown))}")
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        e = errors[0]
        raise ConfigurationError(f"{source}: key {_key_path(e)!r}: {e.message}")
    cfg = RunConfig(**{k: v for k, v in data.items() if k != "schema_version"})
    _check(cfg, source)
    return cfg


def _check(cfg: RunConfig, source: str) -> None:
    def bad(key, msg):
        raise ConfigurationError(f"{source}: key {key!r}: {msg}")

    if cfg.scenario == "ou_nelson" and cfg.omega is None:
        bad("omega", "required for scenario 'ou_nelson'")
    if cfg.scenario == "custom":
        for key in ("drift", "volatility"):
            if getattr(cfg, key) is None:
                bad(key, "required for scenario 'custom'")
    elif cfg.drift is not None or cfg.volatility is not None:
        bad("drift" if cfg.drift is not None else "volatility",
            f"only allowed with scenario 'custom' (scenario is {cfg.scenario!r})")
    for key in ("hbar", "mass", "horizon"):
        if not math.isfinite(getattr(cfg, key)):
            bad(key, "must be finite")
    try:
        cfg.scale
    except ConfigurationError as exc:
        bad("hbar", str(exc))
    lo, hi = cfg.band
    if not lo < hi:
        bad("k_high", f"band must satisfy k_low < k_high (got {lo}, {hi})")
    if cfg.scenario == "custom":
        try:
            cfg.field()
        except ConfigurationError as exc:
            bad("drift", str(exc))
    try:
        cfg.x0_spec
    except ConfigurationError as exc:
        bad("x0", str(exc))
    for t in cfg.effective_times:
        if t > cfg.horizon * (1 + 1e-12):
            bad("comparison_times", f"time {t} is beyond the horizon {cfg.horizon}")
    if cfg.n_steps % cfg.ensemble_stride:
        bad("ensemble_stride", f"must divide n_steps ({cfg.n_steps})")
    if cfg.storage == "thinned" and cfg.ensemble_stride == 1:
        bad("ensemble_stride", "thinned storage needs ensemble_stride > 1")


def load_config(path) -> dict:
    """Read a JSON config file, reporting syntax errors with line and column."""
    path = FsPath(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"{path}: cannot read config ({exc.strerror})") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}:{exc.lineno}:{exc.colno}: malformed JSON: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be a JSON object")
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigurationError(f"{path}: key 'schema_version': unsupported version {version!r} "
                                 f"(this build reads {SCHEMA_VERSION})")
    return data


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """File values (if any), then ``overrides`` on top, then validation."""
    data = load_config(path) if path is not None else {}
    source = str(path) if path is not None else "flags"
    merged = dict(data)
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return config_from_dict(merged, source)
