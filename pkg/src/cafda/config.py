"""Run configuration read from a TOML file.

Example::

    [data]
    phase1 = "phase1.csv"          # paths relative to this file
    phase2 = "phase2.csv"
    # columns = {day = "day", time = "time", output = "u"}

    [model]
    terms = ["constant_intercept", "functional_intercept(t)", "smooth(z)"]
    pve_threshold = 0.99
    drop_first_scores = 0          # rho: leading components not charted
    segments = []                  # day ids or ISO dates opening new segments
    min_points = 1                 # drop training days with fewer usable points

    [chart]
    lambda = 0.3
    target_arl = 370.4
    calibration_reps = 200000
    method = "blup"                # or "integration"

    [run]
    seed = 0
    out = "out"
    threads = 1

    [simulation]
    J = 300
    sigma2 = 0.2
    days = 100                     # Phase-II stream length
    lambdas = [0.1, 0.3, 1.0]
    reps = 10000

Every key is optional. Command-line flags override the file.
"""

from __future__ import annotations

import datetime as dt
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError, SpecError
from .famm import ModelSpec

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFAULT_TERMS = ("constant_intercept", "functional_intercept(t)")
SECTIONS = {
    "data": {"phase1", "phase2", "columns"},
    "model": {"terms", "pve_threshold", "drop_first_scores", "segments", "min_points"},
    "chart": {"lambda", "target_arl", "calibration_reps", "method"},
    "run": {"seed", "out", "threads"},
    "simulation": {"J", "sigma2", "days", "lambdas", "reps", "recovery_reps", "components", "deltas",
                   "max_steps", "target_arl"},
}


@dataclass(frozen=True)
class SimulationConfig:
    J: int = 300
    sigma2: float = 0.2
    days: int = 100
    lambdas: tuple = (0.1, 0.3, 1.0)
    reps: int = 10_000
    recovery_reps: int = 20
    components: tuple = (1, 2, 3)
    deltas: tuple = (0.0, 0.5, 1.0, 2.0, 4.0)
    max_steps: int = 100_000
    target_arl: float = 100.0


@dataclass(frozen=True)
class RunConfig:
    phase1: Path | None = None
    phase2: Path | None = None
    columns: dict = field(default_factory=dict)
    terms: tuple = DEFAULT_TERMS
    pve_threshold: float = 0.99
    rho: int = 0
    segments: tuple = ()
    min_points: int = 1
    lam: float = 0.3
    target_arl: float = 370.4
    calibration_reps: int = 200_000
    method: str = "blup"
    seed: int = 0
    out: Path = Path("out")
    threads: int | None = None
    simulation: SimulationConfig = field(default_factory=SimulationConfig)

    def __post_init__(self):
        if not 0 < self.lam <= 1:
            raise ConfigError(f"chart lambda must lie in (0, 1], got {self.lam}")
        if not self.target_arl > 1:
            raise ConfigError("target_arl must exceed 1")
        if self.calibration_reps < 100:
            raise ConfigError("calibration_reps must be >= 100")
        if self.method not in ("blup", "integration"):
            raise ConfigError(f"unknown scoring method {self.method!r}")
        if self.rho < 0:
            raise ConfigError("drop_first_scores must be >= 0")
        if self.threads is not None and self.threads < 1:
            raise ConfigError("threads must be >= 1")

    def model_spec(self) -> ModelSpec:
        return ModelSpec(tuple(self.terms), self.pve_threshold, self.rho, tuple(self.segments))

    def require(self, name):
        path = getattr(self, name)
        if path is None:
            raise ConfigError(f"no {name} data file configured")
        return path


def _segment(v):
    if isinstance(v, dt.date):
        return v
    if isinstance(v, str):
        try:
            return dt.date.fromisoformat(v)
        except ValueError:
            raise ConfigError(f"segment boundary {v!r} is not an ISO date") from None
    if isinstance(v, int):
        return v
    raise ConfigError(f"segment boundary {v!r} must be a day id or date")


def load_config(path) -> RunConfig:
    """Parse and validate a TOML run configuration."""
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_mapping(raw, path.parent)


def from_mapping(raw, base=Path(".")) -> RunConfig:
    for sec, body in raw.items():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown config section [{sec}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{sec}] must be a table")
        unknown = set(body) - SECTIONS[sec]
        if unknown:
            raise ConfigError(f"unknown key(s) in [{sec}]: {sorted(unknown)}")
    data = raw.get("data", {})
    model = raw.get("model", {})
    chart = raw.get("chart", {})
    run = raw.get("run", {})
    sim = raw.get("simulation", {})

    def path_of(v):
        return None if v is None else (base / v)

    terms = model.get("terms", DEFAULT_TERMS)
    if isinstance(terms, str) or not all(isinstance(t, str) for t in terms):
        raise ConfigError("model.terms must be a list of strings")
    try:
        simcfg = SimulationConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in sim.items()})
        cfg = RunConfig(
            phase1=path_of(data.get("phase1")),
            phase2=path_of(data.get("phase2")),
            columns=dict(data.get("columns", {})),
            terms=tuple(terms),
            pve_threshold=float(model.get("pve_threshold", 0.99)),
            rho=int(model.get("drop_first_scores", 0)),
            segments=tuple(_segment(s) for s in model.get("segments", [])),
            min_points=int(model.get("min_points", 1)),
            lam=float(chart.get("lambda", 0.3)),
            target_arl=float(chart.get("target_arl", 370.4)),
            calibration_reps=int(chart.get("calibration_reps", 200_000)),
            method=str(chart.get("method", "blup")),
            seed=int(run.get("seed", 0)),
            out=base / run.get("out", "out"),
            threads=None if run.get("threads") is None else int(run["threads"]),
            simulation=simcfg,
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid config value: {exc}") from None
    cfg.model_spec()  # fail early on bad terms
    return cfg


def override(cfg: RunConfig, **kw) -> RunConfig:
    """Replace fields whose new value is not ``None``."""
    names = {f.name for f in fields(RunConfig)}
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None and k in names})


__all__ = ["RunConfig", "SimulationConfig", "load_config", "from_mapping", "override", "SpecError"]
