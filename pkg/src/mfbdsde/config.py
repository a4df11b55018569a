"""Experiment configuration: schema, parsing, validation and run manifests."""
from __future__ import annotations

import difflib
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .bdsde import RegressionConfig, SolverConfig
from .control import OptimizerConfig
from .errors import InvalidArgumentError
from .fbdsde import ContinuationConfig
from .instances import SHIPPED_LQ, first_order_problem, scalar_interaction_problem
from .law import Ensemble, validate_coefficient_bounds
from .problems import Box, LqCoefficients, affine_terminal, lq_problem

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SCHEMA_VERSION = 1
PROBLEM_KINDS = ("lq", "scalar", "first-order", "custom-linear")
COMMANDS = ("simulate", "optimize", "continuation", "lq-verify", "oracle-check")
FORMATS = ("csv", "json")


class ConfigError(InvalidArgumentError):
    """Configuration problems; ``errors`` lists every message found."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


@dataclass(frozen=True)
class ProblemSection:
    kind: str = "lq"
    terminal_const: float = 1.0
    terminal_slope: float = 0.5
    control: float = 0.0
    lower: float | None = None
    upper: float | None = None
    coefficients: dict = field(default_factory=dict)


@dataclass(frozen=True)
class GridSection:
    horizon: float = 1.0
    n_steps: int = 20


@dataclass(frozen=True)
class EnsembleSection:
    particles: int | None = 1000
    seed: int = 0
    mode: str = "gaussian"


@dataclass(frozen=True)
class RegressionSection:
    degree: int = 2
    ridge: float = 1e-10
    mode: str = "montecarlo"
    picard_tol: float = 1e-8
    max_picard: int = 50


@dataclass(frozen=True)
class OptimizerSection:
    step: float = 1.0
    shrink: float = 0.5
    armijo: float = 1e-4
    max_halvings: int = 30
    tol: float = 1e-3
    max_iters: int = 200
    m_directions: int = 100
    sufficiency: bool = True


@dataclass(frozen=True)
class ContinuationSection:
    system: str = "monotone"
    delta: float = 0.1
    delta_min: float = 1.0 / 1024
    tol: float = 1e-8
    max_picard: int = 60
    inner_tol: float = 1e-11
    max_inner: int = 2000
    damping: float = 0.5
    acceleration: int = 5
    uniqueness_probe: bool = True


@dataclass(frozen=True)
class OutputSection:
    dir: str = "out"
    formats: tuple = FORMATS


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment settings, one attribute per config section."""

    problem: ProblemSection = field(default_factory=ProblemSection)
    grid: GridSection = field(default_factory=GridSection)
    ensemble: EnsembleSection = field(default_factory=EnsembleSection)
    regression: RegressionSection = field(default_factory=RegressionSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    continuation: ContinuationSection = field(default_factory=ContinuationSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["output"]["formats"] = list(self.output.formats)
        return out

    def canonical_json(self) -> str:
        """Sorted compact JSON of every setting that can affect numeric output."""
        data = self.to_dict()
        del data["output"]["dir"]
        return json.dumps(data, sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    # Builders -----------------------------------------------------------

    def coefficients(self) -> LqCoefficients:
        base = SHIPPED_LQ if self.problem.kind == "lq" else LqCoefficients()
        return replace(base, **self.problem.coefficients)

    def terminal(self):
        return affine_terminal(self.problem.terminal_const, self.problem.terminal_slope)

    def control_set(self) -> Box:
        lo = -np.inf if self.problem.lower is None else self.problem.lower
        hi = np.inf if self.problem.upper is None else self.problem.upper
        return Box(lo, hi)

    def build_problem(self):
        kind, box = self.problem.kind, self.control_set()
        if kind == "lq":
            return lq_problem(self.coefficients(), self.terminal(), box)
        if kind == "custom-linear":
            return lq_problem(self.coefficients(), self.terminal(), box, validate=False)
        maker = scalar_interaction_problem if kind == "scalar" else first_order_problem
        return replace(maker(box), terminal=self.terminal())

    def solver_config(self) -> SolverConfig:
        r = self.regression
        return SolverConfig(RegressionConfig(r.degree, r.ridge, r.mode), r.picard_tol, r.max_picard)

    def optimizer_config(self) -> OptimizerConfig:
        o = self.optimizer
        return OptimizerConfig(o.step, o.shrink, o.armijo, o.max_halvings, o.tol, o.max_iters, o.m_directions)

    def continuation_config(self) -> ContinuationConfig:
        c = self.continuation
        return ContinuationConfig(c.delta, c.delta_min, c.tol, c.max_picard, c.inner_tol, c.max_inner,
                                  c.damping, c.acceleration, self.solver_config(),
                                  exact_tree=self.regression.mode == "tree-exact")


_SECTION_TYPES = {"problem": ProblemSection, "grid": GridSection, "ensemble": EnsembleSection,
                  "regression": RegressionSection, "optimizer": OptimizerSection,
                  "continuation": ContinuationSection, "output": OutputSection}


def _suggest(key: str, options) -> str:
    close = difflib.get_close_matches(key, list(options), n=1, cutoff=0.6)
    return f" (did you mean {close[0]!r}?)" if close else ""


def _coerce(where: str, value, default, errors: list):
    """Check ``value`` against the type implied by ``default``."""
    if isinstance(default, bool):
        ok = isinstance(value, bool)
        kind = "a boolean"
    elif isinstance(default, int) and not isinstance(default, bool):
        ok = isinstance(value, int) and not isinstance(value, bool)
        kind = "an integer"
    elif isinstance(default, float) or default is None:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        kind = "a number"
        if ok:
            value = float(value)
    elif isinstance(default, str):
        ok = isinstance(value, str)
        kind = "a string"
    elif isinstance(default, tuple):
        ok = isinstance(value, list) and all(isinstance(v, str) for v in value)
        kind = "a list of strings"
        if ok:
            value = tuple(value)
    else:
        ok, kind = isinstance(value, dict), "a table"
    if not ok:
        errors.append(f"{where}: expected {kind}, got {type(value).__name__} {value!r}")
        return default
    return value


_NULLABLE = ("particles", "lower", "upper")


def _section(name: str, table, errors: list):
    cls = _SECTION_TYPES[name]
    if not isinstance(table, dict):
        errors.append(f"[{name}]: expected a table")
        return cls()
    defaults = cls()
    known = {f.name for f in fields(cls)}
    values = {}
    for key, value in table.items():
        if key not in known:
            errors.append(f"[{name}] unknown key {key!r}{_suggest(key, known)}")
            continue
        if value is None and key in _NULLABLE:
            values[key] = None
            continue
        value = _coerce(f"[{name}] {key}", value, getattr(defaults, key), errors)
        if key == "coefficients" and isinstance(value, dict):
            value = {k: float(v) if isinstance(v, int) and not isinstance(v, bool) else v
                     for k, v in value.items()}
        values[key] = value
    try:
        return cls(**values)
    except TypeError as exc:
        errors.append(f"[{name}]: {exc}")
        return cls()


def _validate(cfg: ExperimentConfig, errors: list) -> None:
    p = cfg.problem
    if p.kind not in PROBLEM_KINDS:
        errors.append(f"[problem] kind must be one of {PROBLEM_KINDS}, got {p.kind!r}{_suggest(p.kind, PROBLEM_KINDS)}")
        return
    names = LqCoefficients.names()
    if p.coefficients and p.kind not in ("lq", "custom-linear"):
        errors.append(f"[problem.coefficients] only applies to kinds 'lq' and 'custom-linear', not {p.kind!r}")
    bad_coef = False
    for key, value in p.coefficients.items():
        if key not in names:
            errors.append(f"[problem.coefficients] unknown key {key!r}{_suggest(key, names)}")
            bad_coef = True
        elif isinstance(value, bool) or not isinstance(value, (int, float)):
            errors.append(f"[problem.coefficients] {key}: expected a number, got {value!r}")
            bad_coef = True
    if not bad_coef and p.kind in ("lq", "custom-linear"):
        c = cfg.coefficients()
        if p.kind == "lq":
            errors.extend(f"[problem.coefficients] LQ constraint violated: {v}" for v in c.violations())
        else:
            probe = _probe_ensemble()
            bounds = validate_coefficient_bounds(lq_problem(c, validate=False).interaction, probe)
            errors.extend(f"[problem.coefficients] {m}" for m in bounds.messages)
    if p.lower is not None and p.upper is not None and not p.lower <= p.upper:
        errors.append("[problem] lower must not exceed upper")
    if cfg.grid.n_steps < 1 or not cfg.grid.horizon > 0:
        errors.append("[grid] need horizon > 0 and n_steps >= 1")
    e = cfg.ensemble
    if e.mode not in ("gaussian", "bernoulli", "bernoulli-tree"):
        errors.append(f"[ensemble] mode must be gaussian, bernoulli or bernoulli-tree, got {e.mode!r}")
    if e.mode != "bernoulli-tree" and (e.particles is None or e.particles < 1):
        errors.append("[ensemble] particles must be a positive integer")
    if not 0 <= e.seed < 2**64:
        errors.append("[ensemble] seed must be a 64-bit unsigned integer")
    if cfg.regression.mode == "tree-exact" and e.mode != "bernoulli-tree":
        errors.append("[regression] mode 'tree-exact' requires [ensemble] mode 'bernoulli-tree'")
    if cfg.continuation.system not in ("monotone", "lq"):
        errors.append(f"[continuation] system must be 'monotone' or 'lq', got {cfg.continuation.system!r}")
    elif cfg.continuation.system == "lq" and p.kind != "lq":
        errors.append("[continuation] system 'lq' requires [problem] kind 'lq'")
    for fmt in cfg.output.formats:
        if fmt not in FORMATS:
            errors.append(f"[output] unknown format {fmt!r}{_suggest(fmt, FORMATS)}")
    for build in (cfg.solver_config, cfg.optimizer_config, cfg.continuation_config):
        try:
            build()
        except (InvalidArgumentError, ValueError) as exc:
            errors.append(str(exc))


def _probe_ensemble(size: int = 64, seed: int = 0) -> Ensemble:
    rng = np.random.default_rng(seed)
    return Ensemble(*(rng.normal(size=size) * 2.0 for _ in range(3)))


def config_from_mapping(data: dict) -> ExperimentConfig:
    """Build and validate a config from nested section tables."""
    errors = []
    sections = {}
    for name, table in data.items():
        if name not in _SECTION_TYPES:
            errors.append(f"unknown section [{name}]{_suggest(name, _SECTION_TYPES)}")
            continue
        sections[name] = _section(name, table, errors)
    cfg = ExperimentConfig(**sections)
    # sections with structural errors fell back to defaults, so the rest still validates
    _validate(cfg, errors)
    if errors:
        raise ConfigError(errors)
    return cfg


def parse_config(text: str) -> ExperimentConfig:
    """Parse a TOML document, or the JSON of a run manifest, into a validated config."""
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"invalid JSON: {exc}"]) from None
        data = data.get("config", data)
    else:
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError([f"invalid TOML: {exc}"]) from None
    return config_from_mapping(data)


@dataclass
class RunManifest:
    """Record of one run; its ``config`` replays the run bit-exactly."""

    command: str
    config: dict
    config_hash: str
    seed: int
    versions: dict
    threads: int
    wall_clock_seconds: float
    files: list
    checks: dict
    status: str

    @property
    def passed(self) -> bool:
        return self.status == "passed"

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **asdict(self)}
