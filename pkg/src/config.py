"""
Run configuration: sectioned key = value files validated into pydantic models.
"""

import configparser
import hashlib
import json
import logging
import os
import re
from enum import Enum
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from . import __version__
from .errors import ConfigError
from .models import RegimeMode, RegimePlan, Schedule, Stencil
from .regimes import interleaved_chain

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s :: %(levelname)s :: %(name)s :: %(message)s"
CACHE_ENV = "BH_CACHE_DIR"
SECTIONS = ("run", "microstructure", "solver", "plan", "output")
PLAN_FIELD_SECTIONS = {
    "M": "solver",
    "schedule": "solver",
    "workers": "solver",
    "n": "microstructure",
    "a": "microstructure",
    "domain_len": "microstructure",
}


class Subcommand(str, Enum):
    CELL_F = "cell-f"
    SURFACE_G = "surface-g"
    ESTIMATE_F = "estimate-f"
    ESTIMATE_G = "estimate-g"
    HOMOGENEITY = "homogeneity"
    REGIME_SWEEP = "regime-sweep"
    DENOISE = "denoise"
    REPORT = "report"
    SERVE = "serve"


def _split_list(value):
    if isinstance(value, str):
        return [v.strip() for v in value.split(",") if v.strip()]
    return value


def _split_vectors(value):
    if isinstance(value, str):
        return [[float(c) for c in part.split()] for part in value.split(";") if part.strip()]
    return value


def _check_increasing(v: List, minimum: int, name: str) -> List:
    if len(v) < minimum:
        raise ValueError(f"{name} needs at least {minimum} values")
    if v[0] <= 0 or any(b <= a for a, b in zip(v, v[1:])):
        raise ValueError(f"{name} must be positive and strictly increasing")
    return v


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class MicrostructureBlock(_Block):
    """Geometry shared by every experiment of a run."""

    n: int = Field(default=2, ge=2, le=3)
    a: float = Field(default=0.25, ge=0.0, lt=0.5)
    domain_len: float = Field(default=1.0, gt=0.0)
    a_values: List[float] = Field(default_factory=list)

    @field_validator("a_values", mode="before")
    @classmethod
    def _parse_lists(cls, v):
        return _split_list(v)

    @field_validator("a_values")
    @classmethod
    def _check_a_values(cls, v: List[float]) -> List[float]:
        if any(not 0.0 <= a < 0.5 for a in v):
            raise ValueError("every a must lie in [0, 0.5)")
        return v


class SolverBlock(_Block):
    """Resolutions, tolerances and the continuation schedule."""

    M: int = Field(default=16, ge=8)
    cell_M: List[int] = Field(default_factory=lambda: [32, 64, 128])
    cell_tol: float = Field(default=1e-10, gt=0.0)
    cg_tol: float = Field(default=1e-8, gt=0.0)
    cg_max_iter: int = Field(default=5000, ge=1)
    scales: List[float] = Field(default_factory=lambda: [8.0, 4.0, 2.0, 1.0])
    max_outer: int = Field(default=40, ge=1)
    linear_solver: str = "cg"
    workers: int = Field(default=1, ge=1)
    stencil: Stencil = Stencil.AXIS4
    t_chain: List[float] = Field(default_factory=lambda: [2.0, 4.0, 8.0])
    cut_M: int = Field(default=16, ge=2)
    boundary_band: Optional[int] = Field(default=None, ge=1)
    face_rule: str = "fraction"

    @field_validator("cell_M", "scales", "t_chain", mode="before")
    @classmethod
    def _parse_lists(cls, v):
        return _split_list(v)

    @field_validator("cell_M")
    @classmethod
    def _check_cell_M(cls, v: List[int]) -> List[int]:
        return _check_increasing(v, 2, "cell_M")

    @field_validator("t_chain")
    @classmethod
    def _check_t_chain(cls, v: List[float]) -> List[float]:
        return _check_increasing(v, 3, "t_chain")

    @field_validator("linear_solver")
    @classmethod
    def _check_solver(cls, v: str) -> str:
        if v not in ("cg", "direct"):
            raise ValueError("linear_solver must be 'cg' or 'direct'")
        return v

    @field_validator("face_rule")
    @classmethod
    def _check_face_rule(cls, v: str) -> str:
        if v not in ("fraction", "midpoint"):
            raise ValueError("face_rule must be 'fraction' or 'midpoint'")
        return v

    def schedule(self) -> Schedule:
        return Schedule(
            scales=tuple(self.scales),
            cg_tol=self.cg_tol,
            cg_max_iter=self.cg_max_iter,
            max_outer=self.max_outer,
            linear_solver=self.linear_solver,
        )


class PlanBlock(_Block):
    """Regime, eps-chain and the grid of experiment inputs."""

    mode: RegimeMode = RegimeMode.CRITICAL
    modes: List[RegimeMode] = Field(default_factory=lambda: [RegimeMode.SUB, RegimeMode.CRITICAL, RegimeMode.SUPER])
    ell: float = Field(default=1.0, gt=0.0)
    eps_chain: List[float] = Field(default_factory=lambda: [0.25, 0.125, 0.0625])
    xi: List[List[float]] = Field(default_factory=lambda: [[1.0, 0.0]])
    z: List[float] = Field(default_factory=lambda: [8.0])
    nu: List[List[float]] = Field(default_factory=lambda: [[0.0, 1.0]])
    lambdas: List[float] = Field(default_factory=lambda: [1.0, 2.0, 4.0, 8.0])
    alpha: float = Field(default=1.0, ge=0.0, le=1.0)
    bound_tol: float = Field(default=0.10, ge=0.0)
    fidelity_weight: float = Field(default=8.0, gt=0.0)
    step_height: float = Field(default=1.0)
    measure_c2: bool = False
    compare_chains: bool = False

    @field_validator("modes", "eps_chain", "z", "lambdas", mode="before")
    @classmethod
    def _parse_lists(cls, v):
        return _split_list(v)

    @field_validator("lambdas")
    @classmethod
    def _check_lambdas(cls, v: List[float]) -> List[float]:
        return _check_increasing(v, 4, "lambdas")

    @field_validator("xi", "nu", mode="before")
    @classmethod
    def _parse_vectors(cls, v):
        return _split_vectors(v)

    @field_validator("nu")
    @classmethod
    def _normalise(cls, v: List[List[float]]) -> List[List[float]]:
        out = []
        for vec in v:
            norm = sum(c * c for c in vec) ** 0.5
            if norm == 0:
                raise ValueError("nu must be nonzero")
            out.append([c / norm for c in vec])
        return out


class OutputBlock(_Block):
    directory: Path = Path("results")
    cache_dir: Optional[Path] = None


class RunConfig(_Block):
    """Fully validated run configuration."""

    subcommand: Optional[Subcommand] = None
    microstructure: MicrostructureBlock = Field(default_factory=MicrostructureBlock)
    solver: SolverBlock = Field(default_factory=SolverBlock)
    plan: PlanBlock = Field(default_factory=PlanBlock)
    output: OutputBlock = Field(default_factory=OutputBlock)

    @property
    def cache_root(self) -> Path:
        if self.output.cache_dir is not None:
            return self.output.cache_dir
        return self.output.directory / "cache"

    def config_hash(self) -> str:
        """Hash of the scientific content; output locations and worker counts do not enter it."""
        payload = self.model_dump(mode="json", exclude={"subcommand": True, "output": True, "solver": {"workers": True}})
        text = json.dumps(payload, sort_keys=True, separators=(",", ":")) + __version__
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    def regime_plan(self, mode: Optional[RegimeMode] = None, eps_chain: Optional[Tuple[float, ...]] = None) -> RegimePlan:
        return RegimePlan(
            mode=mode or self.plan.mode,
            ell=self.plan.ell,
            eps_chain=tuple(eps_chain or self.plan.eps_chain),
            M=self.solver.M,
            n=self.microstructure.n,
            a=self.microstructure.a,
            domain_len=self.microstructure.domain_len,
            alpha=self.plan.alpha,
            schedule=self.solver.schedule(),
            bound_tol=self.plan.bound_tol,
            workers=self.solver.workers,
        )


def _line_numbers(text: str) -> Dict[Tuple[str, str], int]:
    lines: Dict[Tuple[str, str], int] = {}
    section = ""
    for number, line in enumerate(text.splitlines(), start=1):
        header = re.match(r"^\s*\[([^\]]+)\]", line)
        if header:
            section = header.group(1).strip()
            lines[(section, "")] = number
            continue
        key = re.match(r"^\s*([A-Za-z_][\w-]*)\s*[=:]", line)
        if key:
            lines[(section, key.group(1))] = number
    return lines


def _describe(error: ValidationError, lines: Dict[Tuple[str, str], int], plan_level: bool = False) -> str:
    messages = []
    for item in error.errors():
        loc = [str(part) for part in item["loc"]]
        if plan_level:
            key = loc[-1] if loc else ""
            section = PLAN_FIELD_SECTIONS.get(loc[0] if loc else "", "plan")
        else:
            section, key = (loc + ["", ""])[:2]
        if section == "subcommand":
            section, key = "run", "subcommand"
        number = lines.get((section, key)) or lines.get((section, ""))
        prefix = f"line {number}: " if number else ""
        messages.append(f"{prefix}[{section}] {key}: {item['msg']}")
    return "\n".join(messages)


def parse_config(text: str, env: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Validate configuration text.

    Raises:
        ConfigError: with line and field diagnostics.
    """
    env = os.environ if env is None else env
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",), inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from e

    lines = _line_numbers(text)
    raw: Dict[str, Dict[str, str]] = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"line {lines.get((section, ''), '?')}: unknown section [{section}]")
        raw[section] = dict(parser.items(section))

    data: Dict[str, object] = {k: v for k, v in raw.items() if k != "run"}
    run = raw.get("run", {})
    unknown = set(run) - {"subcommand"}
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"line {lines.get(('run', key), '?')}: [run] {key}: unknown key")
    if "subcommand" in run:
        data["subcommand"] = run["subcommand"]
    if env.get(CACHE_ENV):
        data.setdefault("output", {})
        data["output"] = {**data["output"], "cache_dir": env[CACHE_ENV]}

    try:
        config = RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_describe(e, lines)) from e

    n = config.microstructure.n
    if config.plan.measure_c2 and n != 2:
        number = lines.get(("plan", "measure_c2"))
        prefix = f"line {number}: " if number else ""
        raise ConfigError(f"{prefix}[plan] measure_c2: direction sampling is two-dimensional, n = {n}")
    for key in ("xi", "nu"):
        for vec in getattr(config.plan, key):
            if len(vec) != n:
                number = lines.get(("plan", key))
                prefix = f"line {number}: " if number else ""
                raise ConfigError(f"{prefix}[plan] {key}: vector {vec} does not have {n} components")

    # plans combine several blocks; validate every mode the run may use
    for mode in [config.plan.mode, *config.plan.modes]:
        try:
            plan = config.regime_plan(mode)
        except ValidationError as e:
            raise ConfigError(_describe(e, lines, plan_level=True)) from e
        if config.plan.compare_chains:
            try:
                interleaved_chain(plan)
            except ValueError as e:
                number = lines.get(("plan", "compare_chains"))
                prefix = f"line {number}: " if number else ""
                raise ConfigError(f"{prefix}[plan] compare_chains: {e}") from e
    return config


def load_config(path: Optional[Path] = None, env: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Read and validate a configuration file; no file means all defaults."""
    if path is None:
        return parse_config("", env)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text, env)


def configure_logging(level: Optional[str] = None) -> None:
    """Single stream handler on the root logger; level from LOG_LEVEL unless given."""
    level = (level or os.environ.get("LOG_LEVEL") or "INFO").upper()
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)
