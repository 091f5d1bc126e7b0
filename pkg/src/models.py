"""
Pydantic models shared by the geometry, solver and experiment modules.
"""

import hashlib
import json
import math
from enum import Enum
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

UNIT_TOL = 1e-9


def _is_integer_ratio(numerator: float, denominator: float) -> bool:
    ratio = numerator / denominator
    return round(ratio) >= 1 and abs(ratio - round(ratio)) <= 1e-9 * max(1.0, ratio)


class RegionLabel(str, Enum):
    """Region a point, edge or face belongs to."""

    MATRIX = "matrix"
    INCLUSION = "inclusion"


class Stencil(str, Enum):
    """Neighbourhood used by cut graphs."""

    AXIS4 = "axis4"
    DIAG8 = "diag8"
    CROFTON16 = "crofton16"
    AXIS6 = "axis6"


class RegimeMode(str, Enum):
    """Toughness regime, fixing the schedule of the inclusion toughness beta_eps."""

    SUB = "sub"
    CRITICAL = "critical"
    SUPER = "super"


def beta_for(mode: RegimeMode, ell: float, eps: float) -> float:
    """Inclusion toughness at scale eps: eps^2, ell*eps or sqrt(eps)."""
    if mode is RegimeMode.SUB:
        return eps * eps
    if mode is RegimeMode.SUPER:
        return math.sqrt(eps)
    return ell * eps


class MicrostructureSpec(BaseModel):
    """Periodic perforated geometry on the cube (0, L)^n."""

    model_config = ConfigDict(frozen=True)

    n: int = 2
    a: float = Field(default=0.25, ge=0.0, lt=0.5)
    eps: float = Field(gt=0.0)
    domain_len: float = Field(default=1.0, gt=0.0)

    @field_validator("n")
    @classmethod
    def _check_dimension(cls, v: int) -> int:
        if v not in (2, 3):
            raise ValueError("dimension must be 2 or 3")
        return v

    @model_validator(mode="after")
    def _check_tiling(self) -> "MicrostructureSpec":
        if not _is_integer_ratio(self.domain_len, self.eps):
            raise ValueError(f"domain_len/eps = {self.domain_len / self.eps:g} is not a positive integer")
        return self

    @property
    def n_cells(self) -> int:
        """Number of eps-cells per axis."""
        return int(round(self.domain_len / self.eps))

    @property
    def matrix_fraction(self) -> float:
        return 1.0 - (2.0 * self.a) ** self.n

    @property
    def volume(self) -> float:
        return self.domain_len**self.n

    @property
    def interface_constant(self) -> float:
        """Inclusion boundary area per unit cell, 2n(2a)^(n-1)."""
        return 2.0 * self.n * (2.0 * self.a) ** (self.n - 1) if self.a > 0 else 0.0


class CellProblem(BaseModel):
    """Periodic cell problem for a macroscopic gradient xi.

    `alpha` weighs the inclusion side of matrix edges as the lattice energy does;
    0 keeps the plain matrix fraction.
    """

    model_config = ConfigDict(frozen=True)

    xi: Tuple[float, ...]
    a: float = Field(default=0.25, ge=0.0, lt=0.5)
    M: int = Field(default=64, ge=8)
    alpha: float = Field(default=0.0, ge=0.0, le=1.0)
    tol: float = Field(default=1e-10, gt=0.0)
    max_iter: int = Field(default=20000, ge=1)

    @field_validator("xi")
    @classmethod
    def _check_xi(cls, v: Tuple[float, ...]) -> Tuple[float, ...]:
        if len(v) not in (2, 3):
            raise ValueError("xi must have 2 or 3 components")
        if not all(math.isfinite(c) for c in v):
            raise ValueError("xi must be finite")
        return tuple(float(c) for c in v)

    @field_validator("M")
    @classmethod
    def _check_even(cls, v: int) -> int:
        if v % 2:
            raise ValueError("M must be even so that the cell grid is centred on the inclusion")
        return v

    @property
    def n(self) -> int:
        return len(self.xi)


class TensorSample(BaseModel):
    """Polarised tensor at one grid resolution."""

    M: int
    A: List[List[float]]


class HomogenizedTensor(BaseModel):
    """Homogenized tensor A with f_hat(xi) = xi^T A xi and its grid trace."""

    a: float
    n: int
    A: List[List[float]]
    samples: List[TensorSample]
    orders: List[List[Optional[float]]]
    quad_residual: float
    flags: List[str] = Field(default_factory=list)

    def fhat(self, xi: Tuple[float, ...]) -> float:
        return float(sum(xi[i] * self.A[i][j] * xi[j] for i in range(self.n) for j in range(self.n)))


class CutProblem(BaseModel):
    """Min-cut instance on the rotated cube tQ^nu."""

    model_config = ConfigDict(frozen=True)

    nu: Tuple[float, ...]
    t: float = Field(default=4.0, ge=2.0)
    M: int = Field(default=16, ge=2)
    a: float = Field(default=0.25, ge=0.0, lt=0.5)
    stencil: Stencil = Stencil.AXIS4
    boundary_band: Optional[int] = Field(default=None, ge=1)
    face_rule: Literal["fraction", "midpoint"] = "fraction"

    @field_validator("nu")
    @classmethod
    def _check_unit(cls, v: Tuple[float, ...]) -> Tuple[float, ...]:
        if len(v) not in (2, 3):
            raise ValueError("nu must have 2 or 3 components")
        norm = math.sqrt(sum(c * c for c in v))
        if abs(norm - 1.0) > UNIT_TOL:
            raise ValueError(f"nu must be a unit vector, got norm {norm:g}")
        return tuple(float(c) for c in v)

    @property
    def n(self) -> int:
        return len(self.nu)

    @property
    def band(self) -> int:
        return self.boundary_band if self.boundary_band is not None else max(1, self.M // 8)


class GhatEstimate(BaseModel):
    """Surface density estimate along a chain of cube sizes."""

    nu: Tuple[float, ...]
    a: float
    M: int
    stencil: Stencil
    t_chain: List[float]
    per_area: List[float]
    limit: float
    spread: float
    slack: float
    low_confidence: bool
    flags: List[str] = Field(default_factory=list)


class EnergyParams(BaseModel):
    """Weights of the inclusion edges; matrix weights are fixed at 1."""

    model_config = ConfigDict(frozen=True)

    alpha: float = Field(default=1.0, ge=0.0, le=1.0)
    beta: float = Field(gt=0.0, le=1.0)


class EnergyBreakdown(BaseModel):
    """Three-term lattice energy plus an optional fidelity contribution."""

    model_config = ConfigDict(frozen=True)

    volume: float
    surf_matrix: float
    surf_inclusion: float
    beta: float
    fidelity: float = 0.0

    @property
    def total(self) -> float:
        return self.volume + self.surf_matrix + self.beta * self.surf_inclusion

    @property
    def objective(self) -> float:
        return self.total + self.fidelity


class Schedule(BaseModel):
    """Graduated non-convexity schedule and inner solver controls."""

    model_config = ConfigDict(frozen=True)

    scales: Tuple[float, ...] = (8.0, 4.0, 2.0, 1.0)
    cg_tol: float = Field(default=1e-8, gt=0.0)
    cg_max_iter: int = Field(default=5000, ge=1)
    max_outer: int = Field(default=40, ge=1)
    energy_rtol: float = Field(default=1e-10, ge=0.0)
    huber_rel_width: float = Field(default=1e-6, gt=0.0)
    collar: Optional[int] = Field(default=None, ge=1)
    linear_solver: Literal["cg", "direct"] = "cg"

    @field_validator("scales")
    @classmethod
    def _check_scales(cls, v: Tuple[float, ...]) -> Tuple[float, ...]:
        if not v or v[-1] != 1.0:
            raise ValueError("schedule must end at scale 1")
        if any(s < 1.0 for s in v) or any(b > a for a, b in zip(v, v[1:])):
            raise ValueError("scales must be nonincreasing and >= 1")
        return tuple(float(s) for s in v)

    def collar_width(self, M: int) -> int:
        return self.collar if self.collar is not None else max(1, M // 8)


class RegimePlan(BaseModel):
    """An eps-chain with its beta schedule and solver settings."""

    model_config = ConfigDict(frozen=True)

    mode: RegimeMode = RegimeMode.CRITICAL
    ell: float = Field(default=1.0, gt=0.0)
    eps_chain: Tuple[float, ...] = (0.25, 0.125, 0.0625)
    M: int = Field(default=16, ge=8)
    n: int = 2
    a: float = Field(default=0.25, ge=0.0, lt=0.5)
    domain_len: float = Field(default=1.0, gt=0.0)
    alpha: float = Field(default=1.0, ge=0.0, le=1.0)
    schedule: Schedule = Field(default_factory=Schedule)
    bound_tol: float = Field(default=0.10, ge=0.0)
    workers: int = Field(default=1, ge=1)

    @field_validator("M")
    @classmethod
    def _check_even(cls, v: int) -> int:
        if v % 2:
            raise ValueError("M must be even")
        return v

    @model_validator(mode="after")
    def _check_chain(self) -> "RegimePlan":
        chain = self.eps_chain
        if len(chain) < 3:
            raise ValueError("eps_chain needs at least 3 entries")
        if any(b >= a for a, b in zip(chain, chain[1:])):
            raise ValueError("eps_chain must be strictly decreasing")
        for eps in chain:
            if not _is_integer_ratio(self.domain_len, eps):
                raise ValueError(f"domain_len/eps is not an integer for eps={eps:g}")
            beta = self.beta(eps)
            if not 0.0 < beta <= 1.0:
                raise ValueError(f"beta={beta:g} at eps={eps:g} is outside (0, 1]")
        return self

    def beta(self, eps: float) -> float:
        return beta_for(self.mode, self.ell, eps)

    def microstructure(self, eps: float) -> MicrostructureSpec:
        return MicrostructureSpec(n=self.n, a=self.a, eps=eps, domain_len=self.domain_len)

    def params(self, eps: float) -> EnergyParams:
        return EnergyParams(alpha=self.alpha, beta=self.beta(eps))


class BoundCheck(BaseModel):
    """One inequality checked against a computed value."""

    name: str
    value: float
    lower: Optional[float] = None
    upper: Optional[float] = None
    ok: bool
    margin: float
    note: str = ""

    @classmethod
    def bracket(
        cls, name: str, value: float, lower: Optional[float] = None, upper: Optional[float] = None, note: str = ""
    ) -> "BoundCheck":
        margins = []
        if lower is not None:
            margins.append(value - lower)
        if upper is not None:
            margins.append(upper - value)
        margin = min(margins) if margins else 0.0
        return cls(name=name, value=value, lower=lower, upper=upper, ok=margin >= 0.0, margin=margin, note=note)


class EpsSample(BaseModel):
    """Per-eps trace entry of an estimate."""

    eps: float
    beta: float
    density: float
    density_corrected: Optional[float] = None
    converged: bool = True
    start: str = ""
    damaged_fraction: float = 0.0
    bad_cells: int = 0
    percolating: Optional[bool] = None


class HomEstimate(BaseModel):
    """Extrapolated estimate of f_hom(xi) or g_hom(z, nu) with its eps-chain trace."""

    target: Literal["f", "g"]
    mode: RegimeMode
    ell: float
    xi: Optional[Tuple[float, ...]] = None
    z: Optional[float] = None
    nu: Optional[Tuple[float, ...]] = None
    samples: List[EpsSample]
    value: float
    spread: float
    value_corrected: Optional[float] = None
    spread_corrected: Optional[float] = None
    reference: Optional[float] = None
    checks: List[BoundCheck] = Field(default_factory=list)
    flags: List[str] = Field(default_factory=list)

    @property
    def bound_ok(self) -> bool:
        return all(c.ok for c in self.checks)


class ProfileRow(BaseModel):
    lam: float
    ratio: float
    spread: float


class HomogeneityProfile(BaseModel):
    """Ratio table r(lambda) = f_hom(lambda xi) / lambda^2."""

    mode: RegimeMode
    ell: float
    xi: Tuple[float, ...]
    fhat: float
    rows: List[ProfileRow]
    checks: List[BoundCheck] = Field(default_factory=list)
    flags: List[str] = Field(default_factory=list)

    @property
    def bound_ok(self) -> bool:
        return all(c.ok for c in self.checks)


class CellThresholds(BaseModel):
    """Thresholds of the per-cell diagnostics, in rescaled units."""

    theta: float = Field(default=0.5, gt=0.0)
    energy_bound: float = Field(default=math.inf, gt=0.0)


class FidelityStep(BaseModel):
    eps: float
    beta: float
    m_k: float
    l1_to_previous: Optional[float] = None
    converged: bool = True


class ResultRecord(BaseModel):
    """Cached outcome of one operation on one grid point."""

    key: str
    config_hash: str
    operation: str
    inputs: Dict[str, Any]
    outputs: Dict[str, Any]
    timings: Dict[str, float] = Field(default_factory=dict)
    flags: List[str] = Field(default_factory=list)
    checks: List[BoundCheck] = Field(default_factory=list)
    version: str

    @property
    def bound_ok(self) -> bool:
        return all(c.ok for c in self.checks)

    def canonical_bytes(self) -> bytes:
        """Serialization used for checksums; timings are excluded."""
        payload = self.model_dump(mode="json", exclude={"timings"})
        return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")

    def checksum(self) -> str:
        return hashlib.sha256(self.canonical_bytes()).hexdigest()
