from dataclasses import dataclass, field
from enum import Enum
from typing import Annotated, Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.exceptions import KernelAssumptionError


class Branch(str, Enum):
    GENERIC = "generic"
    ZERO_DERIVATIVE = "zero_derivative"


# ---------------------------------------------------------------------------
# Mixture model inputs
# ---------------------------------------------------------------------------

class DenseCovariance(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["dense"] = "dense"
    matrix: List[List[float]]


class ScaledIdentityCovariance(BaseModel):
    """
    beta * I_p; alternatively gamma gives beta = 1 + gamma / sqrt(p)
    """
    model_config = ConfigDict(extra="forbid")

    kind: Literal["scaled_identity"] = "scaled_identity"
    beta: Optional[float] = None
    gamma: Optional[float] = None

    @model_validator(mode="after")
    def _one_of(self):
        if (self.beta is None) == (self.gamma is None):
            raise ValueError("scaled_identity needs exactly one of beta or gamma")
        if self.beta is not None and self.beta <= 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        return self

    def resolve_beta(self, p: int) -> float:
        if self.beta is not None:
            return self.beta
        beta = 1.0 + self.gamma / np.sqrt(p)
        if beta <= 0:
            raise ValueError(f"gamma={self.gamma} gives a nonpositive scale at p={p}")
        return beta


class BlockSymmetricCovariance(BaseModel):
    """
    diag(D1, ..., D1, D2, D1, ..., D1) with D2 in block `position` (0-based).
    A flat list is read as a diagonal block.
    """
    model_config = ConfigDict(extra="forbid")

    kind: Literal["block_symmetric"] = "block_symmetric"
    d1: Union[List[float], List[List[float]]]
    d2: Union[List[float], List[List[float]]]
    position: int = Field(ge=0)

    @property
    def is_diagonal(self) -> bool:
        return not isinstance(self.d1[0], list) and not isinstance(self.d2[0], list)


class SpectralMeasureCovariance(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["spectral_measure"] = "spectral_measure"
    atoms: List[Tuple[float, float]]

    @field_validator("atoms")
    @classmethod
    def _check_measure(cls, atoms):
        if not atoms:
            raise ValueError("spectral measure needs at least one atom")
        if any(u < 0 for u, _ in atoms):
            raise ValueError("atoms must be nonnegative")
        if any(w < 0 for _, w in atoms):
            raise ValueError("weights must be nonnegative")
        total = sum(w for _, w in atoms)
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1, got {total}")
        return atoms


CovarianceSpec = Annotated[
    Union[DenseCovariance, ScaledIdentityCovariance, BlockSymmetricCovariance, SpectralMeasureCovariance],
    Field(discriminator="kind"),
]


class ClassSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    # Full vector, or sparse {coordinate: value}; missing coordinates are zero
    mean: Union[List[float], Dict[int, float]] = Field(default_factory=dict)
    covariance: CovarianceSpec = Field(default_factory=lambda: ScaledIdentityCovariance(beta=1.0))
    size: int = Field(ge=1)


ENTRY_KURTOSIS = {
    "gaussian": 0.0,
    "rademacher": -2.0,
    "uniform": -1.2,
}


class EntryDistribution(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: Literal["gaussian", "rademacher", "uniform", "student_t"] = "gaussian"
    df: Optional[float] = None

    @model_validator(mode="after")
    def _check_df(self):
        if self.name == "student_t" and (self.df is None or self.df <= 4):
            raise ValueError("student_t entries need df > 4 for a finite kurtosis")
        return self

    @property
    def kurtosis(self) -> float:
        if self.name == "student_t":
            return 6.0 / (self.df - 4.0)
        return ENTRY_KURTOSIS[self.name]


class MixtureModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    classes: List[ClassSpec]
    p: int = Field(gt=0)
    n: int = Field(gt=0)
    kurtosis: Optional[float] = Field(default=None, ge=-2.0)
    entries: EntryDistribution = Field(default_factory=EntryDistribution)

    @model_validator(mode="after")
    def _check_sizes(self):
        if not self.classes:
            raise ValueError("at least one class is required")
        total = sum(cls.size for cls in self.classes)
        if total != self.n:
            raise ValueError(f"class sizes sum to {total}, expected n={self.n}")
        return self

    @property
    def k(self) -> int:
        return len(self.classes)

    @property
    def c(self) -> np.ndarray:
        return np.array([cls.size for cls in self.classes], dtype=float) / self.n

    @property
    def c0(self) -> float:
        return self.p / self.n

    @property
    def kappa(self) -> float:
        return self.kurtosis if self.kurtosis is not None else self.entries.kurtosis


# ---------------------------------------------------------------------------
# Kernel
# ---------------------------------------------------------------------------

class KernelProfile(BaseModel):
    model_config = ConfigDict(frozen=True)

    tau: float
    f0: float
    ftau: float
    f1: float
    f2: float
    branch: Branch = Branch.GENERIC

    @property
    def generic(self) -> bool:
        return self.branch == Branch.GENERIC

    @property
    def F(self) -> float:
        if not self.generic:
            raise KernelAssumptionError("F(tau) is undefined on the zero-derivative branch")
        return (self.f0 - self.ftau + self.tau * self.f1) / (2.0 * self.f1)

    @property
    def q(self) -> float:
        """Coefficient 5f'/(8f) - f''/(2f') in front of the psi terms."""
        return 5.0 * self.f1 / (8.0 * self.ftau) - self.f2 / (2.0 * self.f1)

    @property
    def s(self) -> float:
        return self.f2 / self.f1

    @property
    def b(self) -> float:
        return self.f2 / self.ftau

    @property
    def half_ratio(self) -> float:
        """f'/(2f)"""
        return self.f1 / (2.0 * self.ftau)

    @property
    def shift0(self) -> float:
        return (self.f0 - self.ftau) / self.ftau


class KernelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    family: Literal["gaussian", "quadratic", "generalized_gaussian", "polynomial", "triple"] = "gaussian"
    sigma2: float = Field(default=1.0, gt=0)
    a: Optional[float] = None
    b: Optional[float] = None
    c: Optional[float] = None
    # Expansion point of quadratic/generalized families; defaults to tau
    center: Optional[float] = None
    coefficients: List[float] = Field(default_factory=list)
    triple: Optional[Tuple[float, float, float]] = None
    realize_with: Literal["quadratic", "generalized_gaussian", "auto"] = "quadratic"
    branch: Optional[Branch] = None


# ---------------------------------------------------------------------------
# Numerical intermediates
# ---------------------------------------------------------------------------

@dataclass
class ClassStatistics:
    M: np.ndarray
    t: np.ndarray
    T: np.ndarray
    trace_sq: np.ndarray
    psi_var: np.ndarray
    traces: np.ndarray
    tau: float


@dataclass
class GrowthReport:
    c0: float
    c_min: float
    c_max: float
    max_mean_norm: float
    max_cov_norm: float
    max_trace_deviation: float
    warnings: List[str] = field(default_factory=list)

    @property
    def clear(self) -> bool:
        return not self.warnings


@dataclass
class StieltjesSolution:
    z: complex
    g: np.ndarray
    g_circ: complex
    residual: float
    iterations: int = 0

    @property
    def real(self) -> np.ndarray:
        return self.g.real


@dataclass
class SpectralSupport:
    intervals: List[Tuple[float, float]]
    isolated: List[float]
    h_zeros: List[float] = field(default_factory=list)
    exclusion_f: Optional[float] = None
    search_interval: Tuple[float, float] = (0.0, 0.0)
    warnings: List[str] = field(default_factory=list)

    def contains(self, x: float, margin: float = 0.0) -> bool:
        return any(lo - margin <= x <= hi + margin for lo, hi in self.intervals)

    @property
    def right_edge(self) -> float:
        return max((hi for _, hi in self.intervals), default=0.0)

    @property
    def left_edge(self) -> float:
        return min((lo for lo, _ in self.intervals), default=0.0)


@dataclass
class GMatrixBundle:
    z: float
    branch: Branch
    gamma: np.ndarray
    h: float
    D: np.ndarray
    G: np.ndarray
    solution: Optional[StieltjesSolution] = None


@dataclass
class ResolventCrossBlocks:
    z1: complex
    z2: complex
    omega: np.ndarray
    R: np.ndarray
    EJ: List[np.ndarray]
    EM: List[np.ndarray]
    Epsi: np.ndarray


# ---------------------------------------------------------------------------
# Theory results
# ---------------------------------------------------------------------------

class SpikeLocation(str, Enum):
    ABOVE = "above_bulk"
    BETWEEN = "between_bulks"
    BELOW = "below_bulk"


class SpikeReport(BaseModel):
    rho: float
    lambda_l: float
    multiplicity: int = Field(ge=1)
    informative: bool
    branch: Branch
    location: SpikeLocation
    gap_index: Optional[int] = None
    h_value: Optional[float] = None
    residual: Optional[float] = None
    excluded_reason: Optional[str] = None
    near_degenerate: bool = False


@dataclass
class ProjectionEstimate:
    rho: float
    P: np.ndarray
    Xi: np.ndarray
    Vr: np.ndarray
    Vl: np.ndarray
    multiplicity: int
    informative: bool = True
    warnings: List[str] = field(default_factory=list)


@dataclass
class EigvecStats:
    alpha: np.ndarray
    sigma2: np.ndarray
    cross: np.ndarray
    flags: List[str] = field(default_factory=list)


@dataclass
class SpecialCaseResult:
    regime: str
    ell: List[float] = field(default_factory=list)
    separable: List[bool] = field(default_factory=list)
    spikes: List[SpikeReport] = field(default_factory=list)
    stats: Dict[str, Any] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Simulation and clustering
# ---------------------------------------------------------------------------

@dataclass
class SampleSet:
    X: np.ndarray
    W: np.ndarray
    labels: np.ndarray
    seed: int


@dataclass
class LaplacianBundle:
    K: np.ndarray
    degrees: np.ndarray
    L: np.ndarray
    Lprime: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def n(self) -> int:
        return self.K.shape[0]

    @property
    def first_eigenvector(self) -> np.ndarray:
        root = np.sqrt(self.degrees)
        return root / np.linalg.norm(root)

    @property
    def trivial_index(self) -> int:
        """Index of the eigenvector of L' spanned by D^{1/2}1."""
        overlaps = np.abs(self.eigenvectors.T @ self.first_eigenvector)
        return int(np.argmax(overlaps))


@dataclass
class EquivalentBundle:
    U: np.ndarray
    B: np.ndarray
    psi: np.ndarray
    Lhat: np.ndarray
    eigenvalues: np.ndarray
    operator_gap: Optional[float] = None
    eigenvalue_gap: Optional[float] = None


@dataclass
class Embedding:
    Y: np.ndarray
    selected_indices: List[int]
    provenance: List[str]


@dataclass
class ClusteringResult:
    assignment: np.ndarray
    centroids: np.ndarray
    inertia: float
    ratio_cut: Optional[float] = None
    misclassification: Optional[float] = None
    flags: List[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Experiment configuration and reports
# ---------------------------------------------------------------------------

class GridConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    ftau: List[float] = Field(default_factory=lambda: [0.5, 1.375, 2.25, 3.125, 4.0])
    f1: List[float] = Field(default_factory=lambda: [-2.0, -1.0, 0.0, 1.0, 2.0])
    f2: List[float] = Field(default_factory=lambda: [-4.0, -2.0, 0.0, 2.0, 4.0])
    family: Literal["quadratic", "generalized_gaussian", "auto"] = "quadratic"

    @model_validator(mode="after")
    def _nonempty(self):
        if not (self.ftau and self.f1 and self.f2):
            raise ValueError("kernel grid must be nonempty on every axis")
        return self

    def triples(self) -> List[Tuple[float, float, float]]:
        return [(a, b, c) for a in self.ftau for b in self.f1 for c in self.f2]


class Tolerances(BaseModel):
    model_config = ConfigDict(extra="forbid")

    spike_location: float = 5.0  # multiplied by n^{-1/2}
    standard_errors: float = 3.0
    ks_distance: float = 0.05
    closed_form: float = 1e-8
    projection_noninformative: float = 0.05


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seeds: List[int] = Field(default_factory=lambda: [0])
    embed_dim: Optional[int] = None
    include_u1: Optional[bool] = None
    label_column: Optional[str] = "label"
    histogram_bins: Union[Literal["fd"], int] = "fd"
    grid: GridConfig = Field(default_factory=GridConfig)
    tolerances: Tolerances = Field(default_factory=Tolerances)


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    model: Optional[MixtureModel] = None
    kernel: KernelConfig = Field(default_factory=KernelConfig)
    run: RunConfig = Field(default_factory=RunConfig)


class ComparisonEntry(BaseModel):
    name: str
    reference: str
    theory: float
    empirical: float
    discrepancy: float
    tolerance: float
    passed: bool


class Provenance(BaseModel):
    config_hash: str
    seeds: List[int] = Field(default_factory=list)
    version: str
    command: str


class Report(BaseModel):
    provenance: Provenance
    theory: Dict[str, Any] = Field(default_factory=dict)
    empirical: Dict[str, Any] = Field(default_factory=dict)
    comparison: List[ComparisonEntry] = Field(default_factory=list)
    clustering: Dict[str, Any] = Field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(entry.passed for entry in self.comparison)
