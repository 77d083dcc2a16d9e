from datetime import datetime
from typing import Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, Field, field_validator, model_validator
from sqlalchemy import Column, DateTime, Float, Integer, String
from sqlalchemy.orm import declarative_base


Base = declarative_base()


# SQLAlchemy catalog of particle runs
class ParticleRunDB(Base):
    __tablename__ = "particle_runs"

    id = Column(Integer, primary_key=True, autoincrement=True)
    model_name = Column(String, nullable=False)
    n_particles = Column(Integer, nullable=False)
    horizon = Column(Integer, nullable=False)
    seed = Column(Integer, nullable=False)
    epsilon = Column(Float, nullable=True)
    log_z_hat = Column(Float, nullable=True)
    run_dir = Column(String, nullable=True)
    created_at = Column(DateTime, nullable=False)


Matrix = List[List[float]]
Vector = List[float]


def _is_matrix(value: Any) -> bool:
    return (
        isinstance(value, list)
        and len(value) > 0
        and isinstance(value[0], list)
        and len(value[0]) > 0
        and not isinstance(value[0][0], list)
    )


# Pydantic models for files and the API
class ModelSpec(BaseModel):
    """Finite Feynman-Kac model description file.

    ``kernels`` holds one row-major matrix per time 1..horizon; a single
    matrix or ``{"stationary": matrix}`` is broadcast across time. The same
    rule applies to ``potentials`` (times 0..horizon) with vectors.
    """

    name: str = "model"
    horizon: int = Field(..., ge=0)
    states: List[Union[str, int]]
    eta0: Vector
    kernels: List[Matrix]
    potentials: List[Vector]
    functionals: Dict[str, Vector] = Field(default_factory=dict)
    hard_potentials: bool = False

    @model_validator(mode="before")
    @classmethod
    def _expand_stationary(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        data = dict(data)
        horizon = data.get("horizon", 0)
        for key, count in (("kernels", horizon), ("potentials", horizon + 1)):
            value = data.get(key)
            if isinstance(value, dict) and "stationary" in value:
                data[key] = [value["stationary"]] * count
            elif _is_matrix(value) and key == "kernels":
                data[key] = [value] * count
            elif isinstance(value, list) and value and not isinstance(value[0], list):
                data[key] = [value] * count
        return data

    @model_validator(mode="after")
    def _check_lengths(self) -> "ModelSpec":
        if len(self.kernels) != self.horizon:
            raise ValueError(
                f"expected {self.horizon} kernels, got {len(self.kernels)}"
            )
        if len(self.potentials) != self.horizon + 1:
            raise ValueError(
                f"expected {self.horizon + 1} potential vectors, got {len(self.potentials)}"
            )
        return self


class CertificateRecord(BaseModel):
    kind: Literal["Hm", "H0"]
    m: int = Field(0, ge=0)
    chi_m: float = Field(1.0, ge=1.0)
    g: float = Field(1.0, ge=1.0)
    rho: Optional[float] = None
    horizon: Optional[int] = None
    valid: bool = True


class ProfileDocument(BaseModel):
    horizon: int
    g: List[List[Optional[float]]]
    beta: List[List[Optional[float]]]
    tau_2_1: List[float]
    kappa: List[float]
    certificates: List[CertificateRecord]
    dominance: Dict[str, bool] = Field(default_factory=dict)
    density_ratio: Optional[float] = None


class ConstantRecord(BaseModel):
    value: float
    provenance: str


class BoundRequest(BaseModel):
    which: Literal["marginal", "uniform", "tree", "free-energy", "backward", "uniform-backward"]
    certificate: Optional[CertificateRecord] = None
    profile: Optional[ProfileDocument] = Field(
        None, description="Exact profile; required for the finite-horizon marginal bound"
    )
    N: int = Field(..., ge=1)
    n: int = Field(0, ge=0)
    sigma: float = Field(1.0, ge=0.0)
    tau_h: Optional[float] = None
    b_n: Optional[float] = None
    x_grid: List[float] = Field(default_factory=lambda: [0.5, 1.0, 2.0])


class CurvePoint(BaseModel):
    x: float
    bound: float
    prob_floor: float


class BoundResponse(BaseModel):
    which: str
    statement: str
    points: List[CurvePoint]
    constants: Dict[str, ConstantRecord]


class ExperimentConfig(BaseModel):
    model: str = Field(..., description="Zoo model name or path to a model JSON file")
    estimator: Literal["marginal", "tree", "free_energy", "backward"] = "marginal"
    functionals: List[str] = Field(default_factory=lambda: ["scaled_index"])
    n_particles: List[int] = Field(default_factory=lambda: [64])
    horizon: Optional[int] = Field(None, ge=0)
    replicates: int = Field(100, ge=1)
    seed: int = 0
    epsilon: Optional[float] = Field(None, ge=0.0)
    bound: Optional[Literal["marginal", "uniform", "tree", "free-energy", "backward"]] = None
    m: int = Field(1, ge=0)
    sigma: float = Field(1.0, ge=0.0)
    x_grid: List[float] = Field(default_factory=lambda: [1.0, 2.0, 3.0])
    sweep: bool = False

    @field_validator("n_particles")
    @classmethod
    def _positive_sizes(cls, value: List[int]) -> List[int]:
        if not value or any(n < 1 for n in value):
            raise ValueError("n_particles entries must be >= 1")
        return value


class RunRequest(BaseModel):
    model: str = Field(..., description="Zoo model name")
    n_particles: int = Field(..., ge=1, le=100_000)
    horizon: Optional[int] = Field(None, ge=0)
    seed: int = 0
    epsilon: Optional[float] = Field(None, ge=0.0)


class RunSummary(BaseModel):
    id: int
    model_name: str
    n_particles: int
    horizon: int
    seed: int
    epsilon: Optional[float]
    log_z_hat: Optional[float]
    run_dir: Optional[str]
    created_at: datetime


class ZooEntry(BaseModel):
    name: str
    description: str
    oracle: str
    finite: bool


class AdditiveSpec(BaseModel):
    """Components of an additive functional, by registered functional name.

    A single name is used at every time.
    """

    components: Union[str, List[str]]
    normalized: bool = True


class RunMetadata(BaseModel):
    model_ref: str
    model_spec: Optional[ModelSpec] = None
    n_particles: int
    horizon: int
    seed: int
    epsilon: Optional[float] = None
    log_z_hat: Optional[float] = None
    catalog_id: Optional[int] = None
