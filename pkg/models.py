import math
from datetime import datetime
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

import config


# Pydantic models for validated inputs and the run record

class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class PhysicalParams(_Frozen):
    g0: float = Field(..., ge=0, description="Single-photon half-Rabi frequency (rad/s)")
    kappa: float = Field(..., ge=0, description="Cavity power decay linewidth (rad/s)")
    gamma: float = Field(0.0, ge=0, description="Spontaneous emission rate (rad/s)")
    delta_cavity: float = Field(..., description="Cavity-atom detuning (rad/s)")
    F: float = Field(4.5, description="Total angular momentum of the F->F line")
    N: int = Field(..., description="Total atom number, split evenly over ensembles A and B")
    # Zeeman shifts per unit m; None means resonant and split symmetrically
    delta_g: Optional[float] = None
    delta_e: Optional[float] = None

    @field_validator("F")
    @classmethod
    def half_integer_F(cls, v):
        twice = 2 * v
        if v < 0.5 or abs(twice - round(twice)) > 1e-12:
            raise ValueError("F must be a positive half-integer (1/2, 1, 3/2, ...)")
        return round(twice) / 2

    @field_validator("N")
    @classmethod
    def even_N(cls, v):
        if v < 2 or v % 2:
            raise ValueError("N must be an even integer >= 2")
        return v

    @field_validator("g0", "kappa", "gamma", "delta_cavity")
    @classmethod
    def finite(cls, v):
        if not math.isfinite(v):
            raise ValueError("must be finite")
        return v

    @model_validator(mode="after")
    def zeeman_pair(self):
        if (self.delta_g is None) != (self.delta_e is None):
            raise ValueError("delta_g and delta_e must be given together or not at all")
        return self

    @property
    def far_detuned(self) -> bool:
        return abs(self.delta_cavity) > 10.0 * self.g0 * math.sqrt(self.N)


class TWAConfig(_Frozen):
    n_traj: int = Field(config.TWA_N_TRAJ, ge=2)
    t_grid: tuple[float, ...] = (0.0,)
    rel_tol: float = Field(config.TWA_REL_TOL, gt=0)
    # None means TWA_ABS_TOL_PER_ATOM * N
    abs_tol: Optional[float] = Field(None, gt=0)
    seed: int = Field(config.SEED, ge=0)
    model: Literal["full_multilevel", "four_level"] = "full_multilevel"
    workers: int = Field(config.WORKERS, ge=1)
    batch_size: int = Field(config.TWA_BATCH_SIZE, ge=1)

    @field_validator("t_grid")
    @classmethod
    def monotone_grid(cls, v):
        if not v or v[0] != 0.0:
            raise ValueError("t_grid must start at 0")
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("t_grid must be strictly increasing")
        if not all(math.isfinite(t) for t in v):
            raise ValueError("t_grid must be finite")
        return v


class RamseyConfig(_Frozen):
    protocol: Literal["differential", "sum"] = "differential"
    squeeze_time: float = Field(0.0, ge=0)
    phi: float = 0.0
    backend: Literal["gaussian_upa", "twa", "ed", "decoherence_moments"] = "gaussian_upa"
    # (Gamma, gamma) in rad/s
    decoherence: Optional[tuple[float, float]] = None
    N: int = Field(1000, ge=2)
    chi: float = Field(1e-3, gt=0)
    # None means the resonant splitting N*chi/2
    delta: Optional[float] = None
    F: float = 4.5
    twa: Optional[TWAConfig] = None
    ed_method: Literal["krylov", "adaptive_ode", "diagonalize"] = "diagonalize"

    @field_validator("phi")
    @classmethod
    def open_phase_interval(cls, v):
        if not abs(v) < math.pi / 2:
            raise ValueError("phi must lie in (-pi/2, pi/2)")
        return v

    @field_validator("N")
    @classmethod
    def even_N(cls, v):
        if v % 2:
            raise ValueError("N must be even")
        return v

    @model_validator(mode="after")
    def backend_requirements(self):
        if self.backend == "decoherence_moments" and self.decoherence is None:
            raise ValueError("decoherence_moments backend needs decoherence=(Gamma, gamma)")
        if self.decoherence is not None and min(self.decoherence) < 0:
            raise ValueError("decoherence rates must be non-negative")
        return self

    @property
    def resonant_delta(self) -> float:
        return self.N * self.chi / 2 if self.delta is None else self.delta


class FockOracleConfig(_Frozen):
    n_max: int = Field(..., ge=1, description="Fock cutoff per mode")
    coupling: float = Field(..., description="N*chi/2 (rad/s)")
    duration: float = Field(..., ge=0)
    n_times: int = Field(31, ge=1)


class AxisRange(_Frozen):
    start: float
    stop: float
    num: int = Field(..., ge=1)
    spacing: Literal["linear", "geometric"] = "linear"

    @model_validator(mode="after")
    def finite_range(self):
        if not (math.isfinite(self.start) and math.isfinite(self.stop)):
            raise ValueError("range bounds must be finite")
        if self.spacing == "geometric" and (self.start <= 0 or self.stop <= 0):
            raise ValueError("geometric range needs positive bounds")
        return self


AxisSpec = Union[list[float], AxisRange]


class SweepAxes(_Frozen):
    N: Optional[list[int]] = None
    nchi_t: Optional[AxisSpec] = None
    gamma_t: Optional[AxisSpec] = None
    # Delta / (sqrt(N) kappa)
    detuning_ratio: Optional[AxisSpec] = None
    cooperativity: Optional[list[float]] = None
    n_bar: Optional[AxisSpec] = None
    phi: Optional[AxisSpec] = None
    # Pump-number spread in units of sqrt(N)
    sigma_over_sqrt_n: Optional[list[float]] = None

    @field_validator("N", "cooperativity", "sigma_over_sqrt_n",
                     "nchi_t", "gamma_t", "detuning_ratio", "n_bar", "phi")
    @classmethod
    def non_empty_finite(cls, v):
        if isinstance(v, list):
            if not v:
                raise ValueError("sweep axis must not be empty")
            if not all(math.isfinite(x) for x in v):
                raise ValueError("sweep axis values must be finite")
        return v

    def values(self, name: str) -> list[float]:
        spec = getattr(self, name)
        if spec is None:
            return []
        if isinstance(spec, AxisRange):
            if spec.num == 1:
                return [spec.start]
            if spec.spacing == "geometric":
                ratio = (spec.stop / spec.start) ** (1.0 / (spec.num - 1))
                return [spec.start * ratio ** k for k in range(spec.num)]
            step = (spec.stop - spec.start) / (spec.num - 1)
            return [spec.start + step * k for k in range(spec.num)]
        return list(spec)


class RunConfig(_Frozen):
    schema_version: int = config.SCHEMA_VERSION
    experiment: Literal["squeeze_sweep", "sensitivity_time", "sensitivity_detuning",
                        "twa_benchmark", "upa_table", "pump_fluctuation", "ramsey_protocol"]
    physical: PhysicalParams
    sweep: SweepAxes = SweepAxes()
    twa: Optional[TWAConfig] = None
    ramsey: Optional[RamseyConfig] = None
    output_dir: str = config.OUTPUT_DIR
    seed: int = Field(config.SEED, ge=0)
    format: Literal["csv", "json"] = "csv"
    workers: int = Field(config.WORKERS, ge=1)
    mc_samples: int = Field(10000, ge=2)
    # twa_benchmark only: also write every packed trajectory
    dump_trajectories: bool = False

    @field_validator("schema_version")
    @classmethod
    def known_schema(cls, v):
        if v != config.SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {v}, expected {config.SCHEMA_VERSION}")
        return v

    @model_validator(mode="after")
    def experiment_inputs(self):
        if self.experiment == "ramsey_protocol" and self.ramsey is None:
            raise ValueError("ramsey_protocol needs a 'ramsey' section")
        return self


class PointStatus(BaseModel):
    index: int
    params: dict[str, float | int | str]
    status: Literal["ok", "failed"]
    message: str = ""


class FileEntry(BaseModel):
    path: str
    sha256: str
    bytes: int


class RunManifest(BaseModel):
    experiment: str
    config_hash: str
    code_version: str = config.CODE_VERSION
    schema_version: int = config.SCHEMA_VERSION
    seed: int
    started_at: datetime
    finished_at: Optional[datetime] = None
    points: list[PointStatus] = []
    files: list[FileEntry] = []

    @property
    def ok(self) -> bool:
        return all(p.status == "ok" for p in self.points)
