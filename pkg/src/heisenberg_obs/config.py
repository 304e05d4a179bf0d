"""Experiment configuration schemas.

One pydantic model per CLI command.  Unknown keys are rejected and every
range restriction is checked before any numerics run.  :func:`estimate`
projects matrix sizes, memory and runtime from a validated config.
"""
from __future__ import annotations

import hashlib
import json
import math
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

Arc = tuple[float, float]


class _Base(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    command: Optional[str] = None
    seed: int = 0

    @field_validator("y_arcs", check_fields=False)
    @classmethod
    def _arcs(cls, v):
        return _check_arcs(v)


class _Region(_Base):
    a: float = Field(-0.5, ge=-1, le=1)
    b: float = Field(0.5, ge=-1, le=1)

    @model_validator(mode="after")
    def _ordered(self):
        if not self.a < self.b:
            raise ValueError(f"need a < b, got a={self.a}, b={self.b}")
        return self


def _check_arcs(arcs):
    if arcs is None:
        return arcs
    if not arcs:
        raise ValueError("y_arcs must be null (full torus) or a nonempty list")
    for c, d in arcs:
        if not -math.pi <= c < d <= math.pi:
            raise ValueError(f"arc ({c}, {d}) must satisfy -pi <= c < d <= pi")
    return arcs


class EigConfig(_Base):
    n: int
    p: float
    m: int = Field(2000, ge=3)
    count: int = Field(1, ge=1)


class DissipationConfig(_Base):
    n_max: int = Field(20, ge=0)
    p_max: int = Field(20, ge=0)
    m: int = Field(1000, ge=3)
    tolerance: float = Field(1e-6, ge=0)


class EvolveConfig(_Base):
    n: int
    p: float
    m: int = Field(400, ge=3)
    T: float = Field(gt=0)
    output_times: Optional[list[float]] = None
    initial_sine: int = Field(1, ge=0, description="g0 = sin(k pi (x+1)/2); 0 means g0 = 0")
    source_amplitude: float = Field(0.0, description="time-constant source amplitude * cos(pi x/2)")


class ObsConstantConfig(_Region):
    y_arcs: Optional[list[Arc]] = None
    T: float = Field(gt=0)
    N: int = Field(2, ge=0)
    P: int = Field(2, ge=0)
    m: int = Field(200, ge=3)
    K_x: int = Field(24, ge=1)
    z_length: float = Field(2 * math.pi, gt=0)


class SpectralIneqConfig(_Base):
    y_arcs: Optional[list[Arc]] = [(0.0, math.pi)]
    N_min: int = Field(2, ge=0)
    N_max: int = Field(16, ge=0)


class EnvelopeFitConfig(_Region):
    T: list[float] = [0.5, 1.0, 2.0]
    n_values: list[int] = [0, 1, 2, 4]
    p_values: list[float] = [0.0, 1.0, 2.0, 4.0]
    m: int = Field(200, ge=3)
    K_x: int = Field(16, ge=1)


class LRScheduleConfig(_Base):
    T: float = Field(gt=0)
    p: float
    rho: float = Field(0.5, gt=0, lt=1)
    j_max: int = Field(20, ge=1)


class LRRecursionConfig(_Base):
    C8: float = Field(1.0, gt=0)
    C9: float = Field(1.0, gt=0)
    Kstar: Optional[float] = Field(None, gt=0)
    T: float = Field(1.0, gt=0)
    p: float = 0.0
    rho: float = Field(0.5, gt=0, lt=1)
    j_max: int = Field(40, ge=3)
    grid: bool = Field(False, description="run the default constant grid instead of one point")


class QuasimodeConfig(_Base):
    a: float = Field(gt=-1, lt=1)
    k: int = Field(ge=1)
    T: float = Field(gt=0)
    m: Optional[int] = Field(None, ge=3)
    error_k_list: Optional[list[int]] = None


class TminScanConfig(_Base):
    a: float = Field(gt=-1, lt=1)
    k_list: list[int] = [8, 12, 16, 24, 32, 40]
    T_list: Optional[list[float]] = None
    T_factors: list[float] = [0.25, 0.5, 1.0, 2.0, 4.0]
    log_term: bool = True


class UnboundedScanConfig(TminScanConfig):
    nodes: int = Field(8, ge=1)


class CarlemanConfig(_Region):
    corpus_size: int = Field(40, ge=2)
    C2: float = Field(1.0, gt=0)
    fit_mode: Literal["min", "half-min"] = "min"
    m: int = Field(200, ge=3)
    nodes: int = Field(64, ge=2)
    split_seed: int = 0


class StabilityModeConfig(_Region):
    n: int
    p: float
    m: int = Field(200, ge=3)
    T0: float = Field(4.0, ge=0)
    T1: float = Field(8.0, gt=0)
    R: float = Field(1.0, gt=0, description="constant source profile")
    h_mode: int = Field(0, ge=0, description="h is this eigenfunction of the mode")
    sweep_n_max: Optional[int] = Field(None, ge=0)
    sweep_p_max: Optional[int] = Field(None, ge=0)
    K_x: int = Field(24, ge=1)

    @model_validator(mode="after")
    def _window(self):
        if not self.T0 < self.T1:
            raise ValueError("need T0 < T1")
        if (self.sweep_n_max is None) != (self.sweep_p_max is None):
            raise ValueError("sweep_n_max and sweep_p_max go together")
        return self


class Stability3DConfig(_Region):
    y_arcs: Optional[list[Arc]] = None
    N: int = Field(3, ge=0)
    P: int = Field(2, ge=0)
    m: int = Field(120, ge=3)
    modes: int = Field(6, ge=1)
    T0: float = Field(4.0, ge=0)
    T1: float = Field(8.0, gt=0)
    R: float = Field(1.0, gt=0)
    T_star: Optional[float] = Field(None, gt=0)
    C10: Optional[float] = Field(None, gt=0)

    @model_validator(mode="after")
    def _window(self):
        if not self.T0 < self.T1:
            raise ValueError("need T0 < T1")
        return self


SCHEMAS: dict[str, type[_Base]] = {
    "eig": EigConfig,
    "dissipation": DissipationConfig,
    "evolve": EvolveConfig,
    "obs-constant": ObsConstantConfig,
    "spectral-ineq": SpectralIneqConfig,
    "envelope-fit": EnvelopeFitConfig,
    "lr-schedule": LRScheduleConfig,
    "lr-recursion": LRRecursionConfig,
    "quasimode": QuasimodeConfig,
    "tmin-scan": TminScanConfig,
    "unbounded-scan": UnboundedScanConfig,
    "carleman": CarlemanConfig,
    "stability-mode": StabilityModeConfig,
    "stability-3d": Stability3DConfig,
}


def parse_config(command: str, data: dict | None) -> _Base:
    """Validate ``data`` against the schema of ``command``.

    Raises ``KeyError`` for an unknown command and pydantic's
    ``ValidationError`` for schema violations.
    """
    schema = SCHEMAS[command]
    data = dict(data or {})
    named = data.get("command")
    if named is not None and named != command:
        raise ValueError(f"config is for command {named!r}, not {command!r}")
    return schema.model_validate({**data, "command": command})


def config_hash(cfg: _Base) -> str:
    canonical = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


# measured on one core: full tridiagonal eigendecomposition, and bisection per eigenvalue
_EIG_SECONDS_PER_M3 = 5e-10
_EIGVAL_SECONDS_PER_M = 6e-7
RUNTIME_WARN_SECONDS = 600.0
MEMORY_LIMIT_BYTES = 4 * 2**30


def _eig_work(cfg) -> tuple[int, int]:
    """(largest grid size m, number of dense eigendecompositions)."""
    c = cfg.command
    if c == "evolve":
        return cfg.m, 1
    if c == "obs-constant":
        return cfg.m, (2 * cfg.N + 1) * (2 * cfg.P + 1)
    if c == "envelope-fit":
        return cfg.m, len(cfg.n_values) * len(cfg.p_values)
    if c in ("quasimode", "tmin-scan", "unbounded-scan"):
        ks = [cfg.k] if c == "quasimode" else cfg.k_list
        alpha = (1 - cfg.a) / 2
        m = cfg.m if c == "quasimode" and cfg.m else max(
            2000, math.ceil(120 * math.sqrt(max(ks) / alpha + 1)))
        count = len(ks) * (getattr(cfg, "nodes", 1))
        return m, count
    if c == "carleman":
        return cfg.m, cfg.corpus_size
    if c == "stability-mode":
        if cfg.sweep_n_max is None:
            return cfg.m, 1
        return cfg.m, (2 * cfg.sweep_n_max + 1) * (2 * cfg.sweep_p_max + 1)
    if c == "stability-3d":
        return cfg.m, (2 * cfg.N + 1) * (2 * cfg.P + 1) + 48
    return 0, 0


def estimate(cfg: _Base) -> dict:
    """Projected sizes and cost; ``warnings`` lists anything excessive."""
    if cfg.command in ("eig", "dissipation"):
        # eigenvalues only
        m = cfg.m
        count = cfg.count if cfg.command == "eig" else (2 * cfg.n_max + 1) * (2 * cfg.p_max + 1)
        memory = 8 * m * (count + 4)
        runtime = _EIGVAL_SECONDS_PER_M * m * count
    else:
        m, count = _eig_work(cfg)
        memory = 8 * m * m  # one dense eigenvector matrix
        runtime = _EIG_SECONDS_PER_M3 * m**3 * count
    warnings = []
    if memory > MEMORY_LIMIT_BYTES:
        warnings.append(f"eigenvector matrix needs {memory / 2**30:.3g} GiB "
                        f"(limit {MEMORY_LIMIT_BYTES / 2**30:.3g} GiB)")
    if runtime > RUNTIME_WARN_SECONDS:
        warnings.append(f"projected eigendecomposition cost excessive: ~{runtime:.3g} s "
                        f"for {count} decompositions at m={m}")
    return {"m": m, "eigendecompositions": count, "matrix_bytes": memory,
            "projected_seconds": runtime, "warnings": warnings,
            "exceeds_memory": memory > MEMORY_LIMIT_BYTES}
