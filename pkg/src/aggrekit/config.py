"""Scenario configuration: a single JSON document validated fail-closed.

Unknown fields are rejected everywhere. Validation failures are turned into
ConfigError with the dotted path of the offending field.
"""
from __future__ import annotations

import hashlib
import json
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from .errors import AggrekitError, ConfigError
from .forward import KernelSpec, ModelParams
from .torus import TorusGrid

CONFIG_VERSION = 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GridConfig(_Strict):
    shape: list[int]
    period: Optional[list[float]] = None

    def build(self) -> TorusGrid:
        return TorusGrid(tuple(self.shape), None if self.period is None else tuple(self.period))


class KernelConfig(_Strict):
    kind: Literal["gaussian_bump", "cosine_mode", "compact_radial_vector", "compact_radial_potential"]
    role: Literal["vector_kernel_k", "scalar_potential_w"] = "scalar_potential_w"
    amplitude: float = 1.0
    width: float = 0.1
    radius: float = 0.25
    frequency: list[int] = [1]

    def build(self) -> KernelSpec:
        return KernelSpec(self.kind, self.role, self.amplitude, self.width, self.radius, tuple(self.frequency))


class ParamsConfig(_Strict):
    d: list[float]
    mu: Optional[list[list[float]]] = None
    nu: Optional[list[list[float]]] = None
    kernel: Optional[KernelConfig] = None  # shared by every pair unless ``kernels`` is given
    kernels: Optional[list[list[Optional[KernelConfig]]]] = None
    clamp: bool = True

    def build(self, model: str) -> ModelParams:
        n = len(self.d)
        if self.kernels is not None:
            bank = [[None if k is None else k.build() for k in row] for row in self.kernels]
        elif self.kernel is not None:
            k = self.kernel.build()
            bank = [[k] * n for _ in range(n)]
        else:
            bank = None
        mu = None if self.mu is None else np.array(self.mu, dtype=float)
        nu = None if self.nu is None else np.array(self.nu, dtype=float)
        return ModelParams(model, self.d, mu, nu, bank, self.clamp)


class InitialConfig(_Strict):
    """Initial data family; every species gets the same profile."""

    kind: Literal["gaussian", "cosine", "constant", "random"] = "gaussian"
    center: list[float] = [0.5, 0.5]
    width: float = 0.1
    index: list[int] = [1]
    amplitude: float = 1.0
    background: float = 1.0
    modes: int = 4

    def sample(self, grid: TorusGrid, n_species: int, rng: np.random.Generator) -> np.ndarray:
        X = grid.coords()
        out = []
        for _ in range(n_species):
            if self.kind == "gaussian":
                r2 = sum((x - c) ** 2 for x, c in zip(X, self.center))
                f = self.background + self.amplitude * np.exp(-r2 / (2 * self.width ** 2))
            elif self.kind == "cosine":
                idx = (list(self.index) + [0] * grid.ndim)[:grid.ndim]
                xi = grid.frequency(idx)
                f = self.background + self.amplitude * np.cos(sum(k * x for k, x in zip(xi, X)))
            elif self.kind == "constant":
                f = np.full(grid.shape, self.background)
            else:
                f = np.full(grid.shape, self.background)
                for _ in range(self.modes):
                    m = rng.integers(-3, 4, size=grid.ndim)
                    xi = grid.frequency(m)
                    ph = rng.uniform(0, 2 * np.pi)
                    f = f + self.amplitude / self.modes * np.cos(sum(k * x for k, x in zip(xi, X)) + ph)
            out.append(f)
        return np.stack(out)


class TimeConfig(_Strict):
    T: float
    dt: float
    snapshots: int = 4

    @model_validator(mode="after")
    def _positive(self):
        if not (self.T > 0 and self.dt > 0):
            raise ValueError("T and dt must be positive")
        if self.snapshots < 1:
            raise ValueError("need at least one snapshot")
        return self

    def times(self) -> list:
        n = int(round(self.T / self.dt))
        ks = sorted({int(round(n * k / self.snapshots)) for k in range(self.snapshots + 1)})
        return [k * self.dt for k in ks]


class VariationConfig(_Strict):
    f1: InitialConfig = InitialConfig()
    f2: Optional[InitialConfig] = None
    epsilons: list[float] = [1e-2, 5e-3, 2.5e-3]


class ProbeConfig(_Strict):
    target: Literal["coupling", "normalization"] = "coupling"
    form: Literal["complex", "raised"] = "complex"
    base: list[int] = [1]
    amplitude: float = 1.0
    constant: bool = False  # use constant first variations instead of plane waves
    entries: Optional[list[list[int]]] = None
    cutoff: Optional[int] = None
    T: float = 0.2
    dt: float = 1e-3


class RingConfig(_Strict):
    center: list[float]
    radius: float
    count: int
    phase: float = 0.0


class BumpConfig(_Strict):
    """d = 1 + amplitude * cos^4(pi r / (2 radius)) inside the disk."""

    center: list[float]
    radius: float = 0.12
    amplitude: float = 0.1

    def sample(self, grid: TorusGrid) -> np.ndarray:
        X = grid.coords()
        r = np.sqrt(sum((x - c) ** 2 for x, c in zip(X, self.center)))
        s = np.clip(r / self.radius, 0, 1)
        return 1 + self.amplitude * np.where(r < self.radius, np.cos(0.5 * np.pi * s) ** 4, 0.0)


class DiffusionSetup(_Strict):
    truth: BumpConfig
    sources: RingConfig
    receivers: RingConfig
    source_width_cells: float = 2.0
    p_values: Optional[list[float]] = None
    alpha: Optional[float] = None
    region_radius: float = 0.14
    node_spacing_cells: float = 5.0
    tail: Literal["log_algebraic", "inverse_t"] = "log_algebraic"
    T: float = 1.5
    dt: float = 4e-3


class ScenarioConfig(_Strict):
    version: Literal[1] = CONFIG_VERSION
    model: Literal["M1", "M2", "heat"] = "heat"
    grid: GridConfig
    params: ParamsConfig
    time: Optional[TimeConfig] = None
    initial: InitialConfig = InitialConfig()
    variation: VariationConfig = VariationConfig()
    probes: ProbeConfig = ProbeConfig()
    diffusion: Optional[DiffusionSetup] = None
    output: Optional[str] = None
    seed: int = 0

    @field_validator("seed")
    @classmethod
    def _u64(cls, v):
        if not 0 <= v < 2 ** 64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        return v

    def build_params(self) -> ModelParams:
        return self.params.build(self.model)


def _field_path(err) -> str:
    return ".".join(str(p) for p in err["loc"]) or "<root>"


def parse_config(text: str) -> ScenarioConfig:
    """JSON text to a validated config; also checks that grid, params and kernels build."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc.msg} at line {exc.lineno}", stage="config") from None
    try:
        cfg = ScenarioConfig.model_validate(doc)
    except ValidationError as exc:
        errs = exc.errors()
        first = errs[0]
        raise ConfigError(f"{_field_path(first)}: {first['msg']}", stage="config",
                          fields=[_field_path(e) for e in errs]) from None
    try:
        cfg.grid.build()
    except AggrekitError as exc:
        raise ConfigError(f"grid: {exc.message}", stage="config", fields=["grid"]) from None
    try:
        cfg.build_params()
    except AggrekitError as exc:
        raise ConfigError(f"params: {exc.message}", stage="config", fields=["params"]) from None
    return cfg


def load_config(path) -> ScenarioConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}", stage="config") from None


def dump_config(cfg: ScenarioConfig) -> str:
    """Canonical serialization (sorted keys, shortest round-trip floats)."""
    return json.dumps(cfg.model_dump(mode="json"), sort_keys=True, indent=2) + "\n"


def config_hash(cfg: ScenarioConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()
