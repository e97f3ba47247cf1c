"""Experiment configuration: JSON schema, validation and object construction."""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigurationError
from .generators import Generator, make_builtin
from .lattice import LatticeModel, MarkSpace, TimeGrid

STUDIES = ("entropic-convergence", "contraction", "splitting", "comparison", "stability")
PRNG_NAME = "numpy.PCG64"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class MarkConfig(_Strict):
    x: float
    lam: float = Field(alias="lambda", gt=0)


class ModelConfig(_Strict):
    T: float = Field(gt=0)
    N: int = Field(ge=1)
    d: int = Field(default=1, ge=0)
    marks: list[MarkConfig] = Field(default_factory=list)
    layout: Literal["tree", "recombining"] = "tree"

    def build(self, N: int | None = None) -> LatticeModel:
        marks = MarkSpace([mk.x for mk in self.marks], [mk.lam for mk in self.marks])
        return LatticeModel(TimeGrid(self.T, N or self.N), marks, self.d, self.layout)


Vector = Union[float, list[float]]


class EntropicConfig(_Strict):
    kind: Literal["entropic"]
    gamma: float = Field(gt=0)
    params: dict[str, float] = Field(default_factory=dict)


class LinearConfig(_Strict):
    kind: Literal["linear"]
    a: float = 0.0
    b: Vector = 0.0
    c: Vector = 0.0
    params: dict[str, float] = Field(default_factory=dict)


class RoyerConfig(_Strict):
    kind: Literal["royer"]
    gamma: float = Field(gt=0)
    jump_coef: Vector = 0.0
    a: float = 0.0
    c0: float = 0.0
    c1: float = -0.5
    c2: float = 1.0
    params: dict[str, float] = Field(default_factory=dict)


class ZeroConfig(_Strict):
    kind: Literal["zero"]


GeneratorConfig = Annotated[
    Union[EntropicConfig, LinearConfig, RoyerConfig, ZeroConfig], Field(discriminator="kind")
]


class ConstantTerminal(_Strict):
    kind: Literal["constant"]
    value: float


class StateTerminal(_Strict):
    """transform(offset + brownian . W_T + jumps . J_T) * scale, then clipped."""

    kind: Literal["state"]
    offset: float = 0.0
    brownian: Vector = 1.0
    jumps: Vector = 0.0
    transform: Literal["identity", "sin", "tanh"] = "identity"
    scale: float = 1.0
    clip: Optional[tuple[float, float]] = None

    @field_validator("clip")
    @classmethod
    def _ordered(cls, v):
        if v is not None and v[0] > v[1]:
            raise ValueError("clip bounds must satisfy lo <= hi")
        return v


class LeavesTerminal(_Strict):
    kind: Literal["leaves"]
    values: list[float]


class RandomTerminal(_Strict):
    kind: Literal["random"]
    low: float = -0.5
    high: float = 0.5

    @model_validator(mode="after")
    def _ordered(self):
        if self.low > self.high:
            raise ValueError("low must not exceed high")
        return self


TerminalConfig = Annotated[
    Union[ConstantTerminal, StateTerminal, LeavesTerminal, RandomTerminal], Field(discriminator="kind")
]


class StudyConfig(_Strict):
    kind: Literal[STUDIES]
    N_list: list[int] = Field(default_factory=lambda: [4, 8, 16, 32])
    trials: int = Field(default=100, ge=1)
    tol: float = Field(default=1e-12, gt=0)
    max_iters: int = Field(default=200, ge=1)
    max_ratio: float = Field(default=0.9, gt=0)
    min_order: float = 0.8
    max_error_ratio: float = Field(default=0.25, gt=0)
    xi_scale: Optional[float] = Field(default=None, gt=0)
    match_tol: float = Field(default=1e-8, gt=0)
    residual_tol: float = Field(default=1e-10, gt=0)
    spread: float = Field(default=0.2, ge=0)
    case: Optional[Literal["royer", "convex"]] = None
    max_seed_variation: float = Field(default=2.0, gt=1)
    D: float = Field(default=1.0, gt=0)
    scheme: Literal["implicit", "explicit"] = "implicit"

    @field_validator("N_list")
    @classmethod
    def _positive(cls, v):
        if not v or any(n < 1 for n in v):
            raise ValueError("N_list needs at least one entry, all >= 1")
        return v


class OutputConfig(_Strict):
    dir: Optional[str] = None
    csv: Optional[str] = None
    summary: str = "summary.json"


class ExperimentConfig(_Strict):
    model: ModelConfig
    generator: GeneratorConfig
    terminal: TerminalConfig
    study: StudyConfig
    seed: int = Field(default=0, ge=0, lt=2**64)
    output: OutputConfig = Field(default_factory=OutputConfig)

    def build_model(self, N: int | None = None) -> LatticeModel:
        return self.model.build(N)

    def build_generator(self, model: LatticeModel) -> Generator:
        return make_builtin(self.generator.model_dump(), model.marks, model.d)

    def rng(self, stream: int = 0) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=(stream,))))

    def build_terminal(self, model: LatticeModel, rng: np.random.Generator | None = None) -> np.ndarray:
        return build_terminal(self.terminal, model, rng or self.rng())


def _vector(value, size: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(size, float(arr))
    if arr.shape != (size,):
        raise ConfigurationError(f"terminal.{name}: expected {size} coefficients, got {arr.size}")
    return arr


def build_terminal(spec, model: LatticeModel, rng: np.random.Generator) -> np.ndarray:
    n = model.n_nodes(model.N)
    if spec.kind == "constant":
        return np.full(n, spec.value)
    if spec.kind == "leaves":
        if len(spec.values) != n:
            raise ConfigurationError(f"terminal.values: expected {n} leaf values, got {len(spec.values)}")
        return np.asarray(spec.values, dtype=float)
    if spec.kind == "random":
        return rng.uniform(spec.low, spec.high, n)
    b = _vector(spec.brownian, model.d, "brownian")
    c = _vector(spec.jumps, model.m, "jumps")
    fn = {"identity": lambda v: v, "sin": np.sin, "tanh": np.tanh}[spec.transform]

    def value(W, J):
        v = spec.scale * fn(spec.offset + W @ b + J @ c)
        return np.clip(v, *spec.clip) if spec.clip is not None else v

    return model.terminal_from_state(value)


def format_validation_error(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{path}: {err['msg']}")
    return "; ".join(lines)


def parse_config(data) -> ExperimentConfig:
    """Validate a dict or JSON string, raising ConfigurationError with field paths."""
    try:
        if isinstance(data, (str, bytes)):
            return ExperimentConfig.model_validate_json(data)
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigurationError(format_validation_error(exc)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from None
    return parse_config(text)


def gaussian_entropic_oracle(gamma: float, T: float, offset: float, scale: float,
                             clip: tuple[float, float] | None) -> float:
    """(1/gamma) ln E[exp(gamma clip(offset + S))] for S ~ N(0, scale^2 T), in closed form."""
    s = abs(scale) * math.sqrt(T)
    if s == 0:
        v = offset if clip is None else min(max(offset, clip[0]), clip[1])
        return v
    if clip is None:
        return offset + 0.5 * gamma * s * s

    def Phi(x):
        return 0.5 * math.erfc(-x / math.sqrt(2.0))

    lo, hi = clip
    a, b = (lo - offset) / s, (hi - offset) / s
    # E[e^{gamma(offset + sX)} 1{a < X < b}] = e^{gamma offset + gamma^2 s^2/2} [Phi(b - gamma s) - Phi(a - gamma s)]
    mid = math.exp(gamma * offset + 0.5 * (gamma * s) ** 2) * (Phi(b - gamma * s) - Phi(a - gamma * s))
    total = math.exp(gamma * lo) * Phi(a) + math.exp(gamma * hi) * Phi(-b) + mid
    return math.log(total) / gamma
