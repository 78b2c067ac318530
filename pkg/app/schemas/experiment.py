import json
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from app.core.exceptions import ConfigInvalid
from app.models.geometry import BundleConnection, ModelGeometry, TrigMatrix, TrigTerm

# complex numbers travel as [re, im]; plain numbers are accepted for real entries
ComplexValue = Union[float, Tuple[float, float]]
ComplexMatrix = List[List[ComplexValue]]

ScenarioName = Literal["geometry-checks", "flow-invariants", "symbol-composition", "commutator", "dirac-adjoint",
                       "dirac-symbols", "signature-isotypic", "egorov-scalar", "egorov-dirac"]
DIRAC_SCENARIOS = {"dirac-adjoint", "dirac-symbols", "signature-isotypic", "egorov-dirac"}


def to_complex_matrix(rows: ComplexMatrix) -> np.ndarray:
    def value(entry):
        if isinstance(entry, (tuple, list)):
            return complex(entry[0], entry[1])
        return complex(entry)

    return np.array([[value(entry) for entry in row] for row in rows], dtype=complex)


def _real_if_possible(matrix: np.ndarray) -> np.ndarray:
    return matrix.real if not np.any(matrix.imag) else matrix


class TrigTermSpec(BaseModel):
    mode: List[int]
    cos: Optional[ComplexMatrix] = None
    sin: Optional[ComplexMatrix] = None

    def to_term(self, shape: Tuple[int, int]) -> TrigTerm:
        zero = np.zeros(shape)
        cos = _real_if_possible(to_complex_matrix(self.cos)) if self.cos is not None else zero
        sin = _real_if_possible(to_complex_matrix(self.sin)) if self.sin is not None else zero
        if cos.shape != tuple(shape) or sin.shape != tuple(shape):
            raise ConfigInvalid(f"trigonometric term for mode {self.mode} does not have shape {shape}")
        return TrigTerm(tuple(self.mode), cos, sin)


def _trig_matrix(terms: Optional[List[TrigTermSpec]], shape: Tuple[int, int], default: str) -> TrigMatrix:
    if terms is None:
        if default == "identity":
            return TrigMatrix.constant(np.eye(shape[0]))
        return TrigMatrix.zeros(shape)
    return TrigMatrix(tuple(shape), tuple(term.to_term(shape) for term in terms))


class GeometrySpec(BaseModel):
    """Fourier data of g_F (p x p), g_B (q x q) and A (p x q); omitted metrics are the identity, omitted A zero."""
    name: str = "model"
    p: int = Field(1, ge=1, le=2)
    q: int = Field(1, ge=1, le=2)
    g_F: Optional[List[TrigTermSpec]] = None
    g_B: Optional[List[TrigTermSpec]] = None
    A: Optional[List[TrigTermSpec]] = None

    def build(self) -> ModelGeometry:
        return ModelGeometry(self.p, self.q, _trig_matrix(self.g_F, (self.p, self.p), "identity"),
                             _trig_matrix(self.g_B, (self.q, self.q), "identity"),
                             _trig_matrix(self.A, (self.p, self.q), "zero"), self.name)


class BundleSpec(BaseModel):
    """Connection d + i sum_k H_k(y) dy_k on C^rank; ``connection[k]`` lists the terms of H_k."""
    rank: int = Field(1, ge=1, le=4)
    connection: List[List[TrigTermSpec]] = []

    def build(self) -> BundleConnection:
        shape = (self.rank, self.rank)
        return BundleConnection(self.rank, tuple(_trig_matrix(terms, shape, "zero") for terms in self.connection))


class SymbolTermSpec(BaseModel):
    leaf: List[int]
    source: List[int]
    transverse: List[int]
    level: int = 0
    harmonic: int = 0
    coefficient: Union[ComplexValue, ComplexMatrix] = 1.0

    def as_tuple(self, rank: int):
        if isinstance(self.coefficient, list):
            coefficient = to_complex_matrix(self.coefficient)
            if coefficient.shape != (rank, rank):
                raise ConfigInvalid(f"symbol coefficient has shape {coefficient.shape}, expected {(rank, rank)}")
        elif isinstance(self.coefficient, tuple):
            coefficient = complex(self.coefficient[0], self.coefficient[1]) * np.eye(rank)
        else:
            coefficient = complex(self.coefficient) * np.eye(rank)
        return tuple(self.leaf), tuple(self.source), tuple(self.transverse), self.level, self.harmonic, coefficient


class RandomSymbolSpec(BaseModel):
    n_modes: int = Field(5, ge=1)
    leaf_cutoff: int = Field(1, ge=0)
    transverse_cutoff: int = Field(2, ge=0)
    harmonics: int = Field(2, ge=0)


class SymbolSpec(BaseModel):
    """Explicit terms, or a random draw; ``seed`` pins the draw independently of the run seed."""
    order: int = 0
    rank: int = Field(1, ge=1, le=4)
    depth: int = Field(0, ge=0)
    terms: List[SymbolTermSpec] = []
    random: Optional[RandomSymbolSpec] = None
    seed: Optional[int] = None

    @model_validator(mode="after")
    def _has_content(self):
        if not self.terms and self.random is None:
            raise ValueError("a symbol needs explicit terms or a random specification")
        return self


class OperatorSpec(BaseModel):
    """Full symbol of an auxiliary operator B as sympy strings in x1.., y1.., xi1.., eta1..."""
    principal: str
    subleading: Union[str, List[List[str]]] = "0"
    order: int = Field(1, ge=1, le=2)


class ExperimentConfig(BaseModel):
    scenario: ScenarioName
    geometry: GeometrySpec = GeometrySpec()
    bundle: BundleSpec = BundleSpec()
    symbol: Optional[SymbolSpec] = None
    symbols: List[SymbolSpec] = []
    operator: Optional[OperatorSpec] = None
    cutoff: int = Field(32, ge=2)
    leaf_cutoff: int = Field(1, ge=0)
    times: List[float] = [1.0]
    scales: List[float] = [8.0, 16.0, 32.0]
    truncations: List[int] = [0, 1, 2]
    leaf_modes: List[List[int]] = []
    probes: int = Field(10, ge=1)
    step: float = Field(1e-3, gt=0)
    controls: bool = True
    doubling: bool = False
    tolerances: Dict[str, float] = {}
    seed: Optional[int] = None
    output_dir: Optional[str] = None

    @field_validator("scales")
    @classmethod
    def _positive_scales(cls, scales):
        if any(s <= 0 for s in scales):
            raise ValueError("frequency scales must be positive")
        return sorted(scales)

    @model_validator(mode="after")
    def _cross_field(self):
        if self.scenario in DIRAC_SCENARIOS and self.geometry.q != 2:
            raise ValueError(f"scenario '{self.scenario}' requires codimension q=2, got q={self.geometry.q}")
        has_symbol = self.symbol is not None or bool(self.symbols)
        if self.scenario == "symbol-composition" and (not has_symbol or self.operator is None):
            raise ValueError("scenario 'symbol-composition' needs 'symbol' or 'symbols', and 'operator'")
        if self.scenario == "commutator" and (self.symbol is None or self.operator is None):
            raise ValueError("scenario 'commutator' needs both 'symbol' and 'operator'")
        if self.scenario in {"egorov-scalar", "egorov-dirac"}:
            if self.symbol is None:
                raise ValueError(f"scenario '{self.scenario}' needs a 'symbol'")
            if max(self.scales) > self.cutoff / 2:
                raise ValueError(f"scales must not exceed cutoff/2 = {self.cutoff / 2}")
        if self.symbol is not None and self.scenario == "egorov-scalar" and self.symbol.rank != self.bundle.rank:
            raise ValueError("the symbol rank must equal the bundle rank for scalar Egorov runs")
        for terms in self.bundle.connection:
            for term in terms:
                if len(term.mode) > self.geometry.q:
                    raise ValueError(f"connection mode {term.mode} has more than q={self.geometry.q} entries")
        if len(self.bundle.connection) > self.geometry.q:
            raise ValueError("the bundle connection has more components than base directions")
        return self

    def tolerance(self, name: str, default: float) -> float:
        return float(self.tolerances.get(name, default))


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """Read and validate a JSON experiment config; every failure surfaces as ConfigInvalid."""
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigInvalid(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigInvalid(f"config {path} is not valid JSON: {str(e)}")
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigInvalid(f"config {path} is invalid: {str(e)}")
