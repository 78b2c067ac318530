from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import sympy as sp

from app.core.config import settings
from app.core.exceptions import ConfigInvalid, EvaluationAtZeroSection
from app.utils.symbolic import CompiledField


@dataclass(frozen=True)
class FlowConfig:
    """Fixed-step RK4 settings; the step is shrunk slightly so that ``time`` is reached exactly."""
    step: float = settings.RK4_STEP
    time: float = 1.0
    tolerance: float = settings.ODE_TOLERANCE
    eta_min: float = settings.ETA_MIN
    record_stride: int = 0

    def __post_init__(self):
        if not self.step > 0:
            raise ConfigInvalid(f"step size must be positive, got {self.step}")
        if self.time < 0:
            raise ConfigInvalid(f"flow time must be non-negative, got {self.time}")
        if not 0 < self.eta_min < 1:
            raise ConfigInvalid(f"eta_min must lie in (0, 1), got {self.eta_min}")

    @property
    def steps(self) -> int:
        return int(np.ceil(self.time / self.step - 1e-9)) if self.time > 0 else 0

    @property
    def effective_step(self) -> float:
        return self.time / self.steps if self.steps else 0.0

    def with_time(self, time: float) -> "FlowConfig":
        return FlowConfig(self.step, time, self.tolerance, self.eta_min, self.record_stride)


@dataclass(frozen=True, eq=False)
class VectorField:
    """Autonomous vector field on the coordinates ``variables``; states carry them along the last axis."""
    variables: Tuple[sp.Symbol, ...]
    components: sp.Matrix
    momentum_index: Tuple[int, ...] = ()
    eta_min: float = settings.ETA_MIN

    @cached_property
    def compiled(self) -> CompiledField:
        return CompiledField(self.components, self.variables)

    @property
    def dimension(self) -> int:
        return len(self.variables)

    def momentum_norm(self, state: np.ndarray) -> np.ndarray:
        return np.linalg.norm(np.asarray(state)[..., list(self.momentum_index)], axis=-1)

    def __call__(self, state: np.ndarray) -> np.ndarray:
        state = np.asarray(state, dtype=float)
        if self.momentum_index and np.any(self.momentum_norm(state) < self.eta_min):
            raise EvaluationAtZeroSection(f"field evaluated within {self.eta_min:g} of the zero section")
        values = self.compiled(*[state[..., i] for i in range(self.dimension)])
        return np.real(values[..., 0])


@dataclass(frozen=True)
class ConormalPoint:
    """(x, y, eta) on the conormal chart xi = 0."""
    x: Tuple[float, ...]
    y: Tuple[float, ...]
    eta: Tuple[float, ...]

    def __post_init__(self):
        if np.linalg.norm(self.eta) < settings.ETA_MIN:
            raise EvaluationAtZeroSection(f"|eta| = {np.linalg.norm(self.eta):.3e} is below eta_min")

    def as_state(self) -> np.ndarray:
        x = np.mod(np.asarray(self.x, dtype=float), 2 * np.pi)
        y = np.mod(np.asarray(self.y, dtype=float), 2 * np.pi)
        return np.concatenate([x, y, np.asarray(self.eta, dtype=float)])


@dataclass(frozen=True)
class GroupoidPoint:
    """(x, x', y, eta); the range projection is (x, y, eta) and the source projection (x', y, eta)."""
    x: Tuple[float, ...]
    xs: Tuple[float, ...]
    y: Tuple[float, ...]
    eta: Tuple[float, ...]

    def __post_init__(self):
        if np.linalg.norm(self.eta) < settings.ETA_MIN:
            raise EvaluationAtZeroSection(f"|eta| = {np.linalg.norm(self.eta):.3e} is below eta_min")

    def as_state(self) -> np.ndarray:
        parts = [np.mod(np.asarray(v, dtype=float), 2 * np.pi) for v in (self.x, self.xs, self.y)]
        return np.concatenate(parts + [np.asarray(self.eta, dtype=float)])

    def range_point(self) -> ConormalPoint:
        return ConormalPoint(self.x, self.y, self.eta)

    def source_point(self) -> ConormalPoint:
        return ConormalPoint(self.xs, self.y, self.eta)


@dataclass(frozen=True, eq=False)
class PartialConnection:
    """nabla_v = v + Gamma along the flow of ``field``; ``coefficient`` maps states to (..., r, r)."""
    field: VectorField
    coefficient: Callable[[np.ndarray], np.ndarray]
    rank: int
    hermitian: bool = True


@dataclass
class Trajectory:
    """Samples of an integrated flow: ``states`` has shape (T,) + state shape."""
    times: np.ndarray
    states: np.ndarray
    names: Sequence[str] = ()
    transports: Optional[np.ndarray] = None

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def to_frame(self) -> pd.DataFrame:
        """Table with one row per sample for a single trajectory; matrices as interleaved re/im columns."""
        states = self.states.reshape(len(self.times), -1)
        names = list(self.names) or [f"z{i}" for i in range(states.shape[1])]
        frame = pd.DataFrame(states, columns=names[:states.shape[1]])
        frame.insert(0, "t", self.times)
        if self.transports is not None:
            flat = self.transports.reshape(len(self.times), -1)
            for index in range(flat.shape[1]):
                frame[f"T{index}_re"] = flat[:, index].real
                frame[f"T{index}_im"] = flat[:, index].imag
        return frame


@dataclass(frozen=True)
class TransportCheck:
    """Central-difference residuals of d/dt k_t = nabla_H k_t at several time steps."""
    deltas: Tuple[float, ...]
    residuals: Tuple[float, ...]
    order: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"delta": self.deltas, "residual": self.residuals})


@dataclass(frozen=True)
class FramePoint:
    """Base covector eta at y with a frame (v_1, ..., v_q) stored as the columns of ``frame``."""
    y: np.ndarray
    eta: np.ndarray
    frame: np.ndarray = field(default_factory=lambda: np.eye(2))

    def first_integrals(self) -> np.ndarray:
        """I_j = eta(v_j)."""
        return np.einsum("...k,...kj->...j", self.eta, self.frame)
