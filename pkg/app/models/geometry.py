from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Sequence, Tuple

import numpy as np
import sympy as sp

from app.utils.symbolic import CompiledField, PhaseSpace, trig_sum


@dataclass(frozen=True, eq=False)
class TrigTerm:
    """One Fourier mode of a matrix coefficient: cos(m.y) * cos_part + sin(m.y) * sin_part."""
    mode: Tuple[int, ...]
    cos_part: np.ndarray
    sin_part: np.ndarray


@dataclass(frozen=True, eq=False)
class TrigMatrix:
    """Finite trigonometric polynomial y -> matrix of the given shape."""
    shape: Tuple[int, int]
    terms: Tuple[TrigTerm, ...] = ()

    @classmethod
    def constant(cls, matrix) -> "TrigMatrix":
        matrix = np.atleast_2d(np.asarray(matrix))
        # to_sympy pads the zero mode to the transverse dimension
        return cls(matrix.shape, (TrigTerm((0,), matrix, np.zeros_like(matrix)),))

    @classmethod
    def zeros(cls, shape: Tuple[int, int]) -> "TrigMatrix":
        return cls(tuple(shape), ())

    @property
    def degree(self) -> int:
        """Largest |mode|_inf appearing in the expansion."""
        return max([int(np.max(np.abs(t.mode))) for t in self.terms] + [0])

    def to_sympy(self, variables: Sequence[sp.Symbol]) -> sp.Matrix:
        triples = []
        for term in self.terms:
            mode = tuple(term.mode) + (0,) * (len(variables) - len(term.mode))
            triples.append((mode, term.cos_part, term.sin_part))
        return trig_sum(triples, variables, self.shape)


@dataclass(frozen=True, eq=False)
class ModelGeometry:
    """Trivial torus bundle T^p x T^q with a Kaluza-Klein type bundle-like metric.

    The horizontal lift of d/dy_k is h_k = d/dy_k - sum_j A_jk(y) d/dx_j.
    """
    p: int
    q: int
    g_F: TrigMatrix
    g_B: TrigMatrix
    A: TrigMatrix
    name: str = "model"

    @cached_property
    def space(self) -> PhaseSpace:
        return PhaseSpace(self.p, self.q)

    @cached_property
    def fiber_metric(self) -> sp.Matrix:
        return self.g_F.to_sympy(self.space.y)

    @cached_property
    def base_metric(self) -> sp.Matrix:
        return self.g_B.to_sympy(self.space.y)

    @cached_property
    def connection_form(self) -> sp.Matrix:
        return self.A.to_sympy(self.space.y)

    @cached_property
    def full_metric(self) -> sp.Matrix:
        gF, gB, A = self.fiber_metric, self.base_metric, self.connection_form
        top = gF.row_join(gF * A)
        bottom = (A.T * gF).row_join(gB + A.T * gF * A)
        return top.col_join(bottom)

    @cached_property
    def volume_density(self) -> sp.Expr:
        """Riemannian density sqrt(det g_F) * sqrt(det g_B) in the coordinates (x, y)."""
        return sp.sqrt(self.fiber_metric.det()) * sp.sqrt(self.base_metric.det())

    @property
    def degree(self) -> int:
        return max(self.g_F.degree, self.g_B.degree, self.A.degree)


@dataclass(frozen=True, eq=False)
class FrameData:
    """Orthonormal vertical frame e_i and horizontal frame f_alpha in coordinates (x, y).

    ``frame`` has the vector fields as columns (e_1..e_p, f_1..f_q); ``coframe`` is its inverse,
    whose last q rows are the horizontal co-frame f*_alpha.
    """
    geometry: ModelGeometry
    vertical_basis: sp.Matrix
    horizontal_basis: sp.Matrix
    frame: sp.Matrix
    coframe: sp.Matrix
    orthonormality_defect: float

    @cached_property
    def compiled_frame(self) -> CompiledField:
        return CompiledField(self.frame, self.geometry.space.y)

    @cached_property
    def compiled_coframe(self) -> CompiledField:
        return CompiledField(self.coframe, self.geometry.space.y)

    def horizontal(self, alpha: int) -> sp.Matrix:
        return self.frame[:, self.geometry.p + alpha]

    def vertical(self, i: int) -> sp.Matrix:
        return self.frame[:, i]


@dataclass(frozen=True, eq=False)
class ConnectionData:
    """Transverse Levi-Civita coefficients gamma[a][b][c] = g(nabla_{f_a} f_b, f_c),
    integrability tensor components curvature[a][b][i] = g(R(f_a, f_b), e_i) and
    mean curvature components tau[c] = g(tau, f_c)."""
    frames: FrameData
    structure: List[List[List[sp.Expr]]]
    full_christoffel: List[List[List[sp.Expr]]]
    gamma: List[List[List[sp.Expr]]]
    curvature: List[List[List[sp.Expr]]]
    tau: List[sp.Expr]
    diagnostics: Dict[str, float] = field(default_factory=dict)

    @property
    def q(self) -> int:
        return len(self.tau)

    @cached_property
    def compiled_gamma(self) -> CompiledField:
        q = self.q
        rows = [[self.gamma[a][b][c] for c in range(q)] for a in range(q) for b in range(q)]
        return CompiledField(sp.Matrix(rows), self.frames.geometry.space.y)

    @cached_property
    def compiled_tau(self) -> CompiledField:
        return CompiledField(sp.Matrix(self.tau), self.frames.geometry.space.y)

    @cached_property
    def compiled_curvature(self) -> CompiledField:
        q, p = self.q, self.frames.geometry.p
        rows = [[self.curvature[a][b][i] for i in range(p)] for a in range(q) for b in range(q)]
        return CompiledField(sp.Matrix(rows), self.frames.geometry.space.y)

    def gamma_at(self, *y) -> np.ndarray:
        values = self.compiled_gamma(*y)
        q = self.q
        return values.reshape(values.shape[:-2] + (q, q, q))

    def tau_at(self, *y) -> np.ndarray:
        return self.compiled_tau(*y)[..., 0]

    def curvature_at(self, *y) -> np.ndarray:
        values = self.compiled_curvature(*y)
        q, p = self.q, self.frames.geometry.p
        return values.reshape(values.shape[:-2] + (q, q, p))


@dataclass(frozen=True, eq=False)
class BaseConnection:
    """Levi-Civita connection of g_B computed on the base torus alone."""
    christoffel: List[List[List[sp.Expr]]]
    frame_gamma: List[List[List[sp.Expr]]]
    frame: sp.Matrix


@dataclass(frozen=True, eq=False)
class BundleConnection:
    """Connection d + B on the trivial bundle with fiber C^r, B = i sum_k H_k(y) dy_k.

    B annihilates the leaf directions, so the connection is leafwise flat.
    """
    rank: int
    hermitian_parts: Tuple[TrigMatrix, ...] = ()

    @classmethod
    def trivial(cls, rank: int = 1) -> "BundleConnection":
        return cls(rank, ())

    def potentials(self, space: PhaseSpace) -> List[sp.Matrix]:
        """B(d/dy_k) for k = 1..q."""
        out = []
        for k in range(space.q):
            if k < len(self.hermitian_parts):
                out.append(sp.I * self.hermitian_parts[k].to_sympy(space.y))
            else:
                out.append(sp.zeros(self.rank, self.rank))
        return out

    @property
    def is_trivial(self) -> bool:
        return all(not part.terms for part in self.hermitian_parts)
