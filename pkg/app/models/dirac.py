from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import sympy as sp

from app.models.geometry import BundleConnection, ConnectionData, FrameData, ModelGeometry
from app.models.operators import BlockOperator, FirstOrderOperator


def _to_sympy(matrix: np.ndarray) -> sp.Matrix:
    return sp.Matrix(matrix.shape[0], matrix.shape[1],
                     lambda i, j: sp.nsimplify(complex(matrix[i, j]).real) + sp.I * sp.nsimplify(complex(matrix[i, j]).imag))


@dataclass(frozen=True, eq=False)
class CliffordData:
    """Clifford module for codimension two: generators c(f_1), c(f_2) and a grading operator.

    ``kind`` is "spinor" (C^2 with c_a = i sigma_a) or "exterior" (forms on the horizontal bundle with
    c = wedge - interior); the connection lift differs between the two.
    """
    kind: str
    generators: Tuple[np.ndarray, ...]
    grading: np.ndarray
    wedge: Tuple[np.ndarray, ...] = ()
    interior: Tuple[np.ndarray, ...] = ()

    @classmethod
    def spinor(cls) -> "CliffordData":
        sx = np.array([[0, 1], [1, 0]], dtype=complex)
        sy = np.array([[0, -1j], [1j, 0]], dtype=complex)
        sz = np.diag([1.0, -1.0]).astype(complex)
        return cls("spinor", (1j * sx, 1j * sy), sz)

    @classmethod
    def exterior(cls) -> "CliffordData":
        """Basis (1, f*_1, f*_2, f*_1 ^ f*_2)."""
        e1 = np.zeros((4, 4), dtype=complex)
        e2 = np.zeros((4, 4), dtype=complex)
        e1[1, 0], e1[3, 2] = 1, 1
        e2[2, 0], e2[3, 1] = 1, -1
        i1, i2 = e1.T.copy(), e2.T.copy()
        grading = np.diag([1.0, -1.0, -1.0, 1.0]).astype(complex)
        return cls("exterior", (e1 - i1, e2 - i2), grading, (e1, e2), (i1, i2))

    @property
    def size(self) -> int:
        return self.generators[0].shape[0]

    @property
    def q(self) -> int:
        return len(self.generators)

    def c(self, alpha: int) -> sp.Matrix:
        return _to_sympy(self.generators[alpha])

    def clifford(self, components) -> sp.Matrix:
        """c(v) for v = sum v_alpha f_alpha."""
        return sum((components[a] * self.c(a) for a in range(self.q)), sp.zeros(self.size, self.size))

    def lift(self, a) -> sp.Matrix:
        """Endomorphism induced by the skew matrix a[b][g] = g(nabla f_b, f_g)."""
        q = self.q
        total = sp.zeros(self.size, self.size)
        if self.kind == "spinor":
            for b in range(q):
                for g in range(q):
                    total += a[b][g] * self.c(b) * self.c(g) / 4
        else:
            for b in range(q):
                for g in range(q):
                    total += a[b][g] * _to_sympy(self.wedge[g] @ self.interior[b])
        return total

    def relations_defect(self) -> float:
        worst = 0.0
        for a, ca in enumerate(self.generators):
            worst = max(worst, float(np.max(np.abs(ca + ca.conj().T))))
            worst = max(worst, float(np.max(np.abs(self.grading @ ca + ca @ self.grading))))
            for b, cb in enumerate(self.generators):
                target = -2.0 * np.eye(self.size) * (a == b)
                worst = max(worst, float(np.max(np.abs(ca @ cb + cb @ ca - target))))
        return worst


@dataclass(frozen=True, eq=False)
class SpinConnection:
    """Lifted Levi-Civita coefficients along f_alpha and the sampled Clifford-compatibility residual."""
    potentials: Tuple[sp.Matrix, ...]
    compatibility_residual: float
    skew_defect: float


@dataclass(frozen=True, eq=False)
class DiracAssembly:
    """Transverse Dirac operator D_E = D'_E - c(tau)/2 on F(Q) (x) E, symbolically and on a Fourier lattice."""
    geometry: ModelGeometry
    frames: FrameData
    connection: ConnectionData
    clifford: CliffordData
    bundle: BundleConnection
    spin: SpinConnection
    total_potentials: Tuple[sp.Matrix, ...]
    prime_operator: FirstOrderOperator
    dirac_operator: FirstOrderOperator
    c_tau: sp.Matrix
    D_prime: BlockOperator
    D: BlockOperator
    C_tau: BlockOperator
    width: int

    @property
    def rank(self) -> int:
        return self.clifford.size * self.bundle.rank


@dataclass(frozen=True)
class AdjointReport:
    """Interior norms of (D')^H - (D' - c(tau)) and of the control without c(tau)."""
    defect: float
    control: float
    c_tau_norm: float
    symmetry_defect: float
    boundary_defect: float


@dataclass(frozen=True, eq=False)
class ConjugationFit:
    """Polynomial-in-s coefficients of e^{-is phi} T (e^{is phi} a) sampled at ``points``: shape (G, r) each."""
    power: int
    scales: np.ndarray
    points: np.ndarray
    coefficients: np.ndarray
    condition: float

    @property
    def leading(self) -> np.ndarray:
        return self.coefficients[self.power]

    @property
    def subleading(self) -> np.ndarray:
        return self.coefficients[self.power - 1]


@dataclass
class SymbolCheck:
    """Per-probe agreement of the principal and subprincipal computations for D_E^2."""
    principal_errors: List[float] = field(default_factory=list)
    fit_vs_closed: List[float] = field(default_factory=list)
    fit_vs_symbolic: List[float] = field(default_factory=list)
    closed_vs_symbolic: List[float] = field(default_factory=list)

    @property
    def worst(self) -> Dict[str, float]:
        return {name: max(values) if values else 0.0 for name, values in (
            ("principal", self.principal_errors), ("fit_vs_closed", self.fit_vs_closed),
            ("fit_vs_symbolic", self.fit_vs_symbolic), ("closed_vs_symbolic", self.closed_vs_symbolic))}


@dataclass(frozen=True, eq=False)
class SignatureData:
    """Horizontal de Rham operators and the Dirac operator with coefficients in F(Q)*."""
    d_H: BlockOperator
    d_H_star: BlockOperator
    D_H: BlockOperator
    D_dual: BlockOperator
    tau_term: BlockOperator
    identity_residual: float
    d_H_squared: float
    width: int
    assembly: Optional[DiracAssembly] = None


@dataclass(frozen=True)
class IsotypicBlock:
    leaf_mode: Tuple[int, ...]
    block: np.ndarray
    base: np.ndarray
    residual: float
    off_block: float
