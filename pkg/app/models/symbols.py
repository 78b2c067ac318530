from dataclasses import dataclass, replace
from typing import List, Optional

import numpy as np
import sympy as sp

from app.utils.fourier import evaluate_directions
from app.utils.symbolic import PhaseSpace


@dataclass(frozen=True, eq=False)
class TransverseSymbol:
    """Classical transverse symbol k(x, x', y, eta) = sum khat_{a,b,c,j}(omega) e^{i(a.x + b.x' + c.y)} |eta|^{m-j}.

    ``coeffs`` has shape (J+1, N_omega, N_leaf, N_leaf, N_c, r, r); the leaf-mode table is shared by the
    range variable x (index a) and the source variable x' (index b).
    """
    order: int
    leaf_modes: np.ndarray
    transverse_modes: np.ndarray
    directions: np.ndarray
    coeffs: np.ndarray

    @property
    def depth(self) -> int:
        return self.coeffs.shape[0] - 1

    @property
    def rank(self) -> int:
        return self.coeffs.shape[-1]

    @property
    def p(self) -> int:
        return self.leaf_modes.shape[1]

    @property
    def q(self) -> int:
        return self.transverse_modes.shape[1]

    @property
    def leaf_degree(self) -> int:
        return int(np.max(np.abs(self.leaf_modes))) if self.leaf_modes.size else 0

    @property
    def transverse_degree(self) -> int:
        """Largest |c|_inf among modes carrying a nonzero coefficient."""
        weight = np.max(np.abs(self.coeffs), axis=(0, 1, 2, 3, 5, 6))
        active = self.transverse_modes[weight > 0]
        return int(np.max(np.abs(active))) if len(active) else 0

    def with_coeffs(self, coeffs: np.ndarray, order: Optional[int] = None) -> "TransverseSymbol":
        return replace(self, coeffs=coeffs, order=self.order if order is None else order)

    def __add__(self, other: "TransverseSymbol") -> "TransverseSymbol":
        depth = max(self.depth, other.depth)
        return self.with_coeffs(self.padded(depth).coeffs + other.padded(depth).coeffs)

    def __sub__(self, other: "TransverseSymbol") -> "TransverseSymbol":
        return self + other.scaled(-1.0)

    def scaled(self, factor: complex) -> "TransverseSymbol":
        return self.with_coeffs(factor * self.coeffs)

    def padded(self, depth: int) -> "TransverseSymbol":
        if depth <= self.depth:
            return self
        extra = np.zeros((depth - self.depth,) + self.coeffs.shape[1:], dtype=complex)
        return self.with_coeffs(np.concatenate([self.coeffs.astype(complex), extra], axis=0))

    def truncated(self, depth: int) -> "TransverseSymbol":
        return self.with_coeffs(self.coeffs[:depth + 1])

    def leading(self) -> "TransverseSymbol":
        return self.truncated(0)

    def adjoint(self) -> "TransverseSymbol":
        """k*(x, x', y, eta) = k(x', x, y, eta)^H: modes (a, b, c) -> (-b, -a, -c)."""
        leaf_perm = _negation_permutation(self.leaf_modes)
        transverse_perm = _negation_permutation(self.transverse_modes)
        coeffs = np.conj(self.coeffs)
        coeffs = np.swapaxes(coeffs, 2, 3)[:, :, leaf_perm][:, :, :, leaf_perm][:, :, :, :, transverse_perm]
        return self.with_coeffs(np.swapaxes(coeffs, -1, -2))

    def coefficients_at(self, omega: np.ndarray, level: int = 0) -> np.ndarray:
        """Level-j coefficients at unit directions omega: shape (len(omega), N_leaf, N_leaf, N_c, r, r)."""
        return evaluate_directions(self.coeffs[level], 0, omega)

    def evaluate(self, x, xs, y, eta) -> np.ndarray:
        """Value at points given as arrays whose last axis holds the coordinates; returns (..., r, r)."""
        x, xs, y, eta = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (x, xs, y, eta))
        radius = np.linalg.norm(eta, axis=-1)
        omega = eta / radius[:, None]
        angular = evaluate_directions(self.coeffs, 1, omega)  # (M, J+1, a, b, c, r, r)
        phase_a = np.exp(1j * x @ self.leaf_modes.T)
        phase_b = np.exp(1j * xs @ self.leaf_modes.T)
        phase_c = np.exp(1j * y @ self.transverse_modes.T)
        levels = radius[:, None] ** (self.order - np.arange(self.depth + 1))[None, :]
        return np.einsum("mjabcrs,ma,mb,mc,mj->mrs", angular, phase_a, phase_b, phase_c, levels)

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.coeffs))) if self.coeffs.size else 0.0


def _negation_permutation(modes: np.ndarray) -> np.ndarray:
    lookup = {tuple(m): i for i, m in enumerate(modes)}
    missing = [tuple(m) for m in modes if tuple(-m) not in lookup]
    if missing:
        raise ValueError(f"mode table is not closed under negation: {missing[0]} has no partner")
    return np.array([lookup[tuple(-m)] for m in modes])


def symmetric_mode_table(dim: int, cutoff: int) -> np.ndarray:
    axes = [np.arange(-cutoff, cutoff + 1)] * dim
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1).astype(int)


def zero_symbol(order: int, p: int, q: int, leaf_cutoff: int, transverse_cutoff: int, directions: np.ndarray,
                rank: int, depth: int = 0) -> TransverseSymbol:
    leaf = symmetric_mode_table(p, leaf_cutoff)
    transverse = symmetric_mode_table(q, transverse_cutoff)
    coeffs = np.zeros((depth + 1, len(directions), len(leaf), len(leaf), len(transverse), rank, rank), dtype=complex)
    return TransverseSymbol(order, leaf, transverse, directions, coeffs)


@dataclass(frozen=True, eq=False)
class ScalarFullSymbol:
    """Full symbol b_m + b_{m-1} of an auxiliary operator in the chart variables (x, y, xi, eta).

    b_m is a real scalar homogeneous of degree m; b_{m-1} may be matrix valued (r x r) and is homogeneous of
    degree m-1.
    """
    space: PhaseSpace
    principal: sp.Expr
    subleading: sp.Matrix
    order: int

    @property
    def rank(self) -> int:
        return self.subleading.shape[0]

    def full(self) -> sp.Matrix:
        return self.principal * sp.eye(self.rank) + self.subleading

    @property
    def depends_on_leaf(self) -> bool:
        symbols = self.full().free_symbols
        return any(x in symbols for x in self.space.x)

    @property
    def depends_on_transverse(self) -> bool:
        symbols = self.full().free_symbols
        return any(y in symbols for y in self.space.y)


@dataclass(frozen=True, eq=False)
class SubprincipalData:
    """Transverse principal symbol restricted to N*F, its Hamiltonian field and the subprincipal symbol.

    ``hamiltonian`` lists the components (x', y', xi', eta') of H_p at xi = 0; ``order`` is the degree of p.
    """
    principal: sp.Expr
    hamiltonian: sp.Matrix
    subprincipal: sp.Matrix
    space: PhaseSpace
    order: int = 1

    @property
    def rank(self) -> int:
        return self.subprincipal.shape[0]

    def leaf_velocity(self) -> List[sp.Expr]:
        return list(self.hamiltonian[:self.space.p])

    def transverse_velocity(self) -> List[sp.Expr]:
        p, q = self.space.p, self.space.q
        return list(self.hamiltonian[p:p + q])

    def force(self) -> List[sp.Expr]:
        p, q = self.space.p, self.space.q
        return list(self.hamiltonian[2 * p + q:])

    def leaf_divergence(self) -> sp.Expr:
        """sum d_x d_xi p on the conormal chart."""
        return sp.simplify(sum((sp.diff(v, x) for v, x in zip(self.leaf_velocity(), self.space.x)), sp.Integer(0)))

    @property
    def depends_on_leaf(self) -> bool:
        symbols = self.hamiltonian.free_symbols | self.subprincipal.free_symbols
        return any(x in symbols for x in self.space.x)

    @property
    def depends_on_transverse(self) -> bool:
        symbols = self.hamiltonian.free_symbols | self.subprincipal.free_symbols
        return any(y in symbols for y in self.space.y)


@dataclass(frozen=True, eq=False)
class SymbolSamples:
    """Leading coefficients read off a matrix at probe frequencies n = round(scale * omega).

    ``values`` has shape (N_probe, N_leaf, N_leaf, N_c, r, r), indexed like TransverseSymbol coefficients.
    """
    scale: float
    order: int
    probes: np.ndarray
    directions: np.ndarray
    leaf_modes: np.ndarray
    transverse_modes: np.ndarray
    values: np.ndarray

    def reference(self, symbol: TransverseSymbol, level: int = 0) -> np.ndarray:
        """The symbol's level-j coefficients on this sample's tables and probe directions."""
        coeffs = symbol.coefficients_at(self.directions, level)
        out = np.zeros(self.values.shape, dtype=complex)
        leaf_lookup = {tuple(m): i for i, m in enumerate(symbol.leaf_modes)}
        transverse_lookup = {tuple(m): i for i, m in enumerate(symbol.transverse_modes)}
        leaf = [leaf_lookup.get(tuple(m), -1) for m in self.leaf_modes]
        transverse = [transverse_lookup.get(tuple(m), -1) for m in self.transverse_modes]
        for ia, sa in enumerate(leaf):
            for ib, sb in enumerate(leaf):
                for ic, sc in enumerate(transverse):
                    if sa >= 0 and sb >= 0 and sc >= 0:
                        out[:, ia, ib, ic] = coeffs[:, sa, sb, sc]
        return out

    def error(self, symbol: TransverseSymbol, level: int = 0) -> float:
        return float(np.max(np.abs(self.values - self.reference(symbol, level))))

    def relative_error(self, symbol: TransverseSymbol, level: int = 0) -> float:
        reference = self.reference(symbol, level)
        scale = float(np.max(np.abs(reference)))
        return float(np.max(np.abs(self.values - reference))) / max(scale, 1e-300)


@dataclass(frozen=True)
class FidelityResult:
    """Shell-restricted remainder of a truncated composition expansion against the matrix product."""
    side: str
    truncation: int
    scales: tuple
    remainders: tuple
    slope: float
    bound: float
    exact: bool

    @property
    def passed(self) -> bool:
        return self.exact or self.slope <= self.bound
