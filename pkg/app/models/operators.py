from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, Iterable, Optional, Tuple

import numpy as np
import scipy.sparse as sparse
import sympy as sp

from app.core.config import settings
from app.core.exceptions import CutoffMismatch
from app.utils.fourier import ModeLattice, coefficient_modes
from app.utils.symbolic import CompiledField, PhaseSpace

LeafKey = Tuple[int, ...]


@dataclass(frozen=True, eq=False)
class FirstOrderOperator:
    """L = sum_mu C^mu(y) d_mu + Z(y) on C^r-valued functions of (x, y); mu runs over x then y."""
    space: PhaseSpace
    derivative: Tuple[sp.Matrix, ...]
    potential: sp.Matrix

    @property
    def rank(self) -> int:
        return self.potential.shape[0]

    @classmethod
    def zero(cls, space: PhaseSpace, rank: int) -> "FirstOrderOperator":
        n = space.p + space.q
        return cls(space, tuple(sp.zeros(rank, rank) for _ in range(n)), sp.zeros(rank, rank))

    @classmethod
    def vector_field(cls, space: PhaseSpace, vector: sp.Matrix, rank: int) -> "FirstOrderOperator":
        """Scalar vector field sum_mu V^mu d_mu acting componentwise."""
        eye = sp.eye(rank)
        return cls(space, tuple(vector[mu] * eye for mu in range(vector.shape[0])), sp.zeros(rank, rank))

    def __add__(self, other: "FirstOrderOperator") -> "FirstOrderOperator":
        return FirstOrderOperator(self.space,
                                  tuple(a + b for a, b in zip(self.derivative, other.derivative)),
                                  self.potential + other.potential)

    def __sub__(self, other: "FirstOrderOperator") -> "FirstOrderOperator":
        return self + other.scaled(-1)

    def scaled(self, factor) -> "FirstOrderOperator":
        return FirstOrderOperator(self.space, tuple(factor * c for c in self.derivative), factor * self.potential)

    def left_multiply(self, matrix: sp.Matrix) -> "FirstOrderOperator":
        return FirstOrderOperator(self.space, tuple(matrix * c for c in self.derivative), matrix * self.potential)

    def plus_potential(self, matrix: sp.Matrix) -> "FirstOrderOperator":
        return FirstOrderOperator(self.space, self.derivative, self.potential + matrix)

    def half_density(self, density: sp.Expr) -> "FirstOrderOperator":
        """Conjugate by rho^{1/2}: the same operator acting on half-densities u = rho^{1/2} a."""
        log_rho = sp.log(density)
        shift = sp.zeros(self.rank, self.rank)
        for mu, variable in enumerate(self.space.coordinates):
            shift += self.derivative[mu] * sp.diff(log_rho, variable)
        return self.plus_potential(sp.simplify(-shift / 2))

    def formal_adjoint(self) -> "FirstOrderOperator":
        """Adjoint for the flat L^2 pairing: -sum C^mu^H d_mu - sum d_mu(C^mu^H) + Z^H."""
        derivative = tuple(-c.H for c in self.derivative)
        potential = self.potential.H
        for mu, variable in enumerate(self.space.coordinates):
            potential -= self.derivative[mu].H.diff(variable)
        return FirstOrderOperator(self.space, derivative, potential)

    def symbol(self) -> sp.Matrix:
        """Full left symbol i sum C^mu zeta_mu + Z."""
        total = self.potential
        for c, zeta in zip(self.derivative, self.space.momenta):
            total = total + sp.I * zeta * c
        return total

    @cached_property
    def coefficient_data(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Fourier modes of the coefficients: (modes, derivative coefs (M, n, r, r), potential coefs (M, r, r))."""
        n = len(self.derivative)
        r = self.rank
        stacked = sp.Matrix.vstack(*self.derivative, self.potential)
        q = self.space.q
        modes, coefs = coefficient_modes(CompiledField(stacked, self.space.y), q,
                                         settings.COEFFICIENT_GRID, settings.COEFFICIENT_TOLERANCE)
        coefs = coefs.reshape(len(modes), n + 1, r, r)
        return modes, coefs[:, :n], coefs[:, n]

    @property
    def transverse_degree(self) -> int:
        modes = self.coefficient_data[0]
        return int(np.max(np.abs(modes))) if len(modes) else 0


def symbol_product(first: sp.Matrix, second: sp.Matrix, space: PhaseSpace) -> sp.Matrix:
    """Full symbol of a composition of differential operators whose first factor has first order."""
    total = first * second
    for zeta, variable in zip(space.momenta, space.coordinates):
        total += first.diff(zeta) * (-sp.I) * second.diff(variable)
    return sp.expand(total)


class BlockOperator:
    """Discretized operator on the Fourier basis e^{i(a.x + n.y)}, stored as blocks over leaf-mode pairs.

    ``blocks[(a, b)]`` maps the transverse coefficients of leaf mode b to those of leaf mode a. Row
    lattices may be larger than column lattices for padded products.
    """

    def __init__(self, leaf_lattice: ModeLattice, lattice: ModeLattice, blocks: Dict[Tuple[LeafKey, LeafKey], object],
                 output_lattice: Optional[ModeLattice] = None, metadata: Optional[dict] = None):
        self.leaf_lattice = leaf_lattice
        self.lattice = lattice
        self.output_lattice = output_lattice or lattice
        self.blocks = dict(blocks)
        self.metadata = dict(metadata or {"trivialization": "flat half-density", "density": "|dx|^1/2 |dy|^1/2"})

    @property
    def rank(self) -> int:
        return self.lattice.rank

    @property
    def shape(self) -> Tuple[int, int]:
        return self.output_lattice.dimension, self.lattice.dimension

    def leaf_keys(self) -> Iterable[LeafKey]:
        return [tuple(int(v) for v in mode) for mode in self.leaf_lattice.modes]

    def block(self, a: LeafKey, b: LeafKey):
        block = self.blocks.get((tuple(a), tuple(b)))
        if block is None:
            return sparse.csr_matrix(self.shape, dtype=complex)
        return block

    def dense_block(self, a: LeafKey, b: LeafKey) -> np.ndarray:
        block = self.block(a, b)
        return block.toarray() if sparse.issparse(block) else np.asarray(block)

    def _check_compatible(self, other: "BlockOperator"):
        if self.leaf_lattice != other.leaf_lattice or self.lattice != other.lattice \
                or self.output_lattice != other.output_lattice:
            raise CutoffMismatch(
                f"operator lattices differ: ({self.leaf_lattice.cutoff}, {self.lattice.cutoff}) vs "
                f"({other.leaf_lattice.cutoff}, {other.lattice.cutoff})")

    def __add__(self, other: "BlockOperator") -> "BlockOperator":
        self._check_compatible(other)
        blocks = dict(self.blocks)
        for key, block in other.blocks.items():
            blocks[key] = blocks[key] + block if key in blocks else block
        return BlockOperator(self.leaf_lattice, self.lattice, blocks, self.output_lattice, self.metadata)

    def __sub__(self, other: "BlockOperator") -> "BlockOperator":
        return self + other.scaled(-1.0)

    def scaled(self, factor: complex) -> "BlockOperator":
        blocks = {key: factor * block for key, block in self.blocks.items()}
        return BlockOperator(self.leaf_lattice, self.lattice, blocks, self.output_lattice, self.metadata)

    def adjoint(self) -> "BlockOperator":
        blocks = {(b, a): block.conj().T for (a, b), block in self.blocks.items()}
        return BlockOperator(self.leaf_lattice, self.output_lattice, blocks, self.lattice, self.metadata)

    def __matmul__(self, other: "BlockOperator") -> "BlockOperator":
        if self.lattice != other.output_lattice or self.leaf_lattice != other.leaf_lattice:
            raise CutoffMismatch("inner lattices of the product do not agree")
        by_row: Dict[LeafKey, list] = {}
        for (b, c), block in other.blocks.items():
            by_row.setdefault(b, []).append((c, block))
        blocks = {}
        for (a, b), left in self.blocks.items():
            for c, right in by_row.get(b, []):
                product = left @ right
                blocks[(a, c)] = blocks[(a, c)] + product if (a, c) in blocks else product
        return BlockOperator(self.leaf_lattice, other.lattice, blocks, self.output_lattice, self.metadata)

    def interior_norm(self, width: int) -> float:
        """Largest spectral norm over blocks restricted to modes at least ``width`` shells from the boundary.

        Rows keep the whole interior of the input box so that the restriction stays square.
        """
        col_mask = self.lattice.basis_mask(self.lattice.interior(width))
        rows = self.lattice.embedding(self.output_lattice)[col_mask]
        worst = 0.0
        for block in self.blocks.values():
            dense = block.toarray() if sparse.issparse(block) else np.asarray(block)
            sub = dense[np.ix_(rows, col_mask)]
            if sub.size:
                worst = max(worst, float(np.linalg.norm(sub, 2)))
        return worst

    def max_abs(self) -> float:
        return max([_block_norm(block) for block in self.blocks.values()] + [0.0])


def _block_norm(block) -> float:
    if sparse.issparse(block):
        return float(abs(block).max()) if block.nnz else 0.0
    return float(np.max(np.abs(block))) if np.size(block) else 0.0


@dataclass
class SpectralBlocks:
    """Eigendecompositions of the Hermitian blocks of D^2 + I (or Delta + I), one per leaf mode."""
    eigenvectors: Dict[LeafKey, np.ndarray] = field(default_factory=dict)
    eigenvalues: Dict[LeafKey, np.ndarray] = field(default_factory=dict)
