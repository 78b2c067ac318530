import itertools
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sparse
import sympy as sp

from app.core.config import settings
from app.core.exceptions import (ConfigInvalid, CutoffTooSmall, NotHolonomyInvariant, ProbeOutOfRange,
                                 TruncationDepthExceeded)
from app.models.geometry import BundleConnection, FrameData, ModelGeometry
from app.models.operators import BlockOperator, symbol_product
from app.models.symbols import (FidelityResult, ScalarFullSymbol, SubprincipalData, SymbolSamples,
                                TransverseSymbol, symmetric_mode_table, zero_symbol)
from app.services.geometry_service import build_frames, dual_norm_expression, frame_operator
from app.utils.fourier import (ModeLattice, coefficient_modes, differentiate_directions, direction_grid,
                               evaluate_directions, excision, fourier_matrix, transverse_grid)
from app.utils.galerkin import coupling_matrix
from app.utils.symbolic import CompiledField, matrix_homogeneous_parts

logger = logging.getLogger(__name__)

SLOPE_TOLERANCE = 0.3
REMAINDER_FLOOR = 1e-300
PROBE_COUNT = 8


def _keys(lattice: ModeLattice) -> List[Tuple[int, ...]]:
    return [tuple(int(v) for v in mode) for mode in lattice.modes]


def _table_cutoff(modes: np.ndarray) -> int:
    return int(np.max(np.abs(modes))) if modes.size else 0


# ---------------------------------------------------------------------------
# Building symbols
# ---------------------------------------------------------------------------

def _angular_factor(directions: np.ndarray, harmonic: int) -> np.ndarray:
    """omega_1^l for q=1, e^{i l theta} for q=2."""
    if directions.shape[1] == 1:
        return directions[:, 0] ** harmonic
    theta = np.arctan2(directions[:, 1], directions[:, 0])
    return np.exp(1j * harmonic * theta)


def symbol_from_terms(terms: Iterable, p: int, q: int, order: int, rank: int = 1, depth: int = 0,
                      n_theta: Optional[int] = None) -> TransverseSymbol:
    """Build a symbol from (leaf, source, transverse, level, harmonic, coefficient) tuples.

    Each tuple contributes coefficient * angular(omega) e^{i(a.x + b.x' + c.y)} |eta|^{order - level}.
    """
    terms = list(terms)
    directions = direction_grid(q, n_theta or settings.N_THETA)
    leaf_cutoff = max([_table_cutoff(np.array([t[0], t[1]])) for t in terms] + [0])
    transverse_cutoff = max([_table_cutoff(np.array(t[2])) for t in terms] + [0])
    depth = max([depth] + [int(t[3]) for t in terms])
    base = zero_symbol(order, p, q, leaf_cutoff, transverse_cutoff, directions, rank, depth)
    leaf = ModeLattice(p, leaf_cutoff)
    transverse = ModeLattice(q, transverse_cutoff)
    coeffs = base.coeffs.copy()
    for a, b, c, level, harmonic, coefficient in terms:
        coefficient = np.asarray(coefficient, dtype=complex).reshape(rank, rank)
        ia, ib = leaf.index([a])[0], leaf.index([b])[0]
        ic = transverse.index([c])[0]
        coeffs[int(level), :, ia, ib, ic] += _angular_factor(directions, int(harmonic))[:, None, None] * coefficient
    return base.with_coeffs(coeffs)


def random_symbol(rng: np.random.Generator, p: int, q: int, order: int, depth: int = 0, leaf_cutoff: int = 1,
                  transverse_cutoff: int = 2, rank: int = 1, n_modes: int = 5, harmonics: int = 2,
                  n_theta: Optional[int] = None) -> TransverseSymbol:
    """Symbol with ``n_modes`` random (a, b, c) modes and band-limited angular dependence."""
    directions = direction_grid(q, n_theta or settings.N_THETA)
    base = zero_symbol(order, p, q, leaf_cutoff, transverse_cutoff, directions, rank, depth)
    coeffs = base.coeffs.copy()
    for _ in range(n_modes):
        ia = rng.integers(len(base.leaf_modes))
        ib = rng.integers(len(base.leaf_modes))
        ic = rng.integers(len(base.transverse_modes))
        for level in range(depth + 1):
            if q == 1:
                values = rng.normal(size=(2, rank, rank)) + 1j * rng.normal(size=(2, rank, rank))
            else:
                values = np.zeros((len(directions), rank, rank), dtype=complex)
                for harmonic in range(-harmonics, harmonics + 1):
                    weight = rng.normal(size=(rank, rank)) + 1j * rng.normal(size=(rank, rank))
                    values += _angular_factor(directions, harmonic)[:, None, None] * weight / (1 + abs(harmonic))
            coeffs[level, :, ia, ib, ic] += values
    return base.with_coeffs(coeffs)


def _with_leaf_cutoff(k: TransverseSymbol, cutoff: int) -> TransverseSymbol:
    if k.leaf_degree == cutoff:
        return k
    modes = symmetric_mode_table(k.p, cutoff)
    index = ModeLattice(k.p, cutoff).index(k.leaf_modes)
    shape = k.coeffs.shape[:2] + (len(modes), len(modes)) + k.coeffs.shape[4:]
    coeffs = np.zeros(shape, dtype=complex)
    coeffs[:, :, index[:, None], index[None, :]] = k.coeffs
    return TransverseSymbol(k.order, modes, k.transverse_modes, k.directions, coeffs)


def embed(k: TransverseSymbol, leaf_cutoff: int, transverse_cutoff: int, depth: Optional[int] = None) -> TransverseSymbol:
    """The same symbol on larger mode tables (and optionally more levels)."""
    k = _with_leaf_cutoff(k, leaf_cutoff)
    depth = k.depth if depth is None else depth
    modes = symmetric_mode_table(k.q, transverse_cutoff)
    index = ModeLattice(k.q, transverse_cutoff).index(k.transverse_modes)
    coeffs = np.zeros((depth + 1,) + k.coeffs.shape[1:4] + (len(modes),) + k.coeffs.shape[5:], dtype=complex)
    coeffs[:k.depth + 1, :, :, :, index] = k.coeffs
    return TransverseSymbol(k.order, k.leaf_modes, modes, k.directions, coeffs)


def symbol_distance(first: TransverseSymbol, second: TransverseSymbol) -> float:
    """Largest coefficient difference after embedding both symbols into common tables."""
    if first.order != second.order:
        raise ConfigInvalid(f"symbols of orders {first.order} and {second.order} are not comparable")
    leaf = max(first.leaf_degree, second.leaf_degree)
    transverse = max(_table_cutoff(first.transverse_modes), _table_cutoff(second.transverse_modes))
    depth = max(first.depth, second.depth)
    return (embed(first, leaf, transverse, depth) - embed(second, leaf, transverse, depth)).max_abs()


# ---------------------------------------------------------------------------
# Quantization and extraction
# ---------------------------------------------------------------------------

def quantize(k: TransverseSymbol, cutoff: int, output_pad: int = 0, leaf_cutoff: Optional[int] = None,
             threads: int = 1) -> BlockOperator:
    """Torus quantization of a transverse symbol.

    A e^{i(b.x + n.y)} = (2 pi)^p sum khat_{a,-b,c,j}(n/|n|) |n|^{m-j} chi(|n|) e^{i(a.x + (n+c).y)}.
    Output modes n + c beyond the row lattice (``cutoff + output_pad``) are dropped.
    """
    if cutoff < k.transverse_degree + 2:
        raise CutoffTooSmall(f"cutoff {cutoff} is below transverse degree {k.transverse_degree} + 2")
    leaf_lattice = ModeLattice(k.p, k.leaf_degree if leaf_cutoff is None else leaf_cutoff)
    lattice = ModeLattice(k.q, cutoff, k.rank)
    lattice_out = lattice.padded(output_pad) if output_pad else lattice

    inputs = lattice.modes.astype(float)
    radius = np.linalg.norm(inputs, axis=-1)
    safe = np.where(radius > 0, radius, 1.0)
    omega = inputs / safe[:, None]
    omega[radius == 0] = np.eye(k.q)[0]
    chi = excision(radius)
    powers = [chi * safe ** (k.order - j) for j in range(k.depth + 1)]
    symbol_index = {tuple(int(v) for v in m): i for i, m in enumerate(k.leaf_modes)}
    normalization = (2 * np.pi) ** k.p

    def build(pair):
        a, b = pair
        ia, ib = symbol_index.get(a), symbol_index.get(tuple(-v for v in b))
        if ia is None or ib is None:
            return pair, None
        slab = k.coeffs[:, :, ia, ib]
        if not np.any(slab):
            return pair, None
        values = np.zeros((lattice.size,) + slab.shape[2:], dtype=complex)
        for j in range(k.depth + 1):
            values += evaluate_directions(slab[j], 0, omega) * powers[j][:, None, None, None]
        active = np.flatnonzero(np.max(np.abs(values), axis=(0, 2, 3)) > 0)

        def weights(index, valid):
            return normalization * values[valid, active[index]]

        return pair, coupling_matrix(k.transverse_modes[active], lattice, lattice_out, weights)

    pairs = list(itertools.product(_keys(leaf_lattice), repeat=2))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(build, pairs))
    else:
        results = [build(pair) for pair in pairs]
    blocks = {pair: block for pair, block in results if block is not None}
    operator = BlockOperator(leaf_lattice, lattice, blocks, lattice_out)
    operator.metadata["symbol_order"] = k.order
    return operator


def probe_modes(q: int, scale: float, count: int = PROBE_COUNT) -> np.ndarray:
    """Integer frequencies n = round(scale * omega) on a uniform set of directions."""
    return np.rint(scale * direction_grid(q, count)).astype(int)


def _submatrix(block, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    if sparse.issparse(block):
        return block.tocsr()[rows][:, cols].toarray()
    return np.asarray(block)[np.ix_(rows, cols)]


def _read_leading(T: BlockOperator, order: int, probes: np.ndarray, transverse: np.ndarray) -> np.ndarray:
    r = T.rank
    cols = T.lattice.index(probes)
    rows = T.output_lattice.index(probes[:, None, :] + transverse[None, :, :])
    if np.any(cols < 0) or np.any(rows < 0):
        raise ProbeOutOfRange(f"probe frequencies leave the lattice of cutoff {T.lattice.cutoff}")
    radius = np.linalg.norm(probes, axis=-1)
    normalization = (2 * np.pi) ** T.leaf_lattice.dim * radius ** order
    keys = T.leaf_keys()
    lookup = {key: i for i, key in enumerate(keys)}
    row_basis = (rows[..., None] * r + np.arange(r)).reshape(-1)
    col_basis = (cols[:, None] * r + np.arange(r)).reshape(-1)
    count = len(probes)
    values = np.zeros((count, len(keys), len(keys), len(transverse), r, r), dtype=complex)
    diagonal = np.arange(count)
    for (a, b), block in T.blocks.items():
        source = lookup.get(tuple(-v for v in b))
        if source is None:
            continue
        sub = _submatrix(block, row_basis, col_basis).reshape(count, len(transverse), r, count, r)
        values[:, lookup[a], source] = sub[diagonal, :, :, diagonal, :] / normalization[:, None, None, None]
    return values


def extract_symbol(T: BlockOperator, order: int, scale: float, transverse_cutoff: int = 2,
                   probes: Optional[np.ndarray] = None, richardson: bool = False) -> SymbolSamples:
    """Leading coefficients khat_{a,b,c,0}(omega) read off matrix entries at n = round(scale * omega).

    With ``richardson`` the estimates at n and 2n (same direction) are combined as 2E(2n) - E(n).
    """
    if scale < 2:
        raise ProbeOutOfRange(f"probe scale {scale} is below 2")
    q = T.lattice.dim
    probes = probe_modes(q, scale) if probes is None else np.asarray(probes, dtype=int)
    if np.any(np.all(probes == 0, axis=-1)):
        raise ProbeOutOfRange("probe frequency 0 lies on the zero section")
    transverse = symmetric_mode_table(q, transverse_cutoff)
    values = _read_leading(T, order, probes, transverse)
    if richardson:
        values = 2 * _read_leading(T, order, 2 * probes, transverse) - values
    radius = np.linalg.norm(probes, axis=-1)
    return SymbolSamples(float(scale), order, probes, probes / radius[:, None], T.leaf_lattice.modes,
                         transverse, values)


# ---------------------------------------------------------------------------
# Products with auxiliary operators
# ---------------------------------------------------------------------------

class _ProductGrid:
    """Pointwise products of symbol coefficients with multipliers g(x, y, omega) on collocation grids.

    The range side multiplies g(x) from the left, the source side multiplies g(x') from the right.
    """

    def __init__(self, k: TransverseSymbol, space, leaf_pad: int, transverse_pad: int):
        self.k = k
        self.space = space
        leaf_cutoff = k.leaf_degree + leaf_pad
        transverse_cutoff = _table_cutoff(k.transverse_modes) + transverse_pad
        self.leaf_modes = symmetric_mode_table(k.p, leaf_cutoff)
        self.transverse_modes = symmetric_mode_table(k.q, transverse_cutoff)
        self.leaf_points = transverse_grid(k.p, 2 * leaf_cutoff + 1)
        self.transverse_points = transverse_grid(k.q, 2 * transverse_cutoff + 2)
        self.fx_in = fourier_matrix(self.leaf_points, k.leaf_modes)
        self.fy_in = fourier_matrix(self.transverse_points, k.transverse_modes)
        self.fx_out = fourier_matrix(self.leaf_points, self.leaf_modes).conj() / len(self.leaf_points)
        self.fy_out = fourier_matrix(self.transverse_points, self.transverse_modes).conj() / len(self.transverse_points)
        self.embed = ModeLattice(k.p, leaf_cutoff).index(k.leaf_modes)

    def empty(self, order: int, depth: int) -> TransverseSymbol:
        k = self.k
        shape = (depth + 1, len(k.directions), len(self.leaf_modes), len(self.leaf_modes),
                 len(self.transverse_modes), k.rank, k.rank)
        return TransverseSymbol(order, self.leaf_modes, self.transverse_modes, k.directions,
                                np.zeros(shape, dtype=complex))

    def sample(self, g: sp.Matrix) -> np.ndarray:
        """g on (directions, x grid, y grid) with |eta| = 1."""
        space = self.space
        field = CompiledField(g, tuple(space.x) + tuple(space.y) + tuple(space.eta))
        X, Y, W = self.leaf_points, self.transverse_points, self.k.directions
        values = [X[None, :, None, i] for i in range(space.p)]
        values += [Y[None, None, :, l] for l in range(space.q)]
        values += [W[:, None, None, l] for l in range(space.q)]
        return field(*values)

    def multiply(self, coeffs: np.ndarray, g_values: np.ndarray, side: str) -> np.ndarray:
        scalar = g_values.shape[-2:] == (1, 1)
        n_out = len(self.leaf_modes)
        shape = coeffs.shape[:2] + (n_out, n_out, len(self.transverse_modes)) + coeffs.shape[-2:]
        full = np.zeros(shape, dtype=complex)
        if side == "right":
            grid = np.einsum("Xa,Yc,jwabcrs->jwXbYrs", self.fx_in, self.fy_in, coeffs, optimize=True)
            if scalar:
                product = g_values[None, :, :, None, :, 0, 0, None, None] * grid
            else:
                product = np.einsum("wXYrt,jwXbYts->jwXbYrs", g_values, grid, optimize=True)
            full[:, :, :, self.embed] = np.einsum("Xa,Yc,jwXbYrs->jwabcrs", self.fx_out, self.fy_out, product,
                                                  optimize=True)
        else:
            grid = np.einsum("Xb,Yc,jwabcrs->jwaXYrs", self.fx_in, self.fy_in, coeffs, optimize=True)
            if scalar:
                product = g_values[None, :, None, :, :, 0, 0, None, None] * grid
            else:
                product = np.einsum("jwaXYrt,wXYts->jwaXYrs", grid, g_values, optimize=True)
            full[:, :, self.embed] = np.einsum("Xb,Yc,jwaXYrs->jwabcrs", self.fx_out, self.fy_out, product,
                                               optimize=True)
        return full


def _mode_power(coeffs: np.ndarray, modes: np.ndarray, exponents: Sequence[int], axis: int) -> np.ndarray:
    """Multiply coefficients by m^exponents along the mode axis ``axis``."""
    if not any(exponents):
        return coeffs
    weight = np.prod(modes.astype(float) ** np.asarray(exponents, dtype=float), axis=-1)
    shape = [1] * coeffs.ndim
    shape[axis] = len(weight)
    return coeffs * weight.reshape(shape)


def _eta_derivative(coeffs: np.ndarray, order: int, directions: np.ndarray, component: int) -> np.ndarray:
    """d/d eta_l of sum_j K_j(omega) |eta|^{order-j}, with levels indexed by the same ``order``."""
    depth = coeffs.shape[0] - 1
    tail = (1,) * (coeffs.ndim - 2)
    out = np.zeros((depth + 2,) + coeffs.shape[1:], dtype=complex)
    levels = (order - np.arange(depth + 1)).reshape((-1, 1) + tail)
    out[1:] = levels * coeffs * directions[:, component].reshape((1, -1) + tail)
    if directions.shape[1] == 2:
        normal = (-directions[:, 1], directions[:, 0])[component]
        out[1:] += differentiate_directions(coeffs, 1) * normal.reshape((1, -1) + tail)
    return out


def _accumulate(result: np.ndarray, values: np.ndarray, shift: int):
    for level in range(values.shape[0]):
        target = level + shift
        if 0 <= target < result.shape[0]:
            result[target] += values[level]


def _multi_indices(dim: int, total: int) -> List[Tuple[int, ...]]:
    if total < 0:
        return []
    return [alpha for alpha in itertools.product(range(total + 1), repeat=dim) if sum(alpha) <= total]


def _differentiate(expr, variables, exponents):
    for variable, count in zip(variables, exponents):
        if count:
            expr = sp.diff(expr, variable, count)
    return expr


def _is_zero(matrix: sp.Matrix) -> bool:
    return all(sp.simplify(entry) == 0 for entry in matrix)


def _conormal(expr, space):
    return expr.subs({xi: 0 for xi in space.xi})


def _symbol_parts(b: ScalarFullSymbol):
    """(drop, part, homogeneity) for the principal and subleading parts of b."""
    parts = [(0, sp.Matrix([[b.principal]]), b.order)]
    if not _is_zero(b.subleading):
        parts.append((1, b.subleading, b.order - 1))
    return parts


def product_pads(b: ScalarFullSymbol) -> Tuple[int, int]:
    """Extra leaf and transverse modes kept by products with b."""
    return (settings.LEAF_PAD if b.depends_on_leaf else 0,
            settings.TRANSVERSE_PAD if b.depends_on_transverse else 0)


def _check_compatible(k: TransverseSymbol, b: ScalarFullSymbol):
    if (k.p, k.q) != (b.space.p, b.space.q):
        raise ConfigInvalid(f"symbol dimensions ({k.p}, {k.q}) do not match operator ({b.space.p}, {b.space.q})")
    if b.rank not in (1, k.rank):
        raise ConfigInvalid(f"operator rank {b.rank} does not act on symbols of rank {k.rank}")


def compose(k: TransverseSymbol, b: ScalarFullSymbol, side: str = "right", N: int = 0) -> TransverseSymbol:
    """Truncated symbol of B quantize(k) (side="right") or quantize(k) B (side="left").

    right: sum (1/a!b!) d_xi^a d_eta^b b(x, y, 0, eta) D_x^a D_y^b k
    left:  sum (1/a!b!) (-D_x')^a [ d_eta^b k . (d_xi^a D_y^b b)(x', y, 0, eta) ]
    Terms are kept while drop + |a| + |b| <= N, where drop is 1 for the subleading part of b.
    """
    if side not in ("left", "right"):
        raise ConfigInvalid(f"unknown composition side '{side}'")
    if N > k.depth:
        raise TruncationDepthExceeded(f"truncation N={N} exceeds symbol depth {k.depth}")
    _check_compatible(k, b)
    start_time = time.time()
    space = b.space
    grid = _ProductGrid(k, space, *product_pads(b))
    order = k.order + b.order
    result = grid.empty(order, k.depth + N)
    coeffs = result.coeffs.copy()

    for drop, part, degree in _symbol_parts(b):
        for alpha in _multi_indices(space.p, N - drop):
            for beta in _multi_indices(space.q, N - drop - sum(alpha)):
                factor = sp.Rational(1, math.prod(math.factorial(v) for v in alpha + beta))
                if side == "right":
                    g = _differentiate(_differentiate(part, space.xi, alpha), space.eta, beta)
                    kernel = _mode_power(k.coeffs, k.leaf_modes, alpha, 2)
                    kernel = _mode_power(kernel, k.transverse_modes, beta, 4)
                    g_degree = degree - sum(alpha) - sum(beta)
                else:
                    g = _differentiate(_differentiate(part, space.xi, alpha), space.y, beta)
                    factor *= (-1) ** sum(alpha) * (-sp.I) ** sum(beta)
                    kernel = k.coeffs
                    for component, count in enumerate(beta):
                        for _ in range(count):
                            kernel = _eta_derivative(kernel, k.order, k.directions, component)
                    g_degree = degree - sum(alpha)
                g = (factor * _conormal(g, space)).applyfunc(sp.simplify)
                if _is_zero(g):
                    continue
                values = grid.multiply(kernel, grid.sample(g), side)
                if side == "left":
                    values = _mode_power(values, grid.leaf_modes, alpha, 3)
                _accumulate(coeffs, values, b.order - g_degree)

    logger.debug(f"compose({side}, N={N}) completed in {time.time() - start_time:.2f}s")
    return result.with_coeffs(coeffs)


# ---------------------------------------------------------------------------
# Subprincipal data and commutators
# ---------------------------------------------------------------------------

def transverse_subprincipal(b: ScalarFullSymbol) -> SubprincipalData:
    """Transverse principal symbol, Hamiltonian field and subprincipal symbol on the conormal chart.

    sigma_sub = b_{m-1} - (1/2i)(sum d_x d_xi b_m + sum d_y d_eta b_m), all at xi = 0.
    """
    space = b.space
    principal = sp.simplify(_conormal(b.principal, space))
    if any(x in principal.free_symbols for x in space.x):
        raise NotHolonomyInvariant(f"transverse principal symbol {principal} depends on the leaf coordinates")
    p_m = b.principal
    components = [sp.diff(p_m, v) for v in space.xi] + [sp.diff(p_m, v) for v in space.eta]
    components += [-sp.diff(p_m, v) for v in space.x] + [-sp.diff(p_m, v) for v in space.y]
    hamiltonian = sp.Matrix([sp.simplify(_conormal(c, space)) for c in components])
    divergence = sum((sp.diff(p_m, x, xi) for x, xi in zip(space.x, space.xi)), sp.Integer(0))
    divergence += sum((sp.diff(p_m, y, eta) for y, eta in zip(space.y, space.eta)), sp.Integer(0))
    subprincipal = _conormal(b.subleading, space) - _conormal(divergence, space) / (2 * sp.I) * sp.eye(b.rank)
    return SubprincipalData(principal, hamiltonian, subprincipal.applyfunc(sp.simplify), space, b.order)


def sqrt_subprincipal(data: SubprincipalData) -> SubprincipalData:
    """Data of P^{1/2}: principal sigma^{1/2}, field H/(2 sigma^{1/2}), sub sigma_sub/(2 sigma^{1/2})."""
    root = sp.sqrt(data.principal)
    return SubprincipalData(sp.simplify(root), (data.hamiltonian / (2 * root)).applyfunc(sp.simplify),
                            (data.subprincipal / (2 * root)).applyfunc(sp.simplify), data.space, data.order // 2)


def covariant_derivative(k: TransverseSymbol, data: SubprincipalData, pads: Optional[Tuple[int, int]] = None,
                         include_connection: bool = True) -> TransverseSymbol:
    """nabla_{H_p} k = H_p k + 1/2 (div(x) + div(x')) k + i (sigma_sub(x) k - k sigma_sub(x')).

    div is sum d_x d_xi p on the conormal chart; the result has order k.order + data.order - 1.
    """
    space = data.space
    p, q = space.p, space.q
    if pads is None:
        pads = (settings.LEAF_PAD if data.depends_on_leaf else 0,
                settings.TRANSVERSE_PAD if data.depends_on_transverse else 0)
    grid = _ProductGrid(k, space, *pads)
    result = grid.empty(k.order + data.order - 1, k.depth)
    coeffs = result.coeffs.copy()
    degree = data.order - 1
    unit = [tuple(int(i == j) for i in range(p)) for j in range(p)]
    transverse_unit = [tuple(int(i == l) for i in range(q)) for l in range(q)]

    terms = []
    for j, velocity in enumerate(data.leaf_velocity()):
        g = sp.Matrix([[sp.I * velocity]])
        terms.append(("right", g, degree, _mode_power(k.coeffs, k.leaf_modes, unit[j], 2)))
        terms.append(("left", g, degree, _mode_power(k.coeffs, k.leaf_modes, unit[j], 3)))
    for l, (velocity, force) in enumerate(zip(data.transverse_velocity(), data.force())):
        terms.append(("right", sp.Matrix([[sp.I * velocity]]), degree,
                      _mode_power(k.coeffs, k.transverse_modes, transverse_unit[l], 4)))
        terms.append(("right", sp.Matrix([[force]]), degree + 1,
                      _eta_derivative(k.coeffs, k.order, k.directions, l)))
    half = sp.Matrix([[data.leaf_divergence() / 2]])
    terms.append(("right", half, degree, k.coeffs))
    terms.append(("left", half, degree, k.coeffs))
    if include_connection:
        terms.append(("right", sp.I * data.subprincipal, degree, k.coeffs))
        terms.append(("left", -sp.I * data.subprincipal, degree, k.coeffs))

    for side, g, g_degree, kernel in terms:
        if _is_zero(g):
            continue
        _accumulate(coeffs, grid.multiply(kernel, grid.sample(g), side), degree - g_degree)
    return result.with_coeffs(coeffs)


def commutator_symbol(k: TransverseSymbol, b: ScalarFullSymbol, N: int = 1) -> TransverseSymbol:
    """Symbol of [B, quantize(k)] to first order: (1/i) nabla_{H_b} k."""
    if N != 1:
        raise TruncationDepthExceeded(f"the commutator expansion is first order, got N={N}")
    _check_compatible(k, b)
    return covariant_derivative(k, transverse_subprincipal(b), product_pads(b)).scaled(-1j)


# ---------------------------------------------------------------------------
# Full symbols of geometric operators
# ---------------------------------------------------------------------------

def transverse_principal_symbol(geom: ModelGeometry, rank: int = 1) -> ScalarFullSymbol:
    """p = |P^H(xi, eta)|, the order-one transverse principal symbol."""
    return ScalarFullSymbol(geom.space, dual_norm_expression(geom), sp.zeros(rank, rank), 1)


def laplace_symbol(geom: ModelGeometry, bundle: Optional[BundleConnection] = None,
                   frames: Optional[FrameData] = None) -> ScalarFullSymbol:
    """Degree-2 and degree-1 parts of the full symbol of the Bochner Laplacian sum L_A^* L_A."""
    frames = frames or build_frames(geom)
    bundle = bundle or BundleConnection.trivial(1)
    space = geom.space
    total = sp.zeros(bundle.rank, bundle.rank)
    for index in range(geom.p + geom.q):
        op = frame_operator(geom, frames, index, bundle)
        total += symbol_product(op.formal_adjoint().symbol(), op.symbol(), space)
    parts = matrix_homogeneous_parts(total, space.momenta, (2, 1))
    principal = sp.simplify(parts[2][0, 0])
    return ScalarFullSymbol(space, principal, parts[1].applyfunc(sp.simplify), 2)


# ---------------------------------------------------------------------------
# Convolution, discretization and fidelity
# ---------------------------------------------------------------------------

def convolve(k1: TransverseSymbol, k2: TransverseSymbol) -> TransverseSymbol:
    """Leading symbol of quantize(k1) quantize(k2): (2 pi)^p sum_{b1} k1[a1, b1] k2[-b1, b2], transverse modes added."""
    if (k1.p, k1.q, k1.rank) != (k2.p, k2.q, k2.rank) or k1.directions.shape != k2.directions.shape:
        raise ConfigInvalid("symbols live on different tables and cannot be convolved")
    cutoff = max(k1.leaf_degree, k2.leaf_degree)
    first, second = _with_leaf_cutoff(k1, cutoff), _with_leaf_cutoff(k2, cutoff)
    leaf = ModeLattice(k1.p, cutoff)
    negate = leaf.index(-leaf.modes)
    transverse_cutoff = _table_cutoff(k1.transverse_modes) + _table_cutoff(k2.transverse_modes)
    transverse = ModeLattice(k1.q, transverse_cutoff)
    pairs = np.einsum("wabirs,wbdkst->wadikrt", first.coeffs[0], second.coeffs[0][:, negate], optimize=True)
    pairs *= (2 * np.pi) ** k1.p
    target = transverse.index(k1.transverse_modes[:, None, :] + k2.transverse_modes[None, :, :])
    out = np.zeros((1, len(k1.directions), leaf.size, leaf.size, transverse.size, k1.rank, k1.rank), dtype=complex)
    for i in range(target.shape[0]):
        for j in range(target.shape[1]):
            out[0, :, :, :, target[i, j]] += pairs[:, :, :, i, j]
    return TransverseSymbol(k1.order + k2.order, leaf.modes, transverse.modes, k1.directions, out)


def product_symbol_defect(k1: TransverseSymbol, k2: TransverseSymbol, cutoff: int, scale: float,
                          threads: int = 1) -> float:
    """Relative distance between the symbol read off quantize(k1) quantize(k2) and convolve(k1, k2).

    Only leading terms enter; for q = 1 and order-zero factors the product is exact away from the zero section.
    """
    k1, k2 = k1.leading(), k2.leading()
    leaf_cutoff = max(k1.leaf_degree, k2.leaf_degree)
    product = (quantize(k1, cutoff, leaf_cutoff=leaf_cutoff, threads=threads)
               @ quantize(k2, cutoff, leaf_cutoff=leaf_cutoff, threads=threads))
    predicted = convolve(k1, k2)
    samples = extract_symbol(product, predicted.order, scale, transverse_cutoff=_table_cutoff(predicted.transverse_modes))
    return samples.relative_error(predicted)


def discretize(b: ScalarFullSymbol, leaf_lattice: ModeLattice, lattice: ModeLattice,
               output_pad: int = 0) -> BlockOperator:
    """Galerkin matrix of the left quantization of b, exact when b is polynomial in the momenta."""
    space = b.space
    full = b.full()
    if full.shape[0] != lattice.rank:
        if full.shape != (1, 1):
            raise ConfigInvalid(f"operator rank {full.shape[0]} does not match lattice rank {lattice.rank}")
        full = full[0, 0] * sp.eye(lattice.rank)
    r = lattice.rank
    monomials: Dict[Tuple[int, ...], sp.Matrix] = {}
    try:
        for i in range(r):
            for j in range(r):
                for exponents, coefficient in sp.Poly(sp.expand(full[i, j]), *space.momenta).terms():
                    monomials.setdefault(exponents, sp.zeros(r, r))[i, j] += coefficient
    except sp.PolynomialError as e:
        raise ConfigInvalid(f"operator symbol is not polynomial in the momenta: {str(e)}")

    exponents = list(monomials)
    stacked = sp.Matrix.vstack(*[monomials[e] for e in exponents])
    dim = space.p + space.q
    grid = settings.COEFFICIENT_GRID if dim <= 2 else 16
    modes, coefs = coefficient_modes(CompiledField(stacked, space.coordinates), dim, grid,
                                     settings.COEFFICIENT_TOLERANCE)
    coefs = coefs.reshape(len(modes), len(exponents), r, r)
    powers = np.array(exponents, dtype=float)
    lattice_out = lattice.padded(output_pad) if output_pad else lattice
    p = space.p

    groups: Dict[Tuple[int, ...], List[int]] = {}
    for index, mode in enumerate(modes):
        groups.setdefault(tuple(int(v) for v in mode[:p]), []).append(index)

    blocks = {}
    for source in _keys(leaf_lattice):
        for shift, indices in groups.items():
            target = tuple(s + d for s, d in zip(source, shift))
            if leaf_lattice.index([target])[0] < 0:
                continue

            def weights(index, valid, indices=indices, source=source):
                inputs = lattice.modes[valid].astype(float)
                wave = np.concatenate([np.broadcast_to(np.asarray(source, dtype=float), (len(inputs), p)), inputs],
                                      axis=1)
                monomial = np.prod(wave[:, None, :] ** powers[None, :, :], axis=-1)
                return np.einsum("ne,ers->nrs", monomial, coefs[indices[index]])

            block = coupling_matrix(modes[indices][:, p:], lattice, lattice_out, weights)
            key = (target, source)
            blocks[key] = blocks[key] + block if key in blocks else block
    return BlockOperator(leaf_lattice, lattice, blocks, lattice_out)


def product_matrix(k: TransverseSymbol, b: ScalarFullSymbol, side: str, cutoff: int,
                   threads: int = 1) -> BlockOperator:
    """Exact restriction of B quantize(k) (right) or quantize(k) B (left) to input modes |n| <= cutoff.

    Rows run over |n| <= cutoff + spread + transverse pad, so no inner sum is truncated.
    """
    leaf_pad, transverse_pad = product_pads(b)
    leaf_lattice = ModeLattice(k.p, k.leaf_degree + leaf_pad)
    spread = _table_cutoff(k.transverse_modes)
    if side == "right":
        A = quantize(k, cutoff, output_pad=spread, leaf_cutoff=leaf_lattice.cutoff, threads=threads)
        B = discretize(b, leaf_lattice, ModeLattice(k.q, cutoff + spread, k.rank), output_pad=transverse_pad)
        return B @ A
    if side == "left":
        B = discretize(b, leaf_lattice, ModeLattice(k.q, cutoff, k.rank), output_pad=transverse_pad)
        A = quantize(k, cutoff + transverse_pad, output_pad=spread, leaf_cutoff=leaf_lattice.cutoff, threads=threads)
        return A @ B
    raise ConfigInvalid(f"unknown composition side '{side}'")


def commutator_matrix(k: TransverseSymbol, b: ScalarFullSymbol, cutoff: int, threads: int = 1) -> BlockOperator:
    """[B, quantize(k)] on input modes |n| <= cutoff."""
    return product_matrix(k, b, "right", cutoff, threads) - product_matrix(k, b, "left", cutoff, threads)


def _shell_max(operator: BlockOperator, cols: np.ndarray, leaf_degree: int) -> float:
    worst = 0.0
    for (_, source), block in operator.blocks.items():
        if max(abs(v) for v in source) > leaf_degree:
            continue
        if sparse.issparse(block):
            sub = block.tocsc()[:, cols]
            value = float(abs(sub).max()) if sub.nnz else 0.0
        else:
            sub = np.asarray(block)[:, cols]
            value = float(np.max(np.abs(sub))) if sub.size else 0.0
        worst = max(worst, value)
    return worst


def composition_fidelity(k: TransverseSymbol, b: ScalarFullSymbol, side: str, N: int,
                         scales: Sequence[int] = (8, 16, 32), cutoff: int = 64, threads: int = 1) -> FidelityResult:
    """Remainder of the truncated expansion against the matrix product on the shells |n| in [s, 2s)."""
    start_time = time.time()
    if 2 * max(scales) > cutoff:
        raise ProbeOutOfRange(f"shell up to {2 * max(scales)} exceeds cutoff {cutoff}")
    composed = compose(k, b, side, N)
    M = product_matrix(k, b, side, cutoff, threads)
    Q = quantize(composed, cutoff, output_pad=_table_cutoff(composed.transverse_modes),
                 leaf_cutoff=composed.leaf_degree, threads=threads)
    difference = M - Q
    radius = np.linalg.norm(Q.lattice.modes, axis=-1)
    remainders = []
    for scale in scales:
        shell = (radius >= scale) & (radius < 2 * scale)
        cols = np.flatnonzero(Q.lattice.basis_mask(shell))
        remainders.append(_shell_max(difference, cols, k.leaf_degree))
    reference = max(M.max_abs(), 1.0)
    exact = max(remainders) <= settings.EXACTNESS_TOLERANCE * reference
    slope = float(np.polyfit(np.log(scales), np.log(np.maximum(remainders, REMAINDER_FLOOR)), 1)[0])
    expected = k.order + b.order - N - 1
    logger.info(f"Composition fidelity ({side}, N={N}): slope {slope:.2f}, expected {expected}, "
                f"exact={exact}, completed in {time.time() - start_time:.2f}s")
    return FidelityResult(side, N, tuple(float(s) for s in scales), tuple(remainders), slope,
                          expected + SLOPE_TOLERANCE, bool(exact))
