import logging
import time
from typing import Optional, Sequence, Tuple

import numpy as np
import sympy as sp

from app.core.config import settings
from app.core.exceptions import CutoffTooSmall, FitIllConditioned, UnsupportedDimension
from app.models.dirac import (AdjointReport, CliffordData, ConjugationFit, DiracAssembly, IsotypicBlock,
                              SignatureData, SpinConnection, SymbolCheck)
from app.models.geometry import BundleConnection, ConnectionData, ModelGeometry
from app.models.operators import FirstOrderOperator, symbol_product
from app.models.symbols import SubprincipalData
from app.services.geometry_service import (base_connection, build_frames, check_hermitian, connection_along,
                                           dual_norm_at, frame_operator, transverse_connection)
from app.services.symbol_service import transverse_principal_symbol, transverse_subprincipal
from app.utils.fourier import ModeLattice, modes_to_grid, transverse_grid
from app.utils.galerkin import assemble_block_diagonal, assemble_first_order
from app.utils.symbolic import CompiledField, matrix_homogeneous_parts

logger = logging.getLogger(__name__)

COMPATIBILITY_GRID = 16
CONDITION_LIMIT = 1e8
DEFAULT_SCALES = (-2.0, -1.0, 0.5, 1.0, 2.0)


def _require_codimension_two(geom: ModelGeometry):
    if geom.q != 2:
        raise UnsupportedDimension(f"transverse Dirac operators are built for codimension 2, got q={geom.q}")


def _kron(left: sp.Matrix, right: sp.Matrix) -> sp.Matrix:
    return sp.Matrix(sp.kronecker_product(left, right))


# ---------------------------------------------------------------------------
# Spin connection and assembly
# ---------------------------------------------------------------------------

def spin_connection(conn: ConnectionData, cliff: CliffordData) -> SpinConnection:
    """Lift of the transverse Levi-Civita connection: omega_a = lift(g(nabla_{f_a} f_b, f_g)).

    Checks [omega_a, c(f_d)] = c(nabla_{f_a} f_d) on a sampling grid.
    """
    geom = conn.frames.geometry
    _require_codimension_two(geom)
    q = conn.q
    potentials = tuple(cliff.lift(conn.gamma[a]).applyfunc(sp.simplify) for a in range(q))

    points = transverse_grid(q, COMPATIBILITY_GRID)
    ys = [points[:, k] for k in range(q)]
    gamma = conn.gamma_at(*ys)
    residual, skew = 0.0, 0.0
    for a, potential in enumerate(potentials):
        omega = CompiledField(potential, geom.space.y)(*ys).astype(complex)
        skew = max(skew, float(np.max(np.abs(omega + np.conj(np.swapaxes(omega, -1, -2))))))
        for d in range(q):
            c_d = cliff.generators[d]
            commutator = omega @ c_d - c_d @ omega
            target = np.einsum("ng,gij->nij", gamma[:, a, d, :], np.stack(cliff.generators))
            residual = max(residual, float(np.max(np.abs(commutator - target))))
    logger.debug(f"Spin connection ({cliff.kind}): compatibility residual {residual:.2e}, skew defect {skew:.2e}")
    return SpinConnection(potentials, residual, skew)


def _coefficient_width(*operators: FirstOrderOperator) -> int:
    return max([op.transverse_degree for op in operators] + [0])


def build_dirac(geom: ModelGeometry, bundle: Optional[BundleConnection] = None, cutoff: int = 16,
                leaf_cutoff: int = 1, cliff: Optional[CliffordData] = None, threads: int = 1) -> DiracAssembly:
    """D'_E = sum_a (c(f_a) x 1) nabla_{f_a} and D_E = D'_E - c(tau)/2 acting on half-densities."""
    _require_codimension_two(geom)
    start_time = time.time()
    bundle = bundle or BundleConnection.trivial(1)
    cliff = cliff or CliffordData.spinor()
    check_hermitian(bundle, geom)
    frames = build_frames(geom)
    conn = transverse_connection(geom, frames)
    spin = spin_connection(conn, cliff)
    p, q, r = geom.p, geom.q, bundle.rank
    size = cliff.size * r
    eye_r, eye_s = sp.eye(r), sp.eye(cliff.size)

    prime = FirstOrderOperator.zero(geom.space, size)
    totals = []
    for a in range(q):
        total = _kron(spin.potentials[a], eye_r) + _kron(eye_s, connection_along(geom, frames.horizontal(a), bundle))
        totals.append(total)
        step = frame_operator(geom, frames, p + a, BundleConnection.trivial(size), extra=total)
        prime = prime + step.left_multiply(_kron(cliff.c(a), eye_r))
    c_tau = _kron(cliff.clifford(conn.tau), eye_r).applyfunc(sp.simplify)
    dirac = prime.plus_potential(-c_tau / 2)

    width = _coefficient_width(prime, dirac)
    if cutoff <= width:
        raise CutoffTooSmall(f"cutoff {cutoff} leaves no interior modes for coefficients of degree {width}")
    leaf_lattice = ModeLattice(p, leaf_cutoff)
    lattice = ModeLattice(q, cutoff, size)
    D_prime = assemble_block_diagonal(prime, leaf_lattice, lattice, threads=threads)
    D = assemble_block_diagonal(dirac, leaf_lattice, lattice, threads=threads)
    C_tau = assemble_block_diagonal(FirstOrderOperator.zero(geom.space, size).plus_potential(c_tau),
                                    leaf_lattice, lattice, threads=threads)
    for operator, label in ((D_prime, "D_prime"), (D, "dirac"), (C_tau, "c_tau")):
        operator.metadata.update({"operator": label, "clifford": cliff.kind, "rank": size})
    logger.info(f"Dirac operator ({cliff.kind}, rank {size}) on {geom.name} assembled at cutoff {cutoff} "
                f"in {time.time() - start_time:.2f}s")
    return DiracAssembly(geom, frames, conn, cliff, bundle, spin, tuple(totals), prime, dirac, c_tau,
                         D_prime, D, C_tau, width)


def adjoint_defect(assembly: DiracAssembly) -> AdjointReport:
    """Interior norm of (D')^H - (D' - c(tau)), with the control that omits c(tau)."""
    width = assembly.width
    D_prime, C_tau = assembly.D_prime, assembly.C_tau
    adjoint = D_prime.adjoint()
    defect = (adjoint - (D_prime - C_tau)).interior_norm(width)
    control = (adjoint - D_prime).interior_norm(width)
    c_tau_norm = C_tau.interior_norm(width)
    symmetry = (assembly.D - assembly.D.adjoint()).interior_norm(width)
    boundary = (adjoint - (D_prime - C_tau)).interior_norm(0)
    logger.info(f"Adjoint identity: interior defect {defect:.2e}, control {control:.3e}, |c(tau)| {c_tau_norm:.3e}")
    return AdjointReport(defect, control, c_tau_norm, symmetry, boundary)


# ---------------------------------------------------------------------------
# Conjugation expansion and subprincipal symbols
# ---------------------------------------------------------------------------

def conjugation_fit(operator: FirstOrderOperator, covector: Sequence[float], leaf_mode: Sequence[int],
                    amplitude_modes: np.ndarray, amplitude: np.ndarray, points: np.ndarray, power: int = 2,
                    scales: Sequence[float] = DEFAULT_SCALES) -> ConjugationFit:
    """Fit e^{-is phi} T (e^{is phi} a) as a polynomial of degree ``power`` in s, with T = operator^power.

    phi is the linear form covector . (x, y); conjugation is realized exactly as a Bloch shift by s * covector.
    ``amplitude`` holds the (M, r) coefficients of a on ``amplitude_modes`` times e^{i leaf_mode . x}; results are
    sampled at the transverse ``points`` with x = 0.
    """
    scales = np.asarray(scales, dtype=float)
    vandermonde = scales[:, None] ** np.arange(power + 1)[None, :]
    condition = float(np.linalg.cond(vandermonde))
    if condition > CONDITION_LIMIT or len(scales) <= power:
        raise FitIllConditioned(f"s-grid Vandermonde condition {condition:.3e} with {len(scales)} scales")
    covector = np.asarray(covector, dtype=float)
    q, rank = operator.space.q, operator.rank
    cutoff = int(np.max(np.abs(amplitude_modes))) if len(amplitude_modes) else 0
    width = max(operator.transverse_degree, 1)
    start = ModeLattice(q, cutoff, rank)
    vector0 = np.zeros(start.dimension, dtype=complex)
    index = start.index(amplitude_modes)
    for row, m in enumerate(index):
        vector0[m * rank:(m + 1) * rank] = amplitude[row]

    samples = []
    for s in scales:
        vector, lattice = vector0, start
        for _ in range(power):
            target = lattice.padded(width)
            vector = assemble_first_order(operator, leaf_mode, lattice, target, shift=s * covector) @ vector
            lattice = target
        samples.append(modes_to_grid(vector.reshape(lattice.size, rank), points, lattice.modes))
    samples = np.stack(samples)
    flat = samples.reshape(len(scales), -1)
    coefficients, *_ = np.linalg.lstsq(vandermonde.astype(complex), flat, rcond=None)
    coefficients = coefficients.reshape((power + 1,) + samples.shape[1:])
    return ConjugationFit(power, scales, points, coefficients, condition)


def closed_form_subprincipal(assembly: DiracAssembly) -> sp.Matrix:
    """sigma_sub(D_E^2)(z, zeta) = -2i sum <zeta, f_a> B(f_a) - (i/2) sum c_a c_b <zeta, R(f_a, f_b)>.

    B includes the lifted Levi-Civita part; R(f_a, f_b) is the vertical integrability tensor.
    """
    geom, frames, conn = assembly.geometry, assembly.frames, assembly.connection
    p, q = geom.p, geom.q
    zeta = sp.Matrix(geom.space.momenta)
    r = assembly.bundle.rank
    total = sp.zeros(assembly.rank, assembly.rank)
    for a in range(q):
        pairing = (zeta.T * frames.horizontal(a))[0, 0]
        total += -2 * sp.I * pairing * assembly.total_potentials[a]
    for a in range(q):
        for b in range(q):
            vertical = sum((conn.curvature[a][b][i] * (zeta.T * frames.vertical(i))[0, 0] for i in range(p)),
                           sp.Integer(0))
            if vertical == 0:
                continue
            cc = _kron(assembly.clifford.c(a) * assembly.clifford.c(b), sp.eye(r))
            total += -sp.I / 2 * vertical * cc
    return total.applyfunc(sp.simplify)


def square_symbol(assembly: DiracAssembly) -> Tuple[sp.Expr, sp.Matrix, sp.Matrix]:
    """Homogeneous parts (b_2 scalar, b_1, b_0) of the full symbol of D_E^2."""
    space = assembly.geometry.space
    symbol = assembly.dirac_operator.symbol()
    square = symbol_product(symbol, symbol, space)
    parts = matrix_homogeneous_parts(square, space.momenta, (2, 1, 0))
    return sp.simplify(parts[2][0, 0]), parts[1].applyfunc(sp.simplify), parts[0]


def symbolic_subprincipal(assembly: DiracAssembly) -> sp.Matrix:
    """b_1 - (1/2i) sum d_z d_zeta b_2 for the full symbol of D_E^2, on all of T*M."""
    space = assembly.geometry.space
    principal, subleading, _ = square_symbol(assembly)
    divergence = sum((sp.diff(principal, z, zeta) for z, zeta in zip(space.coordinates, space.momenta)),
                     sp.Integer(0))
    return (subleading - divergence / (2 * sp.I) * sp.eye(assembly.rank)).applyfunc(sp.simplify)


def dirac_subprincipal(assembly: DiracAssembly) -> SubprincipalData:
    """Conormal data of <D_E>: principal |nu|, its Hamiltonian field and
    sigma_sub(<D_E>)(nu) = -i |nu|^{-1} sum <nu, f_a> B(f_a)."""
    geom, frames = assembly.geometry, assembly.frames
    space = geom.space
    base = transverse_subprincipal(transverse_principal_symbol(geom, assembly.rank))
    eta = sp.Matrix(space.eta)
    norm = base.principal
    total = sp.zeros(assembly.rank, assembly.rank)
    for a in range(geom.q):
        pairing = (eta.T * frames.horizontal(a)[geom.p:, :])[0, 0]
        total += pairing * assembly.total_potentials[a]
    subprincipal = (-sp.I * total / norm).applyfunc(sp.simplify)
    return SubprincipalData(norm, base.hamiltonian, subprincipal, space, 1)


def _lie_derivative_data(geom: ModelGeometry):
    """Compiled v = d_zeta b_2 and div v = sum d_z d_zeta b_2 for b_2 = sum <zeta, f_a>^2."""
    frames = build_frames(geom)
    space = geom.space
    zeta = sp.Matrix(space.momenta)
    b2 = sum(((zeta.T * frames.horizontal(a))[0, 0] ** 2 for a in range(geom.q)), sp.Integer(0))
    velocity = sp.Matrix([sp.diff(b2, v) for v in space.momenta])
    divergence = sum((sp.diff(b2, z, v) for z, v in zip(space.coordinates, space.momenta)), sp.Integer(0))
    return CompiledField(velocity, space.chart), CompiledField(divergence, space.chart)


def check_square_symbols(assembly: DiracAssembly, rng: np.random.Generator, probes: int = 10,
                         amplitude_cutoff: int = 1, leaf_mode: Optional[Sequence[int]] = None,
                         conormal: bool = False) -> SymbolCheck:
    """Principal and subprincipal symbols of D_E^2 three ways on random (covector, amplitude) probes.

    The s^2 coefficient is compared with |P^H zeta|^2 a; the s^1 coefficient minus (1/i) L_v a with the
    closed form and with the symbolic subprincipal symbol, both applied to a.
    """
    geom = assembly.geometry
    p, q, rank = geom.p, geom.q, assembly.rank
    space = geom.space
    leaf_mode = np.zeros(p, dtype=int) if leaf_mode is None else np.asarray(leaf_mode, dtype=int)
    closed = CompiledField(closed_form_subprincipal(assembly), space.chart)
    symbolic = CompiledField(symbolic_subprincipal(assembly), space.chart)
    velocity, divergence = _lie_derivative_data(geom)
    frames = build_frames(geom)
    modes = ModeLattice(q, amplitude_cutoff).modes
    points = rng.uniform(0, 2 * np.pi, size=(4, q))
    check = SymbolCheck()

    for _ in range(probes):
        covector = rng.normal(size=p + q)
        if conormal:
            covector[:p] = 0.0
        amplitude = (rng.normal(size=(len(modes), rank)) + 1j * rng.normal(size=(len(modes), rank)))
        amplitude /= 1 + np.max(np.abs(modes), axis=-1)[:, None] ** 2
        fit = conjugation_fit(assembly.dirac_operator, covector, leaf_mode, modes, amplitude, points)

        value = modes_to_grid(amplitude, points, modes)
        gradient = np.stack([1j * leaf_mode[j] * value for j in range(p)] +
                            [modes_to_grid(1j * modes[:, k, None] * amplitude, points, modes) for k in range(q)],
                            axis=1)
        chart = np.concatenate([np.zeros((len(points), p)), points,
                                np.broadcast_to(covector, (len(points), p + q))], axis=1)
        args = [chart[:, k] for k in range(chart.shape[1])]

        norm, _ = dual_norm_at(geom, chart[:, :p + q], chart[:, p + q:], frames)
        expected = (norm ** 2)[:, None] * value
        scale = max(float(np.max(np.abs(expected))), 1e-300)
        check.principal_errors.append(float(np.max(np.abs(fit.leading - expected))) / scale)

        v = np.real(velocity(*args)[..., 0])
        div = np.real(divergence(*args)[..., 0, 0])
        lie = np.einsum("gm,gmr->gr", v, gradient) + 0.5 * div[:, None] * value
        fitted = fit.subleading + 1j * lie
        from_closed = np.einsum("grs,gs->gr", closed(*args).astype(complex), value)
        from_symbol = np.einsum("grs,gs->gr", symbolic(*args).astype(complex), value)
        check.fit_vs_closed.append(float(np.max(np.abs(fitted - from_closed))))
        check.fit_vs_symbolic.append(float(np.max(np.abs(fitted - from_symbol))))
        check.closed_vs_symbolic.append(float(np.max(np.abs(from_closed - from_symbol))))
    logger.info(f"D^2 symbol checks over {probes} probes: {check.worst}")
    return check


# ---------------------------------------------------------------------------
# Signature operator and isotypic decomposition
# ---------------------------------------------------------------------------

def _form_operators(cliff: CliffordData, r: int = 1):
    eye = sp.eye(r)
    wedge = [_kron(sp.Matrix(e.real.astype(int)), eye) for e in cliff.wedge]
    interior = [_kron(sp.Matrix(i.real.astype(int)), eye) for i in cliff.interior]
    return wedge, interior


def signature_operator(geom: ModelGeometry, cutoff: int = 16, leaf_cutoff: int = 2,
                       threads: int = 1) -> SignatureData:
    """d_H = sum eps_a nabla_{f_a}, d_H^* = -sum i_a nabla_{f_a} + i_tau, and D_{F(Q)*} from build_dirac.

    Verifies D_{F(Q)*} = d_H + d_H^* - (eps_tau + i_tau)/2 on interior modes.
    """
    _require_codimension_two(geom)
    start_time = time.time()
    cliff = CliffordData.exterior()
    assembly = build_dirac(geom, BundleConnection.trivial(1), cutoff, leaf_cutoff, cliff, threads)
    frames, conn = assembly.frames, assembly.connection
    p, q = geom.p, geom.q
    wedge, interior = _form_operators(cliff)

    d_op = FirstOrderOperator.zero(geom.space, 4)
    d_star_op = FirstOrderOperator.zero(geom.space, 4)
    for a in range(q):
        step = frame_operator(geom, frames, p + a, BundleConnection.trivial(4), extra=assembly.spin.potentials[a])
        d_op = d_op + step.left_multiply(wedge[a])
        d_star_op = d_star_op - step.left_multiply(interior[a])
    i_tau = sum((conn.tau[a] * interior[a] for a in range(q)), sp.zeros(4, 4))
    eps_tau = sum((conn.tau[a] * wedge[a] for a in range(q)), sp.zeros(4, 4))
    d_star_op = d_star_op.plus_potential(i_tau)

    leaf_lattice = ModeLattice(p, leaf_cutoff)
    lattice = ModeLattice(q, cutoff, 4)
    d_H = assemble_block_diagonal(d_op, leaf_lattice, lattice, threads=threads)
    d_H_star = assemble_block_diagonal(d_star_op, leaf_lattice, lattice, threads=threads)
    D_H = d_H + d_H_star
    tau_term = assemble_block_diagonal(FirstOrderOperator.zero(geom.space, 4).plus_potential((eps_tau + i_tau) / 2),
                                       leaf_lattice, lattice, threads=threads)
    width = max(assembly.width, d_op.transverse_degree, d_star_op.transverse_degree)
    residual = (assembly.D - (D_H - tau_term)).interior_norm(width)
    d_H_squared = (d_H @ d_H).interior_norm(2 * width)
    logger.info(f"Signature identity residual {residual:.2e}, |d_H^2| {d_H_squared:.3e}, "
                f"completed in {time.time() - start_time:.2f}s")
    return SignatureData(d_H, d_H_star, D_H, assembly.D, tau_term, residual, d_H_squared, width, assembly)


def base_signature_operator(geom: ModelGeometry, leaf_mode: Sequence[int], cutoff: int) -> np.ndarray:
    """Signature operator of g_B on T^q twisted by the connection -i n.A(y), acting on half-densities of
    the total space (fibre volume included), assembled from the base metric alone."""
    _require_codimension_two(geom)
    space = geom.space
    p, q = geom.p, geom.q
    base = base_connection(geom)
    F = base.frame
    cliff = CliffordData.exterior()
    wedge, interior = _form_operators(cliff)
    n = sp.Matrix([int(v) for v in leaf_mode])
    fibre_volume = sp.sqrt(geom.fiber_metric.det())
    density = fibre_volume * sp.sqrt(geom.base_metric.det())
    twist = (n.T * geom.connection_form)  # 1 x q: n.A_k

    operator = FirstOrderOperator.zero(space, 4)
    for a in range(q):
        vector = sp.zeros(p, 1).col_join(F[:, a])
        step = FirstOrderOperator.vector_field(space, vector, 4)
        charge = -sp.I * sum((F[k, a] * twist[0, k] for k in range(q)), sp.Integer(0))
        lift = cliff.lift(base.frame_gamma[a])
        step = step.plus_potential(charge * sp.eye(4) + lift).half_density(density)
        operator = operator + step.left_multiply(wedge[a]) - step.left_multiply(interior[a])

    g_inv = geom.base_metric.inv()
    log_volume = sp.log(fibre_volume)
    gradient = sp.Matrix([-sum((g_inv[k, l] * sp.diff(log_volume, space.y[l]) for l in range(q)), sp.Integer(0))
                          for k in range(q)])
    tau = (F.inv() * gradient).applyfunc(sp.simplify)
    operator = operator.plus_potential(sum((tau[a] * interior[a] for a in range(q)), sp.zeros(4, 4)))
    lattice = ModeLattice(q, cutoff, 4)
    return assemble_first_order(operator, np.zeros(p), lattice, lattice).toarray()


def isotypic_blocks(signature: SignatureData, geom: ModelGeometry, leaf_mode: Sequence[int]) -> IsotypicBlock:
    """Leaf-mode block of D_H against the independently assembled twisted base signature operator."""
    key = tuple(int(v) for v in leaf_mode)
    D_H = signature.D_H
    lattice = D_H.lattice
    mask = lattice.basis_mask(lattice.interior(signature.width))
    block = D_H.dense_block(key, key)
    base = base_signature_operator(geom, key, lattice.cutoff)
    residual = float(np.max(np.abs((block - base)[np.ix_(mask, mask)]))) if np.any(mask) else 0.0
    off_block = max([float(np.max(np.abs(D_H.dense_block(a, b)))) for (a, b) in D_H.blocks if a != b] + [0.0])
    logger.info(f"Isotypic block n={key}: residual {residual:.2e}, off-block {off_block:.1e}")
    return IsotypicBlock(key, block[np.ix_(mask, mask)], base[np.ix_(mask, mask)], residual, off_block)


class DiracService:
    """The transverse Dirac operator of one (geometry, bundle) pair and the identities checked on it."""

    def __init__(self, geom: ModelGeometry, bundle: Optional[BundleConnection] = None, cutoff: int = 16,
                 leaf_cutoff: int = 1, cliff: Optional[CliffordData] = None, threads: Optional[int] = None):
        self.threads = threads or settings.DEFAULT_THREADS
        self.assembly = build_dirac(geom, bundle, cutoff, leaf_cutoff, cliff, self.threads)
        self._subprincipal = None

    @property
    def geometry(self) -> ModelGeometry:
        return self.assembly.geometry

    def adjoint_report(self) -> AdjointReport:
        return adjoint_defect(self.assembly)

    def square_symbols(self, rng: np.random.Generator, count: int = 10, conormal: bool = False) -> SymbolCheck:
        return check_square_symbols(self.assembly, rng, count, conormal=conormal)

    def subprincipal(self) -> SubprincipalData:
        if self._subprincipal is None:
            self._subprincipal = dirac_subprincipal(self.assembly)
        return self._subprincipal

    def subprincipal_defect(self, rng: np.random.Generator, points: int = 16) -> float:
        """max |sigma_sub(D^2) / 2|nu| - sigma_sub(<D>)| at random conormal points."""
        geom = self.geometry
        space = geom.space
        data = self.subprincipal()
        closed = closed_form_subprincipal(self.assembly).subs({xi: 0 for xi in space.xi})
        difference = CompiledField(closed / (2 * data.principal) - data.subprincipal, space.coordinates + space.eta)
        samples = np.concatenate([rng.uniform(0, 2 * np.pi, size=(points, geom.p + geom.q)),
                                  rng.normal(size=(points, geom.q))], axis=1)
        return float(np.max(np.abs(difference.at(samples))))
