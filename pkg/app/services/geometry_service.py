import logging
import time
from functools import lru_cache
from typing import List, Tuple

import numpy as np
import sympy as sp

from app.core.exceptions import AssertionFailed, NonHermitianConnection, NonPositiveMetric, UnsupportedDimension
from app.models.geometry import BaseConnection, BundleConnection, ConnectionData, FrameData, ModelGeometry
from app.models.operators import FirstOrderOperator
from app.utils.fourier import transverse_grid
from app.utils.symbolic import CompiledField

logger = logging.getLogger(__name__)

CHECK_GRID = 32
POSITIVITY_FLOOR = 1e-10
TORSION_TOLERANCE = 1e-10
COMPATIBILITY_TOLERANCE = 1e-12


def _check_dimensions(geom: ModelGeometry):
    if geom.p not in (1, 2) or geom.q not in (1, 2):
        raise UnsupportedDimension(f"leaf dimension p={geom.p} and codimension q={geom.q} must lie in {{1, 2}}")


def _sample(geom: ModelGeometry, matrix: sp.Matrix, size: int = CHECK_GRID) -> np.ndarray:
    points = transverse_grid(geom.q, size)
    return CompiledField(matrix, geom.space.y)(*[points[:, k] for k in range(geom.q)])


def _check_positive(geom: ModelGeometry):
    for label, matrix in (("g_F", geom.fiber_metric), ("g_B", geom.base_metric)):
        values = _sample(geom, matrix)
        smallest = float(np.min(np.linalg.eigvalsh(0.5 * (values + np.swapaxes(values, -1, -2)))))
        if smallest <= POSITIVITY_FLOOR:
            raise NonPositiveMetric(f"{label} has eigenvalue {smallest:.3e} on the sampling grid")


def _upper_inverse_cholesky(metric: sp.Matrix) -> sp.Matrix:
    """Columns are the Gram-Schmidt orthonormalization of the coordinate basis."""
    lower = metric.cholesky(hermitian=False)
    return sp.simplify(lower.T.inv())


@lru_cache(maxsize=32)
def build_frames(geom: ModelGeometry) -> FrameData:
    """Orthonormal vertical and horizontal frames of the bundle-like metric."""
    _check_dimensions(geom)
    _check_positive(geom)
    p, q = geom.p, geom.q
    E = _upper_inverse_cholesky(geom.fiber_metric)
    F = _upper_inverse_cholesky(geom.base_metric)
    A = geom.connection_form

    vertical = E.col_join(sp.zeros(q, p))
    horizontal = (-A * F).col_join(F)
    frame = vertical.row_join(horizontal)

    # coframe rows: theta = L_F^T (dx + A dy), f* = L_B^T dy
    LF_T, LB_T = E.inv(), F.inv()
    coframe = LF_T.row_join(LF_T * A).col_join(sp.zeros(q, p).row_join(LB_T))

    gram = _sample(geom, frame.T * geom.full_metric * frame)
    defect = float(np.max(np.abs(gram - np.eye(p + q))))
    logger.debug(f"Frames for {geom.name}: orthonormality defect {defect:.2e}")
    return FrameData(geom, vertical, horizontal, frame, coframe, defect)


def _bracket(geom: ModelGeometry, v: sp.Matrix, w: sp.Matrix) -> sp.Matrix:
    """Lie bracket of coordinate vector fields whose coefficients depend on y only."""
    p, ys = geom.p, geom.space.y
    out = sp.zeros(v.shape[0], 1)
    for l, y in enumerate(ys):
        out += v[p + l] * w.diff(y) - w[p + l] * v.diff(y)
    return out


def structure_constants(frames: FrameData) -> List[List[List[sp.Expr]]]:
    """c[A][B][C] = component of [E_A, E_B] along E_C."""
    geom = frames.geometry
    n = geom.p + geom.q
    columns = [frames.frame[:, a] for a in range(n)]
    c = [[[sp.Integer(0)] * n for _ in range(n)] for _ in range(n)]
    for a in range(n):
        for b in range(a + 1, n):
            components = frames.coframe * _bracket(geom, columns[a], columns[b])
            for k in range(n):
                value = sp.simplify(components[k])
                c[a][b][k] = value
                c[b][a][k] = -value
    return c


@lru_cache(maxsize=32)
def transverse_connection(geom: ModelGeometry, frames: FrameData) -> ConnectionData:
    """Transverse Levi-Civita connection, integrability tensor and mean curvature."""
    _check_dimensions(geom)
    start_time = time.time()
    p, q = geom.p, geom.q
    n = p + q
    c = structure_constants(frames)
    # Koszul formula in an orthonormal frame
    christoffel = [[[sp.simplify((c[a][b][k] - c[b][k][a] + c[k][a][b]) / 2) for k in range(n)]
                    for b in range(n)] for a in range(n)]
    gamma = [[[christoffel[p + a][p + b][p + k] for k in range(q)] for b in range(q)] for a in range(q)]
    curvature = [[[-c[p + a][p + b][i] for i in range(p)] for b in range(q)] for a in range(q)]
    tau = [sp.simplify(sum((christoffel[i][i][p + k] for i in range(p)), sp.Integer(0))) for k in range(q)]

    connection = ConnectionData(frames, c, christoffel, gamma, curvature, tau)
    points = transverse_grid(q, CHECK_GRID)
    ys = [points[:, k] for k in range(q)]
    gamma_values = connection.gamma_at(*ys)
    compatibility = float(np.max(np.abs(gamma_values + np.swapaxes(gamma_values, -1, -2))))
    torsion = _torsion_residual(geom, frames, connection, ys)
    connection.diagnostics.update({"metric_compatibility": compatibility, "torsion": torsion})
    if compatibility > COMPATIBILITY_TOLERANCE:
        raise AssertionFailed("metric compatibility", f"antisymmetry defect {compatibility:.3e}")
    if torsion > TORSION_TOLERANCE:
        raise AssertionFailed("torsion identity", f"residual {torsion:.3e}")
    logger.info(f"Transverse connection for {geom.name} completed in {time.time() - start_time:.2f}s")
    return connection


def _torsion_residual(geom: ModelGeometry, frames: FrameData, conn: ConnectionData, ys) -> float:
    """max | nabla_{f1} f2 - nabla_{f2} f1 - [f1, f2] - R(f1, f2) | in coordinates."""
    p, q = geom.p, geom.q
    worst = 0.0
    for a in range(q):
        for b in range(a + 1, q):
            lhs = sp.zeros(p + q, 1)
            for k in range(q):
                lhs += (conn.gamma[a][b][k] - conn.gamma[b][a][k]) * frames.horizontal(k)
            rhs = _bracket(geom, frames.horizontal(a), frames.horizontal(b))
            for i in range(p):
                rhs += conn.curvature[a][b][i] * frames.vertical(i)
            values = CompiledField(lhs - rhs, geom.space.y)(*ys)
            worst = max(worst, float(np.max(np.abs(values))))
    return worst


def base_connection(geom: ModelGeometry) -> BaseConnection:
    """Levi-Civita connection of g_B alone: coordinate Christoffel symbols and frame coefficients."""
    q, ys = geom.q, geom.space.y
    g = geom.base_metric
    g_inv = g.inv()
    christoffel = [[[sp.simplify(sum(
        g_inv[k, l] * (g[j, l].diff(ys[i]) + g[i, l].diff(ys[j]) - g[i, j].diff(ys[l])) for l in range(q)) / 2)
        for j in range(q)] for i in range(q)] for k in range(q)]

    F = _upper_inverse_cholesky(g)
    coframe = F.inv()
    c = [[[sp.Integer(0)] * q for _ in range(q)] for _ in range(q)]
    for a in range(q):
        for b in range(q):
            bracket = sp.zeros(q, 1)
            for l, y in enumerate(ys):
                bracket += F[l, a] * F[:, b].diff(y) - F[l, b] * F[:, a].diff(y)
            components = coframe * bracket
            for k in range(q):
                c[a][b][k] = components[k]
    frame_gamma = [[[sp.simplify((c[a][b][k] - c[b][k][a] + c[k][a][b]) / 2) for k in range(q)]
                    for b in range(q)] for a in range(q)]
    return BaseConnection(christoffel, frame_gamma, F)


def divergence(geom: ModelGeometry, frames: FrameData, conn: ConnectionData, X) -> CompiledField:
    """div(X) for a horizontal field X = sum X^alpha f_alpha given by frame coefficients."""
    p, q = geom.p, geom.q
    n = p + q
    X = sp.Matrix(X)
    total = sp.Integer(0)
    for b in range(q):
        total += _apply_vector(geom, frames.horizontal(b), X[b])
    for a in range(q):
        weight = sum((conn.full_christoffel[k][p + a][k] for k in range(n)), sp.Integer(0))
        total += X[a] * weight
    return CompiledField(sp.simplify(total), geom.space.y)


def divergence_from_density(geom: ModelGeometry, frames: FrameData, X) -> CompiledField:
    """Independent divergence rho^{-1} d_mu (rho X^mu) with the Riemannian density rho."""
    p, q = geom.p, geom.q
    X = sp.Matrix(X)
    coordinates = frames.frame[:, p:] * X
    rho = geom.volume_density
    total = sum((sp.diff(rho * coordinates[p + l], y) for l, y in enumerate(geom.space.y)), sp.Integer(0)) / rho
    return CompiledField(sp.simplify(total), geom.space.y)


def _apply_vector(geom: ModelGeometry, vector: sp.Matrix, function: sp.Expr) -> sp.Expr:
    p = geom.p
    return sum((vector[p + l] * sp.diff(function, y) for l, y in enumerate(geom.space.y)), sp.Integer(0))


def dual_norm_at(geom: ModelGeometry, point, covector, frames: FrameData = None) -> Tuple[np.ndarray, np.ndarray]:
    """|P^H (xi, eta)| and the horizontal part of the covector.

    ``point`` is (x, y) and ``covector`` is (xi, eta), each with the coordinates along the last axis.
    """
    frames = frames or build_frames(geom)
    p, q = geom.p, geom.q
    point = np.asarray(point, dtype=float)
    covector = np.asarray(covector, dtype=float)
    y = point[..., p:]
    frame = frames.compiled_frame(*[y[..., k] for k in range(q)])
    coframe = frames.compiled_coframe(*[y[..., k] for k in range(q)])
    components = np.einsum("...m,...ma->...a", covector, frame[..., :, p:])
    norm = np.sqrt(np.sum(components ** 2, axis=-1))
    horizontal = np.einsum("...a,...am->...m", components, coframe[..., p:, :])
    return norm, horizontal


def dual_norm_expression(geom: ModelGeometry) -> sp.Expr:
    """Symbolic |P^H (xi, eta)| = sqrt((eta - A^T xi)^T g_B^{-1} (eta - A^T xi)) on the full chart."""
    space = geom.space
    xi = sp.Matrix(space.xi)
    eta = sp.Matrix(space.eta)
    shifted = eta - geom.connection_form.T * xi
    return sp.sqrt(sp.expand((shifted.T * geom.base_metric.inv() * shifted)[0, 0]))


def check_hermitian(bundle: BundleConnection, geom: ModelGeometry):
    """Raise NonHermitianConnection unless every B(d/dy_k) is skew-Hermitian on the sampling grid."""
    for k, potential in enumerate(bundle.potentials(geom.space)):
        values = _sample(geom, potential)
        defect = float(np.max(np.abs(values + np.conj(np.swapaxes(values, -1, -2))))) if values.size else 0.0
        if defect > POSITIVITY_FLOOR:
            raise NonHermitianConnection(f"connection component {k + 1} is not skew-Hermitian (defect {defect:.3e})")


def connection_along(geom: ModelGeometry, vector: sp.Matrix, bundle: BundleConnection) -> sp.Matrix:
    """B(V) for a coordinate vector field V; leaf components do not contribute."""
    p = geom.p
    total = sp.zeros(bundle.rank, bundle.rank)
    for k, potential in enumerate(bundle.potentials(geom.space)):
        total += vector[p + k] * potential
    return total


def frame_operator(geom: ModelGeometry, frames: FrameData, index: int, bundle: BundleConnection,
                   extra: sp.Matrix = None) -> FirstOrderOperator:
    """Covariant derivative along the frame vector E_index acting on half-densities.

    L = E + B(E) + extra - 1/2 E(log rho); ``extra`` adds a further connection term such as a spin lift.
    """
    vector = frames.frame[:, index]
    op = FirstOrderOperator.vector_field(geom.space, vector, bundle.rank)
    potential = connection_along(geom, vector, bundle)
    if extra is not None:
        potential = potential + extra
    return op.plus_potential(potential).half_density(geom.volume_density)
