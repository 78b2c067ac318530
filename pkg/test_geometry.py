import numpy as np
import pytest
import sympy as sp
from pydantic import ValidationError

from app.core.exceptions import NonHermitianConnection, NonPositiveMetric, UnsupportedDimension
from app.models.geometry import BundleConnection, ModelGeometry, TrigMatrix
from app.schemas.experiment import GeometrySpec
from app.services import geometry_service
from app.utils.fourier import transverse_grid
from app.utils.symbolic import CompiledField

TOLERANCE = 1e-10


def _grid(q, size=12):
    points = transverse_grid(q, size)
    return points, [points[:, k] for k in range(q)]


def test_flat_frames_are_coordinate_fields(flat_q2):
    """Identity metrics give e_i = d/dx_i and f_k = d/dy_k"""
    frames = geometry_service.build_frames(flat_q2)
    assert np.allclose(np.array(frames.frame, dtype=float), np.eye(3))
    assert frames.orthonormality_defect <= TOLERANCE


def test_flat_connection_vanishes(flat_q2):
    """Flat product: no Christoffel symbols, no integrability tensor, no mean curvature"""
    conn = geometry_service.transverse_connection(flat_q2, geometry_service.build_frames(flat_q2))
    assert all(float(g) == 0.0 for plane in conn.gamma for row in plane for g in row)
    assert all(float(r) == 0.0 for plane in conn.curvature for row in plane for r in row)
    assert all(float(t) == 0.0 for t in conn.tau)


def test_warped_frames_orthonormal(warped_kk_q2):
    """Frames of a warped Kaluza-Klein metric are orthonormal to rounding"""
    frames = geometry_service.build_frames(warped_kk_q2)
    assert frames.orthonormality_defect <= TOLERANCE


def test_connection_is_metric_and_torsion_free(warped_kk_q2):
    """The transverse connection passes both diagnostics"""
    conn = geometry_service.transverse_connection(warped_kk_q2, geometry_service.build_frames(warped_kk_q2))
    assert conn.diagnostics["metric_compatibility"] <= TOLERANCE
    assert conn.diagnostics["torsion"] <= TOLERANCE


def test_kaluza_klein_fibres_are_totally_geodesic(kk_q1):
    """Constant g_F means tau = 0"""
    conn = geometry_service.transverse_connection(kk_q1, geometry_service.build_frames(kk_q1))
    assert all(sp.simplify(t) == 0 for t in conn.tau)


def test_warped_model_has_mean_curvature(warped_q2):
    """g_F depending on y1 gives a nonzero tau component"""
    conn = geometry_service.transverse_connection(warped_q2, geometry_service.build_frames(warped_q2))
    points, ys = _grid(2)
    assert np.max(np.abs(conn.tau_at(*ys))) > 1e-3


def test_euclidean_divergence(flat_q1):
    """X = sin(y) d/dy on the flat model has divergence cos(y)"""
    frames = geometry_service.build_frames(flat_q1)
    conn = geometry_service.transverse_connection(flat_q1, frames)
    y = flat_q1.space.y[0]
    points, ys = _grid(1, 16)
    values = geometry_service.divergence(flat_q1, frames, conn, [sp.sin(y)])(*ys)[..., 0, 0]
    assert np.max(np.abs(values - np.cos(points[:, 0]))) <= TOLERANCE


def test_divergence_of_frame_matches_tau_identity(warped_kk_q2):
    """div(f_a) = -g(tau + sum_b nabla_{f_b} f_b, f_a), and agrees with the density formula"""
    geom = warped_kk_q2
    frames = geometry_service.build_frames(geom)
    conn = geometry_service.transverse_connection(geom, frames)
    _, ys = _grid(2)
    for a in range(2):
        unit = [1 if b == a else 0 for b in range(2)]
        frame_div = geometry_service.divergence(geom, frames, conn, unit)(*ys)[..., 0, 0]
        density_div = geometry_service.divergence_from_density(geom, frames, unit)(*ys)[..., 0, 0]
        identity = -(conn.tau[a] + sum((conn.gamma[b][b][a] for b in range(2)), sp.Integer(0)))
        predicted = CompiledField(identity, geom.space.y)(*ys)[..., 0, 0]
        assert np.max(np.abs(frame_div - density_div)) <= TOLERANCE
        assert np.max(np.abs(frame_div - predicted)) <= TOLERANCE


def test_transverse_connection_is_lifted_base_connection(warped_kk_q2):
    """Frame coefficients of the transverse connection only see g_B"""
    geom = warped_kk_q2
    conn = geometry_service.transverse_connection(geom, geometry_service.build_frames(geom))
    base = geometry_service.base_connection(geom)
    _, ys = _grid(2)
    for a in range(2):
        for b in range(2):
            for c in range(2):
                difference = CompiledField(conn.gamma[a][b][c] - base.frame_gamma[a][b][c], geom.space.y)(*ys)
                assert np.max(np.abs(difference)) <= TOLERANCE


def test_dual_norm_flat_examples(flat_q2, flat_q1):
    """|P^H(0, (1, 0))| = 1, and a purely leafwise covector is annihilated"""
    norm, _ = geometry_service.dual_norm_at(flat_q2, [0.3, 1.1, 2.0], [0.0, 1.0, 0.0])
    assert abs(norm - 1.0) <= TOLERANCE
    norm, horizontal = geometry_service.dual_norm_at(flat_q1, [0.3, 1.1], [1.0, 0.0])
    assert abs(norm) <= TOLERANCE
    assert np.max(np.abs(horizontal)) <= TOLERANCE


def test_dual_norm_matches_closed_form(warped_kk_q2, rng):
    """Frame evaluation and the symbolic expression agree at random points"""
    geom = warped_kk_q2
    points = rng.uniform(0, 2 * np.pi, size=(10, 3))
    covectors = rng.normal(size=(10, 3))
    norm, _ = geometry_service.dual_norm_at(geom, points, covectors)
    expression = CompiledField(geometry_service.dual_norm_expression(geom), geom.space.chart)
    symbolic = np.real(expression.at(np.concatenate([points, covectors], axis=1))[..., 0, 0])
    assert np.max(np.abs(norm - symbolic)) <= TOLERANCE


def test_non_positive_metric_rejected():
    """g_F = cos(y) changes sign"""
    geom = GeometrySpec.model_validate({"p": 1, "q": 1, "g_F": [{"mode": [1], "cos": [[1.0]]}]}).build()
    with pytest.raises(NonPositiveMetric):
        geometry_service.build_frames(geom)


def test_unsupported_dimension_rejected():
    """Three leaf dimensions are outside the model"""
    geom = ModelGeometry(3, 1, TrigMatrix.constant(np.eye(3)), TrigMatrix.constant(np.eye(1)), TrigMatrix.zeros((3, 1)))
    with pytest.raises(UnsupportedDimension):
        geometry_service.build_frames(geom)


def test_geometry_config_limits_leaf_dimension():
    """Configs are refused before any geometry is built when p > 2"""
    with pytest.raises(ValidationError):
        GeometrySpec(p=3, q=1)


def test_non_hermitian_connection_rejected(flat_q1):
    """H must be Hermitian so that B = iH is skew"""
    bundle = BundleConnection(2, (TrigMatrix.constant(np.array([[0.0, 1.0], [0.0, 0.0]])),))
    with pytest.raises(NonHermitianConnection):
        geometry_service.check_hermitian(bundle, flat_q1)
