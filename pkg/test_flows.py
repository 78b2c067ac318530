import numpy as np
import pytest
import sympy as sp

from app.core.exceptions import EvaluationAtZeroSection, NotHolonomyInvariant, UnsupportedDimension
from app.models.flows import ConormalPoint, FlowConfig, FramePoint, GroupoidPoint
from app.schemas.experiment import BundleSpec
from app.services import evolution_service, flow_service, geometry_service, symbol_service

INVARIANT_TOLERANCE = 1e-8


def _wave_symbol(q=1, rank=1):
    """e^{i y_1} on every direction, order zero"""
    transverse = [1] + [0] * (q - 1)
    return symbol_service.symbol_from_terms([((0,), (0,), tuple(transverse), 0, 0, np.eye(rank))], 1, q, 0, rank)


def test_flat_flow_is_unit_speed(flat_q1):
    """p = |eta| on the flat model: y moves with sgn(eta), x and eta stay put"""
    field = flow_service.conormal_field(flow_service.flow_data(flat_q1))
    cfg = FlowConfig(step=1e-2, time=2.0)
    for sign in (1.0, -1.0):
        trajectory = flow_service.integrate_flow(field, ConormalPoint((0.4,), (1.0,), (3.0 * sign,)), cfg)
        x, y, eta = trajectory.final
        assert abs(x - 0.4) <= 1e-12
        assert abs(y - (1.0 + 2.0 * sign)) <= 1e-10
        assert abs(eta - 3.0 * sign) <= 1e-12


def test_energy_conserved_over_long_run(warped_kk_q2, rng):
    """Hamiltonian drift stays below 1e-8 over t in [0, 10] at h = 1e-3"""
    data = flow_service.flow_data(warped_kk_q2)
    field = flow_service.conormal_field(data)
    start = ConormalPoint((0.2,), (0.5, 1.3), (0.6, 0.8))
    trajectory = flow_service.integrate_flow(field, start, FlowConfig(step=1e-3, time=10.0))
    assert flow_service.energy_drift(trajectory, data.principal, field.variables) <= INVARIANT_TOLERANCE


def test_lifted_flow_intertwines_projections(warped_kk_q2):
    """Range and source projections of the lifted flow follow the conormal flow"""
    data = flow_service.flow_data(warped_kk_q2)
    point = GroupoidPoint((0.3,), (2.1,), (0.5, 1.3), (0.6, -0.8))
    assert flow_service.intertwining_defect(data, point, FlowConfig(step=1e-3, time=1.0)) <= INVARIANT_TOLERANCE


def test_flow_commutes_with_dilation(kk_q1):
    """Degree-one Hamiltonians generate dilation-equivariant flows"""
    data = flow_service.flow_data(kk_q1)
    point = ConormalPoint((0.3,), (0.7,), (1.5,))
    assert flow_service.homogeneity_defect(data, point, 2.0, FlowConfig(step=1e-3, time=1.0)) <= INVARIANT_TOLERANCE


def test_zero_section_rejected():
    """Points with eta = 0 are outside the conormal chart"""
    with pytest.raises(EvaluationAtZeroSection):
        ConormalPoint((0.0,), (0.0,), (0.0,))


def test_frame_flow_first_integrals(warped_kk_q2):
    """I_j = eta(v_j) are conserved and the frame stays g_B-orthonormal"""
    geom = warped_kk_q2
    frames = geometry_service.build_frames(geom)
    y0 = np.array([0.5, 1.3])
    F = np.real(frames.compiled_frame(*y0)[1:, 1:])
    point = FramePoint(y0, np.array([0.6, 0.8]), F)
    cfg = FlowConfig(step=1e-3, time=10.0)
    final = flow_service.frame_flow(geom, point, cfg)
    assert np.max(np.abs(final.first_integrals() - point.first_integrals())) <= INVARIANT_TOLERANCE
    assert flow_service.orthonormality_defect(geom, final) <= INVARIANT_TOLERANCE


def test_frame_flow_is_rotation_equivariant(warped_kk_q2):
    """The SO(2) action commutes with the frame flow"""
    geom = warped_kk_q2
    frames = geometry_service.build_frames(geom)
    y0 = np.array([2.0, 0.4])
    point = FramePoint(y0, np.array([-0.3, 1.0]), np.real(frames.compiled_frame(*y0)[1:, 1:]))
    angle = 0.7
    rotation = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    cfg = FlowConfig(step=1e-3, time=10.0)
    rotated = flow_service.frame_flow(geom, flow_service.rotate_frame(point, rotation), cfg)
    expected = flow_service.rotate_frame(flow_service.frame_flow(geom, point, cfg), rotation)
    assert np.max(np.abs(rotated.frame - expected.frame)) <= INVARIANT_TOLERANCE


def test_frame_flow_needs_two_dimensional_base(flat_q1):
    """q = 1 has no frame bundle flow"""
    with pytest.raises(UnsupportedDimension):
        flow_service.frame_flow(flat_q1, FramePoint(np.zeros(1), np.ones(1), np.eye(1)), FlowConfig(time=0.1))


def test_parallel_transport_is_unitary(flat_q1):
    """Hermitian subprincipal data transports unitarily on a non-commuting rank-2 bundle"""
    geom = flat_q1
    bundle = BundleSpec.model_validate({"rank": 2, "connection": [[
        {"mode": [0], "cos": [[0.6, 0.0], [0.0, -0.6]]},
        {"mode": [1], "cos": [[0.0, 0.4], [0.4, 0.0]]},
    ]]}).build()
    data = evolution_service.scalar_transport_data(geom, bundle)
    connection = flow_service.subprincipal_connection(data)
    assert connection.hermitian
    transport = flow_service.parallel_transport(connection, ConormalPoint((0.1,), (0.9,), (2.0,)),
                                                FlowConfig(step=1e-3, time=1.0))
    assert flow_service.unitarity_defect(transport) <= INVARIANT_TOLERANCE
    assert np.max(np.abs(transport - np.eye(2))) > 1e-3


def test_flat_transport_is_translation(flat_q1):
    """Without subprincipal terms k_t(y, eta) = k(y + t sgn(eta), eta)"""
    k = _wave_symbol()
    t = 0.75
    moved = flow_service.transport_symbol(flow_service.flow_data(flat_q1), k, t, FlowConfig(step=1e-3))
    ys = np.linspace(0, 2 * np.pi, 7)[:, None]
    for sign in (1.0, -1.0):
        eta = np.full((7, 1), 2.0 * sign)
        zeros = np.zeros((7, 1))
        expected = k.evaluate(zeros, zeros, ys + t * sign, eta)
        assert np.max(np.abs(moved.evaluate(zeros, zeros, ys, eta) - expected)) <= 1e-8


def test_transport_group_law(kk_q1):
    """Transporting for s then t equals transporting for s + t"""
    bundle = BundleSpec.model_validate({"rank": 1, "connection": [[{"mode": [1], "cos": [[0.3]]}]]}).build()
    data = evolution_service.scalar_transport_data(kk_q1, bundle)
    defect = flow_service.group_law_defect(data, _wave_symbol(), 0.4, 0.3, FlowConfig(step=1e-3))
    assert defect <= 1e-7


def test_transport_pde_second_order(flat_q1):
    """Central differences of k_t approach nabla_{H_p} k_t at second order"""
    bundle = BundleSpec.model_validate({"rank": 1, "connection": [[{"mode": [1], "cos": [[0.3]]}]]}).build()
    data = evolution_service.scalar_transport_data(flat_q1, bundle)
    check = flow_service.transport_pde_residual(data, _wave_symbol(), 0.5, cfg=FlowConfig(step=1e-3))
    assert check.order >= 1.7
    assert list(check.to_frame().columns) == ["delta", "residual"]


def test_hamiltonian_field_flat(flat_q1):
    """p = |eta| on the flat model: x and eta stay put, y moves with sgn(eta)"""
    field = flow_service.restrict_to_conormal(flow_service.hamiltonian_field(flat_q1), flat_q1)
    assert np.allclose(field(np.array([0.3, 1.1, -2.0])), [0.0, -1.0, 0.0], atol=1e-14)


def test_hamiltonian_field_tangent_to_conormal(warped_kk_q2):
    """Restricting X_p to xi = 0 reproduces the conormal field"""
    geom = warped_kk_q2
    restricted = flow_service.restrict_to_conormal(flow_service.hamiltonian_field(geom), geom)
    field = flow_service.conormal_field(flow_service.flow_data(geom))
    state = ConormalPoint((0.2,), (0.5, 1.3), (0.6, -0.8)).as_state()
    assert np.max(np.abs(restricted(state) - field(state))) <= 1e-12


def test_leaf_dependent_symbol_leaves_conormal(flat_q1):
    """A principal symbol varying along the leaves pushes xi off zero"""
    space = flat_q1.space
    principal = (2 + sp.cos(space.x[0])) * sp.sqrt(space.eta[0] ** 2 + space.xi[0] ** 2)
    with pytest.raises(NotHolonomyInvariant):
        flow_service.restrict_to_conormal(flow_service.hamiltonian_field(flat_q1, principal), flat_q1)
