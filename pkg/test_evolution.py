import numpy as np
import pytest

from app.core.exceptions import ConfigInvalid, CutoffMismatch, ProbeOutOfRange
from app.schemas.experiment import BundleSpec
from app.services import dirac_service, evolution_service, symbol_service
from app.services.dirac_service import DiracService
from app.services.evolution_service import EgorovService

CUTOFF = 64
SCALES = (8.0, 16.0, 32.0)

NON_COMMUTING = {"rank": 2, "connection": [[
    {"mode": [0], "cos": [[0.6, 0.0], [0.0, -0.6]]},
    {"mode": [1], "cos": [[0.0, 0.4], [0.4, 0.0]]},
]]}


def _cosine(rank=1, coefficient=None):
    """cos(y) as an order-zero symbol, optionally times a matrix"""
    coefficient = np.eye(rank) if coefficient is None else coefficient
    terms = [((0,), (0,), (1,), 0, 0, coefficient), ((0,), (0,), (-1,), 0, 0, coefficient)]
    return symbol_service.symbol_from_terms(terms, 1, 1, 0, rank)


def test_flat_scalar_spectrum(flat_q1):
    """Leaf mode a, transverse mode n: P has eigenvalue sqrt(a^2 + n^2 + 1)"""
    hamiltonian = evolution_service.assemble_hamiltonian(flat_q1, 8, leaf_cutoff=1)
    n = np.arange(-8, 9)
    for a in (-1, 0, 1):
        expected = np.sort(np.sqrt(a ** 2 + n ** 2 + 1.0))
        assert np.allclose(np.sort(hamiltonian.frequencies((a,))), expected, atol=1e-10)
    assert hamiltonian.hermiticity_defect <= 1e-10


def test_flat_dirac_spectrum(flat_q2):
    """<D> on leaf mode 0: sqrt(|n|^2 + 1), each value twice"""
    assembly = dirac_service.build_dirac(flat_q2, cutoff=4, leaf_cutoff=0)
    hamiltonian = evolution_service.assemble_hamiltonian(assembly)
    radii = np.linalg.norm(assembly.D.lattice.modes, axis=-1)
    expected = np.sort(np.repeat(np.sqrt(radii ** 2 + 1.0), 2))
    assert np.allclose(np.sort(hamiltonian.frequencies((0,))), expected, atol=1e-10)


def test_egorov_flat_scalar(flat_q1):
    """d(lambda) decays with rho >= 0.7 and the diagonal oracle agrees to 1e-10"""
    k = _cosine()
    hamiltonian = evolution_service.assemble_hamiltonian(flat_q1, CUTOFF, leaf_cutoff=1)
    data = evolution_service.scalar_transport_data(flat_q1)
    report = evolution_service.egorov_compare(hamiltonian, data, k, 1.0, SCALES)
    assert report.rho >= 0.7
    assert list(report.to_frame().columns) == ["lambda", "d"]
    assert evolution_service.oracle_defect(hamiltonian, flat_q1, k, 1.0) <= 1e-10


def test_egorov_kaluza_klein_line_bundle(kk_q1):
    """Constant connection form and constant bundle potential: rho >= 0.7, oracle to 1e-10"""
    bundle = BundleSpec.model_validate({"rank": 1, "connection": [[{"mode": [0], "cos": [[0.3]]}]]}).build()
    k = _cosine()
    hamiltonian = evolution_service.assemble_hamiltonian(kk_q1, CUTOFF, leaf_cutoff=1, bundle=bundle)
    data = evolution_service.scalar_transport_data(kk_q1, bundle)
    report = evolution_service.egorov_compare(hamiltonian, data, k, 1.0, SCALES)
    assert report.rho >= 0.7
    assert evolution_service.oracle_defect(hamiltonian, kk_q1, k, 1.0, bundle) <= 1e-10


def test_egorov_negative_control(flat_q1):
    """Dropping the subprincipal conjugation on a non-commuting bundle stops d(lambda) from decaying"""
    bundle = BundleSpec.model_validate(NON_COMMUTING).build()
    k = _cosine(2, np.array([[0.0, 1.0], [1.0, 0.0]]))
    hamiltonian = evolution_service.assemble_hamiltonian(flat_q1, CUTOFF, leaf_cutoff=0, bundle=bundle)
    data = evolution_service.scalar_transport_data(flat_q1, bundle)
    report = evolution_service.egorov_compare(hamiltonian, data, k, 1.0, SCALES)
    control = evolution_service.egorov_compare(hamiltonian, data, k, 1.0, SCALES, include_connection=False)
    assert report.rho >= 0.7
    assert control.rho <= 0.3


def test_evolution_group_property(flat_q1):
    """Phi_t = Phi_{t/2} Phi_{t/2}"""
    hamiltonian = evolution_service.assemble_hamiltonian(flat_q1, 16, leaf_cutoff=1)
    K = symbol_service.quantize(_cosine(), 16, leaf_cutoff=1)
    once = evolution_service.heisenberg_evolve(hamiltonian, K, 1.0)
    half = evolution_service.heisenberg_evolve(hamiltonian, K, 0.5)
    twice = evolution_service.heisenberg_evolve(hamiltonian, half, 0.5)
    assert (once - twice).max_abs() <= 1e-10


def test_evolution_rejects_other_cutoff(flat_q1):
    """K must live on the Hamiltonian's lattice"""
    hamiltonian = evolution_service.assemble_hamiltonian(flat_q1, 16, leaf_cutoff=1)
    K = symbol_service.quantize(_cosine(), 12, leaf_cutoff=1)
    with pytest.raises(CutoffMismatch):
        evolution_service.heisenberg_evolve(hamiltonian, K, 1.0)


def test_scales_limited_by_cutoff(flat_q1):
    """lambda above cutoff/2 cannot be probed"""
    hamiltonian = evolution_service.assemble_hamiltonian(flat_q1, 16, leaf_cutoff=0)
    data = evolution_service.scalar_transport_data(flat_q1)
    with pytest.raises(ProbeOutOfRange):
        evolution_service.egorov_compare(hamiltonian, data, _cosine(), 1.0, (4.0, 12.0))


def test_oracle_needs_constant_coefficients(warped_q2):
    """Variable metrics have no diagonal closed form"""
    hamiltonian = evolution_service.assemble_hamiltonian(warped_q2, 6, leaf_cutoff=0)
    k = symbol_service.symbol_from_terms([((0,), (0,), (1, 0), 0, 0, 1.0)], 1, 2, 0)
    with pytest.raises(ConfigInvalid):
        evolution_service.oracle_defect(hamiltonian, warped_q2, k, 1.0)


def test_cutoff_doubling_is_stable(flat_q1):
    """d(lambda) for lambda <= cutoff/4 moves by less than 10% when the cutoff doubles"""
    k = _cosine()
    data = evolution_service.scalar_transport_data(flat_q1)
    hamiltonian = evolution_service.assemble_hamiltonian(flat_q1, 32, leaf_cutoff=0)
    report = evolution_service.egorov_compare(hamiltonian, data, k, 1.0, (4.0, 8.0))
    doubled = evolution_service.assemble_hamiltonian(flat_q1, 64, leaf_cutoff=0)
    assert evolution_service.doubling_stability(report, doubled, k) <= evolution_service.STABILITY_LIMIT


def test_decay_exponent_of_power_law():
    """d = 3 lambda^{-1.5} is fitted exactly"""
    scales = [4.0, 8.0, 16.0]
    rho, residual = evolution_service.decay_exponent(scales, [3 * s ** -1.5 for s in scales])
    assert rho == pytest.approx(1.5)
    assert residual <= 1e-12


def test_egorov_dirac(warped_q2, line_bundle_q2):
    """<D_E> at cutoff 24: rho >= 0.6, and the zero connection is at least 3x worse at lambda = 12"""
    assembly = dirac_service.build_dirac(warped_q2, line_bundle_q2, cutoff=24, leaf_cutoff=4)
    sigma_x = np.array([[0.0, 1.0], [1.0, 0.0]])
    sigma_z = np.diag([1.0, -1.0])
    k = symbol_service.symbol_from_terms([((0,), (0,), (1, 0), 0, 0, sigma_x), ((0,), (0,), (0, 1), 0, 0, sigma_z)],
                                         1, 2, 0, 2)
    hamiltonian = evolution_service.assemble_hamiltonian(assembly)
    data = dirac_service.dirac_subprincipal(assembly)
    scales = (4.0, 6.0, 8.0, 12.0)
    report = evolution_service.egorov_compare(hamiltonian, data, k, 1.0, scales)
    control = evolution_service.egorov_compare(hamiltonian, data, k, 1.0, scales, include_connection=False)
    assert report.rho >= 0.6
    assert control.difference_at(12.0) >= 3 * report.difference_at(12.0)


def test_egorov_service_reuses_one_hamiltonian(kk_q1):
    """Oracle, group property and comparison all run against the same diagonalized P"""
    bundle = BundleSpec.model_validate({"rank": 1, "connection": [[{"mode": [0], "cos": [[0.3]]}]]}).build()
    egorov = EgorovService.scalar(kk_q1, 32, leaf_cutoff=1, bundle=bundle)
    k = _cosine()
    assert (egorov.cutoff, egorov.leaf_cutoff) == (32, 1)
    assert egorov.oracle(k, 1.0) <= 1e-10
    assert egorov.group_defect(k, 1.0) <= 1e-10
    report = egorov.compare(k, 1.0, (4.0, 8.0, 16.0))
    assert len(report.differences) == 3
    assert egorov.doubled().cutoff == 64


def test_egorov_service_for_dirac_has_no_oracle(flat_q2):
    """The closed-form oracle and cutoff doubling belong to the scalar Laplacian"""
    dirac = DiracService(flat_q2, cutoff=4, leaf_cutoff=0)
    egorov = EgorovService(dirac.assembly, dirac.subprincipal())
    k = symbol_service.symbol_from_terms([((0,), (0,), (1, 0), 0, 0, np.eye(2))], 1, 2, 0, 2)
    with pytest.raises(ConfigInvalid):
        egorov.oracle(k, 1.0)
    with pytest.raises(ConfigInvalid):
        egorov.doubled()
