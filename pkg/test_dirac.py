from pathlib import Path

import numpy as np
import pytest

from app.core.exceptions import CutoffTooSmall, FitIllConditioned, UnsupportedDimension
from app.models.dirac import CliffordData
from app.schemas.experiment import GeometrySpec, load_config
from app.services import dirac_service
from app.utils.symbolic import CompiledField

EXACT = 1e-10
CONFIGS = Path(__file__).parent / "configs"


@pytest.fixture
def kk_q2():
    """Constant g_F with a closed, nonconstant connection form: tau = 0"""
    return GeometrySpec.model_validate({"name": "kk-q2", "p": 1, "q": 2,
                                        "A": [{"mode": [1, 0], "cos": [[0.3, 0.0]]},
                                              {"mode": [0, 1], "sin": [[0.0, 0.2]]}]}).build()


def test_clifford_relations():
    """Both Clifford modules satisfy c_a c_b + c_b c_a = -2 delta_ab, are skew and odd"""
    assert CliffordData.spinor().relations_defect() <= 1e-14
    assert CliffordData.exterior().relations_defect() <= 1e-14


def test_flat_dirac_spectrum(flat_q2):
    """On leaf mode 0 of the flat model the eigenvalues are +-|n|"""
    assembly = dirac_service.build_dirac(flat_q2, cutoff=4, leaf_cutoff=0)
    block = assembly.D.dense_block((0,), (0,))
    radii = np.linalg.norm(assembly.D.lattice.modes, axis=-1)
    expected = np.sort(np.concatenate([radii, -radii]))
    assert np.allclose(np.sort(np.linalg.eigvalsh(block)), expected, atol=1e-12)


def test_spin_connection_compatible(warped_kk_q2, line_bundle_q2):
    """[omega_a, c(f_d)] = c(nabla_{f_a} f_d) and omega_a is skew"""
    assembly = dirac_service.build_dirac(warped_kk_q2, line_bundle_q2, cutoff=6)
    assert assembly.spin.compatibility_residual <= EXACT
    assert assembly.spin.skew_defect <= EXACT
    assert assembly.rank == 2


def test_totally_geodesic_fibres_give_equal_operators(kk_q2):
    """tau = 0 makes D_E and D'_E the same matrix"""
    assembly = dirac_service.build_dirac(kk_q2, cutoff=6)
    assert (assembly.D - assembly.D_prime).max_abs() <= 1e-14


def test_adjoint_identity_on_warped_model(warped_q2, line_bundle_q2):
    """(D')* = D' - c(tau) on interior modes; dropping c(tau) leaves exactly |c(tau)|"""
    assembly = dirac_service.build_dirac(warped_q2, line_bundle_q2, cutoff=16)
    report = dirac_service.adjoint_defect(assembly)
    assert report.defect <= EXACT
    assert report.symmetry_defect <= EXACT
    assert report.c_tau_norm > 1e-3
    assert abs(report.control - report.c_tau_norm) <= EXACT


def test_adjoint_identity_flat(flat_q2):
    """No mean curvature: the defect and the control both vanish"""
    report = dirac_service.adjoint_defect(dirac_service.build_dirac(flat_q2, cutoff=6))
    assert report.defect <= EXACT
    assert report.control <= EXACT


def test_cutoff_must_exceed_coefficient_width(warped_q2):
    """A cutoff equal to the coefficient degree leaves no interior"""
    with pytest.raises(CutoffTooSmall):
        dirac_service.build_dirac(warped_q2, cutoff=1)


def test_codimension_one_rejected(flat_q1):
    """Spinors are set up over a two-dimensional normal bundle"""
    with pytest.raises(UnsupportedDimension):
        dirac_service.build_dirac(flat_q1)


def test_flat_square_symbol_by_hand(flat_q2):
    """phi = n.y on the flat model: s^2 coefficient |n|^2 a, s^1 coefficient 0 for constant a"""
    assembly = dirac_service.build_dirac(flat_q2, cutoff=6)
    modes = np.zeros((1, 2), dtype=int)
    amplitude = np.array([[1.0, 0.5j]])
    points = np.array([[0.3, 1.2], [2.0, 0.4]])
    fit = dirac_service.conjugation_fit(assembly.dirac_operator, [0.0, 2.0, -1.0], (0,), modes, amplitude, points)
    assert np.max(np.abs(fit.leading - 5.0 * amplitude)) <= 1e-8
    assert np.max(np.abs(fit.subleading)) <= 1e-8


def test_conjugation_fit_needs_enough_scales(flat_q2):
    """Fitting a quadratic through two points is refused"""
    assembly = dirac_service.build_dirac(flat_q2, cutoff=6)
    with pytest.raises(FitIllConditioned):
        dirac_service.conjugation_fit(assembly.dirac_operator, [0.0, 1.0, 0.0], (0,), np.zeros((1, 2), dtype=int),
                                      np.ones((1, 2)), np.zeros((1, 2)), scales=(1.0, 2.0))


def test_square_symbols_agree_three_ways(warped_kk_q2, line_bundle_q2, rng):
    """Principal to 1e-8 and subprincipal (fit, closed form, symbolic) to 1e-6 on ten probes"""
    assembly = dirac_service.build_dirac(warped_kk_q2, line_bundle_q2, cutoff=8)
    for conormal in (True, False):
        worst = dirac_service.check_square_symbols(assembly, rng, probes=10, conormal=conormal).worst
        assert worst["principal"] <= 1e-8
        assert worst["fit_vs_closed"] <= 1e-6
        assert worst["fit_vs_symbolic"] <= 1e-6
        assert worst["closed_vs_symbolic"] <= 1e-6


def test_signature_identity_on_warped_model(warped_q2):
    """D_{F(Q)*} = d_H + d_H* - (eps_tau + i_tau)/2, and the tau term is really there"""
    signature = dirac_service.signature_operator(warped_q2, cutoff=10, leaf_cutoff=2)
    assert signature.identity_residual <= EXACT
    assert signature.tau_term.interior_norm(signature.width) > 1e-3


def test_isotypic_blocks_match_twisted_base_operator(warped_kk_q2):
    """Leaf modes n = 0, 1, 2 reproduce the base signature operator twisted by n.A"""
    signature = dirac_service.signature_operator(warped_kk_q2, cutoff=10, leaf_cutoff=2)
    for n in range(3):
        block = dirac_service.isotypic_blocks(signature, warped_kk_q2, (n,))
        assert block.residual <= EXACT
        assert block.off_block <= EXACT


def test_shipped_isotypic_model_is_twisted():
    """The bundled signature geometry has A != 0, so mode n = 1 differs from n = 0"""
    geom = load_config(CONFIGS / "signature-isotypic.json").geometry.build()
    untwisted = dirac_service.base_signature_operator(geom, (0,), 8)
    twisted = dirac_service.base_signature_operator(geom, (1,), 8)
    assert np.max(np.abs(twisted - untwisted)) > 1e-2
    signature = dirac_service.signature_operator(geom, cutoff=10, leaf_cutoff=1)
    assert dirac_service.isotypic_blocks(signature, geom, (1,)).residual <= EXACT


def test_d_H_squared_vanishes_only_without_curvature(flat_q2, warped_kk_q2):
    """d_H^2 = 0 for A = 0; the curvature of A = 0.2 sin(y2) dy1 makes it nonzero on n != 0"""
    flat = dirac_service.signature_operator(flat_q2, cutoff=8, leaf_cutoff=1)
    curved = dirac_service.signature_operator(warped_kk_q2, cutoff=10, leaf_cutoff=1)
    assert flat.d_H_squared <= EXACT
    assert curved.d_H_squared > 1e-3


def test_dirac_subprincipal_is_half_the_square_over_norm(warped_kk_q2, line_bundle_q2, rng):
    """sigma_sub(<D>) = sigma_sub(D^2) / 2|nu| on the conormal bundle"""
    assembly = dirac_service.build_dirac(warped_kk_q2, line_bundle_q2, cutoff=8)
    space = warped_kk_q2.space
    data = dirac_service.dirac_subprincipal(assembly)
    closed = dirac_service.closed_form_subprincipal(assembly).subs({xi: 0 for xi in space.xi})
    difference = CompiledField(closed / (2 * data.principal) - data.subprincipal, space.coordinates + space.eta)
    points = np.concatenate([rng.uniform(0, 2 * np.pi, size=(16, 3)), rng.normal(size=(16, 2))], axis=1)
    assert np.max(np.abs(difference.at(points))) <= EXACT
    assert data.rank == assembly.rank


def test_dirac_service_caches_subprincipal(warped_kk_q2, line_bundle_q2, rng):
    """The service assembles once and serves the conormal data from the same assembly"""
    dirac = dirac_service.DiracService(warped_kk_q2, line_bundle_q2, cutoff=8)
    assert dirac.subprincipal() is dirac.subprincipal()
    assert dirac.subprincipal_defect(rng) <= EXACT
    assert dirac.geometry is warped_kk_q2
