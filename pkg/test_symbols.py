from pathlib import Path

import numpy as np
import pytest
import sympy as sp

from app.core.exceptions import CutoffTooSmall, ProbeOutOfRange, TruncationDepthExceeded
from app.models.geometry import BundleConnection, TrigMatrix
from app.models.symbols import TransverseSymbol
from app.schemas.experiment import OperatorSpec, load_config
from app.services import symbol_service
from app.services.experiment_service import build_operator, build_symbol

# composition acceptance: slopes below m1 + m2 - N - 1 + 0.3 on lambda in {8, 16, 32} at cutoff 64
SCALES = (8, 16, 32)
CUTOFF = 64

COMPOSITION = load_config(Path(__file__).parent / "configs" / "symbol-composition.json")
VARIABLE_OPERATOR = COMPOSITION.operator


def _wave(transverse=(1,), leaf=(0,), source=(0,), harmonic=0, coefficient=1.0):
    return _symbol([(leaf, source, transverse, 0, harmonic, coefficient)])


def _symbol(terms):
    return symbol_service.symbol_from_terms(terms, 1, len(terms[0][2]), 0)


def test_quantize_then_extract_recovers_symbol():
    """An order-zero symbol independent of |eta| is read back exactly from its matrix"""
    k = _symbol([((0,), (0,), (1,), 0, 1, 0.5 + 0.25j), ((0,), (0,), (-2,), 0, 0, 1.0)])
    T = symbol_service.quantize(k, 32)
    samples = symbol_service.extract_symbol(T, 0, 8.0)
    assert samples.error(k) <= 1e-12


def test_quantized_leaf_mode_shifts_leaf_block():
    """A leaf factor e^{i x} couples source leaf mode 0 to output leaf mode 1"""
    k = _wave(transverse=(0,), leaf=(1,), source=(0,))
    T = symbol_service.quantize(k, 8, leaf_cutoff=1)
    assert set(T.blocks) == {((1,), (0,))}


def test_quantize_rejects_small_cutoff():
    """Coefficients of transverse degree 2 need a cutoff of at least 4"""
    with pytest.raises(CutoffTooSmall):
        symbol_service.quantize(_wave(transverse=(2,)), 3)


def test_extract_rejects_small_scale():
    """Probes below |n| = 2 are refused"""
    T = symbol_service.quantize(_wave(), 16)
    with pytest.raises(ProbeOutOfRange):
        symbol_service.extract_symbol(T, 0, 1.0)


def test_flat_laplacian_has_no_subprincipal_part(flat_q2):
    """b = |zeta|^2 on the flat model: both correction terms vanish"""
    data = symbol_service.transverse_subprincipal(symbol_service.laplace_symbol(flat_q2))
    assert all(sp.simplify(entry) == 0 for entry in data.subprincipal)
    assert sp.simplify(data.principal - (data.space.eta[0] ** 2 + data.space.eta[1] ** 2)) == 0


def test_laplace_symbol_sees_bundle_connection(flat_q1):
    """A constant potential H shifts the first-order part by 2 H eta"""
    bundle = BundleConnection(1, (TrigMatrix.constant(np.array([[0.5]])),))
    symbol = symbol_service.laplace_symbol(flat_q1, bundle)
    eta = flat_q1.space.eta[0]
    assert sp.simplify(symbol.subleading[0, 0] - 2 * 0.5 * eta) == 0


@pytest.mark.parametrize("index", range(len(COMPOSITION.symbols)))
def test_composition_expansion_matches_matrix_products(flat_q1, rng, index):
    """Remainders of the N-term expansion decay at the predicted rate on both sides, for each shipped symbol"""
    spec = COMPOSITION.symbols[index]
    k = build_symbol(spec, flat_q1, rng)
    assert (k.order, k.rank, k.depth) == (spec.order, spec.rank, 2)
    b = build_operator(COMPOSITION.operator, flat_q1, k.rank)
    for side in ("right", "left"):
        for N in (0, 1, 2):
            result = symbol_service.composition_fidelity(k, b, side, N, SCALES, CUTOFF)
            assert result.bound == pytest.approx(k.order + b.order - N - 1 + 0.3)
            assert result.passed, f"{side} N={N}: slope {result.slope:.2f} above {result.bound:.2f}"


def test_shipped_composition_symbols_cover_orders_and_ranks():
    """Orders -1, 0, 1 and ranks 1, 2 all appear"""
    assert len(COMPOSITION.symbols) == 5
    assert {spec.order for spec in COMPOSITION.symbols} == {-1, 0, 1}
    assert {spec.rank for spec in COMPOSITION.symbols} == {1, 2}


def test_seeded_symbol_ignores_run_generator(flat_q1):
    """A symbol seed pins the draw regardless of the generator handed in"""
    spec = COMPOSITION.symbols[0]
    first = build_symbol(spec, flat_q1, np.random.default_rng(1))
    second = build_symbol(spec, flat_q1, np.random.default_rng(2))
    assert symbol_service.symbol_distance(first, second) == 0.0


def test_composition_depth_limit(flat_q1):
    """N beyond the symbol depth has no coefficients to use"""
    b = build_operator(VARIABLE_OPERATOR, flat_q1, 1)
    with pytest.raises(TruncationDepthExceeded):
        symbol_service.compose(_wave(), b, "right", 1)


def test_commutator_symbol_convergence(flat_q1):
    """[B, K] matches (1/i) nabla_{H_b} k to 10% at lambda = 32 and the error halves"""
    k = _symbol([((0,), (0,), (1,), 0, 0, 1.0), ((1,), (0,), (-1,), 0, 1, 0.5j)])
    b = build_operator(OperatorSpec(principal="(1 + 0.3*cos(y1))*eta1**2", order=2), flat_q1, 1)
    matrix = symbol_service.commutator_matrix(k, b, CUTOFF)
    predicted = symbol_service.commutator_symbol(k, b)
    errors = {s: symbol_service.extract_symbol(matrix, predicted.order, s).relative_error(predicted)
              for s in (16.0, 32.0)}
    assert errors[32.0] <= 0.1
    assert errors[16.0] >= 1.5 * errors[32.0]


def test_commutator_is_first_order_only(flat_q1):
    """Only the leading commutator term is available"""
    b = build_operator(VARIABLE_OPERATOR, flat_q1, 1)
    with pytest.raises(TruncationDepthExceeded):
        symbol_service.commutator_symbol(_wave(), b, N=2)


def test_symbol_distance_to_itself(rng):
    """Distance is zero on identical symbols and sees a perturbation"""
    k = symbol_service.random_symbol(rng, 1, 2, 0, leaf_cutoff=1, transverse_cutoff=1)
    assert symbol_service.symbol_distance(k, k) == 0.0
    assert symbol_service.symbol_distance(k, k.scaled(1.001)) > 0.0


def test_principal_symbol_is_multiplicative(rng):
    """quantize(k1) quantize(k2) carries the leaf-mode convolution of k1 and k2"""
    k1 = symbol_service.random_symbol(rng, 1, 1, 0, leaf_cutoff=1, transverse_cutoff=1)
    k2 = symbol_service.random_symbol(rng, 1, 1, 0, leaf_cutoff=1, transverse_cutoff=1)
    assert symbol_service.product_symbol_defect(k1, k2, 32, 16.0) <= 1e-10


def _evaluate(k, x, xs, y, eta):
    return k.evaluate(x, xs, y, eta)[:, 0, 0]


@pytest.mark.parametrize("rank", [1, 2])
def test_quantization_commutes_with_adjoint(rng, rank):
    """quantize(k)^* and quantize(k^*) carry the same symbol"""
    k = symbol_service.random_symbol(rng, 1, 1, 0, leaf_cutoff=1, transverse_cutoff=2, rank=rank)
    for scale in (8.0, 16.0):
        left = symbol_service.extract_symbol(symbol_service.quantize(k, 32).adjoint(), 0, scale)
        right = symbol_service.extract_symbol(symbol_service.quantize(k.adjoint(), 32), 0, scale)
        assert np.max(np.abs(left.values - right.values)) <= 1e-12
        assert left.error(k.adjoint()) <= 1e-12


def test_adjoint_needs_symmetric_mode_tables():
    """A transverse table holding c = 1 but not c = -1 has no adjoint"""
    directions = _wave().directions
    coeffs = np.zeros((1, len(directions), 1, 1, 2, 1, 1), dtype=complex)
    lopsided = TransverseSymbol(0, np.array([[0]]), np.array([[0], [1]]), directions, coeffs)
    with pytest.raises(ValueError):
        lopsided.adjoint()


def test_extraction_is_linear(rng):
    """Extracting T1 + T2 gives the sum of the two extractions"""
    k1 = symbol_service.random_symbol(rng, 1, 1, 0, leaf_cutoff=1, transverse_cutoff=2)
    k2 = symbol_service.random_symbol(rng, 1, 1, 0, leaf_cutoff=1, transverse_cutoff=2)
    T1 = symbol_service.quantize(k1, 32, leaf_cutoff=1)
    T2 = symbol_service.quantize(k2, 32, leaf_cutoff=1)
    total = symbol_service.extract_symbol(T1 + T2, 0, 16.0)
    parts = [symbol_service.extract_symbol(T, 0, 16.0) for T in (T1, T2)]
    assert np.max(np.abs(total.values - parts[0].values - parts[1].values)) <= 1e-12


def test_richardson_removes_first_correction():
    """A |eta|^{-1} term spoils plain extraction by O(1/lambda); 2E(2n) - E(n) cancels it"""
    k = symbol_service.symbol_from_terms([((0,), (0,), (1,), 0, 0, 1.0), ((0,), (0,), (1,), 1, 0, 2.0)], 1, 1, 1)
    T = symbol_service.quantize(k, 32)
    plain = symbol_service.extract_symbol(T, 1, 8.0)
    extrapolated = symbol_service.extract_symbol(T, 1, 8.0, richardson=True)
    assert plain.error(k) == pytest.approx(2.0 / 8.0, rel=1e-9)
    assert extrapolated.error(k) <= 1e-10


@pytest.mark.parametrize("geometry", ["flat_q1", "flat_q2"])
def test_compose_with_transverse_momentum(request, geometry):
    """b = eta_1: k_AB = eta_1 k + D_{y_1} k and k_BA = eta_1 k, with no further terms"""
    geom = request.getfixturevalue(geometry)
    q = geom.q
    transverse = (1,) + (0,) * (q - 1)
    k = symbol_service.symbol_from_terms([((0,), (0,), transverse, 0, 0, 1.0)], 1, q, 0, depth=2)
    b = build_operator(OperatorSpec(principal="eta1", order=1), geom, 1)
    x, xs = np.array([[0.3], [1.1]]), np.array([[0.7], [2.0]])
    y = np.array([[0.4, 1.0, 2.2][:q], [2.5, 0.3, 0.1][:q]])
    eta = np.array([[3.0, 4.0, 0.0][:q], [-5.0, 1.0, 0.0][:q]])
    wave = np.exp(1j * y[:, 0])
    for N in (1, 2):
        right = _evaluate(symbol_service.compose(k, b, "right", N), x, xs, y, eta)
        left = _evaluate(symbol_service.compose(k, b, "left", N), x, xs, y, eta)
        assert np.allclose(right, (eta[:, 0] + 1) * wave, atol=1e-10)
        assert np.allclose(left, eta[:, 0] * wave, atol=1e-10)


def test_compose_with_leaf_momentum(flat_q1):
    """b = xi_1: k_AB = D_x k and k_BA = -D_x' k"""
    k = symbol_service.symbol_from_terms([((1,), (0,), (0,), 0, 0, 1.0), ((0,), (1,), (0,), 0, 0, 0.5)], 1, 1, 0,
                                         depth=1)
    b = build_operator(OperatorSpec(principal="xi1", order=1), flat_q1, 1)
    x, xs, y, eta = (np.array([[0.3], [1.1]]), np.array([[0.7], [2.0]]), np.array([[0.4], [2.5]]),
                     np.array([[3.0], [-5.0]]))
    right = _evaluate(symbol_service.compose(k, b, "right", 1), x, xs, y, eta)
    left = _evaluate(symbol_service.compose(k, b, "left", 1), x, xs, y, eta)
    assert np.allclose(right, np.exp(1j * x[:, 0]), atol=1e-10)
    assert np.allclose(left, -0.5 * np.exp(1j * xs[:, 0]), atol=1e-10)


@pytest.mark.parametrize("principal", ["eta1", "xi1"])
def test_momentum_compositions_are_exact_on_matrices(flat_q1, principal):
    """For first-order b the N = 1 expansion reproduces both matrix products"""
    k = symbol_service.symbol_from_terms([((1,), (0,), (1,), 0, 0, 1.0), ((0,), (1,), (-2,), 0, 1, 0.5j)], 1, 1, 0,
                                         depth=1)
    b = build_operator(OperatorSpec(principal=principal, order=1), flat_q1, 1)
    for side in ("right", "left"):
        assert symbol_service.composition_fidelity(k, b, side, 1, (4, 8, 16), 32).exact


def test_commutator_with_transverse_momentum(flat_q1):
    """[D_{y_1}, K] has symbol (1/i) d_{y_1} k"""
    k = _symbol([((0,), (0,), (1,), 0, 0, 1.0), ((0,), (0,), (-2,), 0, 1, 0.5)])
    b = build_operator(OperatorSpec(principal="eta1", order=1), flat_q1, 1)
    x, xs, y, eta = (np.array([[0.3], [1.1]]), np.array([[0.7], [2.0]]), np.array([[0.4], [2.5]]),
                     np.array([[3.0], [-5.0]]))
    omega = np.sign(eta[:, 0])
    expected = np.exp(1j * y[:, 0]) - omega * np.exp(-2j * y[:, 0])
    assert np.allclose(_evaluate(symbol_service.commutator_symbol(k, b), x, xs, y, eta), expected, atol=1e-10)
