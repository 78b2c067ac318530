import logging
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sparse
import sympy as sp

from app.core.config import settings
from app.core.exceptions import ConfigInvalid, CutoffMismatch, NonHermitianBlock, ProbeOutOfRange
from app.models.dirac import DiracAssembly
from app.models.evolution import EgorovReport, Hamiltonian
from app.models.flows import FlowConfig
from app.models.geometry import BundleConnection, ModelGeometry
from app.models.operators import BlockOperator, SpectralBlocks
from app.models.symbols import SubprincipalData, TransverseSymbol
from app.services.flow_service import transport_symbol
from app.services.symbol_service import (discretize, extract_symbol, laplace_symbol, quantize, sqrt_subprincipal,
                                         transverse_subprincipal)
from app.utils.fourier import ModeLattice
from app.utils.symbolic import CompiledField

logger = logging.getLogger(__name__)

STABILITY_LIMIT = 0.1


def _dense(block) -> np.ndarray:
    return block.toarray() if sparse.issparse(block) else np.asarray(block)


def _spectral_blocks(L: BlockOperator, width: int, threads: int):
    """eigh of every diagonal block of L + I after checking Hermiticity on interior modes."""
    mask = L.lattice.basis_mask(L.lattice.interior(width))
    keys = L.leaf_keys()

    def decompose(key):
        block = _dense(L.block(key, key))
        defect = float(np.max(np.abs((block - block.conj().T)[np.ix_(mask, mask)]))) if np.any(mask) else 0.0
        values, vectors = np.linalg.eigh((block + block.conj().T) / 2 + np.eye(block.shape[0]))
        return key, defect, values, vectors

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(decompose, keys))
    else:
        results = [decompose(key) for key in keys]

    spectra = SpectralBlocks()
    worst = 0.0
    for key, defect, values, vectors in results:
        worst = max(worst, defect)
        if defect > settings.EXACTNESS_TOLERANCE:
            raise NonHermitianBlock(f"leaf block {key} has Hermiticity defect {defect:.3e}")
        spectra.eigenvalues[key] = values
        spectra.eigenvectors[key] = vectors
    return spectra, worst


def _root_operator(L: BlockOperator, spectra: SpectralBlocks) -> BlockOperator:
    blocks = {}
    for key, vectors in spectra.eigenvectors.items():
        roots = np.sqrt(np.clip(spectra.eigenvalues[key], 0.0, None))
        blocks[(key, key)] = (vectors * roots[None, :]) @ vectors.conj().T
    return BlockOperator(L.leaf_lattice, L.lattice, blocks)


def assemble_hamiltonian(source, cutoff: Optional[int] = None, leaf_cutoff: int = 1,
                         bundle: Optional[BundleConnection] = None, threads: int = 1) -> Hamiltonian:
    """P = (Delta_E + I)^{1/2} for a ModelGeometry, or (D_E^2 + I)^{1/2} for a DiracAssembly, block by block."""
    start_time = time.time()
    if isinstance(source, DiracAssembly):
        D = source.D
        L = D @ D
        width = 2 * source.width
        kind = "dirac"
    elif isinstance(source, ModelGeometry):
        if cutoff is None:
            raise ConfigInvalid("a transverse cutoff is required for the scalar Hamiltonian")
        bundle = bundle or BundleConnection.trivial(1)
        b = laplace_symbol(source, bundle)
        lattice = ModeLattice(source.q, cutoff, bundle.rank)
        L = discretize(b, ModeLattice(source.p, leaf_cutoff), lattice)
        width = max(source.degree, 0)
        kind = "laplace"
    else:
        raise ConfigInvalid(f"cannot build a Hamiltonian from {type(source).__name__}")

    spectra, defect = _spectral_blocks(L, width, threads)
    P = _root_operator(L, spectra)
    P.metadata.update({"operator": f"sqrt({kind} + I)"})
    logger.info(f"Hamiltonian ({kind}) with {len(spectra.eigenvalues)} leaf blocks of size "
                f"{L.lattice.dimension} diagonalized in {time.time() - start_time:.2f}s")
    return Hamiltonian(P, spectra, kind, defect, width)


def heisenberg_evolve(hamiltonian: Hamiltonian, K: BlockOperator, t: float, threads: int = 1) -> BlockOperator:
    """Block (a, b) of e^{itP} K e^{-itP} is U_a K_ab U_b^H with U = e^{itP} from the stored eigendata."""
    P = hamiltonian.P
    if K.lattice != P.lattice or K.output_lattice != P.lattice:
        raise CutoffMismatch(f"operator lattice cutoff {K.lattice.cutoff} does not match the Hamiltonian's "
                             f"{P.lattice.cutoff}")
    known = set(hamiltonian.leaf_keys)
    for a, b in K.blocks:
        if a not in known or b not in known:
            raise CutoffMismatch(f"leaf modes {a}, {b} lie outside the Hamiltonian's leaf lattice")
    if t == 0:
        return K

    propagators = {key: hamiltonian.propagator(key, t) for key in known}

    def evolve(item):
        (a, b), block = item
        return (a, b), propagators[a] @ _dense(block) @ propagators[b].conj().T

    items = list(K.blocks.items())
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(evolve, items))
    else:
        results = [evolve(item) for item in items]
    return BlockOperator(P.leaf_lattice, P.lattice, dict(results), metadata=dict(K.metadata))


def scalar_transport_data(geom: ModelGeometry, bundle: Optional[BundleConnection] = None) -> SubprincipalData:
    """Conormal data of (Delta_E + I)^{1/2}: principal |eta|_{g_B} and half the Laplacian's subprincipal."""
    return sqrt_subprincipal(transverse_subprincipal(laplace_symbol(geom, bundle)))


def decay_exponent(scales: Sequence[float], differences: Sequence[float]):
    """Fit d(lambda) = C lambda^{-rho}; returns (rho, rms residual of the log-log fit)."""
    logs = np.log(np.asarray(scales, dtype=float))
    values = np.log(np.maximum(np.asarray(differences, dtype=float), 1e-300))
    slope, intercept = np.polyfit(logs, values, 1)
    residual = float(np.sqrt(np.mean((values - (slope * logs + intercept)) ** 2)))
    return float(-slope), residual


def egorov_differences(hamiltonian: Hamiltonian, k: TransverseSymbol, transported: TransverseSymbol, t: float,
                       scales: Sequence[float], transverse_cutoff: int = 2, threads: int = 1):
    cutoff = hamiltonian.P.lattice.cutoff
    for scale in scales:
        if scale > cutoff / 2:
            raise ProbeOutOfRange(f"scale {scale} exceeds half the cutoff {cutoff}")
    K = quantize(k, cutoff, leaf_cutoff=hamiltonian.P.leaf_lattice.cutoff, threads=threads)
    evolved = heisenberg_evolve(hamiltonian, K, t, threads)
    return [extract_symbol(evolved, k.order, scale, transverse_cutoff).error(transported) for scale in scales]


def egorov_compare(hamiltonian: Hamiltonian, data: SubprincipalData, k: TransverseSymbol, t: float,
                   scales: Sequence[float], include_connection: bool = True, transverse_cutoff: int = 2,
                   cfg: Optional[FlowConfig] = None, threads: int = 1) -> EgorovReport:
    """Distances d(lambda) between the extracted symbol of Phi_t(quantize(k)) and transport_symbol(k, t).

    With ``include_connection`` off the conjugation by the subprincipal transport is dropped.
    """
    start_time = time.time()
    transported = transport_symbol(data, k, t, cfg, include_connection=include_connection)
    differences = egorov_differences(hamiltonian, k, transported, t, scales, transverse_cutoff, threads)
    rho, residual = decay_exponent(scales, differences)
    logger.info(f"Egorov comparison at t={t:g} (connection {'on' if include_connection else 'off'}): "
                f"d = {['%.3e' % d for d in differences]}, rho = {rho:.2f}, "
                f"completed in {time.time() - start_time:.2f}s")
    return EgorovReport(float(t), tuple(float(s) for s in scales), tuple(differences), rho, residual,
                        transported, include_connection)


def doubling_stability(report: EgorovReport, doubled: Hamiltonian, k: TransverseSymbol,
                       transverse_cutoff: int = 2, threads: int = 1) -> float:
    """Largest relative change of d(lambda) over lambda <= cutoff/4 against a Hamiltonian at twice the cutoff."""
    cutoff = doubled.P.lattice.cutoff // 2
    kept = [s for s in report.scales if s <= cutoff / 4]
    if not kept:
        return 0.0
    again = egorov_differences(doubled, k, report.transported, report.t, kept, transverse_cutoff, threads)
    before = [report.difference_at(s) for s in kept]
    worst = float(max(abs(b - a) / max(a, 1e-300) for a, b in zip(before, again)))
    report.stability = worst
    logger.info(f"Cutoff doubling changes d(lambda) by at most {100 * worst:.1f}% "
                f"(limit {100 * STABILITY_LIMIT:.0f}%)")
    return worst


def closed_form_evolution(geom: ModelGeometry, K: BlockOperator, t: float,
                          bundle: Optional[BundleConnection] = None) -> BlockOperator:
    """Phi_t(K) for constant-coefficient models, where Delta_E e^{i zeta.z} = b(zeta) e^{i zeta.z} exactly.

    Entry ((a, m), (b, n)) picks up exp(it (w(a, m) - w(b, n))) with w = (b + 1)^{1/2}.
    """
    bundle = bundle or BundleConnection.trivial(1)
    symbol = laplace_symbol(geom, bundle).full()
    space = geom.space
    if any(z in symbol.free_symbols for z in space.coordinates):
        raise ConfigInvalid("the closed-form evolution needs constant coefficients")
    if any(symbol[i, j] != 0 for i in range(symbol.shape[0]) for j in range(symbol.shape[1]) if i != j):
        raise ConfigInvalid("the closed-form evolution needs a diagonal Laplacian")
    field = CompiledField(sp.Matrix([symbol[i, i] for i in range(symbol.shape[0])]), space.momenta)
    lattice = K.lattice

    def frequencies(key) -> np.ndarray:
        leaf = np.broadcast_to(np.asarray(key, dtype=float), (lattice.size, geom.p))
        args = [leaf[:, j] for j in range(geom.p)] + [lattice.modes[:, k].astype(float) for k in range(geom.q)]
        values = np.real(field(*args)[..., 0])
        return np.sqrt(values + 1.0).reshape(-1)

    cache = {}
    blocks = {}
    for (a, b), block in K.blocks.items():
        for key in (a, b):
            if key not in cache:
                cache[key] = frequencies(key)
        phase = np.exp(1j * t * (cache[a][:, None] - cache[b][None, :]))
        blocks[(a, b)] = _dense(block) * phase
    return BlockOperator(K.leaf_lattice, K.lattice, blocks, K.output_lattice, dict(K.metadata))


def oracle_defect(hamiltonian: Hamiltonian, geom: ModelGeometry, k: TransverseSymbol, t: float,
                  bundle: Optional[BundleConnection] = None, threads: int = 1) -> float:
    """Largest entry of the pipeline's Phi_t(K) minus the closed-form evolution."""
    K = quantize(k, hamiltonian.P.lattice.cutoff, leaf_cutoff=hamiltonian.P.leaf_lattice.cutoff, threads=threads)
    evolved = heisenberg_evolve(hamiltonian, K, t, threads)
    exact = closed_form_evolution(geom, K, t, bundle)
    return (evolved - exact).max_abs()


class EgorovService:
    """Heisenberg evolution under one Hamiltonian, compared with transport of symbols along its flow.

    P is diagonalized once in ``__init__``; every quantization, evolution and comparison reuses the eigendata.
    """

    def __init__(self, source, data: SubprincipalData, cutoff: Optional[int] = None, leaf_cutoff: int = 1,
                 bundle: Optional[BundleConnection] = None, threads: Optional[int] = None):
        self.source = source
        self.data = data
        self.bundle = bundle
        self.threads = threads or settings.DEFAULT_THREADS
        self.hamiltonian = assemble_hamiltonian(source, cutoff, leaf_cutoff, bundle, self.threads)

    @classmethod
    def scalar(cls, geom: ModelGeometry, cutoff: int, leaf_cutoff: int = 1, bundle: Optional[BundleConnection] = None,
               threads: Optional[int] = None) -> "EgorovService":
        """P = (Delta_E + I)^{1/2} with its conormal transport data."""
        return cls(geom, scalar_transport_data(geom, bundle), cutoff, leaf_cutoff, bundle, threads)

    @property
    def cutoff(self) -> int:
        return self.hamiltonian.P.lattice.cutoff

    @property
    def leaf_cutoff(self) -> int:
        return self.hamiltonian.P.leaf_lattice.cutoff

    def quantize(self, k: TransverseSymbol) -> BlockOperator:
        return quantize(k, self.cutoff, leaf_cutoff=self.leaf_cutoff, threads=self.threads)

    def evolve(self, K: BlockOperator, t: float) -> BlockOperator:
        return heisenberg_evolve(self.hamiltonian, K, t, self.threads)

    def compare(self, k: TransverseSymbol, t: float, scales: Sequence[float], include_connection: bool = True,
                cfg: Optional[FlowConfig] = None) -> EgorovReport:
        return egorov_compare(self.hamiltonian, self.data, k, t, scales, include_connection, cfg=cfg,
                              threads=self.threads)

    def group_defect(self, k: TransverseSymbol, t: float) -> float:
        """|Phi_t(K) - Phi_{t/2}(Phi_{t/2}(K))|_max."""
        K = self.quantize(k)
        once = self.evolve(K, t)
        twice = self.evolve(self.evolve(K, t / 2), t / 2)
        return (once - twice).max_abs()

    def oracle(self, k: TransverseSymbol, t: float) -> float:
        if not isinstance(self.source, ModelGeometry):
            raise ConfigInvalid("the closed-form oracle exists for scalar Laplacians only")
        return oracle_defect(self.hamiltonian, self.source, k, t, self.bundle, self.threads)

    def doubled(self) -> "EgorovService":
        if not isinstance(self.source, ModelGeometry):
            raise ConfigInvalid("cutoff doubling is available for scalar Laplacians only")
        return EgorovService(self.source, self.data, 2 * self.cutoff, self.leaf_cutoff, self.bundle, self.threads)

    def stability(self, report: EgorovReport, k: TransverseSymbol) -> float:
        return doubling_stability(report, self.doubled().hamiltonian, k, threads=self.threads)
