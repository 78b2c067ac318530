from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd

from app.models.operators import BlockOperator, LeafKey, SpectralBlocks
from app.models.symbols import TransverseSymbol


@dataclass(frozen=True, eq=False)
class Hamiltonian:
    """P = (L + I)^{1/2} per leaf block, with L = Delta_E or D_E^2, and the eigendata it was built from."""
    P: BlockOperator
    spectra: SpectralBlocks
    kind: str
    hermiticity_defect: float
    width: int = 0

    @property
    def leaf_keys(self):
        return list(self.spectra.eigenvalues)

    def frequencies(self, key: LeafKey) -> np.ndarray:
        return np.sqrt(np.clip(self.spectra.eigenvalues[key], 0.0, None))

    def propagator(self, key: LeafKey, t: float) -> np.ndarray:
        """e^{itP} on the block of leaf mode ``key``."""
        vectors = self.spectra.eigenvectors[key]
        return (vectors * np.exp(1j * t * self.frequencies(key))[None, :]) @ vectors.conj().T


@dataclass
class EgorovReport:
    """Per-scale distances between the extracted symbol of e^{itP} K e^{-itP} and the transported symbol."""
    t: float
    scales: Tuple[float, ...]
    differences: Tuple[float, ...]
    rho: float
    fit_residual: float
    transported: Optional[TransverseSymbol] = None
    include_connection: bool = True
    oracle_defect: Optional[float] = None
    stability: Optional[float] = None
    extras: Dict[str, float] = field(default_factory=dict)

    def difference_at(self, scale: float) -> float:
        return self.differences[self.scales.index(scale)]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"lambda": self.scales, "d": self.differences})

    def snapshot(self, limit: int = 8) -> Dict[str, list]:
        """Leading coefficients of the transported symbol on the first ``limit`` directions, as [re, im] pairs."""
        if self.transported is None:
            return {}
        coeffs = self.transported.coeffs[0, :limit]
        flat = coeffs.reshape(coeffs.shape[0], -1)
        return {"directions": self.transported.directions[:limit].tolist(),
                "coefficients": [[[float(v.real), float(v.imag)] for v in row] for row in flat]}
