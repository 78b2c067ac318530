import numpy as np
from typing import Tuple

from app.utils.symbolic import CompiledField


def transverse_grid(q: int, size: int) -> np.ndarray:
    """Uniform grid on T^q, shape (size**q, q), ordered lexicographically."""
    axis = 2 * np.pi * np.arange(size) / size
    mesh = np.meshgrid(*([axis] * q), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


class ModeLattice:
    """Box |n|_inf <= cutoff in Z^dim with lexicographic ordering.

    The basis index of (mode, component) for a rank-r bundle is mode_index * rank + component.
    """

    def __init__(self, dim: int, cutoff: int, rank: int = 1):
        self.dim = dim
        self.cutoff = cutoff
        self.rank = rank
        axes = [np.arange(-cutoff, cutoff + 1)] * dim
        mesh = np.meshgrid(*axes, indexing="ij")
        self.modes = np.stack([m.ravel() for m in mesh], axis=-1).astype(int)

    @property
    def size(self) -> int:
        return len(self.modes)

    @property
    def dimension(self) -> int:
        return self.size * self.rank

    def index(self, modes) -> np.ndarray:
        """Lattice indices of the given modes; -1 where a mode lies outside the box."""
        modes = np.asarray(modes, dtype=int)
        shifted = modes + self.cutoff
        side = 2 * self.cutoff + 1
        valid = np.all((shifted >= 0) & (shifted < side), axis=-1)
        clipped = np.clip(shifted, 0, side - 1)
        flat = np.zeros(clipped.shape[:-1], dtype=int)
        for k in range(self.dim):
            flat = flat * side + clipped[..., k]
        return np.where(valid, flat, -1)

    def interior(self, width: int) -> np.ndarray:
        """Mode mask of the box shrunk by ``width`` shells."""
        return np.max(np.abs(self.modes), axis=-1) <= self.cutoff - width

    def basis_mask(self, mode_mask: np.ndarray) -> np.ndarray:
        return np.repeat(mode_mask, self.rank)

    def padded(self, width: int) -> "ModeLattice":
        return ModeLattice(self.dim, self.cutoff + width, self.rank)

    def embedding(self, other: "ModeLattice") -> np.ndarray:
        """Basis indices in ``other`` of this lattice's basis vectors."""
        mode_idx = other.index(self.modes)
        return (mode_idx[:, None] * self.rank + np.arange(self.rank)[None, :]).ravel()

    def __eq__(self, other) -> bool:
        return (isinstance(other, ModeLattice) and self.dim == other.dim
                and self.cutoff == other.cutoff and self.rank == other.rank)

    def __hash__(self) -> int:
        return hash((self.dim, self.cutoff, self.rank))


def excision(radius) -> np.ndarray:
    """Smooth cutoff: 0 for radius <= 1/2, 1 for radius >= 1."""
    r = np.asarray(radius, dtype=float)

    def bump(t):
        safe = np.where(t > 0, t, 1.0)
        return np.where(t > 0, np.exp(-1.0 / safe), 0.0)

    left = bump(r - 0.5)
    right = bump(1.0 - r)
    return left / (left + right)


def coefficient_modes(field: CompiledField, dim: int, grid: int, tolerance: float) -> Tuple[np.ndarray, np.ndarray]:
    """Fourier modes of a matrix field on T^dim sampled on a grid^dim lattice.

    Returns (modes (M, dim), coefficients (M, rows, cols)); modes whose magnitude falls below
    ``tolerance`` relative to the largest coefficient are dropped.
    """
    points = transverse_grid(dim, grid)
    values = field(*[points[:, k] for k in range(dim)])
    values = values.reshape((grid,) * dim + field.shape)
    spectrum = np.fft.fftn(values, axes=tuple(range(dim))) / grid ** dim
    freqs = np.fft.fftfreq(grid, d=1.0 / grid).astype(int)
    mesh = np.meshgrid(*([freqs] * dim), indexing="ij")
    modes = np.stack([m.ravel() for m in mesh], axis=-1)
    coefficients = spectrum.reshape((-1,) + field.shape)
    magnitude = np.max(np.abs(coefficients), axis=(1, 2))
    scale = max(float(np.max(magnitude)), 1.0)
    keep = (magnitude > tolerance * scale) & (np.max(np.abs(modes), axis=-1) < grid // 2)
    modes, coefficients = modes[keep], coefficients[keep]
    order = np.lexsort(modes.T[::-1]) if len(modes) else np.arange(0)
    return modes[order], coefficients[order]


def fourier_matrix(points: np.ndarray, modes: np.ndarray) -> np.ndarray:
    """W[g, m] = exp(i m . y_g)."""
    return np.exp(1j * points @ np.asarray(modes, dtype=float).T)


def grid_to_modes(values: np.ndarray, points: np.ndarray, modes: np.ndarray) -> np.ndarray:
    """Project samples on a uniform grid (first axis) onto the given modes."""
    w = fourier_matrix(points, modes)
    flat = values.reshape(values.shape[0], -1)
    return (w.conj().T @ flat / len(points)).reshape((len(modes),) + values.shape[1:])


def modes_to_grid(coefficients: np.ndarray, points: np.ndarray, modes: np.ndarray) -> np.ndarray:
    w = fourier_matrix(points, modes)
    flat = coefficients.reshape(coefficients.shape[0], -1)
    return (w @ flat).reshape((len(points),) + coefficients.shape[1:])


def direction_grid(q: int, n_theta: int) -> np.ndarray:
    """Directions on S^{q-1}: (+1, -1) for q=1, n_theta equispaced angles for q=2."""
    if q == 1:
        return np.array([[1.0], [-1.0]])
    theta = 2 * np.pi * np.arange(n_theta) / n_theta
    return np.stack([np.cos(theta), np.sin(theta)], axis=-1)


def angular_wavenumbers(n_theta: int) -> np.ndarray:
    k = np.fft.fftfreq(n_theta, d=1.0 / n_theta)
    if n_theta % 2 == 0:
        k[n_theta // 2] = 0.0
    return k


def differentiate_directions(values: np.ndarray, axis: int) -> np.ndarray:
    """Spectral d/dtheta of samples on the circle direction grid."""
    values = np.moveaxis(values, axis, -1)
    k = angular_wavenumbers(values.shape[-1])
    derivative = np.fft.ifft(1j * k * np.fft.fft(values, axis=-1), axis=-1)
    return np.moveaxis(derivative, -1, axis)


def evaluate_directions(values: np.ndarray, axis: int, omega: np.ndarray) -> np.ndarray:
    """Values at unit directions omega (shape (..., q)) from samples on the direction grid.

    q=1 selects the sign; q=2 uses trigonometric interpolation. The direction axis is replaced by
    the leading shape of omega.
    """
    omega = np.atleast_2d(np.asarray(omega, dtype=float))
    values = np.moveaxis(values, axis, 0)
    if omega.shape[-1] == 1:
        return values[np.where(omega[..., 0] >= 0, 0, 1)]
    n_theta = values.shape[0]
    theta = np.arctan2(omega[..., 1], omega[..., 0])
    spectrum = np.fft.fft(values, axis=0) / n_theta
    k = np.fft.fftfreq(n_theta, d=1.0 / n_theta)
    phases = np.exp(1j * theta[..., None] * k)
    if n_theta % 2 == 0:
        phases[..., n_theta // 2] = np.cos(theta * n_theta / 2)
    flat = spectrum.reshape(n_theta, -1)
    out = phases.reshape(-1, n_theta) @ flat
    return out.reshape(theta.shape + values.shape[1:])
