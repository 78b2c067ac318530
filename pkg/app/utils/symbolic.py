import numpy as np
import sympy as sp
from typing import Dict, List, Sequence, Tuple


class PhaseSpace:
    """Symbols of the foliated chart: leaf coordinates x, source leaf coordinates xs,
    transverse coordinates y and the dual momenta xi, eta."""

    def __init__(self, p: int, q: int):
        self.p = p
        self.q = q
        self.x = sp.symbols(f"x1:{p + 1}", real=True)
        self.xs = sp.symbols(f"xs1:{p + 1}", real=True)
        self.y = sp.symbols(f"y1:{q + 1}", real=True)
        self.xi = sp.symbols(f"xi1:{p + 1}", real=True)
        self.eta = sp.symbols(f"eta1:{q + 1}", real=True)

    @property
    def coordinates(self) -> Tuple[sp.Symbol, ...]:
        return tuple(self.x) + tuple(self.y)

    @property
    def momenta(self) -> Tuple[sp.Symbol, ...]:
        return tuple(self.xi) + tuple(self.eta)

    @property
    def chart(self) -> Tuple[sp.Symbol, ...]:
        return self.coordinates + self.momenta

    def namespace(self) -> Dict[str, sp.Symbol]:
        """Names accepted in config strings."""
        names = {}
        for symbol in self.x + self.xs + self.y + self.xi + self.eta:
            names[str(symbol)] = symbol
        return names

    def parse(self, text: str) -> sp.Expr:
        return sp.sympify(text, locals=self.namespace())


def to_sympy_number(value: complex) -> sp.Expr:
    value = complex(value)
    if value.imag == 0.0:
        return sp.Float(value.real)
    return sp.Float(value.real) + sp.I * sp.Float(value.imag)


def _is_zero(expr: sp.Expr) -> bool:
    return expr == 0 or expr == sp.Float(0.0)


class CompiledField:
    """Matrix-valued sympy expression compiled entrywise with numpy broadcasting.

    Calling the field with arrays for each argument returns an array of shape
    ``broadcast_shape + (rows, cols)``.
    """

    def __init__(self, expr, args: Sequence[sp.Symbol]):
        if not isinstance(expr, sp.MatrixBase):
            expr = sp.Matrix([[expr]])
        self.expr = sp.ImmutableMatrix(expr)
        self.args = tuple(args)
        self.shape = self.expr.shape
        self._entries: List[Tuple[int, int, object]] = []
        self.is_complex = False
        for i in range(self.shape[0]):
            for j in range(self.shape[1]):
                entry = self.expr[i, j]
                if _is_zero(entry):
                    continue
                self.is_complex = self.is_complex or entry.has(sp.I)
                self._entries.append((i, j, sp.lambdify(self.args, entry, modules="numpy")))

    def __call__(self, *values) -> np.ndarray:
        arrays = [np.asarray(v, dtype=float) for v in values]
        shape = np.broadcast_shapes(*[a.shape for a in arrays]) if arrays else ()
        dtype = complex if self.is_complex else float
        out = np.zeros(shape + self.shape, dtype=dtype)
        for i, j, func in self._entries:
            value = np.asarray(func(*arrays))
            if np.iscomplexobj(value) and dtype is float:
                out = out.astype(complex)
                dtype = complex
            out[..., i, j] = np.broadcast_to(value, shape)
        return out

    def at(self, points: np.ndarray) -> np.ndarray:
        """Evaluate at points given as an array whose last axis runs over the arguments."""
        points = np.asarray(points, dtype=float)
        return self(*[points[..., k] for k in range(points.shape[-1])])

    def scalar(self, *values) -> np.ndarray:
        return self(*values)[..., 0, 0]


def trig_sum(terms, variables: Sequence[sp.Symbol], shape: Tuple[int, int]) -> sp.Matrix:
    """Build sum_m C_m cos(m.y) + S_m sin(m.y) from (mode, cos, sin) triples."""
    total = sp.zeros(*shape)
    for mode, cos_coef, sin_coef in terms:
        phase = sum(int(k) * v for k, v in zip(mode, variables))
        for coef, wave in ((cos_coef, sp.cos(phase)), (sin_coef, sp.sin(phase))):
            if coef is None:
                continue
            coef = np.asarray(coef)
            for i in range(shape[0]):
                for j in range(shape[1]):
                    if coef[i, j] != 0:
                        total[i, j] += to_sympy_number(coef[i, j]) * wave
    return total


def homogeneous_parts(expr: sp.Expr, momenta: Sequence[sp.Symbol], degrees: Sequence[int]) -> Dict[int, sp.Expr]:
    """Split a polynomial in the momenta into homogeneous components of the given degrees."""
    t = sp.Symbol("_t", positive=True)
    scaled = sp.expand(expr.subs({m: t * m for m in momenta}, simultaneous=True))
    return {d: scaled.coeff(t, d) for d in degrees}


def matrix_homogeneous_parts(matrix: sp.Matrix, momenta, degrees) -> Dict[int, sp.Matrix]:
    parts = {d: sp.zeros(*matrix.shape) for d in degrees}
    for i in range(matrix.shape[0]):
        for j in range(matrix.shape[1]):
            split = homogeneous_parts(matrix[i, j], momenta, degrees)
            for d in degrees:
                parts[d][i, j] = split[d]
    return parts
