import logging
import time
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import sympy as sp

from app.core.config import settings
from app.core.exceptions import (ConfigInvalid, EvaluationAtZeroSection, NotHolonomyInvariant, OdeTolerance,
                                 StepUnstable, UnsupportedDimension)
from app.models.flows import (ConormalPoint, FlowConfig, FramePoint, GroupoidPoint, PartialConnection,
                              Trajectory, TransportCheck, VectorField)
from app.models.geometry import ModelGeometry
from app.models.symbols import SubprincipalData, TransverseSymbol, symmetric_mode_table
from app.services.geometry_service import base_connection, dual_norm_expression
from app.services.symbol_service import (covariant_derivative, symbol_distance, transverse_principal_symbol,
                                         transverse_subprincipal)
from app.utils.fourier import evaluate_directions, grid_to_modes, transverse_grid
from app.utils.symbolic import CompiledField

logger = logging.getLogger(__name__)

State = Tuple[np.ndarray, ...]
Point = Union[ConormalPoint, GroupoidPoint, np.ndarray, Sequence[float]]

# Richardson factor of the RK4 step-doubling error estimate
DOUBLING_FACTOR = 15.0


# ---------------------------------------------------------------------------
# Vector fields
# ---------------------------------------------------------------------------

def hamiltonian_field(geom: ModelGeometry, principal: Optional[sp.Expr] = None) -> VectorField:
    """X_p = sum d_xi p d_x - d_x p d_xi + d_eta p d_y - d_y p d_eta on the chart (x, y, xi, eta).

    ``principal`` defaults to the transverse norm |P^H(xi, eta)|.
    """
    space = geom.space
    p_m = dual_norm_expression(geom) if principal is None else principal
    components = [sp.diff(p_m, v) for v in space.xi] + [sp.diff(p_m, v) for v in space.eta]
    components += [-sp.diff(p_m, v) for v in space.x] + [-sp.diff(p_m, v) for v in space.y]
    momentum = tuple(range(2 * space.p + space.q, 2 * space.p + 2 * space.q))
    return VectorField(space.chart, sp.Matrix(components), momentum)


def restrict_to_conormal(field: VectorField, geom: ModelGeometry) -> VectorField:
    """The field on xi = 0 in the variables (x, y, eta); raises unless it is tangent to the conormal bundle."""
    space = geom.space
    p, q = space.p, space.q
    at_zero = {xi: 0 for xi in space.xi}
    components = [c.subs(at_zero) for c in field.components]
    normal = [sp.simplify(c) for c in components[p + q:2 * p + q]]
    if any(c != 0 for c in normal):
        raise NotHolonomyInvariant(f"Hamiltonian field leaves the conormal bundle: xi' = {normal}")
    kept = components[:p + q] + components[2 * p + q:]
    variables = tuple(space.x) + tuple(space.y) + tuple(space.eta)
    return VectorField(variables, sp.Matrix(kept), tuple(range(p + q, p + 2 * q)), field.eta_min)


def flow_data(geom: ModelGeometry, rank: int = 1) -> SubprincipalData:
    """Conormal data of the transverse norm symbol, the generator of the transverse geodesic flow."""
    return transverse_subprincipal(transverse_principal_symbol(geom, rank))


def conormal_field(data: SubprincipalData) -> VectorField:
    space = data.space
    variables = tuple(space.x) + tuple(space.y) + tuple(space.eta)
    components = data.leaf_velocity() + data.transverse_velocity() + data.force()
    return VectorField(variables, sp.Matrix(components), tuple(range(space.p + space.q, space.p + 2 * space.q)))


def lifted_flow_field(data: SubprincipalData) -> VectorField:
    """Field on groupoid points (x, x', y, eta): both leaf variables drift with the law d_xi p at their own point."""
    space = data.space
    p, q = space.p, space.q
    source = {x: xs for x, xs in zip(space.x, space.xs)}
    leaf = data.leaf_velocity()
    components = leaf + [v.subs(source, simultaneous=True) for v in leaf]
    components += data.transverse_velocity() + data.force()
    variables = tuple(space.x) + tuple(space.xs) + tuple(space.y) + tuple(space.eta)
    return VectorField(variables, sp.Matrix(components), tuple(range(2 * p + q, 2 * p + 2 * q)))


# ---------------------------------------------------------------------------
# Integration
# ---------------------------------------------------------------------------

def _shift(state: State, slope: State, h: float) -> State:
    return tuple(s + h * k for s, k in zip(state, slope))


def _rk4_step(rhs: Callable[[State], State], state: State, h: float) -> State:
    k1 = rhs(state)
    k2 = rhs(_shift(state, k1, h / 2))
    k3 = rhs(_shift(state, k2, h / 2))
    k4 = rhs(_shift(state, k3, h))
    return tuple(s + h / 6 * (a + 2 * b + 2 * c + d) for s, a, b, c, d in zip(state, k1, k2, k3, k4))


def _solve(rhs: Callable[[State], State], state: State, cfg: FlowConfig, sign: float = 1.0,
           monitor: Optional[Callable[[State], None]] = None) -> Tuple[State, List[float], List[State]]:
    """Fixed-step RK4 from 0 to sign * cfg.time; samples every ``record_stride`` steps plus both endpoints."""
    h = sign * cfg.effective_step
    times, samples = [0.0], [state]
    for step in range(1, cfg.steps + 1):
        state = _rk4_step(rhs, state, h)
        if monitor is not None:
            monitor(state)
        stride_hit = cfg.record_stride and step % cfg.record_stride == 0
        if stride_hit or step == cfg.steps:
            times.append(step * h)
            samples.append(state)
    return state, times, samples


def _doubled(cfg: FlowConfig) -> FlowConfig:
    return FlowConfig(2 * cfg.effective_step, cfg.time, cfg.tolerance, cfg.eta_min)


def _error_estimate(fine: np.ndarray, coarse: np.ndarray) -> float:
    return float(np.max(np.abs(fine - coarse))) / DOUBLING_FACTOR


def _as_state(z0: Point) -> np.ndarray:
    if isinstance(z0, (ConormalPoint, GroupoidPoint)):
        return z0.as_state()
    return np.asarray(z0, dtype=float)


def _momentum_monitor(field: VectorField, eta_min: float) -> Callable[[State], None]:
    def monitor(state: State):
        norm = field.momentum_norm(state[0])
        if np.any(norm < eta_min) or np.any(norm > 1.0 / eta_min):
            raise StepUnstable(f"|eta| left [{eta_min:g}, {1.0 / eta_min:g}] (range {norm.min():.3e}..{norm.max():.3e})")
    return monitor


def _field_rhs(field: VectorField) -> Callable[[State], State]:
    def rhs(state: State) -> State:
        try:
            return (field(state[0]),)
        except EvaluationAtZeroSection as e:
            raise StepUnstable(f"trajectory reached the zero section: {e.message}")
    return rhs


def integrate_flow(field: VectorField, z0: Point, cfg: FlowConfig) -> Trajectory:
    """RK4 trajectory of ``field``; positions are kept unwrapped so that closed forms compare directly."""
    state = _as_state(z0)
    if state.shape[-1] != field.dimension:
        raise ConfigInvalid(f"point has {state.shape[-1]} coordinates, field expects {field.dimension}")
    field(state)
    monitor = _momentum_monitor(field, cfg.eta_min) if field.momentum_index else None
    _, times, samples = _solve(_field_rhs(field), (state,), cfg, monitor=monitor)
    names = [str(v) for v in field.variables]
    return Trajectory(np.array(times), np.stack([s[0] for s in samples]), names)


def flow_map(field: VectorField, z0: Point, t: float, cfg: Optional[FlowConfig] = None) -> np.ndarray:
    """Endpoint of the flow at signed time t."""
    cfg = (cfg or FlowConfig()).with_time(abs(t))
    state = _as_state(z0)
    if t == 0:
        return state
    field(state)
    monitor = _momentum_monitor(field, cfg.eta_min) if field.momentum_index else None
    final, _, _ = _solve(_field_rhs(field), (state,), cfg, np.sign(t), monitor)
    return final[0]


def energy_drift(trajectory: Trajectory, principal: sp.Expr, variables: Sequence[sp.Symbol]) -> float:
    """max |p(z_t) - p(z_0)| along a recorded trajectory."""
    values = CompiledField(principal, variables).at(trajectory.states)[..., 0, 0]
    return float(np.max(np.abs(values - values[0])))


def intertwining_defect(data: SubprincipalData, point: GroupoidPoint, cfg: FlowConfig) -> float:
    """Distance between r_N, s_N of the lifted flow and the conormal flow of the projected points."""
    p, q = data.space.p, data.space.q
    lifted = flow_map(lifted_flow_field(data), point, cfg.time, cfg)
    base = conormal_field(data)
    worst = 0.0
    for leaf_slice, projected in ((slice(0, p), point.range_point()), (slice(p, 2 * p), point.source_point())):
        reference = flow_map(base, projected, cfg.time, cfg)
        mine = np.concatenate([lifted[leaf_slice], lifted[2 * p:]])
        worst = max(worst, float(np.max(np.abs(mine - reference))))
    logger.debug(f"lifted flow intertwining defect {worst:.3e} at t={cfg.time}")
    return worst


def homogeneity_defect(data: SubprincipalData, point: ConormalPoint, scale: float, cfg: FlowConfig) -> float:
    """Flows of degree-one Hamiltonians commute with eta -> scale * eta."""
    p, q = data.space.p, data.space.q
    field = conormal_field(data)
    start = point.as_state()
    scaled = start.copy()
    scaled[p + q:] *= scale
    first = flow_map(field, start, cfg.time, cfg)
    second = flow_map(field, scaled, cfg.time, cfg)
    first[p + q:] *= scale
    return float(np.max(np.abs(first - second)))


# ---------------------------------------------------------------------------
# Parallel transport
# ---------------------------------------------------------------------------

def _is_hermitian(matrix: sp.Matrix) -> bool:
    return all(sp.simplify(entry) == 0 for entry in matrix - matrix.H)


def subprincipal_connection(data: SubprincipalData) -> PartialConnection:
    """Partial connection nabla_{H_p} = H_p + i sigma_sub along the conormal flow."""
    field = conormal_field(data)
    gamma = CompiledField(sp.I * data.subprincipal, field.variables)

    def coefficient(state: np.ndarray) -> np.ndarray:
        return gamma.at(state).astype(complex)

    return PartialConnection(field, coefficient, data.rank, _is_hermitian(data.subprincipal))


def _transport_run(conn: PartialConnection, state: np.ndarray, cfg: FlowConfig, sign: float) -> np.ndarray:
    identity = np.broadcast_to(np.eye(conn.rank, dtype=complex), state.shape[:-1] + (conn.rank, conn.rank)).copy()

    def rhs(s: State) -> State:
        z, T = s
        try:
            velocity = conn.field(z)
        except EvaluationAtZeroSection as e:
            raise StepUnstable(f"trajectory reached the zero section: {e.message}")
        return velocity, -conn.coefficient(z) @ T

    monitor = _momentum_monitor(conn.field, cfg.eta_min) if conn.field.momentum_index else None
    final, _, _ = _solve(rhs, (state, identity), cfg, sign, monitor)
    return final[1]


def parallel_transport(conn: PartialConnection, z0: Point, cfg: FlowConfig, sign: float = 1.0) -> np.ndarray:
    """T_t(z0) solving dT/dtau = -Gamma(z_tau) T, T_0 = I; maps the fiber at z0 to the fiber at z_t."""
    state = _as_state(z0)
    if cfg.steps == 0:
        return np.broadcast_to(np.eye(conn.rank, dtype=complex), state.shape[:-1] + (conn.rank, conn.rank)).copy()
    conn.field(state)
    fine = _transport_run(conn, state, cfg, sign)
    if cfg.steps >= 2:
        error = _error_estimate(fine, _transport_run(conn, state, _doubled(cfg), sign))
        if error > cfg.tolerance:
            raise OdeTolerance(f"transport error estimate {error:.3e} exceeds tolerance {cfg.tolerance:.1e}")
    return fine


def unitarity_defect(transport: np.ndarray) -> float:
    rank = transport.shape[-1]
    gram = np.conj(np.swapaxes(transport, -1, -2)) @ transport
    return float(np.max(np.abs(gram - np.eye(rank))))


# ---------------------------------------------------------------------------
# Transport of transverse symbols
# ---------------------------------------------------------------------------

class _ConormalFields:
    """Compiled conormal data on (x, y, eta): leaf and transverse velocities, force, divergence and i sigma_sub."""

    def __init__(self, data: SubprincipalData, include_connection: bool):
        space = data.space
        args = tuple(space.x) + tuple(space.y) + tuple(space.eta)
        self.p, self.q = space.p, space.q
        self.leaf = CompiledField(sp.Matrix(data.leaf_velocity()), args)
        self.transverse = CompiledField(sp.Matrix(data.transverse_velocity()), args)
        self.force = CompiledField(sp.Matrix(data.force()), args)
        self.divergence = CompiledField(data.leaf_divergence(), args)
        trivial = all(sp.simplify(entry) == 0 for entry in data.subprincipal)
        self.gamma = CompiledField(sp.I * data.subprincipal, args) if include_connection and not trivial else None

    def _args(self, x, y, eta):
        return [x[..., i] for i in range(self.p)] + [y[..., l] for l in range(self.q)] + \
               [eta[..., l] for l in range(self.q)]

    def velocities(self, x, y, eta):
        args = self._args(x, y, eta)
        return self.leaf(*args)[..., 0], self.transverse(*args)[..., 0], self.force(*args)[..., 0]

    def leaf_velocity(self, x, y, eta):
        return self.leaf(*self._args(x, y, eta))[..., 0]

    def half_divergence(self, x, y, eta):
        return 0.5 * np.real(self.divergence(*self._args(x, y, eta))[..., 0, 0])

    def connection(self, x, y, eta):
        return self.gamma(*self._args(x, y, eta)).astype(complex)


def _check_transportable(data: SubprincipalData, k: TransverseSymbol):
    if data.order != 1:
        raise ConfigInvalid(f"transport needs a first-order generator, got order {data.order}")
    if (k.p, k.q) != (data.space.p, data.space.q):
        raise ConfigInvalid(f"symbol dimensions ({k.p}, {k.q}) do not match ({data.space.p}, {data.space.q})")
    if data.rank not in (1, k.rank):
        raise ConfigInvalid(f"connection rank {data.rank} does not act on symbols of rank {k.rank}")


def _unstable_check(eta: np.ndarray, eta_min: float):
    norm = np.linalg.norm(eta, axis=-1)
    if np.any(norm < eta_min) or np.any(norm > 1.0 / eta_min):
        raise StepUnstable(f"|eta| left [{eta_min:g}, {1.0 / eta_min:g}] during symbol transport")


def _sandwich(values: np.ndarray, left: Optional[np.ndarray], right: Optional[np.ndarray], rank: int) -> np.ndarray:
    """left^{-1} V right with V of shape (G, ..., r, r) and transports of shape (G, r0, r0)."""
    if left is None:
        return values
    if left.shape[-1] != rank:
        left = left[..., :1, :1] * np.eye(rank)
        right = right[..., :1, :1] * np.eye(rank)
    extra = values.ndim - 3
    inverse = np.linalg.inv(left).reshape((left.shape[0],) + (1,) * extra + (rank, rank))
    right = right.reshape((right.shape[0],) + (1,) * extra + (rank, rank))
    return inverse @ values @ right


def _transport_reduced(fields: _ConormalFields, k: TransverseSymbol, cfg: FlowConfig, sign: float,
                       grid: int, cutoff: int) -> TransverseSymbol:
    """Leaf-independent data: x and x' shift by the same displacement and both legs share one transport."""
    p, q = k.p, k.q
    points = transverse_grid(q, grid)
    directions = k.directions
    n_points, n_dir = len(points), len(directions)
    y0 = np.repeat(points[:, None, :], n_dir, axis=1).reshape(-1, q)
    eta0 = np.repeat(directions[None], n_points, axis=0).reshape(-1, q)
    x0 = np.zeros((len(y0), p))
    state = [y0, eta0, np.zeros((len(y0), p))]
    if fields.gamma is not None:
        state.append(np.broadcast_to(np.eye(fields.gamma.shape[0], dtype=complex),
                                     (len(y0),) + fields.gamma.shape).copy())

    def rhs(s: State) -> State:
        y, eta = s[0], s[1]
        leaf, transverse, force = fields.velocities(x0, y, eta)
        out = [transverse, force, leaf]
        if fields.gamma is not None:
            out.append(-fields.connection(x0, y, eta) @ s[3])
        return tuple(out)

    final, _, _ = _solve(rhs, tuple(state), cfg, sign, lambda s: _unstable_check(s[1], cfg.eta_min))
    y_t = final[0].reshape(n_points, n_dir, q)
    eta_t = final[1].reshape(n_points, n_dir, q)
    shift = final[2].reshape(n_points, n_dir, p)
    transport = final[3].reshape((n_points, n_dir) + final[3].shape[1:]) if fields.gamma is not None else None

    out_modes = symmetric_mode_table(q, cutoff)
    leaf = k.leaf_modes.astype(float)
    coeffs = np.zeros((k.depth + 1, n_dir, len(leaf), len(leaf), len(out_modes), k.rank, k.rank), dtype=complex)
    for w in range(n_dir):
        radius = np.linalg.norm(eta_t[:, w], axis=-1)
        omega = eta_t[:, w] / radius[:, None]
        phase_c = np.exp(1j * y_t[:, w] @ k.transverse_modes.T)
        drift = shift[:, w] @ leaf.T
        phase_ab = np.exp(1j * (drift[:, :, None] + drift[:, None, :]))
        T = transport[:, w] if transport is not None else None
        for level in range(k.depth + 1):
            K = evaluate_directions(k.coeffs[level], 0, omega)
            values = np.einsum("gabcrs,gc,gab->gabrs", K, phase_c, phase_ab)
            values *= (radius ** (k.order - level))[:, None, None, None, None]
            values = _sandwich(values, T, T, k.rank)
            coeffs[level, w] = np.moveaxis(grid_to_modes(values, points, out_modes), 0, 2)
    return TransverseSymbol(k.order, k.leaf_modes, out_modes, directions, coeffs)


def _product_points(p: int, q: int, leaf_side: int, transverse_side: int) -> np.ndarray:
    leaf_axis = 2 * np.pi * np.arange(leaf_side) / leaf_side
    transverse_axis = 2 * np.pi * np.arange(transverse_side) / transverse_side
    axes = [leaf_axis] * (2 * p) + [transverse_axis] * q
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def _transport_general(fields: _ConormalFields, k: TransverseSymbol, cfg: FlowConfig, sign: float,
                       grid: int, cutoff: int) -> TransverseSymbol:
    """Leaf-dependent data: integrate the lifted flow over the full (x, x', y, omega) grid."""
    p, q = k.p, k.q
    leaf_cutoff = k.leaf_degree + settings.LEAF_PAD
    points = _product_points(p, q, 2 * leaf_cutoff + 2, grid)
    leaf_out = symmetric_mode_table(p, leaf_cutoff)
    transverse_out = symmetric_mode_table(q, cutoff)
    out_modes = np.concatenate([np.repeat(np.repeat(leaf_out, len(leaf_out), axis=0), len(transverse_out), axis=0),
                                np.tile(np.repeat(leaf_out, len(transverse_out), axis=0), (len(leaf_out), 1)),
                                np.tile(transverse_out, (len(leaf_out) ** 2, 1))], axis=1)
    directions = k.directions
    coeffs = np.zeros((k.depth + 1, len(directions), len(leaf_out), len(leaf_out), len(transverse_out),
                       k.rank, k.rank), dtype=complex)

    for w, omega0 in enumerate(directions):
        x0, xs0, y0 = points[:, :p], points[:, p:2 * p], points[:, 2 * p:]
        eta0 = np.broadcast_to(omega0, y0.shape).copy()
        state = [x0, xs0, y0, eta0, np.zeros(len(points))]
        if fields.gamma is not None:
            identity = np.broadcast_to(np.eye(fields.gamma.shape[0], dtype=complex),
                                       (len(points),) + fields.gamma.shape)
            state += [identity.copy(), identity.copy()]

        def rhs(s: State) -> State:
            x, xs, y, eta = s[:4]
            leaf, transverse, force = fields.velocities(x, y, eta)
            out = [leaf, fields.leaf_velocity(xs, y, eta), transverse, force,
                   fields.half_divergence(x, y, eta) + fields.half_divergence(xs, y, eta)]
            if fields.gamma is not None:
                out += [-fields.connection(x, y, eta) @ s[5], -fields.connection(xs, y, eta) @ s[6]]
            return tuple(out)

        final, _, _ = _solve(rhs, tuple(state), cfg, sign, lambda s: _unstable_check(s[3], cfg.eta_min))
        x_t, xs_t, y_t, eta_t, log_j = final[:5]
        radius = np.linalg.norm(eta_t, axis=-1)
        omega = eta_t / radius[:, None]
        phase_a = np.exp(1j * x_t @ k.leaf_modes.T)
        phase_b = np.exp(1j * xs_t @ k.leaf_modes.T)
        phase_c = np.exp(1j * y_t @ k.transverse_modes.T)
        weight = np.exp(log_j)
        left = final[5] if fields.gamma is not None else None
        right = final[6] if fields.gamma is not None else None
        for level in range(k.depth + 1):
            K = evaluate_directions(k.coeffs[level], 0, omega)
            values = np.einsum("gabcrs,ga,gb,gc->grs", K, phase_a, phase_b, phase_c)
            values *= (weight * radius ** (k.order - level))[:, None, None]
            values = _sandwich(values, left, right, k.rank)
            projected = grid_to_modes(values, points, out_modes)
            coeffs[level, w] = projected.reshape(len(leaf_out), len(leaf_out), len(transverse_out), k.rank, k.rank)
    return TransverseSymbol(k.order, leaf_out, transverse_out, directions, coeffs)


def transport_symbol(data: SubprincipalData, k: TransverseSymbol, t: float, cfg: Optional[FlowConfig] = None,
                     include_connection: bool = True, symbol_grid: Optional[int] = None,
                     reduced: Optional[bool] = None) -> TransverseSymbol:
    """k_t(z) = J_t(z) T_r(z)^{-1} k(F_t z) T_s(z), the solution of d/dt k_t = nabla_{H_p} k_t with k_0 = k.

    F_t is the lifted flow, T_r and T_s solve dT/dtau = -i sigma_sub T along the range and source legs of the
    forward orbit, and log J_t integrates 1/2 (div(x) + div(x')). Levels are transported on the unit
    directions and extended by homogeneity; the result is projected onto |c| <= symbol_grid/2 - 1.
    """
    _check_transportable(data, k)
    if t == 0:
        return k
    start_time = time.time()
    cfg = (cfg or FlowConfig()).with_time(abs(t))
    grid = symbol_grid or settings.SYMBOL_GRID
    cutoff = grid // 2 - 1
    fields = _ConormalFields(data, include_connection)
    if reduced is None:
        reduced = not data.depends_on_leaf
    if reduced and data.depends_on_leaf:
        raise ConfigInvalid("the reduced transport path needs leaf-independent data")
    runner = _transport_reduced if reduced else _transport_general
    result = runner(fields, k, cfg, float(np.sign(t)), grid, cutoff)
    logger.info(f"Transported symbol to t={t:g} ({'reduced' if reduced else 'general'} path) "
                f"in {time.time() - start_time:.2f}s")
    return result


def group_law_defect(data: SubprincipalData, k: TransverseSymbol, t1: float, t2: float,
                     cfg: Optional[FlowConfig] = None) -> float:
    once = transport_symbol(data, k, t1 + t2, cfg)
    twice = transport_symbol(data, transport_symbol(data, k, t1, cfg), t2, cfg)
    return symbol_distance(once, twice)


def transport_pde_residual(data: SubprincipalData, k: TransverseSymbol, t: float,
                           deltas: Sequence[float] = (1e-2, 5e-3, 2.5e-3),
                           cfg: Optional[FlowConfig] = None) -> TransportCheck:
    """Compare (k_{t+d} - k_{t-d}) / 2d with nabla_{H_p} k_t and fit the observed order in d."""
    current = transport_symbol(data, k, t, cfg)
    generator = covariant_derivative(current, data)
    residuals = []
    for delta in deltas:
        ahead = transport_symbol(data, k, t + delta, cfg)
        behind = transport_symbol(data, k, t - delta, cfg)
        difference = (ahead - behind).scaled(1.0 / (2 * delta))
        residuals.append(symbol_distance(difference, generator))
    slope = np.polyfit(np.log(deltas), np.log(np.maximum(residuals, 1e-300)), 1)[0]
    logger.info(f"Transport PDE residuals {['%.3e' % r for r in residuals]}, observed order {slope:.2f}")
    return TransportCheck(tuple(float(d) for d in deltas), tuple(residuals), float(slope))


# ---------------------------------------------------------------------------
# Frame flow over a two-dimensional base
# ---------------------------------------------------------------------------

class _BaseGeodesic:
    """Co-geodesic field of g_B and its Christoffel symbols, compiled on y."""

    def __init__(self, geom: ModelGeometry):
        ys = geom.space.y
        inverse = geom.base_metric.inv().applyfunc(sp.simplify)
        self.inverse = CompiledField(inverse, ys)
        self.inverse_derivatives = [CompiledField(inverse.diff(y), ys) for y in ys]
        christoffel = base_connection(geom).christoffel
        self.christoffel = [CompiledField(sp.Matrix(christoffel[k]), ys) for k in range(geom.q)]
        self.metric = CompiledField(geom.base_metric, ys)
        self.q = geom.q

    def _y(self, y):
        return [y[..., l] for l in range(self.q)]

    def rhs(self, state: State) -> State:
        y, eta, frame = state
        args = self._y(y)
        inverse = self.inverse(*args)
        raised = np.einsum("...kl,...l->...k", inverse, eta)
        norm = np.sqrt(np.einsum("...k,...k->...", eta, raised))
        velocity = raised / norm[..., None]
        force = np.stack([-np.einsum("...k,...kl,...l->...", eta, d(*args), eta) / (2 * norm)
                          for d in self.inverse_derivatives], axis=-1)
        gamma = np.stack([c(*args) for c in self.christoffel], axis=-3)  # (..., k, i, m)
        frame_rate = -np.einsum("...kim,...i,...mj->...kj", gamma, velocity, frame)
        return velocity, force, frame_rate


def frame_flow(geom: ModelGeometry, point: FramePoint, cfg: FlowConfig) -> FramePoint:
    """Base co-geodesic flow of eta with the frame parallel along the geodesic (Levi-Civita of g_B)."""
    if geom.q != 2:
        raise UnsupportedDimension(f"the frame flow is implemented over a two-dimensional base, got q={geom.q}")
    flow = _BaseGeodesic(geom)
    y = np.asarray(point.y, dtype=float)
    eta = np.asarray(point.eta, dtype=float)
    frame = np.asarray(point.frame, dtype=float)
    if np.any(np.linalg.norm(eta, axis=-1) < cfg.eta_min):
        raise EvaluationAtZeroSection("frame flow started on the zero section")
    state = (y, eta, np.broadcast_to(frame, eta.shape[:-1] + (2, 2)).copy())
    monitor = lambda s: _unstable_check(s[1], cfg.eta_min)
    fine, _, _ = _solve(flow.rhs, state, cfg, monitor=monitor)
    if cfg.steps >= 2:
        coarse, _, _ = _solve(flow.rhs, state, _doubled(cfg), monitor=monitor)
        error = max(_error_estimate(a, b) for a, b in zip(fine, coarse))
        if error > cfg.tolerance:
            raise OdeTolerance(f"frame flow error estimate {error:.3e} exceeds tolerance {cfg.tolerance:.1e}")
    return FramePoint(fine[0], fine[1], fine[2])


def orthonormality_defect(geom: ModelGeometry, point: FramePoint) -> float:
    """max |V^T g_B(y) V - I|."""
    y = np.asarray(point.y, dtype=float)
    metric = CompiledField(geom.base_metric, geom.space.y)(*[y[..., l] for l in range(geom.q)])
    gram = np.einsum("...ki,...kl,...lj->...ij", point.frame, metric, point.frame)
    return float(np.max(np.abs(gram - np.eye(geom.q))))


def rotate_frame(point: FramePoint, rotation: np.ndarray) -> FramePoint:
    """The SO(q) action (v_j) -> (sum_i v_i a_ij)."""
    return FramePoint(point.y, point.eta, np.asarray(point.frame) @ rotation)
