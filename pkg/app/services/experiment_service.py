import logging
import os
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional, Union

import numpy as np
import pandas as pd
import sympy as sp

from app.core.config import settings
from app.core.exceptions import AssertionFailed, ConfigInvalid, LabError
from app.models.flows import ConormalPoint, FlowConfig, FramePoint, GroupoidPoint
from app.models.geometry import ModelGeometry
from app.models.symbols import ScalarFullSymbol, TransverseSymbol
from app.schemas.experiment import ExperimentConfig, OperatorSpec, SymbolSpec, load_config
from app.schemas.report import CheckResult, RunArtifacts, ScenarioInfo, ScenarioReport
from app.services import dirac_service, evolution_service, flow_service, geometry_service, symbol_service
from app.services.dirac_service import DiracService
from app.services.evolution_service import EgorovService
from app.utils.export import export_blocks, sha256_file, write_json, write_table
from app.utils.fourier import transverse_grid
from app.utils.symbolic import CompiledField

logger = logging.getLogger(__name__)

SCENARIOS: Dict[str, ScenarioInfo] = {info.name: info for info in [
    ScenarioInfo(name="geometry-checks", description="frames, transverse connection, divergence and tau identities",
                 dimensions="any p, q", runtime="~10s", anchor="bundle-like metric, mean curvature tau"),
    ScenarioInfo(name="flow-invariants", description="Hamiltonian, first integrals, equivariance, transport PDE",
                 dimensions="any p, q (frame checks q=2)", runtime="~1min",
                 anchor="q first integrals; commutes with the transverse geodesic flow"),
    ScenarioInfo(name="symbol-composition", description="composition expansions against matrix products",
                 dimensions="q=1", runtime="~2min", anchor="asymptotic expansions of k_AB and k_BA"),
    ScenarioInfo(name="commutator", description="extracted commutator symbol against nabla_{H_b} k",
                 dimensions="q=1", runtime="~1min", anchor="sigma([B, A]) = (1/i) nabla_{H_b} sigma(A)"),
    ScenarioInfo(name="dirac-adjoint", description="Clifford relations, spin connection, adjoint identity",
                 dimensions="q=2", runtime="~1min", anchor="(D'_E)* = D'_E - c(tau)"),
    ScenarioInfo(name="dirac-symbols", description="principal and subprincipal symbols of D_E^2 three ways",
                 dimensions="q=2", runtime="~2min", anchor="a_2 = g(P^H xi, P^H xi); closed-form p_sub"),
    ScenarioInfo(name="signature-isotypic", description="signature identity and fibre-mode decomposition",
                 dimensions="q=2", runtime="~1min", anchor="D_{F(Q)*} = d_H + d_H* - (eps_tau + i_tau)/2"),
    ScenarioInfo(name="egorov-scalar", description="Heisenberg evolution against transported symbols",
                 dimensions="q=1", runtime="~3min", anchor="k_t = Ad(alpha_t)*(k)"),
    ScenarioInfo(name="egorov-dirac", description="Egorov for <D_E> with the subprincipal connection",
                 dimensions="q=2", runtime="~15min", anchor="sigma_sub(<D_E>) coincides with the tilde connection"),
]}

EXACT = settings.EXACTNESS_TOLERANCE


def list_scenarios() -> List[ScenarioInfo]:
    return list(SCENARIOS.values())


def build_symbol(spec: SymbolSpec, geom: ModelGeometry, rng: np.random.Generator) -> TransverseSymbol:
    if spec.terms:
        terms = [term.as_tuple(spec.rank) for term in spec.terms]
        return symbol_service.symbol_from_terms(terms, geom.p, geom.q, spec.order, spec.rank, spec.depth)
    random = spec.random
    if spec.seed is not None:
        rng = np.random.default_rng(spec.seed)
    return symbol_service.random_symbol(rng, geom.p, geom.q, spec.order, spec.depth, random.leaf_cutoff,
                                        random.transverse_cutoff, spec.rank, random.n_modes, random.harmonics)


def build_operator(spec: OperatorSpec, geom: ModelGeometry, rank: int) -> ScalarFullSymbol:
    space = geom.space
    try:
        principal = space.parse(spec.principal)
        if isinstance(spec.subleading, str):
            subleading = space.parse(spec.subleading) * sp.eye(rank)
        else:
            subleading = sp.Matrix([[space.parse(entry) for entry in row] for row in spec.subleading])
    except (sp.SympifyError, SyntaxError, TypeError) as e:
        raise ConfigInvalid(f"operator symbol could not be parsed: {str(e)}")
    if subleading.shape != (rank, rank):
        raise ConfigInvalid(f"operator subleading part has shape {subleading.shape}, expected {(rank, rank)}")
    return ScalarFullSymbol(space, principal, subleading, spec.order)


class ExperimentService:
    """Runs one scenario: builds the model from a config, evaluates its invariants, writes the report."""

    def __init__(self, config: ExperimentConfig, output_dir: Optional[str] = None, seed: Optional[int] = None,
                 threads: Optional[int] = None):
        self.config = config
        self.seed = seed if seed is not None else (config.seed if config.seed is not None else settings.DEFAULT_SEED)
        self.threads = threads or settings.DEFAULT_THREADS
        # --out, then the OUTPUT_DIR environment variable, then the config file
        base = output_dir or os.getenv("OUTPUT_DIR") or config.output_dir or settings.OUTPUT_DIR
        self.output_dir = Path(base) / config.scenario
        self.rng = np.random.default_rng(self.seed)
        self.checks: List[CheckResult] = []
        self.metrics: Dict[str, object] = {}
        self.tables: Dict[str, pd.DataFrame] = {}
        self.blocks = {}
        self.timings: Dict[str, float] = {}
        self.geometry = config.geometry.build()
        self.bundle = config.bundle.build()
        self.anchor = SCENARIOS[config.scenario].anchor

    # -- bookkeeping ---------------------------------------------------------

    def check(self, name: str, value: float, bound: float, comparison: str = "<=", anchor: str = ""):
        value = float(value)
        passed = value <= bound if comparison == "<=" else value >= bound
        self.checks.append(CheckResult(name=name, value=value, bound=float(bound), passed=bool(passed),
                                       comparison=comparison, anchor=anchor))
        level = logging.INFO if passed else logging.WARNING
        logger.log(level, f"{name}: {value:.3e} {comparison} {bound:.3e} -> {'ok' if passed else 'FAILED'}")

    def stage(self, name: str, func: Callable, *args, **kwargs):
        start_time = time.time()
        try:
            return func(*args, **kwargs)
        finally:
            self.timings[name] = round(time.time() - start_time, 3)

    def flow_config(self, time_span: float) -> FlowConfig:
        return FlowConfig(step=self.config.step, time=time_span)

    def symbol(self) -> TransverseSymbol:
        if self.config.symbol is None:
            raise ConfigInvalid(f"scenario '{self.config.scenario}' needs a 'symbol'")
        return build_symbol(self.config.symbol, self.geometry, self.rng)

    # -- scenarios ------------------------------------------------------------

    def geometry_checks(self):
        geom = self.geometry
        p, q = geom.p, geom.q
        frames = self.stage("frames", geometry_service.build_frames, geom)
        conn = self.stage("connection", geometry_service.transverse_connection, geom, frames)
        self.check("frame orthonormality", frames.orthonormality_defect, EXACT)
        self.check("metric compatibility", conn.diagnostics["metric_compatibility"], EXACT)
        self.check("torsion identity", conn.diagnostics["torsion"], EXACT)

        points = transverse_grid(q, 12)
        ys = [points[:, k] for k in range(q)]
        worst_div, worst_tau = 0.0, 0.0
        for a in range(q):
            unit = [1 if b == a else 0 for b in range(q)]
            frame_div = geometry_service.divergence(geom, frames, conn, unit)(*ys)[..., 0, 0]
            density_div = geometry_service.divergence_from_density(geom, frames, unit)(*ys)[..., 0, 0]
            worst_div = max(worst_div, float(np.max(np.abs(frame_div - density_div))))
            identity = -(conn.tau[a] + sum((conn.gamma[b][b][a] for b in range(q)), sp.Integer(0)))
            predicted = CompiledField(identity, geom.space.y)(*ys)[..., 0, 0]
            worst_tau = max(worst_tau, float(np.max(np.abs(frame_div - predicted))))
        self.check("divergence: frame formula vs density", worst_div, EXACT)
        self.check("div(f_a) = -<tau + sum nabla_b f_b, f_a>", worst_tau, EXACT)

        base = geometry_service.base_connection(geom)
        lifted = CompiledField(sp.Matrix([[conn.gamma[a][b][c] - base.frame_gamma[a][b][c] for c in range(q)]
                                          for a in range(q) for b in range(q)]), geom.space.y)
        self.check("transverse connection is the lifted base connection", np.max(np.abs(lifted(*ys))), EXACT)

        chart_points = self.rng.uniform(0, 2 * np.pi, size=(16, p + q))
        covectors = self.rng.normal(size=(16, p + q))
        norm, _ = geometry_service.dual_norm_at(geom, chart_points, covectors, frames)
        expression = CompiledField(geometry_service.dual_norm_expression(geom), geom.space.chart)
        values = np.concatenate([chart_points, covectors], axis=1)
        symbolic = np.real(expression.at(values)[..., 0, 0])
        self.check("dual norm: frame vs closed form", np.max(np.abs(norm - symbolic)), EXACT)

        tau = conn.tau_at(*ys)
        curvature = conn.curvature_at(*ys).reshape(len(points), -1)
        table = {f"y{k + 1}": points[:, k] for k in range(q)}
        table.update({f"tau{a + 1}": tau[:, a] for a in range(q)})
        table.update({f"R{index}": curvature[:, index] for index in range(curvature.shape[1])})
        self.tables["geometry"] = pd.DataFrame(table)
        self.metrics["tau_max"] = float(np.max(np.abs(tau))) if tau.size else 0.0

    def flow_invariants(self):
        geom = self.geometry
        p, q = geom.p, geom.q
        span = max(self.config.times)
        cfg = self.flow_config(span)
        data = flow_service.flow_data(geom)
        field = flow_service.conormal_field(data)
        eta = self.rng.normal(size=q)
        eta /= np.linalg.norm(eta)
        start = ConormalPoint(tuple(self.rng.uniform(0, 2 * np.pi, p)), tuple(self.rng.uniform(0, 2 * np.pi, q)),
                              tuple(eta))
        trajectory = self.stage("hamiltonian flow", flow_service.integrate_flow, field, start, cfg)
        self.check("Hamiltonian conservation", flow_service.energy_drift(trajectory, data.principal, field.variables),
                   settings.ODE_TOLERANCE)
        self.tables["trajectory"] = trajectory.to_frame().iloc[::max(1, cfg.steps // 1000)]

        restricted = flow_service.restrict_to_conormal(flow_service.hamiltonian_field(geom), geom)
        state = start.as_state()
        self.check("X_p tangent to the conormal bundle", np.max(np.abs(restricted(state) - field(state))), EXACT)

        xs = tuple(self.rng.uniform(0, 2 * np.pi, p))
        lifted = GroupoidPoint(start.x, xs, start.y, start.eta)
        short = self.flow_config(min(span, 1.0))
        self.check("lifted flow intertwines range and source",
                   self.stage("intertwining", flow_service.intertwining_defect, data, lifted, short),
                   settings.ODE_TOLERANCE)
        self.check("flow commutes with dilations", flow_service.homogeneity_defect(data, start, 2.0, short),
                   settings.ODE_TOLERANCE)

        if q == 2:
            y0, eta0 = np.array(start.y), np.array(start.eta)
            frames = geometry_service.build_frames(geom)
            F = np.real(frames.compiled_frame(*y0)[p:, p:])
            point = FramePoint(y0, eta0, F)
            final = self.stage("frame flow", flow_service.frame_flow, geom, point, cfg)
            drift = np.max(np.abs(final.first_integrals() - point.first_integrals()))
            self.check("first integrals I_j = eta(v_j)", drift, settings.ODE_TOLERANCE)
            self.check("frame orthonormality along the flow", flow_service.orthonormality_defect(geom, final),
                       settings.ODE_TOLERANCE)
            angle = self.rng.uniform(0, 2 * np.pi)
            rotation = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
            rotated = flow_service.frame_flow(geom, flow_service.rotate_frame(point, rotation), cfg)
            equivariance = np.max(np.abs(rotated.frame - flow_service.rotate_frame(final, rotation).frame))
            self.check("SO(q) equivariance", equivariance, settings.ODE_TOLERANCE)

        data_e = evolution_service.scalar_transport_data(geom, self.bundle)
        if self.bundle.rank > 1 or not self.bundle.is_trivial:
            connection = flow_service.subprincipal_connection(data_e)
            transport = flow_service.parallel_transport(connection, start, short)
            self.check("parallel transport unitarity", flow_service.unitarity_defect(transport), settings.ODE_TOLERANCE)
        if self.config.symbol is not None:
            k = self.symbol()
            result = self.stage("transport PDE", flow_service.transport_pde_residual, data_e, k, 0.5)
            self.check("transport PDE observed order", result.order, 1.7, ">=")
            self.tables["transport_pde"] = result.to_frame()

    def symbol_composition(self):
        specs = self.config.symbols or [self.config.symbol]
        scales = tuple(int(s) for s in self.config.scales)
        rows = []
        for index, spec in enumerate(specs):
            k = build_symbol(spec, self.geometry, self.rng)
            label = f"k{index} (m={k.order}, r={k.rank})"
            b = build_operator(self.config.operator, self.geometry, k.rank)
            for side in ("right", "left"):
                for N in self.config.truncations:
                    result = self.stage(f"composition {label} {side} N={N}", symbol_service.composition_fidelity,
                                        k, b, side, N, scales, self.config.cutoff, self.threads)
                    # an exact expansion passes regardless of the noise-level slope
                    self.checks.append(CheckResult(name=f"composition slope {label} ({side}, N={N})",
                                                   value=result.slope, bound=result.bound, passed=result.passed))
                    for scale, remainder in zip(result.scales, result.remainders):
                        rows.append({"symbol": index, "order": k.order, "rank": k.rank, "side": side, "N": N,
                                     "lambda": scale, "remainder": remainder, "slope": result.slope,
                                     "exact": result.exact})

            if self.geometry.q == 1:
                scale = float(max(self.config.scales))
                defect = self.stage(f"principal homomorphism {label}", symbol_service.product_symbol_defect, k, k,
                                    self.config.cutoff, scale, self.threads)
                # |n + c|^m differs from |n|^m at O(1/|n|) unless m = 0
                if k.order == 0:
                    self.check(f"sigma(AB) = sigma(A) sigma(B) via leaf-mode convolution {label}", defect, EXACT)
                else:
                    self.metrics[f"homomorphism_defect_{index}"] = defect
        self.tables["composition"] = pd.DataFrame(rows)

    def commutator(self):
        k = self.symbol()
        b = build_operator(self.config.operator, self.geometry, k.rank)
        matrix = self.stage("commutator matrix", symbol_service.commutator_matrix, k, b, self.config.cutoff,
                            self.threads)
        predicted = self.stage("commutator symbol", symbol_service.commutator_symbol, k, b)
        errors = {}
        for scale in self.config.scales:
            samples = symbol_service.extract_symbol(matrix, predicted.order, scale)
            errors[scale] = samples.relative_error(predicted)
        self.tables["commutator"] = pd.DataFrame({"lambda": list(errors), "relative_error": list(errors.values())})
        largest = max(errors)
        self.check(f"commutator relative error at lambda={largest:g}", errors[largest], 0.1)
        half = largest / 2
        if half in errors:
            self.check("commutator error ratio err(lambda/2) / err(lambda)",
                       errors[half] / max(errors[largest], 1e-300), 1.5, ">=")

    def _dirac(self, cliff=None) -> DiracService:
        return self.stage("dirac assembly", DiracService, self.geometry, self.bundle, self.config.cutoff,
                          self.config.leaf_cutoff, cliff, self.threads)

    def dirac_adjoint(self):
        assembly = self._dirac().assembly
        self.check("Clifford relations", assembly.clifford.relations_defect(), 1e-14)
        self.check("spin connection compatibility", assembly.spin.compatibility_residual, EXACT)
        self.check("spin connection skew-adjointness", assembly.spin.skew_defect, EXACT)
        report = self.stage("adjoint identity", dirac_service.adjoint_defect, assembly)
        self.check("adjoint identity (D')* = D' - c(tau)", report.defect, EXACT)
        self.check("D_E symmetric on interior modes", report.symmetry_defect, EXACT)
        self.check("control without c(tau) equals |c(tau)|", abs(report.control - report.c_tau_norm), EXACT)
        self.metrics.update({"c_tau_norm": report.c_tau_norm, "control": report.control,
                             "boundary_defect": report.boundary_defect, "width": assembly.width})
        self.blocks["dirac"] = assembly.D

    def dirac_symbols(self):
        dirac = self._dirac()
        for label, conormal in (("conormal", True), ("general", False)):
            result = self.stage(f"symbol probes ({label})", dirac.square_symbols, self.rng, self.config.probes,
                                conormal)
            worst = result.worst
            self.check(f"s^2 coefficient = |P^H dphi|^2 ({label})", worst["principal"], 1e-8)
            self.check(f"s^1 fit vs closed form ({label})", worst["fit_vs_closed"], 1e-6)
            self.check(f"s^1 fit vs symbolic D^2 ({label})", worst["fit_vs_symbolic"], 1e-6)
            self.check(f"closed form vs symbolic D^2 ({label})", worst["closed_vs_symbolic"], 1e-6)
            self.tables[f"symbol_probes_{label}"] = pd.DataFrame({
                "principal": result.principal_errors, "fit_vs_closed": result.fit_vs_closed,
                "fit_vs_symbolic": result.fit_vs_symbolic, "closed_vs_symbolic": result.closed_vs_symbolic})
        self.check("sigma_sub(<D>) = sigma_sub(D^2) / 2|nu|", dirac.subprincipal_defect(self.rng), EXACT)

    def signature_isotypic(self):
        geom = self.geometry
        modes = self.config.leaf_modes or [[n] + [0] * (geom.p - 1) for n in range(3)]
        leaf_cutoff = max(self.config.leaf_cutoff, max(max(abs(v) for v in mode) for mode in modes))
        signature = self.stage("signature operator", dirac_service.signature_operator, geom, self.config.cutoff,
                               leaf_cutoff, self.threads)
        self.check("D_{F(Q)*} = d_H + d_H* - (eps_tau + i_tau)/2", signature.identity_residual, EXACT)
        self.metrics["d_H_squared"] = signature.d_H_squared
        self.metrics["D_H_minus_D_dual"] = (signature.D_H - signature.D_dual).interior_norm(signature.width)
        rows = []
        for mode in modes:
            block = self.stage(f"isotypic {mode}", dirac_service.isotypic_blocks, signature, geom, mode)
            self.check(f"isotypic block n={tuple(mode)}", block.residual, EXACT)
            rows.append({"leaf_mode": str(tuple(mode)), "residual": block.residual, "off_block": block.off_block})
        self.check("off-diagonal leaf blocks vanish", max(row["off_block"] for row in rows), EXACT)
        self.tables["isotypic"] = pd.DataFrame(rows)
        self.blocks["signature"] = signature.D_H

    def _egorov_table(self, report, control=None) -> pd.DataFrame:
        frame = report.to_frame()
        if control is not None:
            frame["d_control"] = control.differences
        return frame

    def egorov_scalar(self):
        geom, bundle, config = self.geometry, self.bundle, self.config
        t = config.times[0]
        k = self.symbol()
        egorov = self.stage("hamiltonian", EgorovService.scalar, geom, config.cutoff, config.leaf_cutoff, bundle,
                            self.threads)
        report = self.stage("egorov", egorov.compare, k, t, config.scales)
        self.check("Egorov decay exponent rho", report.rho, config.tolerance("rho", 0.7), ">=")
        self.metrics.update({"rho": report.rho, "fit_residual": report.fit_residual,
                             "transported": report.snapshot()})

        try:
            defect = self.stage("oracle", egorov.oracle, k, t)
            self.check("closed-form oracle for diagonal P", defect, EXACT)
        except ConfigInvalid as e:
            self.metrics["oracle"] = f"skipped: {e.message}"

        self.check("evolution group property", egorov.group_defect(k, t), EXACT)

        control = None
        # scalar phases cancel under conjugation; the control needs matrix-valued transport
        if config.controls and bundle.rank > 1 and not bundle.is_trivial:
            control = self.stage("negative control", egorov.compare, k, t, config.scales, False)
            self.check("control without the subprincipal term does not decay", control.rho, 0.3)
            self.metrics["rho_control"] = control.rho
        if config.doubling:
            stability = self.stage("cutoff doubling", egorov.stability, report, k)
            self.check("report stable under cutoff doubling", stability, evolution_service.STABILITY_LIMIT)
        self.tables["egorov"] = self._egorov_table(report, control)

    def egorov_dirac(self):
        config = self.config
        t = config.times[0]
        k = self.symbol()
        dirac = self._dirac()
        if k.rank != dirac.assembly.rank:
            raise ConfigInvalid(f"symbol rank {k.rank} does not match the Dirac bundle rank {dirac.assembly.rank}")
        egorov = self.stage("hamiltonian", EgorovService, dirac.assembly, dirac.subprincipal(), threads=self.threads)
        report = self.stage("egorov", egorov.compare, k, t, config.scales)
        self.check("Egorov decay exponent rho (Dirac)", report.rho, config.tolerance("rho", 0.6), ">=")
        self.metrics.update({"rho": report.rho, "fit_residual": report.fit_residual,
                             "transported": report.snapshot()})
        control = None
        if config.controls:
            control = self.stage("zero connection control", egorov.compare, k, t, config.scales, False)
            scale = 12.0 if 12.0 in config.scales else max(config.scales)
            ratio = control.difference_at(scale) / max(report.difference_at(scale), 1e-300)
            self.check(f"zero connection degrades d(lambda={scale:g})", ratio, 3.0, ">=")
            self.metrics["control_ratio"] = ratio
        self.tables["egorov"] = self._egorov_table(report, control)

    # -- driver ---------------------------------------------------------------

    def run(self):
        """Execute the scenario and write report.json, CSV tables and artifacts.json.

        Raises AssertionFailed after writing the report when any check fails.
        """
        scenario = self.config.scenario
        runner = getattr(self, scenario.replace("-", "_"))
        start_time = time.time()
        failure = None
        try:
            runner()
        except AssertionFailed as e:
            failure = e
            self.checks.append(CheckResult(name=e.invariant, value=0.0, bound=0.0, passed=False))
        except LabError as e:
            logger.error(f"Scenario {scenario} failed: {str(e)}")
            raise
        self.timings["total"] = round(time.time() - start_time, 3)

        passed = failure is None and all(check.passed for check in self.checks)
        report = ScenarioReport(scenario=scenario, anchor=self.anchor, seed=self.seed, passed=passed,
                                checks=self.checks, metrics=self.metrics, tables=sorted(self.tables),
                                failure=failure.message if failure else None)
        files = {}
        path = write_json(report, self.output_dir / "report.json")
        files[path.name] = sha256_file(path)
        for name, frame in sorted(self.tables.items()):
            path = write_table(frame, self.output_dir / f"{name}.csv")
            files[path.name] = sha256_file(path)
        for name, operator in sorted(self.blocks.items()):
            path = export_blocks(operator, self.output_dir / f"{name}_blocks.npz")
            files[path.name] = sha256_file(path)
        artifacts = RunArtifacts(scenario=scenario, output_dir=str(self.output_dir), files=files,
                                 timings=self.timings, exit_code=0 if passed else 1)
        write_json(artifacts, self.output_dir / "artifacts.json")
        logger.info(f"Scenario {scenario} {'passed' if passed else 'FAILED'} in {self.timings['total']:.2f}s, "
                    f"{len(files)} files written to {self.output_dir}")

        if not passed:
            failed = next((check for check in self.checks if not check.passed), None)
            invariant = failed.name if failed else scenario
            detail = f"{failed.value:.3e} vs bound {failed.bound:.3e}" if failed and failure is None else ""
            raise AssertionFailed(invariant, detail)
        return report, artifacts


def run_experiment(config_path: Union[str, Path], output_dir: Optional[str] = None, seed: Optional[int] = None,
                   threads: Optional[int] = None) -> RunArtifacts:
    """Load a config, run its scenario and return the artifact manifest; raises AssertionFailed on failed checks."""
    config = load_config(config_path)
    logger.info(f"Running {config.scenario} from {config_path}")
    _, artifacts = ExperimentService(config, output_dir=output_dir, seed=seed, threads=threads).run()
    return artifacts
