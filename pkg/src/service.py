"""
Experiment service: runs the numerical operations for a configuration,
caches every grid point as a ResultRecord and emits the CSV tables.
"""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from . import __version__
from .cache import cache_get, cache_put, iter_records, record_key
from .cell_corrector import assemble_tensor, solve_cell, wiener_bounds
from .config import RunConfig, Subcommand
from .models import BoundCheck, CellProblem, RegimeMode, RegimePlan, ResultRecord
from .regimes import compare_chains, estimate_f, estimate_g, homogeneity_profile
from .report import collect_tables, write_charts, write_tables
from .sbv_lattice import solve_fidelity
from .surface_mincut import estimate_ghat, measured_c2

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INFRASTRUCTURE = 1
EXIT_BOUND_VIOLATION = 2

Computation = Callable[[], Tuple[Dict[str, Any], List[BoundCheck], List[str]]]


@dataclass
class RunOutcome:
    """Records produced by one subcommand and the files written for them."""

    records: List[ResultRecord] = field(default_factory=list)
    artifacts: List[Path] = field(default_factory=list)

    @property
    def bound_ok(self) -> bool:
        return all(r.bound_ok for r in self.records)

    @property
    def exit_code(self) -> int:
        return EXIT_OK if self.bound_ok else EXIT_BOUND_VIOLATION


def _vec(values) -> List[float]:
    return [float(v) for v in values]


def _plan_inputs(plan: RegimePlan) -> Dict[str, Any]:
    """Plan fields that determine a result; the worker count does not."""
    return plan.model_dump(mode="json", exclude={"workers"})


class ExperimentService:
    """Service class running the experiments of one configuration."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.config_hash = config.config_hash()
        self.cache_root = config.cache_root
        self.output_dir = config.output.directory

    def _cached(self, operation: str, inputs: Dict[str, Any], compute: Computation) -> ResultRecord:
        """Fetch a record from the cache or compute and store it."""
        inputs = {**inputs, "config_hash": self.config_hash}
        key = record_key(operation, inputs, __version__)
        record = cache_get(key, self.cache_root)
        if record is not None:
            logger.debug("cache hit for %s %s", operation, key[:12])
            return record
        start = time.perf_counter()
        outputs, checks, flags = compute()
        elapsed = time.perf_counter() - start
        record = ResultRecord(
            key=key,
            config_hash=self.config_hash,
            operation=operation,
            inputs=inputs,
            outputs=outputs,
            timings={"seconds": elapsed},
            flags=flags,
            checks=checks,
            version=__version__,
        )
        cache_put(record, self.cache_root)
        for check in checks:
            if not check.ok:
                logger.warning("%s: check '%s' failed (value %.6g, margin %.3g)", operation, check.name, check.value, check.margin)
        logger.info("%s done in %.2fs", operation, elapsed)
        return record

    def _a_values(self) -> List[float]:
        ms = self.config.microstructure
        return list(ms.a_values) or [ms.a]

    def cell_f(self) -> List[ResultRecord]:
        """Cell problems for every (a, xi, M) plus the extrapolated tensor per a."""
        n = self.config.microstructure.n
        solver = self.config.solver
        records = []
        for a in self._a_values():
            for xi in self.config.plan.xi:
                for M in solver.cell_M:
                    records.append(self._cached("cell-f", {"a": a, "xi": _vec(xi), "M": M, "tol": solver.cell_tol}, self._cell_job(a, xi, M)))
            records.append(self._cached("tensor", {"a": a, "n": n, "M_list": list(solver.cell_M), "tol": solver.cell_tol}, self._tensor_job(a)))
        return records

    def _cell_job(self, a: float, xi: List[float], M: int) -> Computation:
        def compute():
            corrector = solve_cell(CellProblem(xi=tuple(xi), a=a, M=M, tol=self.config.solver.cell_tol))
            norm2 = float(np.dot(xi, xi))
            checks = [
                BoundCheck.bracket("competitor bound", corrector.fhat, 0.0, corrector.competitor * (1 + 1e-10) + 1e-14),
            ]
            if norm2 > 0:
                checks.append(BoundCheck.bracket("positivity", corrector.fhat, lower=1e-12 * norm2))
                axes = np.flatnonzero(np.asarray(xi) != 0)
                if axes.shape[0] == 1:
                    lower, upper = wiener_bounds(a, len(xi), M, int(axes[0]))
                    slack = 1e-8 * norm2
                    checks.append(
                        BoundCheck.bracket("discrete series-parallel bracket", corrector.fhat, lower * norm2 - slack, upper * norm2 + slack)
                    )
            flags = [] if corrector.converged else [f"cell problem did not converge (residual {corrector.residual:.3e})"]
            row = {"a": a, "M": M, "xi": xi, "fhat": corrector.fhat, "residual": corrector.residual}
            outputs = {
                "fhat": corrector.fhat,
                "residual": corrector.residual,
                "iterations": corrector.iterations,
                "competitor": corrector.competitor,
                "ratio": corrector.fhat / norm2 if norm2 > 0 else None,
                "tables": {"cell_f.csv": [row]},
            }
            return outputs, checks, flags

        return compute

    def _tensor_job(self, a: float) -> Computation:
        def compute():
            ms, solver = self.config.microstructure, self.config.solver
            tensor = assemble_tensor(a, ms.n, solver.cell_M, tol=solver.cell_tol)
            rows = [
                {"a": a, "M": "limit", "xi": xi, "fhat": tensor.fhat(tuple(xi)), "residual": tensor.quad_residual}
                for xi in self.config.plan.xi
            ]
            A = np.asarray(tensor.A)
            checks = [BoundCheck.bracket("tensor symmetric", float(abs(A - A.T).max()), upper=1e-12)]
            if a < 0.5:
                checks.append(BoundCheck.bracket("tensor positive definite", float(np.linalg.eigvalsh(A).min()), lower=0.0))
            outputs = {"tensor": tensor.model_dump(mode="json"), "tables": {"cell_f.csv": rows}}
            return outputs, checks, list(tensor.flags)

        return compute

    def _ghat(self, nu: List[float], a: float) -> ResultRecord:
        solver = self.config.solver
        inputs = {
            "nu": _vec(nu),
            "a": a,
            "M": solver.cut_M,
            "t_chain": list(solver.t_chain),
            "stencil": solver.stencil.value,
            "boundary_band": solver.boundary_band,
            "face_rule": solver.face_rule,
        }

        def compute():
            est = estimate_ghat(nu, a, solver.t_chain, solver.cut_M, solver.stencil, solver.boundary_band, solver.face_rule)
            checks = [BoundCheck.bracket("surface bracket", est.limit, 0.0, 1.0 + est.slack + 1e-12)]
            rows = [
                {"nu": nu, "a": a, "t": t, "per_area": v, "stencil": solver.stencil.value}
                for t, v in zip(est.t_chain, est.per_area)
            ]
            rows.append({"nu": nu, "a": a, "t": "limit", "per_area": est.limit, "stencil": solver.stencil.value})
            return {"estimate": est.model_dump(mode="json"), "tables": {"ghat.csv": rows}}, checks, list(est.flags)

        return self._cached("surface-g", inputs, compute)

    def surface_g(self) -> List[ResultRecord]:
        records = [self._ghat(nu, a) for a in self._a_values() for nu in self.config.plan.nu]
        if self.config.plan.measure_c2:
            records += [self._c2(a) for a in self._a_values()]
        return records

    def _c2(self, a: float) -> ResultRecord:
        """Smallest surface density over sampled directions, the coercivity constant of g_hom."""
        solver = self.config.solver
        inputs = {
            "a": a,
            "M": solver.cut_M,
            "t_chain": list(solver.t_chain),
            "stencil": solver.stencil.value,
            "boundary_band": solver.boundary_band,
            "face_rule": solver.face_rule,
        }

        def compute():
            c2, estimates = measured_c2(
                a, solver.cut_M, solver.t_chain, solver.stencil, boundary_band=solver.boundary_band, face_rule=solver.face_rule
            )
            slack = max(e.slack for e in estimates)
            checks = [BoundCheck.bracket("coercivity constant", c2, lower=1e-12, upper=1.0 + slack + 1e-12)]
            rows = [
                {"nu": _vec(e.nu), "a": a, "t": "limit", "per_area": e.limit, "stencil": solver.stencil.value}
                for e in estimates
            ]
            outputs = {"c2": c2, "estimates": [e.model_dump(mode="json") for e in estimates], "tables": {"ghat.csv": rows}}
            flags = [flag for e in estimates for flag in e.flags]
            return outputs, checks, flags

        return self._cached("surface-c2", inputs, compute)

    @staticmethod
    def _estimate_rows(est, target: str) -> List[Dict[str, Any]]:
        rows = []
        for s in est.samples:
            density = s.density_corrected if target.endswith("corrected") else s.density
            rows.append(
                {"mode": est.mode.value, "ell": est.ell, "eps": s.eps, "beta": s.beta, "target": target, "density": density, "spread": None, "bound_ok": est.bound_ok}
            )
        value = est.value_corrected if target.endswith("corrected") else est.value
        spread = est.spread_corrected if target.endswith("corrected") else est.spread
        rows.append(
            {"mode": est.mode.value, "ell": est.ell, "eps": "limit", "beta": None, "target": target, "density": value, "spread": spread, "bound_ok": est.bound_ok}
        )
        return rows

    def estimate_f(self, mode: Optional[RegimeMode] = None) -> List[ResultRecord]:
        plan = self.config.regime_plan(mode)
        both_chains = self.config.plan.compare_chains
        records = []
        for xi in self.config.plan.xi:
            def compute(xi=xi):
                target = "f(" + " ".join(format(c, "g") for c in xi) + ")"
                if not both_chains:
                    est = estimate_f(tuple(xi), plan)
                    outputs = {"estimate": est.model_dump(mode="json"), "tables": {"estimates.csv": self._estimate_rows(est, target)}}
                    return outputs, list(est.checks), list(est.flags)
                comparison = compare_chains(tuple(xi), plan)
                est, other = comparison.primary, comparison.interleaved
                rows = self._estimate_rows(est, target) + self._estimate_rows(other, target + " interleaved")
                outputs = {
                    "estimate": est.model_dump(mode="json"),
                    "interleaved": other.model_dump(mode="json"),
                    "chain_discrepancy": comparison.discrepancy,
                    "tables": {"estimates.csv": rows},
                }
                flags = list(est.flags) + [f"interleaved chain: {flag}" for flag in other.flags]
                return outputs, list(est.checks) + list(other.checks), flags

            inputs = {"plan": _plan_inputs(plan), "xi": _vec(xi)}
            if both_chains:
                inputs["compare_chains"] = True
            records.append(self._cached("estimate-f", inputs, compute))
        return records

    def estimate_g(self, mode: Optional[RegimeMode] = None) -> List[ResultRecord]:
        plan = self.config.regime_plan(mode)
        records = []
        for nu in self.config.plan.nu:
            ghat = self._ghat(nu, plan.a).outputs["estimate"]["limit"]
            for z in self.config.plan.z:
                def compute(z=z, nu=nu, ghat=ghat):
                    est = estimate_g(z, tuple(nu), plan, ghat=ghat)
                    label = f"g({z:g};" + " ".join(format(c, "g") for c in nu) + ")"
                    rows = self._estimate_rows(est, label) + self._estimate_rows(est, label + " corrected")
                    outputs = {"estimate": est.model_dump(mode="json"), "tables": {"estimates.csv": rows}}
                    return outputs, list(est.checks), list(est.flags)

                inputs = {"plan": _plan_inputs(plan), "z": z, "nu": _vec(nu), "ghat": ghat}
                records.append(self._cached("estimate-g", inputs, compute))
        return records

    def homogeneity(self, mode: Optional[RegimeMode] = None) -> List[ResultRecord]:
        plan = self.config.regime_plan(mode)
        lambdas = list(self.config.plan.lambdas)
        records = []
        for xi in self.config.plan.xi:
            def compute(xi=xi):
                profile = homogeneity_profile(tuple(xi), lambdas, plan)
                rows = [{"mode": plan.mode.value, "lambda": r.lam, "ratio": r.ratio} for r in profile.rows]
                outputs = {"profile": profile.model_dump(mode="json"), "tables": {"profile.csv": rows}}
                return outputs, list(profile.checks), list(profile.flags)

            inputs = {"plan": _plan_inputs(plan), "xi": _vec(xi), "lambdas": lambdas}
            records.append(self._cached("homogeneity", inputs, compute))
        return records

    def regime_sweep(self) -> List[ResultRecord]:
        """Volume, surface and homogeneity experiments in every configured mode."""
        records = []
        for mode in self.config.plan.modes:
            records += self.estimate_f(mode)
            records += self.estimate_g(mode)
            records += self.homogeneity(mode)
        return records

    def denoise(self) -> List[ResultRecord]:
        """Fidelity minimization of a step datum along the eps-chain."""
        plan = self.config.regime_plan()
        ms = self.config.microstructure
        height = self.config.plan.step_height
        weight = self.config.plan.fidelity_weight
        half = 0.5 * ms.domain_len

        def step(coords):
            return height * (coords[:, 0] >= half).astype(float)

        def compute():
            run = solve_fidelity(
                step, plan.eps_chain, plan.params, plan.microstructure(plan.eps_chain[0]), plan.M, weight, plan.schedule
            )
            rows = [
                {"eps": s.eps, "beta": s.beta, "m_k": s.m_k, "l1_to_previous": s.l1_to_previous} for s in run.steps
            ]
            last, prev = run.steps[-1].m_k, run.steps[-2].m_k
            change = abs(last - prev) / max(abs(last), abs(prev)) if max(abs(last), abs(prev)) > 0 else 0.0
            checks = [BoundCheck.bracket("minimum values settle", change, upper=0.10)]
            distances = [s.l1_to_previous for s in run.steps if s.l1_to_previous is not None]
            for prev_d, cur_d in zip(distances, distances[1:]):
                checks.append(BoundCheck.bracket("successive minimizers approach", cur_d, upper=prev_d))
            outputs = {"steps": [s.model_dump(mode="json") for s in run.steps], "settled": run.settled, "tables": {"denoise.csv": rows}}
            return outputs, checks, list(run.flags)

        inputs = {"plan": _plan_inputs(plan), "step_height": height, "weight": weight}
        return [self._cached("denoise", inputs, compute)]

    def report(self) -> RunOutcome:
        """Aggregate every cached record into CSV tables and SVG charts."""
        records = iter_records(self.cache_root)
        tables = collect_tables(records)
        artifacts = write_tables(self.output_dir, tables)
        artifacts += write_charts(self.output_dir, tables)
        logger.info("report over %d records written to %s", len(records), self.output_dir)
        return RunOutcome(records=records, artifacts=artifacts)

    def run(self, subcommand: Subcommand) -> RunOutcome:
        """Run one subcommand and write the tables its records carry."""
        if subcommand is Subcommand.REPORT:
            return self.report()
        handlers = {
            Subcommand.CELL_F: self.cell_f,
            Subcommand.SURFACE_G: self.surface_g,
            Subcommand.ESTIMATE_F: self.estimate_f,
            Subcommand.ESTIMATE_G: self.estimate_g,
            Subcommand.HOMOGENEITY: self.homogeneity,
            Subcommand.REGIME_SWEEP: self.regime_sweep,
            Subcommand.DENOISE: self.denoise,
        }
        if subcommand not in handlers:
            raise ValueError(f"subcommand {subcommand.value} does not run experiments")
        records = handlers[subcommand]()
        tables = collect_tables(records)
        names = [name for name, rows in tables.items() if rows]
        artifacts = write_tables(self.output_dir, tables, names) if names else []
        return RunOutcome(records=records, artifacts=artifacts)


def summarize(outcome: RunOutcome) -> List[str]:
    """One line per failed check, for the command-line summary."""
    lines = []
    for record in outcome.records:
        for check in record.checks:
            if not check.ok:
                bound = f"[{check.lower}, {check.upper}]"
                lines.append(f"{record.operation} {record.key[:12]}: {check.name} {check.value:.6g} outside {bound} {check.note}".rstrip())
    return lines
