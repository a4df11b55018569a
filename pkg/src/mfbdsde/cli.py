"""Command-line entry point: run one experiment and write its reports and manifest."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import platform
import sys
import time
from dataclasses import replace
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from .adjoint import solve_adjoint
from .bdsde import backward_residuals, coefficient_paths, mean_residual_score, solve_mf_bdsde
from .config import COMMANDS, SCHEMA_VERSION, ExperimentConfig, RunManifest, parse_config
from .control import (cost_of, gateaux_derivative, optimize, random_adapted_direction, smp_residual,
                      variational_convergence, verify_sufficiency)
from .drivers import build_grid, sample_paths
from .errors import InvalidArgumentError
from .fbdsde import (FbdsdeFields, continuation_solve, lq_hamiltonian_spec, monotone_spec, probe_assumptions,
                     solve_lq_hamiltonian_system, uniqueness_gap)
from .identities import sign_checks
from .instances import MEAN_CONTROL_TERMS
from .oracle import oracle_rows
from .parallel import resolve_threads, set_default_threads

ORACLE_STEPS = 2
# The statistical sign checks only gate the exit code on ensembles of at least this size.
SIGN_CHECK_MIN_PARTICLES = 1000
VARIATIONAL_EPS = (0.1, 0.05, 0.025)
FD_EPS = 1e-4
SOLUTION_COLUMNS = ("particle", "step", "field", "coordinate", "value")


# Report emission ------------------------------------------------------------------

def write_solution_csv(path: Path, arrays: dict) -> Path:
    """Rows ``(particle, step, field, coordinate, value)`` for scalar ``(N, n+1)`` fields."""
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(SOLUTION_COLUMNS)
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=float)
            for j in range(arr.shape[0]):
                writer.writerows([j, i, name, 0, repr(float(v))] for i, v in enumerate(arr[j]))
    return path


def write_series(path: Path, x, y, header: tuple) -> Path:
    """Two-column plot data."""
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows([repr(float(a)), repr(float(b))] for a, b in zip(x, y))
    return path


def write_json(path: Path, payload: dict) -> Path:
    body = {"schema_version": SCHEMA_VERSION, **payload}
    path.write_text(json.dumps(_plain(body), indent=2, sort_keys=True) + "\n")
    return path


def write_table_csv(path: Path, header, rows) -> Path:
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _plain(obj):
    """JSON-safe copy: numpy scalars become floats, non-finite numbers become strings."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        return value if np.isfinite(value) else repr(value)
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    return obj


class Reporter:
    """Collects output files for one run, honouring the configured formats."""

    def __init__(self, out_dir: Path, formats):
        self.out_dir = out_dir
        self.formats = set(formats)
        self.files: list = []
        out_dir.mkdir(parents=True, exist_ok=True)

    def _add(self, path: Path) -> None:
        self.files.append(path)

    def solution(self, name: str, arrays: dict) -> None:
        if "csv" in self.formats:
            self._add(write_solution_csv(self.out_dir / name, arrays))

    def series(self, name: str, x, y, header) -> None:
        if "csv" in self.formats:
            self._add(write_series(self.out_dir / name, x, y, header))

    def table(self, name: str, header, rows) -> None:
        if "csv" in self.formats:
            self._add(write_table_csv(self.out_dir / name, header, rows))

    def diagnostics(self, name: str, payload: dict) -> None:
        if "json" in self.formats:
            self._add(write_json(self.out_dir / name, payload))


def emit_report(out_dir, fmt: str, payload: dict | None = None, arrays: dict | None = None) -> Path:
    """Write diagnostics JSON or a solution CSV into ``out_dir`` and return the path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        return write_json(out_dir / "diagnostics.json", payload or {})
    if fmt == "csv":
        return write_solution_csv(out_dir / "solution.csv", arrays or {})
    raise InvalidArgumentError(f"format must be 'csv' or 'json', got {fmt!r}")


# Pipelines --------------------------------------------------------------------------

def _paths(cfg: ExperimentConfig):
    grid = build_grid(cfg.grid.horizon, cfg.grid.n_steps)
    e = cfg.ensemble
    n = None if e.mode == "bernoulli-tree" else e.particles
    return sample_paths(grid, n, seed=e.seed, mode=e.mode)


def _constant_control(cfg: ExperimentConfig, paths) -> np.ndarray:
    u = np.full((paths.particle_count, paths.grid.n_steps + 1), cfg.problem.control)
    return cfg.control_set().project(u)


def run_simulate(cfg: ExperimentConfig, rep: Reporter) -> dict:
    problem, paths = cfg.build_problem(), _paths(cfg)
    u = _constant_control(cfg, paths)
    state = solve_mf_bdsde(problem, u, paths, cfg.solver_config())
    f, g = coefficient_paths(problem, u, state)
    resid = backward_residuals(state.y, state.z, f, g, paths)
    cost, _ = cost_of(problem, u, paths, cfg.solver_config(), state.bank)
    times = paths.grid.points
    signs = sign_checks(paths)
    rep.solution("solution.csv", {"y": state.ys, "z": state.zs, "u": u})
    rep.series("plot_mean_y.csv", times, state.ys.mean(axis=0), ("t", "mean_y"))
    rep.diagnostics("diagnostics.json", {
        "command": "simulate", "seed": cfg.ensemble.seed, "solver": state.diagnostics(),
        "mean_y0": float(state.ys[:, 0].mean()), "cost": cost.value, "cost_standard_error": cost.standard_error,
        "residual_rms_max": float(np.max(np.sqrt(np.mean(resid[..., 0] ** 2, axis=0)))),
        "residual_score": mean_residual_score(resid, 0), "sign_checks": signs})
    checks = {"solver_converged": state.status == "converged"}
    if paths.particle_count >= SIGN_CHECK_MIN_PARTICLES:
        for name, entry in signs.items():
            checks[f"{name}_sign"] = entry["passed"] and entry["wrong_sign_rejected"]
    return checks


def run_optimize(cfg: ExperimentConfig, rep: Reporter) -> dict:
    problem, paths = cfg.build_problem(), _paths(cfg)
    u0 = _constant_control(cfg, paths)
    result = optimize(problem, u0, paths, cfg.optimizer_config(), cfg.solver_config())
    report = result.report
    checks = {"optimizer_converged": report.termination == "converged",
              "cost_non_increasing": bool(np.all(np.diff(report.costs) <= 1e-12 * (1 + np.abs(report.costs[:-1]))))}
    payload = {"command": "optimize", "seed": cfg.ensemble.seed, "optimizer": report.to_dict(),
               "cost": result.cost.value, "cost_standard_error": result.cost.standard_error}
    if cfg.optimizer.sufficiency:
        suff = verify_sufficiency(problem, result.u, paths, m=cfg.optimizer.m_directions,
                                  solver=cfg.solver_config(), seed=cfg.ensemble.seed)
        payload["sufficiency"] = {"convexity_probe_passed": suff.convexity_probe_passed,
                                  "worst_convexity_gap": suff.worst_convexity_gap,
                                  "dominance_passed": suff.dominance_passed,
                                  "dominance_violations": suff.dominance_violations}
        checks["sufficiency"] = suff.passed
    rep.solution("control.csv", {"u": result.u, "y": result.state.ys, "p": result.adjoint.p})
    rep.series("plot_cost.csv", range(len(report.costs)), report.costs, ("iteration", "cost"))
    rep.diagnostics("optimizer.json", payload)
    return checks


def _random_initial(paths, seed: int) -> FbdsdeFields:
    rng = np.random.default_rng(seed + 1)
    fields = FbdsdeFields(*(rng.normal(size=(paths.particle_count, paths.grid.n_steps + 1)) for _ in range(5)))
    fields.p_hat[:, 0] = fields.p[:, 0]
    return fields


def _continuation_spec(cfg: ExperimentConfig):
    if cfg.continuation.system == "lq":
        return lq_hamiltonian_spec(cfg.coefficients(), cfg.terminal())
    return monotone_spec(cfg.terminal())


def run_continuation(cfg: ExperimentConfig, rep: Reporter) -> dict:
    paths, spec, ccfg = _paths(cfg), _continuation_spec(cfg), cfg.continuation_config()
    result = continuation_solve(spec, paths, ccfg)
    state = result.state
    ratios = [r for step in state.contraction_ratios for r in step]
    checks = {"continuation_converged": result.converged, "contraction_ratios_below_one": all(r < 1 for r in ratios)}
    payload = {"command": "continuation", "seed": cfg.ensemble.seed, "trace": state.to_dict(),
               "residuals": result.residuals, "probes": probe_assumptions(spec, seed=cfg.ensemble.seed).to_dict()}
    if cfg.continuation.uniqueness_probe and result.converged:
        other = continuation_solve(spec, paths, ccfg, initial=_random_initial(paths, cfg.ensemble.seed))
        gap = uniqueness_gap(result.fields, other.fields)
        payload["uniqueness_gap"] = gap
        checks["uniqueness"] = bool(other.converged and gap <= ccfg.tol)
    f = result.fields
    rep.solution("fields.csv", {"y": f.y, "p": f.p, "z": f.z, "q": f.q})
    rep.series("plot_contraction.csv", state.accepted_alphas,
               [max(r) if r else 0.0 for r in state.contraction_ratios], ("alpha", "max_contraction_ratio"))
    rep.diagnostics("continuation.json", payload)
    return checks


def run_lq_verify(cfg: ExperimentConfig, rep: Reporter) -> dict:
    if cfg.problem.kind != "lq":
        raise InvalidArgumentError("lq-verify requires [problem] kind 'lq'")
    problem, paths, solver = cfg.build_problem(), _paths(cfg), cfg.solver_config()
    closed = solve_lq_hamiltonian_system(cfg.coefficients(), paths, cfg.terminal(), cfg.continuation_config())
    j_closed, state = cost_of(problem, closed.u, paths, solver)
    opt = optimize(problem, _constant_control(cfg, paths), paths, cfg.optimizer_config(), solver)
    j_opt = opt.cost
    gap = j_opt.value - j_closed.value
    combined_se = float(np.hypot(j_opt.standard_error, j_closed.standard_error))
    paired = j_opt.per_particle - j_closed.per_particle
    paired_se = float(paired.std(ddof=1) / np.sqrt(paired.size))
    adj = solve_adjoint(problem, state, closed.u, config=solver)
    closed_residual = float(np.max(np.abs(smp_residual(problem, state, adj, closed.u))))
    final_residual = opt.report.residuals[-1] if opt.report.residuals else np.inf
    gradient = _gradient_report(problem, paths, solver, _constant_control(cfg, paths), cfg.ensemble.seed)
    coeffs = cfg.coefficients()
    probes = probe_assumptions(lq_hamiltonian_spec(coeffs), seed=cfg.ensemble.seed)
    mean_coeffs = coeffs if coeffs.uses_mean_control else replace(coeffs, **MEAN_CONTROL_TERMS)
    mean_probes = probe_assumptions(lq_hamiltonian_spec(mean_coeffs), seed=cfg.ensemble.seed)
    checks = {"continuation_converged": closed.converged,
              "optimizer_converged": opt.report.termination == "converged",
              "optimizer_residual": bool(final_residual <= cfg.optimizer.tol),
              "cost_gap_within_3se": bool(abs(gap) <= 3 * combined_se),
              "gradient_routes_within_3se": gradient["routes_within_3se"],
              "gradient_matches_finite_difference": gradient["finite_difference_ok"],
              "mean_control_system_fails_monotonicity": mean_probes.A2 == "fail"}
    if not coeffs.uses_mean_control:
        checks["probes_B1_B2"] = probes.B1 == "pass" and probes.B2 == "pass"
    payload = {"command": "lq-verify", "seed": cfg.ensemble.seed,
               "J_closed_form": j_closed.value, "J_closed_form_standard_error": j_closed.standard_error,
               "J_optimizer": j_opt.value, "J_optimizer_standard_error": j_opt.standard_error,
               "gap": gap, "combined_standard_error": combined_se, "paired_standard_error": paired_se,
               "closed_form_smp_residual": closed_residual, "optimizer": opt.report.to_dict(),
               "continuation": closed.state.to_dict(), "mean_control_gap": closed.mean_control_gap,
               "probes": probes.to_dict(), "mean_control_probes": mean_probes.to_dict(),
               "mean_control_coefficients": {k: getattr(mean_coeffs, k) for k in MEAN_CONTROL_TERMS},
               "gradient": gradient}
    if cfg.optimizer.sufficiency:
        suff = verify_sufficiency(problem, opt.u, paths, m=cfg.optimizer.m_directions, solver=solver,
                                  seed=cfg.ensemble.seed)
        payload["sufficiency"] = {"convexity_probe_passed": suff.convexity_probe_passed,
                                  "dominance_violations": suff.dominance_violations}
        checks["sufficiency"] = suff.passed
    rep.solution("controls.csv", {"u_closed_form": closed.u, "u_optimizer": opt.u})
    rep.series("plot_cost.csv", range(len(opt.report.costs)), opt.report.costs, ("iteration", "cost"))
    rep.diagnostics("lq_verify.json", payload)
    return checks


def _gradient_report(problem, paths, solver, u, seed: int) -> dict:
    """Both Gateaux routes and a central difference along one random adapted direction."""
    v = random_adapted_direction(paths, np.random.default_rng(seed))
    cost, state = cost_of(problem, u, paths, solver)
    adj = solve_adjoint(problem, state, u, config=solver)
    res = gateaux_derivative(problem, state, adj, u, v, config=solver)
    up, _ = cost_of(problem, u + FD_EPS * v, paths, solver, bank=state.bank)
    down, _ = cost_of(problem, u - FD_EPS * v, paths, solver, bank=state.bank)
    fd = (up.value - down.value) / (2 * FD_EPS)
    rel = abs(fd - res.route2) / max(abs(fd), 1e-300)
    errors = variational_convergence(problem, state, u, v, VARIATIONAL_EPS, solver)
    return {"route1": res.route1, "route2": res.route2, "gap": res.gap,
            "gap_standard_error": res.gap_standard_error,
            "routes_within_3se": bool(abs(res.gap) <= 3 * res.gap_standard_error + 1e-12),
            "finite_difference": fd, "finite_difference_eps": FD_EPS, "relative_error": rel,
            "finite_difference_ok": bool(rel <= 1e-3),
            "variational_eps": list(VARIATIONAL_EPS), "variational_errors": errors,
            "variational_strictly_decreasing": bool(all(b < a for a, b in zip(errors, errors[1:])))}


def run_oracle_check(cfg: ExperimentConfig, rep: Reporter) -> dict:
    # The shipped oracle instances live on the 2-step tree whatever the grid section says.
    rows = oracle_rows(ORACLE_STEPS, cfg.grid.horizon)
    rep.table("oracle.csv", ("comparison", "max_abs_diff", "tolerance", "passed"),
              [(r.name, repr(r.max_abs_diff), repr(r.tolerance), r.passed) for r in rows])
    rep.diagnostics("oracle.json", {"command": "oracle-check", "rows": [
        {"comparison": r.name, "max_abs_diff": r.max_abs_diff, "tolerance": r.tolerance, "passed": r.passed}
        for r in rows]})
    return {f"oracle: {r.name}": r.passed for r in rows}


PIPELINES = {"simulate": run_simulate, "optimize": run_optimize, "continuation": run_continuation,
             "lq-verify": run_lq_verify, "oracle-check": run_oracle_check}


def _versions() -> dict:
    try:
        own = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {"artifact": own, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_experiment(command: str, cfg: ExperimentConfig, threads: int | None = None) -> RunManifest:
    """Run one pipeline, write its outputs and ``manifest.json``, and return the manifest."""
    if command not in PIPELINES:
        raise InvalidArgumentError(f"unknown command {command!r}; expected one of {COMMANDS}")
    set_default_threads(threads)
    workers = resolve_threads()
    out_dir = Path(cfg.output.dir)
    rep = Reporter(out_dir, cfg.output.formats)
    start = time.perf_counter()
    try:
        checks = PIPELINES[command](cfg, rep)
    finally:
        set_default_threads(None)
    elapsed = time.perf_counter() - start
    files = [{"name": p.name, "sha256": _sha256(p)} for p in rep.files]
    status = "passed" if all(checks.values()) else "failed"
    manifest = RunManifest(command, cfg.to_dict(), cfg.config_hash(), cfg.ensemble.seed, _versions(),
                           workers, elapsed, files, {k: bool(v) for k, v in checks.items()}, status)
    (out_dir / "manifest.json").write_text(json.dumps(_plain(manifest.to_dict()), indent=2, sort_keys=True) + "\n")
    return manifest


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfbdsde", description="Mean-field BDSDE control experiments.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", type=Path, help="TOML config, or a manifest.json to replay")
    parser.add_argument("--seed", type=int, help="override [ensemble] seed")
    parser.add_argument("--out", type=Path, help="override [output] dir")
    parser.add_argument("--threads", type=int, help="worker count (falls back to MFBDSDE_THREADS)")
    return parser


def load_config(path: Path | None, seed: int | None = None, out: Path | None = None) -> ExperimentConfig:
    cfg = parse_config(path.read_text(encoding="utf-8")) if path else parse_config("")
    if seed is not None:
        cfg = replace(cfg, ensemble=replace(cfg.ensemble, seed=seed))
    if out is not None:
        cfg = replace(cfg, output=replace(cfg.output, dir=str(out)))
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed, args.out)
        manifest = run_experiment(args.command, cfg, args.threads)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for name, ok in manifest.checks.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    print(f"manifest: {Path(cfg.output.dir) / 'manifest.json'}")
    return 0 if manifest.passed else 1


if __name__ == "__main__":
    sys.exit(main())
