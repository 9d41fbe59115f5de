"""Command-line driver.

    concentra <subcommand> --config <path> [--set key=value ...] --out <dir>

Exit status: 0 success, 2 validation error, 3 solver non-convergence.
Errors are also written to stderr as one JSON object.
"""
from __future__ import annotations

import argparse
import itertools
import json
import logging
import math
import os
import sys

import numpy as np

from . import __version__
from .config import ExperimentConfig, load_config
from .errors import (
    ConcentraError,
    ConfigError,
    ContractionError,
    DegenerateBasisError,
    DomainError,
    GridSizeError,
    NonConvergenceError,
    PreconditionError,
    SolverError,
)

log = logging.getLogger("concentra")

EXIT_OK, EXIT_VALIDATION, EXIT_NONCONVERGENCE = 0, 2, 3

SUBCOMMANDS = ("limit-profile", "gamma-map", "frozen-sigma", "solve", "concentrate", "reduce",
               "multiplicity", "identity-check")


class _Unconverged(Exception):
    """Artifacts were written but a solve did not converge."""


# ----------------------------------------------------------------------------
# output helpers
# ----------------------------------------------------------------------------

class Run:
    def __init__(self, name: str, cfg: ExperimentConfig, out: str):
        self.name, self.cfg, self.out = name, cfg, out
        os.makedirs(out, exist_ok=True)
        self.header = cfg.header_lines() + [f"subcommand = {name}", f"version = {__version__}"]

    def path(self, fname: str) -> str:
        return os.path.join(self.out, fname)

    def write_csv(self, fname: str, columns: list, rows: list) -> str:
        with open(self.path(fname), "w") as fh:
            for line in self.header:
                fh.write(f"# {line}\n")
            fh.write(",".join(columns) + "\n")
            for row in rows:
                fh.write(",".join(_fmt(v) for v in row) + "\n")
        return self.path(fname)

    def write_json(self, fname: str, payload: dict) -> str:
        payload = dict(payload)
        payload["_header"] = list(self.header)
        with open(self.path(fname), "w") as fh:
            json.dump(_jsonable(payload), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return self.path(fname)

    # problem assembly ------------------------------------------------------

    def fields(self):
        return self.cfg.potential(), self.cfg.diffusion()

    def penalty(self, V):
        from .penalty import make_penalty

        pr = self.cfg.problem
        cfg = make_penalty(self.cfg.lambda_box(), pr["p"], V.alpha, pr["theta"], pr["k"])
        cfg.validate_in(pr["L"])
        return cfg

    def grid(self, center=None):
        from .discretization import build_grid

        pr = self.cfg.problem
        return build_grid(pr["N"], pr["L"], pr["n"], center)

    def validate_fields(self, V, J, grid):
        V.validate(grid.points())
        J.validate(grid.points())


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    return obj


def _seed_or_argmin(run: Run, V, J, cfg):
    from .solvers import argmin_gamma

    seeds = run.cfg.run["seed_points"]
    if seeds:
        return np.asarray(seeds[0], dtype=float)
    return argmin_gamma(cfg.box, V, J, run.cfg.problem["N"], run.cfg.problem["p"])


def _profile(run: Run):
    from .limit_profile import cached_profile, solve_radial_ground_state

    pr, so = run.cfg.problem, run.cfg.solver
    if so["shoot_tol"] == 1e-14 and so["r_max"] == 20.0:
        return cached_profile(pr["N"], pr["p"])
    return solve_radial_ground_state(pr["N"], pr["p"], tol=so["shoot_tol"], r_max=so["r_max"])


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------

def cmd_limit_profile(run: Run) -> None:
    prof = _profile(run)
    prof.save(run.path("profile.txt"), extra_header=run.header)
    run.write_json("profile.json", {
        "N": prof.N, "p": prof.p, "U0": prof.U0, "C0": prof.C0, "C1": prof.C1,
        "r_max": prof.r_max, "h_r": prof.h_r, "r_splice": prof.r_splice,
        "max_residual": prof.max_residual(),
    })


def cmd_gamma_map(run: Run) -> None:
    from .fields import find_gamma_critical_points, gamma_values

    pr, so, rr = run.cfg.problem, run.cfg.solver, run.cfg.run
    N, p = pr["N"], pr["p"]
    V, J = run.fields()
    if pr["lambda"] is not None:
        box = run.cfg.lambda_box()
    else:
        box = np.array([[-pr["L"], pr["L"]]] * N)
    axes = [np.linspace(lo, hi, rr["gamma_samples"]) for lo, hi in box]
    pts = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=-1)
    V.validate(pts)
    J.validate(pts)
    vals = gamma_values(pts, V, J, N, p)
    cols = ["x", "y", "z"][:N] if N <= 3 else [f"x{i + 1}" for i in range(N)]
    run.write_csv("gamma.csv", cols + ["gamma"], [list(x) + [g] for x, g in zip(pts, vals)])
    spread = float(np.max(vals) - np.min(vals))
    flat = spread <= 1e-12 * max(float(np.max(np.abs(vals))), 1e-300)
    crit = [] if flat else find_gamma_critical_points(box, so["coarse_grid"], so["gamma_tol"], V, J, N, p)
    degenerate = flat or any(c.classification == "degenerate" for c in crit)
    run.write_json("critical_points.json", {
        "box": box,
        "degenerate_landscape": bool(degenerate),
        "flags": ["degenerate landscape"] if degenerate else [],
        "gamma_range": [float(np.min(vals)), float(np.max(vals))],
        "critical_points": [{"point": c.point, "gamma": c.value, "gradient": c.gradient,
                             "classification": c.classification, "hessian": c.hessian} for c in crit],
    })


def cmd_frozen_sigma(run: Run) -> None:
    from .discretization import build_grid
    from .fields import gamma_values
    from .limit_profile import frozen_sigma_numeric, sigma_closed_form

    pr, so, rr = run.cfg.problem, run.cfg.solver, run.cfg.run
    N, p = pr["N"], pr["p"]
    V, J = run.fields()
    zs = run.cfg.require("run", "z_points")
    prof = _profile(run)
    grid = build_grid(N, rr["frozen_L"], rr["frozen_n"])
    rows = []
    for z in zs:
        if z.size != N:
            raise ConfigError(f"z point {z.tolist()} has {z.size} coordinates, expected {N}", key="run.z_points")
        st = frozen_sigma_numeric(z, grid, V, J, p, profile=prof, tol=so["frozen_tol"])
        ref = sigma_closed_form(z, prof, V, J)
        row = list(z) + [st.energy, ref, st.energy / ref - 1.0, float(gamma_values(z, V, J, N, p)),
                         st.nehari_residual]
        if so["mp_nodes"] > 0:
            row.append(_mountain_pass(grid, V, J, p, z, so))
        rows.append(row)
    cols = [f"z{i + 1}" for i in range(N)] + ["sigma_num", "c1_gamma", "rel_diff", "gamma", "nehari_residual"]
    if so["mp_nodes"] > 0:
        cols.append("mountain_pass_level")
    run.write_csv("frozen_sigma.csv", cols, rows)


def _mountain_pass(grid, V, J, p, z, so) -> float:
    """Mountain-pass level of the frozen problem from a Gaussian bump endpoint."""
    from .discretization import DiscreteEnergy, ProblemSpec
    from .solvers import mountain_pass_level, negative_endpoint

    energy = DiscreteEnergy(ProblemSpec(grid, V, J, p), 1.0, "frozen", z=z)
    bump = np.exp(-np.sum((grid.points() - np.asarray(grid.center)) ** 2, axis=1))
    rep = mountain_pass_level(negative_endpoint(bump, energy), energy, K=so["mp_nodes"],
                              max_sweeps=so["mp_max_sweeps"], stall_rtol=so["mp_stall_rtol"])
    if not rep.converged:
        raise NonConvergenceError(f"mountain-pass path did not stabilize at z={z.tolist()}")
    return rep.level


def cmd_solve(run: Run) -> None:
    from .discretization import ProblemSpec
    from .solvers import solve_concentrating

    pr, so, rr = run.cfg.problem, run.cfg.solver, run.cfg.run
    V, J = run.fields()
    cfg = run.penalty(V)
    grid = run.grid()
    run.validate_fields(V, J, grid)
    spec = ProblemSpec(grid, V, J, pr["p"], cfg)
    seed = _seed_or_argmin(run, V, J, cfg)
    rep = solve_concentrating(rr["eps"], spec, cfg, seed, profile=_profile(run), descent_tol=so["descent_tol"],
                              newton_tol=so["newton_tol"], max_iter=so["max_iter"])
    _write_solution(run, "solution", rep, grid, cfg, seed)
    if not rep.converged:
        raise _Unconverged(rep.message)


def _write_solution(run, stem, rep, grid, cfg, seed):
    from .diagnostics import barycenter, exterior_bound_check, global_max_point
    from .discretization import GridFunction
    from .solvers import lambda_radius

    gf = GridFunction(rep.u, grid)
    gf.save_binary(run.path(stem + ".bin"), header=run.header)
    if grid.N <= 2:
        gf.save_csv(run.path(stem + ".csv"), header=run.header)
    x, peak, unique = global_max_point(rep.u, grid)
    ok, mext = exterior_bound_check(rep.u, grid, cfg)
    eps = rep.extra.get("eps")
    run.write_json(stem + ".json", {
        "eps": eps, "seed_point": seed, "energy": rep.energy, "scaled_energy": rep.energy / eps**grid.N,
        "grad_max": rep.grad_max, "nehari_residual": rep.nehari_residual, "iterations": rep.iterations,
        "converged": rep.converged, "message": rep.message, "max_point": x, "peak": peak,
        "unique_max": unique, "exterior_ok": ok, "max_exterior": mext, "ell": cfg.ell,
        "barycenter": barycenter(rep.u, grid, lambda_radius(cfg)), "h": grid.h, "n": grid.n,
    })


def cmd_concentrate(run: Run) -> None:
    from .diagnostics import concentration_series, write_series
    from .discretization import ProblemSpec

    pr, so, rr = run.cfg.problem, run.cfg.solver, run.cfg.run
    V, J = run.fields()
    cfg = run.penalty(V)
    grid = run.grid()
    run.validate_fields(V, J, grid)
    spec = ProblemSpec(grid, V, J, pr["p"], cfg)
    ppw = rr["points_per_width"] if rr["points_per_width"] > 0 else None
    series = concentration_series(spec, cfg, rr["eps0"], rr["levels"], ppw, profile=_profile(run),
                                  descent_tol=so["descent_tol"], newton_tol=so["newton_tol"],
                                  max_iter=so["max_iter"])
    write_series(series, run.path("series.csv"), run.path("series.json"), header=run.header)
    if series.warnings:
        raise _Unconverged("; ".join(series.warnings))


def cmd_reduce(run: Run) -> None:
    from .fields import gamma_values
    from .reduction import ReductionProblem, reduced_critical_points, reduced_energy, reduction_grid, write_landscape

    pr, so, rr = run.cfg.problem, run.cfg.solver, run.cfg.run
    N, p, eps = pr["N"], pr["p"], rr["eps"]
    V, J = run.fields()
    box = run.cfg.require("run", "xi_box")
    if box.size != 2 * N:
        raise ConfigError(f"run.xi_box needs {2 * N} values", key="run.xi_box")
    box = box.reshape(N, 2)
    V.validate(eps * box.T)
    J.validate(eps * box.T)
    prof = _profile(run)
    axes = [np.linspace(lo, hi, rr["xi_samples"]) for lo, hi in box]
    samples, failures = [], []
    for xi in itertools.product(*axes):
        xi = np.asarray(xi, dtype=float)
        grid = reduction_grid(xi, eps, V, J, rr["reduce_n"])
        prob = ReductionProblem(V, J, p, eps, grid, prof)
        try:
            samples.append(reduced_energy(xi, prob, h_xi=so["h_xi"], tol=so["correction_tol"]))
        except (ContractionError, DegenerateBasisError) as exc:
            failures.append({"xi": xi, "error": type(exc).__name__, "message": str(exc)})
    write_landscape(samples, run.path("landscape.csv"), eps, prof.C1,
                    lambda z: float(gamma_values(z, V, J, N, p)), header=run.header)
    crit = reduced_critical_points(box, eps, V, J, p, rr["reduce_n"], coarse_grid=so["coarse_grid"],
                                   gamma_tol=so["gamma_tol"], profile=prof, h_xi=so["h_xi"])
    run.write_json("reduced_critical_points.json", {
        "eps": eps, "xi_box": box, "failed_samples": failures,
        "critical_points": [{"xi": c.xi, "point": c.point, "classification": c.classification,
                             "phi": c.sample.phi, "reduced_grad_norm": c.grad_norm,
                             "newton_steps": c.newton_steps, "polished_grad_max": c.solution.grad_max,
                             "polished_converged": c.solution.converged, "wnorm": c.sample.wnorm}
                            for c in crit],
    })


def cmd_multiplicity(run: Run) -> None:
    from .discretization import ProblemSpec
    from .solvers import multi_start

    pr, so, rr = run.cfg.problem, run.cfg.solver, run.cfg.run
    N, eps = pr["N"], rr["eps"]
    V, J = run.fields()
    cfg = run.penalty(V)
    grid = run.grid()
    run.validate_fields(V, J, grid)
    seeds = run.cfg.require("run", "seed_points")
    spec = ProblemSpec(grid, V, J, pr["p"], cfg)
    sols = multi_start(seeds, eps, spec, cfg, profile=_profile(run), descent_tol=so["descent_tol"],
                       newton_tol=so["newton_tol"], max_iter=so["max_iter"])
    cols = ["index", "energy", "scaled_energy"] + [f"barycenter{i + 1}" for i in range(N)] + ["grad_max"]
    rows = [[k, s.energy, s.energy / eps**N] + list(s.extra["barycenter"]) + [s.grad_max]
            for k, s in enumerate(sols)]
    run.write_csv("multiplicity.csv", cols, rows)
    if not sols:
        raise _Unconverged("no seed produced a converged solution")


def cmd_identity_check(run: Run) -> None:
    from .diagnostics import PlateauField, concentration_gradient_test, global_max_point, pucci_serrin_residual
    from .discretization import ProblemSpec
    from .fields import gamma_eval
    from .solvers import argmin_gamma, concentrating_seed, solve_concentrating

    pr, so, rr = run.cfg.problem, run.cfg.solver, run.cfg.run
    N, p, eps = pr["N"], pr["p"], rr["eps"]
    V, J = run.fields()
    cfg = run.penalty(V)
    grid = run.grid()
    run.validate_fields(V, J, grid)
    spec = ProblemSpec(grid, V, J, p, cfg)
    z0 = argmin_gamma(cfg.box, V, J, N, p)
    rep = solve_concentrating(eps, spec, cfg, z0, profile=_profile(run), descent_tol=so["descent_tol"],
                              newton_tol=so["newton_tol"], max_iter=so["max_iter"])
    x, peak, _ = global_max_point(rep.u, grid)
    beta = math.sqrt(float(V.value(x)))
    ps = []
    for i in range(N):
        hf = PlateauField(x, np.eye(N)[i], 4.0 * eps / beta, 16.0 * eps / beta)
        res, warn = pucci_serrin_residual(rep.u, grid, eps, V, J, p, hf)
        ps.append({"direction": i + 1, "residual": res, "support_warning": warn})
    payload = {
        "eps": eps, "converged": rep.converged, "max_point": x, "peak": peak, "argmin_gamma": z0,
        "pucci_serrin": ps,
        "gradient_test": concentration_gradient_test(rep.u, grid, eps, z0, V, J),
        "gamma_gradient_at_argmin": gamma_eval(z0, V, J, N, p).gradient,
    }
    pin = rr["pin_point"]
    if pin is not None and pin.size:
        u_pin = concentrating_seed(eps, spec, pin, _profile(run))
        t = concentration_gradient_test(u_pin, grid, eps, pin, V, J, check_peak=False)
        g = gamma_eval(pin, V, J, N, p).gradient
        payload["pinned"] = {"point": pin, "gradient_test": t, "minus_gamma_gradient": -g,
                             "sign_agreement": bool(np.all(np.sign(t[g != 0]) == np.sign(-g[g != 0])))}
    run.write_json("identity.json", payload)
    if not rep.converged:
        raise _Unconverged(rep.message)


COMMANDS = {
    "limit-profile": cmd_limit_profile,
    "gamma-map": cmd_gamma_map,
    "frozen-sigma": cmd_frozen_sigma,
    "solve": cmd_solve,
    "concentrate": cmd_concentrate,
    "reduce": cmd_reduce,
    "multiplicity": cmd_multiplicity,
    "identity-check": cmd_identity_check,
}


# ----------------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="concentra", description="Concentrating solutions of anisotropic NLS-type equations.")
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", required=True, help="INI file with [problem], [solver], [run] sections")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override a config entry (section.key=value); repeatable")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _error(exc: BaseException, code: int) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    key = getattr(exc, "key", None)
    if key is not None:
        payload["key"] = key
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        COMMANDS[args.subcommand](Run(args.subcommand, cfg, args.out))
    except (ConfigError, DomainError, GridSizeError, PreconditionError) as exc:
        return _error(exc, EXIT_VALIDATION)
    except (_Unconverged, NonConvergenceError, SolverError) as exc:
        return _error(exc, EXIT_NONCONVERGENCE)
    except ConcentraError as exc:
        return _error(exc, EXIT_VALIDATION)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
