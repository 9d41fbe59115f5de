"""Experiment configuration: an INI file with [problem], [solver] and [run]
sections, typed against a fixed schema. Unknown sections or keys are errors.

Vectors are comma separated (``0.2, 0.1``); point lists separate points with
semicolons (``-1, 0; 1, 0``); a box is ``lo1, hi1, lo2, hi2, ...``.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError
from .fields import (
    AffineDiffusion,
    ConstantDiffusion,
    ConstantPotential,
    DiagonalDiffusion,
    GaussianWells,
    QuadraticWell,
    check_exponent,
)


def _float(s):
    return float(s)


def _int(s):
    return int(s)


def _str(s):
    return str(s).strip()


def _vec(s):
    s = str(s).strip()
    if not s:
        return np.zeros(0)
    return np.array([float(t) for t in s.split(",")], dtype=float)


def _points(s):
    s = str(s).strip()
    if not s:
        return []
    return [_vec(t) for t in s.split(";") if t.strip()]


# key -> (parser, default); a default of None means "required when used"
SCHEMA = {
    "problem": {
        "N": (_int, 2),
        "p": (_float, 3.0),
        "L": (_float, 1.6),
        "n": (_int, 129),
        "potential": (_str, "quadratic"),
        "potential_value": (_float, 1.0),
        "well_c": (_float, 1.0),
        "well_center": (_vec, None),
        "well_base": (_float, 1.0),
        "wells_vinf": (_float, 3.0),
        "wells_depths": (_vec, None),
        "wells_centers": (_points, None),
        "wells_widths": (_vec, None),
        "diffusion": (_str, "identity"),
        "diffusion_matrix": (_vec, None),
        "diag_a": (_vec, None),
        "diag_b": (_vec, None),
        "diag_q": (_vec, None),
        "diag_center": (_vec, None),
        "diag_nu": (_float, None),
        "affine_a0": (_vec, None),
        "affine_slopes": (_vec, None),
        "affine_nu": (_float, None),
        "lambda": (_vec, None),
        "theta": (_float, None),
        "k": (_float, None),
    },
    "solver": {
        "descent_tol": (_float, 1e-4),
        "newton_tol": (_float, 1e-9),
        "max_iter": (_int, 10000),
        "shoot_tol": (_float, 1e-14),
        "r_max": (_float, 20.0),
        "gamma_tol": (_float, 1e-10),
        "coarse_grid": (_int, 41),
        "frozen_tol": (_float, 1e-7),
        "mp_nodes": (_int, 0),
        "mp_max_sweeps": (_int, 2000),
        "mp_stall_rtol": (_float, 1e-6),
        "correction_tol": (_float, 1e-10),
        "h_xi": (_float, 1e-3),
    },
    "run": {
        "eps": (_float, 0.1),
        "eps0": (_float, 0.5),
        "levels": (_int, 4),
        "points_per_width": (_float, 4.0),
        "seed_points": (_points, None),
        "z_points": (_points, None),
        "frozen_L": (_float, 15.0),
        "frozen_n": (_int, 257),
        "gamma_samples": (_int, 41),
        "xi_box": (_vec, None),
        "xi_samples": (_int, 5),
        "reduce_n": (_int, 161),
        "pin_point": (_vec, None),
    },
}


@dataclass
class ExperimentConfig:
    """Resolved configuration: every schema key has a value (possibly None)."""

    problem: dict
    solver: dict
    run: dict
    sources: list = field(default_factory=list)

    def section(self, name: str) -> dict:
        return getattr(self, name)

    def require(self, section: str, key: str):
        v = self.section(section)[key]
        if v is None or (isinstance(v, (list, np.ndarray)) and len(v) == 0):
            raise ConfigError(f"missing required key [{section}] {key}", key=f"{section}.{key}")
        return v

    def header_lines(self) -> list:
        """Full resolved config as ``section.key = value`` lines, in schema order."""
        lines = ["concentra resolved config"]
        for sec in SCHEMA:
            for key in SCHEMA[sec]:
                lines.append(f"{sec}.{key} = {format_value(self.section(sec)[key])}")
        return lines

    # field construction -----------------------------------------------------

    def potential(self):
        pr = self.problem
        N = pr["N"]
        kind = pr["potential"]
        if kind == "constant":
            return ConstantPotential(pr["potential_value"])
        if kind == "quadratic":
            c = pr["well_center"] if pr["well_center"] is not None else np.zeros(N)
            _check_len("problem.well_center", c, N)
            return QuadraticWell(pr["well_c"], c, pr["well_base"])
        if kind == "gaussian":
            depths = self.require("problem", "wells_depths")
            centers = self.require("problem", "wells_centers")
            widths = self.require("problem", "wells_widths")
            for c in centers:
                _check_len("problem.wells_centers", c, N)
            return GaussianWells(pr["wells_vinf"], depths, np.array(centers), widths)
        raise ConfigError(f"unknown potential family {kind!r} (constant, quadratic, gaussian)",
                          key="problem.potential")

    def diffusion(self):
        pr = self.problem
        N = pr["N"]
        kind = pr["diffusion"]
        if kind == "identity":
            return ConstantDiffusion(np.eye(N))
        if kind == "constant":
            m = self.require("problem", "diffusion_matrix")
            _check_len("problem.diffusion_matrix", m, N * N)
            return ConstantDiffusion(m.reshape(N, N))
        if kind == "diagonal":
            a = pr["diag_a"] if pr["diag_a"] is not None else np.ones(N)
            _check_len("problem.diag_a", a, N)
            b = None if pr["diag_b"] is None else pr["diag_b"].reshape(N, N)
            q = None if pr["diag_q"] is None else pr["diag_q"].reshape(N, N)
            return DiagonalDiffusion(a, b, q, pr["diag_center"], pr["diag_nu"])
        if kind == "affine":
            a0 = self.require("problem", "affine_a0")
            sl = self.require("problem", "affine_slopes")
            _check_len("problem.affine_a0", a0, N * N)
            _check_len("problem.affine_slopes", sl, N * N * N)
            return AffineDiffusion(a0.reshape(N, N), sl.reshape(N, N, N), self.require("problem", "affine_nu"))
        raise ConfigError(f"unknown diffusion family {kind!r} (identity, constant, diagonal, affine)",
                          key="problem.diffusion")

    def lambda_box(self) -> np.ndarray:
        box = self.require("problem", "lambda")
        N = self.problem["N"]
        _check_len("problem.lambda", box, 2 * N)
        return box.reshape(N, 2)

    def validate(self) -> None:
        pr = self.problem
        if pr["N"] < 1:
            raise ConfigError("N must be a positive integer", key="problem.N")
        try:
            check_exponent(pr["N"], pr["p"])
        except Exception as exc:
            raise ConfigError(str(exc), key="problem.p") from exc
        if not pr["L"] > 0:
            raise ConfigError("L must be positive", key="problem.L")
        if pr["n"] < 3:
            raise ConfigError("n must be at least 3", key="problem.n")
        for sec, key in (("run", "eps"), ("run", "eps0")):
            if not self.section(sec)[key] > 0:
                raise ConfigError(f"{key} must be positive", key=f"{sec}.{key}")


def _check_len(name, v, n):
    if np.asarray(v).size != n:
        raise ConfigError(f"{name} needs {n} values, got {np.asarray(v).size}", key=name)


def format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, np.ndarray):
        return ", ".join(repr(float(x)) for x in v)
    if isinstance(v, list):
        return "; ".join(format_value(np.asarray(x, dtype=float)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(section: str, key: str, raw: str):
    if section not in SCHEMA:
        raise ConfigError(f"unknown section [{section}]", key=section)
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown key [{section}] {key}", key=f"{section}.{key}")
    parser = SCHEMA[section][key][0]
    try:
        return parser(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"cannot parse [{section}] {key} = {raw!r}: {exc}", key=f"{section}.{key}") from exc


def load_config(path: Optional[str] = None, overrides: Optional[list] = None) -> ExperimentConfig:
    """Read ``path`` and apply ``section.key=value`` overrides (later wins)."""
    values = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}
    sources = []
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";;"))
        cp.optionxform = str
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found", key="config") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config file: {exc}", key="config") from exc
        for sec in cp.sections():
            for key, raw in cp.items(sec):
                values.setdefault(sec, {})
                values[sec][key] = _parse(sec, key, raw)
        sources.append(str(path))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value", key=item)
        lhs, raw = item.split("=", 1)
        if "." in lhs:
            sec, key = lhs.strip().split(".", 1)
        else:
            key = lhs.strip()
            owners = [s for s in SCHEMA if key in SCHEMA[s]]
            if len(owners) != 1:
                raise ConfigError(f"unknown key {key!r} in override", key=key)
            sec = owners[0]
        values[sec][key] = _parse(sec, key, raw.strip())
        sources.append(f"--set {lhs.strip()}={raw.strip()}")
    cfg = ExperimentConfig(values["problem"], values["solver"], values["run"], sources)
    cfg.validate()
    return cfg
