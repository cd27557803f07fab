"""Command-line entry point: run configuration, dispatch and result persistence.

Exit codes: 0 when every assertion of the run holds, 1 on an assertion
failure, 2 on a configuration or precondition error.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import hashlib
import json
import math
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .carleman.decomposition import conjugate_decompose
from .carleman.functionals import (BEAM_THEOREMS, InadmissibleError, beam_inequality_check, calibrate_then_verify,
                                   coupled_inequality_check, heat_inequality_check, random_adjoint_trajectories,
                                   weight_family)
from .carleman.ibp import ALL_PAIRS, REDUCED, verify_ibp_identity
from .carleman.samples import random_beam_sample, random_heat_sample
from .control import cost_sweep_alpha, cost_sweep_T, duality_check, hum_control, observability_gramian
from .grid import RectGrid, TimeGrid
from .operators import random_state
from .simulator import SCHEMES, energy_audit, solve_adjoint, solve_forward
from .weights import (Arc, Box, Calibration, ObservationRegions, absorption_window, alpha_star, beam_params,
                      build_spatial_weights, calibration, explicit_params, regime_params)

COMMANDS = ("simulate", "adjoint", "hum", "sweep-T", "sweep-alpha", "gramian", "audit-decomp", "audit-ibp",
            "audit-beam", "audit-heat", "audit-coupled", "alpha-star", "weights-inspect")
EXIT_OK, EXIT_ASSERTION, EXIT_CONFIG = 0, 1, 2
ENERGY_TOL = 1e-12
HUM_TERMINAL_TOL = 1e-3
DECOMP_TOL = 1e-8
IBP_TOL = 1e-7
IBP_DEFAULT_GRID = (128, 256)
IBP_DEFAULT_PARAMS = (1.0, 0.05, 0.05)  # s, lambda, mu: moderate weights keep every node resolvable


class ConfigError(ValueError):
    """Invalid run configuration; ``messages`` holds one entry per offending field."""

    def __init__(self, messages: list[str]):
        super().__init__("; ".join(messages))
        self.messages = messages


# ---------------------------------------------------------------- configuration

def _opt_float(text):
    return None if text in (None, "", "none", "None") else float(text)


def _opt_int(text):
    return None if text in (None, "", "none", "None") else int(text)


def _float_list(text):
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).replace(",", " ").split()]


def _flag(text):
    if isinstance(text, bool):
        return text
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# section -> (field, parser, help)
SCHEMA = {
    "geometry": [
        ("n_points", int, "horizontal grid points (even)"),
        ("n_layers", int, "vertical nodes including both walls"),
        ("omega", str, "interior patch 'x1_start x1_length x2_low x2_high' or 'none'"),
        ("J", str, "beam observation arc 'start length' or 'none'"),
    ],
    "physics": [
        ("alpha", float, "beam damping"),
        ("T", float, "time horizon"),
        ("k", float, "time exponent of the weights"),
    ],
    "weights": [
        ("tau", _opt_float, "lambda scale (default from the calibration file)"),
        ("theta", _opt_float, "mu scale (default from the calibration file)"),
        ("s", _opt_float, "explicit s (with lam and mu)"),
        ("lam", _opt_float, "explicit lambda"),
        ("mu", _opt_float, "explicit mu"),
        ("calibration", str, "calibration file (empty = bundled)"),
    ],
    "experiment": [
        ("scheme", str, "time scheme: implicit-euler or crank-nicolson"),
        ("dt", float, "time step"),
        ("epsilon", float, "HUM penalty"),
        ("solver", str, "HUM solver: direct or cg"),
        ("T_list", _float_list, "horizons for sweeps"),
        ("alpha_list", _float_list, "damping values for sweeps"),
        ("basis_size", int, "Gramian basis size"),
        ("n_samples", int, "verification (or audit) sample count"),
        ("n_calibration", int, "calibration sample count"),
        ("margin", float, "calibrate-then-verify margin"),
        ("theorem", str, "beam estimate: 1.6, 1.7 or 1.8"),
        ("beta", float, "cross-product splitting parameter"),
        ("i", _opt_int, "IBP row index (1..8)"),
        ("j", _opt_int, "IBP column index (1..7)"),
        ("n_t", _opt_int, "audit time nodes"),
        ("n_x", _opt_int, "audit x1 nodes"),
        ("ablation", _flag, "also run the coupled estimate without the J observation"),
        ("snapshots", _flag, "export full fields with trajectories"),
    ],
    "output": [
        ("output", str, "output directory"),
        ("seed", int, "seed of the single random generator"),
    ],
}


@dataclass
class RunConfig:
    experiment: str = "alpha-star"
    n_points: int = 64
    n_layers: int = 33
    omega: str = "1.9 2.8 0.2 0.8"
    J: str = "0 2"
    alpha: float = 1.0
    T: float = 1.0
    k: float = 2.0
    tau: float | None = None
    theta: float | None = None
    s: float | None = None
    lam: float | None = None
    mu: float | None = None
    calibration: str = ""
    scheme: str = "implicit-euler"
    dt: float = 1.0 / 64
    epsilon: float = 1e-8
    solver: str = "direct"
    T_list: list = field(default_factory=lambda: [0.25, 0.5, 0.75, 1.0, 1.5, 2.0])
    alpha_list: list = field(default_factory=lambda: [0.5, 1.0, 2.0, 8.0])
    basis_size: int = 200
    n_samples: int = 10
    n_calibration: int = 20
    margin: float = 2.0
    theorem: str = "1.7"
    beta: float = 1.0
    i: int | None = None
    j: int | None = None
    n_t: int | None = None
    n_x: int | None = None
    ablation: bool = False
    snapshots: bool = False
    output: str = "heatbeam-out"
    seed: int = 0

    @classmethod
    def from_file(cls, path, experiment: str) -> "RunConfig":
        parser = configparser.ConfigParser()
        parser.optionxform = str  # keep field case (T, J, T_list)
        with open(path, encoding="utf-8") as handle:
            parser.read_file(handle)
        values, errors = {}, []
        known = {name: conv for fields in SCHEMA.values() for name, conv, _ in fields}
        for section in parser.sections():
            if section not in SCHEMA:
                errors.append(f"unknown section [{section}]")
                continue
            for key, text in parser[section].items():
                if key not in known:
                    errors.append(f"[{section}] unknown field {key!r}")
                    continue
                try:
                    values[key] = known[key](text)
                except ValueError as exc:
                    errors.append(f"{key}: {exc}")
        if errors:
            raise ConfigError(errors)
        return cls(experiment=experiment, **values)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        """Config-file text that reproduces this run (the experiment is the subcommand)."""
        lines = []
        for section, fields in SCHEMA.items():
            lines.append(f"[{section}]")
            for name, _, _ in fields:
                val = getattr(self, name)
                if isinstance(val, list):
                    val = " ".join(repr(float(v)) for v in val)
                lines.append(f"{name} = {'' if val is None else val}")
            lines.append("")
        return "\n".join(lines)

    def config_hash(self) -> str:
        """sha256 of the canonical JSON of every numerical field (the output directory is excluded)."""
        data = {key: val for key, val in self.as_dict().items() if key != "output"}
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode("utf-8")).hexdigest()

    # derived objects
    def grid(self) -> RectGrid:
        return RectGrid.uniform(self.n_points, self.n_layers)

    def regions(self) -> ObservationRegions:
        base = ObservationRegions.default()
        omega = None
        if self.omega.strip().lower() != "none":
            x1_start, x1_len, low, high = (float(v) for v in self.omega.split())
            omega = Box(Arc(x1_start, x1_len), low, high)
        J = None
        if self.J.strip().lower() != "none":
            start, length = (float(v) for v in self.J.split())
            J = Arc(start, length)
        return ObservationRegions(omega, base.omega0, J, base.J_chain)

    def calib(self) -> Calibration:
        return Calibration.load(self.calibration) if self.calibration else calibration()

    def n_steps(self, T: float | None = None) -> int:
        return max(1, int(round((self.T if T is None else T) / self.dt)))

    def has_explicit_weights(self) -> bool:
        return None not in (self.s, self.lam, self.mu)


def validate(cfg: RunConfig) -> None:
    """Field-level checks against the preconditions of the dispatched module."""
    errors = []

    def need(ok, message):
        if not ok:
            errors.append(message)

    need(cfg.experiment in COMMANDS, f"experiment: unknown {cfg.experiment!r}")
    need(cfg.n_points >= 8 and cfg.n_points % 2 == 0, "n_points: must be even and at least 8")
    need(cfg.n_layers >= 5, "n_layers: must be at least 5")
    need(math.isfinite(cfg.alpha) and cfg.alpha >= 0, "alpha: must be finite and non-negative")
    need(math.isfinite(cfg.T) and cfg.T > 0, "T: must be positive")
    need(cfg.k >= 2, "k: must be at least 2")
    need(cfg.dt > 0 and cfg.dt <= cfg.T, "dt: must lie in (0, T]")
    need(cfg.epsilon > 0, "epsilon: must be positive")
    need(cfg.scheme in SCHEMES, f"scheme: expected one of {SCHEMES}")
    need(cfg.solver in ("direct", "cg"), "solver: expected 'direct' or 'cg'")
    need(len(cfg.T_list) > 0 and all(t > 0 for t in cfg.T_list), "T_list: needs positive horizons")
    need(all(b > a for a, b in zip(cfg.T_list, cfg.T_list[1:])), "T_list: must be increasing")
    need(len(cfg.alpha_list) > 0, "alpha_list: must be nonempty")
    need(cfg.basis_size >= 1, "basis_size: must be positive")
    need(cfg.n_samples >= 1, "n_samples: must be positive")
    need(cfg.n_calibration >= 1, "n_calibration: must be positive")
    need(cfg.margin >= 1, "margin: must be at least 1")
    need(cfg.theorem in BEAM_THEOREMS, f"theorem: expected one of {BEAM_THEOREMS}")
    need(0 <= cfg.beta < 4 / 3, "beta: must lie in [0, 4/3)")
    need((cfg.i is None) == (cfg.j is None), "i, j: give both indices or neither")
    if cfg.i is not None and cfg.j is not None:
        need((cfg.i, cfg.j) in REDUCED, "i, j: unknown pair; i in 1..8, j in 1..7")
    need(cfg.n_t is None or cfg.n_t >= 4, "n_t: must be at least 4")
    need(cfg.n_x is None or (cfg.n_x >= 8 and cfg.n_x % 2 == 0), "n_x: must be even and at least 8")
    need(cfg.seed >= 0, "seed: must be non-negative")
    explicit = [cfg.s, cfg.lam, cfg.mu]
    need(all(v is None for v in explicit) or all(v is not None for v in explicit), "s, lam, mu: give all or none")
    if cfg.experiment in ("sweep-alpha",):
        need(all(a > 0 for a in cfg.alpha_list), "alpha_list: sweep-alpha needs alpha > 0")
    if cfg.experiment in ("audit-decomp", "audit-heat", "audit-coupled") and not cfg.has_explicit_weights():
        need(cfg.alpha > 0, f"alpha: {cfg.experiment} at regime parameters needs alpha > 0")
    try:
        cfg.regions()
    except ValueError as exc:
        errors.append(f"omega, J: {exc}")
    if cfg.calibration:
        try:
            Calibration.load(cfg.calibration)
        except (OSError, KeyError, ValueError, configparser.Error) as exc:
            errors.append(f"calibration: cannot load {cfg.calibration!r} ({exc})")
    if errors:
        raise ConfigError(errors)


# ---------------------------------------------------------------- result store

def _cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


class ResultStore:
    """Artifacts of one run; every CSV carries the config hash as its last column."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = Path(cfg.output)
        self.hash = cfg.config_hash()
        self.artifacts: list[str] = []
        self.assertions: dict[str, bool] = {}
        self.summary: dict = {}

    def write_csv(self, name: str, header: list[str], rows) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.root / name
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(list(header) + ["config_hash"])
            for row in rows:
                writer.writerow([_cell(v) for v in row] + [self.hash])
        self.artifacts.append(name)
        return path

    def write_json(self, name: str, payload: dict) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.root / name
        data = dict(payload, config_hash=self.hash)
        path.write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        self.artifacts.append(name)
        return path

    def check(self, name: str, ok: bool) -> bool:
        self.assertions[name] = bool(ok)
        return bool(ok)

    @property
    def passed(self) -> bool:
        return all(self.assertions.values())

    def write_manifest(self) -> Path:
        cfg = self.cfg
        calib = cfg.calib()
        manifest = {
            "command": cfg.experiment,
            "config": cfg.as_dict(),
            "config_text": cfg.dump(),
            "config_hash": self.hash,
            "calibration_version": calib.version,
            "calibration": calib.dump(),
            "seed": cfg.seed,
            "package_version": __version__,
            "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "artifacts": list(self.artifacts),
            "assertions": self.assertions,
            "passed": self.passed,
            "summary": self.summary,
        }
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.root / "manifest.json"
        path.write_text(json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else repr(value)
    return value


# ---------------------------------------------------------------- experiments

def _carleman_params(cfg: RunConfig, beam: bool = False):
    calib = cfg.calib()
    if cfg.has_explicit_weights():
        return explicit_params(cfg.alpha, cfg.s, cfg.lam, cfg.mu, cfg.k, cfg.T, calib)
    maker = beam_params if beam else regime_params
    return maker(cfg.alpha, cfg.tau, cfg.theta, cfg.T, cfg.k, calib)


def _trajectory_rows(traj, snapshots: bool):
    comps = traj.component_norms()
    norms = traj.norms()
    header = ["time", "h_norm", "fluid_norm", "displacement_norm", "velocity_norm"]
    if snapshots:
        n, L = traj.grid.shape
        header += [f"w_{a}_{b}" for a in range(n) for b in range(L)]
        header += [f"zeta_{a}" for a in range(n)] + [f"zeta_t_{a}" for a in range(n)]
    rows = []
    for idx, t in enumerate(traj.times):
        row = [t, norms[idx], comps["fluid"][idx], comps["displacement"][idx], comps["velocity"][idx]]
        if snapshots:
            row += list(traj.w[idx].ravel()) + list(traj.zeta[idx]) + list(traj.zeta_t[idx])
        rows.append(row)
    return header, rows


def _energy_check(store: ResultStore, traj, alpha: float) -> None:
    audit = energy_audit(traj, alpha)
    energy = audit["energy"]
    growth = np.diff(energy) / np.maximum(energy[:-1], 1e-300)
    store.summary["max_relative_energy_growth"] = float(np.max(growth, initial=-np.inf))
    store.summary["max_scheme_residual"] = float(np.max(np.abs(audit["scheme_residual"]), initial=0.0))
    store.check("energy_non_increasing", bool(np.all(growth <= ENERGY_TOL)))


def run_simulate(cfg: RunConfig, store: ResultStore, rng: np.random.Generator) -> None:
    grid = cfg.grid()
    Y0 = random_state(grid, rng)
    traj = solve_forward(Y0, None, TimeGrid.uniform(cfg.T, cfg.n_steps()), cfg.alpha, cfg.scheme)
    store.write_csv("trajectory.csv", *_trajectory_rows(traj, cfg.snapshots))
    _energy_check(store, traj, cfg.alpha)


def run_adjoint(cfg: RunConfig, store: ResultStore, rng: np.random.Generator) -> None:
    grid = cfg.grid()
    V0 = random_state(grid, rng)
    traj = solve_adjoint(V0, TimeGrid.uniform(cfg.T, cfg.n_steps()), cfg.alpha, cfg.scheme)
    store.write_csv("adjoint_trajectory.csv", *_trajectory_rows(traj, cfg.snapshots))
    _energy_check(store, traj, cfg.alpha)


def run_hum(cfg: RunConfig, store: ResultStore, rng: np.random.Generator) -> None:
    Y0 = random_state(cfg.grid(), rng)
    res = hum_control(Y0, cfg.T, cfg.regions(), cfg.alpha, cfg.epsilon, n_steps=cfg.n_steps(), solver=cfg.solver)
    header = ["T", "alpha", "epsilon", "initial_norm", "terminal_norm", "cost", "dual_value", "penalty_bound",
              "iterations", "converged"]
    store.write_csv("hum.csv", header, [[cfg.T, cfg.alpha, cfg.epsilon, res.initial_norm, res.terminal_norm,
                                         res.cost, res.dual_value, res.penalty_bound, res.cg_iterations,
                                         res.converged]])
    store.summary.update(terminal_ratio=res.terminal_norm / res.initial_norm, cost=res.cost)
    store.check("terminal_norm_le_1e-3_initial", res.terminal_norm <= HUM_TERMINAL_TOL * res.initial_norm)
    store.check("penalty_identity", res.penalty_identity_holds)


def run_sweep_T(cfg: RunConfig, store: ResultStore, rng: np.random.Generator) -> None:
    Y0 = random_state(cfg.grid(), rng)
    out = cost_sweep_T(Y0, cfg.T_list, cfg.regions(), cfg.alpha, cfg.epsilon, cfg.dt)
    store.write_csv("sweep_T.csv", ["T", "inv_T", "cost", "log_cost", "terminal_norm", "converged"],
                    [[r["T"], 1 / r["T"], r["cost"], math.log(r["cost"]) if r["cost"] > 0 else -math.inf,
                      r["terminal_norm"], r["converged"]] for r in out["rows"]])
    fit = out["fit"]
    store.summary["fit"] = fit
    store.check("log_cost_linear_in_inv_T", fit["r_squared"] >= 0.9 and fit["slope"] > 0)


def run_sweep_alpha(cfg: RunConfig, store: ResultStore, rng: np.random.Generator) -> None:
    Y0 = random_state(cfg.grid(), rng)
    out = cost_sweep_alpha(Y0, cfg.alpha_list, cfg.T, cfg.regions(), cfg.epsilon, cfg.dt)
    store.write_csv("sweep_alpha.csv", ["alpha", "cost", "terminal_norm", "branch", "envelope", "converged"],
                    [[r["alpha"], r["cost"], r["terminal_norm"], r["branch"], env, r["converged"]]
                     for r, env in zip(out["rows"], out["envelope"])])
    store.check("costs_finite_positive", out["finite_positive"])


def run_gramian(cfg: RunConfig, store: ResultStore, rng: np.random.Generator) -> None:
    grid, regions = cfg.grid(), cfg.regions()
    reports = [observability_gramian(T, regions, cfg.alpha, cfg.basis_size, grid, cfg.dt) for T in cfg.T_list]
    store.write_csv("gramian.csv", ["T", "lambda_min", "K_T", "dimension", "symmetry_defect", "initial_constant"],
                    [[r.T, r.lambda_min, r.K_T, r.dimension, r.symmetry_defect, r.initial_constant]
                     for r in reports])
    K = [r.K_T for r in reports]
    nonempty = regions.omega is not None or regions.J is not None
    if nonempty:
        store.check("lambda_min_positive", all(r.lambda_min > 0 for r in reports))
    store.check("K_T_strictly_decreasing", all(b < a for a, b in zip(K, K[1:])))
    if nonempty and reports[-1].lambda_min > 0:
        dual = duality_check(reports[-1], regions, grid)
        store.summary["duality"] = dual
        store.write_csv("duality.csv", ["T", "datum", "cost_squared", "K_T", "ratio"],
                        [[reports[-1].T, label, dual[label]["cost_squared"], dual["K_T"], dual[label]["ratio"]]
                         for label in ("least_observable", "sharp")])
        store.check("duality_cost_le_1.1_K_T", all(dual[label]["ratio"] <= 1.1
                                                   for label in ("least_observable", "sharp")))


def run_audit_decomp(cfg: RunConfig, store: ResultStore, rng: np.random.Generator) -> None:
    grid, regions = cfg.grid(), cfg.regions()
    params = _carleman_params(cfg)
    wf = weight_family(params, regions, grid)
    n_t, n_x = cfg.n_t or 64, cfg.n_x or 64
    rows = []
    for idx in range(cfg.n_samples):
        eta = random_beam_sample(rng, cfg.T, n_x)
        d = conjugate_decompose(eta, params, wf, cfg.beta, n_t, n_x, precision="auto")
        rows.append([idx, cfg.alpha, cfg.beta, d.residual, d.residual_weighted, d.diagnostics["precision"]])
    store.write_csv("decomposition.csv", ["sample", "alpha", "beta", "residual", "residual_weighted", "precision"],
                    rows)
    store.summary["max_residual"] = max(r[3] for r in rows)
    store.check("residual_le_1e-8", all(r[3] <= DECOMP_TOL for r in rows))


def run_audit_ibp(cfg: RunConfig, store: ResultStore, rng: np.random.Generator) -> None:
    regions = cfg.regions()
    s, lam, mu = (cfg.s, cfg.lam, cfg.mu) if cfg.has_explicit_weights() else IBP_DEFAULT_PARAMS
    params = explicit_params(cfg.alpha, s, lam, mu, cfg.k, cfg.T, cfg.calib())
    n_t, n_x = cfg.n_t or IBP_DEFAULT_GRID[0], cfg.n_x or IBP_DEFAULT_GRID[1]
    wf = weight_family(params, regions, cfg.grid())
    pairs = ALL_PAIRS if cfg.i is None else [(cfg.i, cfg.j)]
    rows = []
    for idx in range(cfg.n_samples):
        eta = random_beam_sample(rng, cfg.T, cfg.n_points)
        d = conjugate_decompose(eta, params, wf, cfg.beta, n_t, n_x)
        for i, j in pairs:
            r = verify_ibp_identity(i, j, d)
            rows.append([idx, i, j, r.raw, r.reduced, r.main, r.remainder, r.rel_err])
    store.write_csv("ibp.csv", ["sample", "i", "j", "raw", "reduced", "main", "remainder", "rel_err"], rows)
    store.summary["max_rel_err"] = max(r[-1] for r in rows)
    store.check("rel_err_le_1e-7", all(r[-1] <= IBP_TOL for r in rows))


def _calibrated_rows(cal, ver):
    return ([["calibration", idx, r] for idx, r in enumerate(cal.ratios)]
            + [["verification", idx, r] for idx, r in enumerate(ver.ratios)])


def run_audit_beam(cfg: RunConfig, store: ResultStore, rng: np.random.Generator) -> None:
    params = _carleman_params(cfg, beam=True)
    regions, grid = cfg.regions(), cfg.grid()
    n_t = cfg.n_t or 64

    def samples(count):
        return [random_beam_sample(rng, cfg.T, grid.torus.n_points) for _ in range(count)]

    cal = beam_inequality_check(cfg.theorem, samples(cfg.n_calibration), params, regions, grid, n_t)
    ver = beam_inequality_check(cfg.theorem, samples(cfg.n_samples), params, regions, grid, n_t)
    check = calibrate_then_verify(cal.ratios, ver.ratios, cfg.margin)
    store.write_csv(f"beam_{cfg.theorem}.csv", ["set", "sample", "ratio"], _calibrated_rows(cal, ver))
    store.write_json(f"beam_{cfg.theorem}.json", {"calibration": cal.as_dict(), "verification": ver.as_dict(),
                                                  "check": check.as_dict()})
    store.summary["check"] = check.as_dict()
    store.check("zero_violations", check.passed)


def run_audit_heat(cfg: RunConfig, store: ResultStore, rng: np.random.Generator) -> None:
    params = _carleman_params(cfg)
    regions, grid = cfg.regions(), cfg.grid()
    n_t = cfg.n_t or 64

    def samples(count):
        return [random_heat_sample(rng, cfg.T, grid.torus.n_points) for _ in range(count)]

    cal = heat_inequality_check(samples(cfg.n_calibration), params, regions, grid, n_t)
    ver = heat_inequality_check(samples(cfg.n_samples), params, regions, grid, n_t)
    check = calibrate_then_verify(cal.ratios, ver.ratios, cfg.margin)
    store.write_csv("heat.csv", ["set", "sample", "ratio"], _calibrated_rows(cal, ver))
    store.write_json("heat.json", {"calibration": cal.as_dict(), "verification": ver.as_dict(),
                                   "check": check.as_dict()})
    agreement = max(max(cal.extra["sigma_agreement"].values()), max(ver.extra["sigma_agreement"].values()))
    store.summary.update(check=check.as_dict(), sigma_agreement=agreement)
    store.check("zero_violations", check.passed)
    store.check("sigma_paths_agree", agreement <= 1e-8)


def run_audit_coupled(cfg: RunConfig, store: ResultStore, rng: np.random.Generator) -> None:
    params = _carleman_params(cfg)
    regions, grid = cfg.regions(), cfg.grid()
    trajs = random_adjoint_trajectories(rng, cfg.n_calibration + cfg.n_samples, cfg.alpha, grid, cfg.T,
                                        cfg.n_steps(), cfg.scheme)
    cal = coupled_inequality_check(trajs[:cfg.n_calibration], params, regions)
    ver = coupled_inequality_check(trajs[cfg.n_calibration:], params, regions)
    check = calibrate_then_verify(cal.ratios, ver.ratios, cfg.margin)
    rows = _calibrated_rows(cal, ver)
    header = ["set", "sample", "ratio"]
    payload = {"calibration": cal.as_dict(), "verification": ver.as_dict(), "check": check.as_dict()}
    store.check("zero_violations", check.passed)
    if cfg.ablation:
        abl = coupled_inequality_check(trajs[cfg.n_calibration:], params, regions, include_J=False)
        violations = int(np.sum(abl.ratios > cfg.margin * check.c_hat))
        header.append("ablation_ratio")
        rows = [row + ([abl.ratios[row[1]]] if row[0] == "verification" else [""]) for row in rows]
        payload["ablation"] = dict(abl.as_dict(), violations=violations)
        store.check("ablation_violates_bound", violations > 0)
    store.write_csv("coupled.csv", header, rows)
    store.write_json("coupled.json", payload)
    store.summary.update(check=check.as_dict(), needle=ver.extra.get("needle"))


def run_alpha_star(cfg: RunConfig, store: ResultStore, rng: np.random.Generator) -> None:
    consts = alpha_star()
    beta, alpha = consts["beta_star"], consts["alpha_star"]
    print(f"beta_star = {beta:.17g}")
    print(f"alpha_star = {alpha:.17g}")
    store.write_csv("alpha_star.csv", ["beta_star", "alpha_star"], [[beta, alpha]])
    below = absorption_window(beta, alpha * (1 - 1e-9)).feasible
    above = absorption_window(beta, alpha * (1 + 1e-9)).feasible
    store.summary.update(beta_star=beta, alpha_star=alpha)
    store.check("window_flips_at_alpha_star", below != above)


def run_weights_inspect(cfg: RunConfig, store: ResultStore, rng: np.random.Generator) -> None:
    grid, regions = cfg.grid(), cfg.regions()
    spatial = build_spatial_weights(regions, grid)
    params = _carleman_params(cfg, beam=cfg.alpha == 0)
    x1 = grid.torus.nodes
    mid = grid.n_layers // 2
    store.write_csv("weights.csv", ["x1", "psi_I", "psi_I_x", "psi_Omega_mid"],
                    [[x, spatial.psi_I_at(x), spatial.psi_I_at(x, 1), spatial.psi_Omega_at(x, grid.vertical_nodes[mid])]
                     for x in x1])
    store.write_csv("admissibility.csv", ["condition", "holds"], [[k, v] for k, v in params.conditions.items()])
    summary = {"params": params.as_dict(), "Psi": spatial.Psi, "lambda_Psi": params.lam * spatial.Psi,
               "conditions": params.conditions, "regions": regions.describe()}
    if cfg.alpha > 0:
        window = absorption_window(alpha_star()["beta_star"], cfg.alpha)
        summary["absorption_window_feasible"] = window.feasible
    store.summary.update(summary)
    store.check("parameters_admissible", params.admissible)


HANDLERS = {
    "simulate": run_simulate, "adjoint": run_adjoint, "hum": run_hum, "sweep-T": run_sweep_T,
    "sweep-alpha": run_sweep_alpha, "gramian": run_gramian, "audit-decomp": run_audit_decomp,
    "audit-ibp": run_audit_ibp, "audit-beam": run_audit_beam, "audit-heat": run_audit_heat,
    "audit-coupled": run_audit_coupled, "alpha-star": run_alpha_star, "weights-inspect": run_weights_inspect,
}


def run(cfg: RunConfig) -> ResultStore:
    """Validate, dispatch and persist; raises ConfigError on invalid input."""
    validate(cfg)
    store = ResultStore(cfg)
    rng = np.random.default_rng(cfg.seed)
    HANDLERS[cfg.experiment](cfg, store, rng)
    store.write_manifest()
    return store


# ---------------------------------------------------------------- argument parsing

HELP = {
    "simulate": "forward trajectory from a seeded random state; checks energy decay",
    "adjoint": "adjoint trajectory from seeded random data; checks energy decay",
    "hum": "penalized HUM null control; checks the terminal norm and the penalty identity",
    "sweep-T": "control cost over horizons with the fit log(cost) = C/T + c",
    "sweep-alpha": "control cost over damping values",
    "gramian": "observability Gramian over horizons, K_T and the duality check",
    "audit-decomp": "residual of the conjugated beam decomposition",
    "audit-ibp": "integration-by-parts identities (all pairs or --i/--j)",
    "audit-beam": "calibrate-then-verify for a beam estimate (--theorem)",
    "audit-heat": "calibrate-then-verify for the heat estimate",
    "audit-coupled": "calibrate-then-verify for the coupled estimate (optional --ablation)",
    "alpha-star": "print beta*, alpha* and write them as a one-row CSV",
    "weights-inspect": "weight profiles and the admissibility report",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration file (key = value with section headers)")
    for section, fields in SCHEMA.items():
        group = common.add_argument_group(section)
        for name, conv, text in fields:
            flag = "--" + name.replace("_", "-") if name not in ("i", "j", "T", "J", "T_list") else \
                {"i": "--i", "j": "--j", "T": "--T", "J": "--J", "T_list": "--T-list"}[name]
            if conv is _float_list:
                group.add_argument(flag, dest=name, nargs="+", type=float, default=argparse.SUPPRESS, help=text)
            elif conv is _flag:
                group.add_argument(flag, dest=name, action=argparse.BooleanOptionalAction, default=argparse.SUPPRESS,
                                   help=text)
            else:
                group.add_argument(flag, dest=name, type=conv, default=argparse.SUPPRESS, help=text)
    parser = argparse.ArgumentParser(prog="heatbeam", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"heatbeam {__version__}")
    sub = parser.add_subparsers(dest="experiment", required=True, metavar="command")
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HELP[name])
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    values = vars(args).copy()
    experiment = values.pop("experiment")
    path = values.pop("config", None)
    cfg = RunConfig.from_file(path, experiment) if path else RunConfig(experiment=experiment)
    return dataclasses.replace(cfg, **values)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # argparse exits with code 2 on malformed flags
    try:
        cfg = config_from_args(args)
        store = run(cfg)
    except ConfigError as exc:
        for message in exc.messages:
            print(f"heatbeam: config error: {message}", file=sys.stderr)
        return EXIT_CONFIG
    except (InadmissibleError, ValueError, OSError) as exc:
        print(f"heatbeam {args.experiment}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for name, ok in store.assertions.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    print(f"manifest: {store.root / 'manifest.json'}")
    return EXIT_OK if store.passed else EXIT_ASSERTION


if __name__ == "__main__":
    sys.exit(main())
