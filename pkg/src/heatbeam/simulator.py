"""Time integration of the controlled coupled system and of its adjoint, with an energy audit.

Every step is a monolithic solve of the per-mode system (I - c dt A_k) X = rhs;
the step matrices are factorized once per (grid, alpha, dt, scheme).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.linalg import expm

from .grid import RectGrid, TimeGrid
from .operators import CoupledState, ModeSystem, hilbert_inner_arrays
from .weights import ObservationRegions

SCHEMES = ("implicit-euler", "crank-nicolson")


def _check_scheme(scheme: str) -> str:
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; choose one of {SCHEMES}")
    return scheme


class ModeStepper:
    """Precomputed one-step maps of a scheme for every Fourier mode."""

    def __init__(self, system: ModeSystem, dt: float, scheme: str = "implicit-euler"):
        if not dt > 0:
            raise ValueError("time step must be positive")
        self.system = system
        self.dt = float(dt)
        self.scheme = _check_scheme(scheme)
        eye = np.eye(system.size)
        theta = 1.0 if scheme == "implicit-euler" else 0.5
        self.theta = theta
        lhs = eye - theta * dt * system.matrices
        try:
            conds = np.linalg.cond(lhs)
        except np.linalg.LinAlgError:  # pragma: no cover - defensive
            conds = np.full(lhs.shape[0], np.inf)
        bad = np.nonzero(~np.isfinite(conds) | (conds > 1e14))[0]
        if bad.size:
            raise np.linalg.LinAlgError(f"singular step matrix for Fourier mode(s) {bad.tolist()}")
        self.inverse = np.linalg.inv(lhs)
        self.explicit = eye + (1 - theta) * dt * system.matrices
        self.sign = system.sign

    def step(self, coords: np.ndarray, forcing_old=None, forcing_new=None, adjoint: bool = False) -> np.ndarray:
        """One step; forcing in reduced modal coordinates (already projected)."""
        sign = self.sign if adjoint else 1.0
        x = coords * sign
        if self.theta < 1:
            x = batched_apply(self.explicit, x)
        if forcing_new is not None:
            if self.theta < 1:
                x = x + 0.5 * self.dt * (forcing_old + forcing_new) * sign
            else:
                x = x + self.dt * forcing_new * sign
        return batched_apply(self.inverse, x) * sign


def batched_apply(matrices: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Apply per-mode matrices (K x M x M) to coordinates (... x K x M)."""
    if coords.ndim == 2:
        return np.einsum("kij,kj->ki", matrices, coords)
    lead = coords.shape[:-2]
    K, M = coords.shape[-2:]
    flat = np.moveaxis(coords.reshape(-1, K, M), 1, 0)          # K x B x M
    out = np.matmul(flat, np.swapaxes(matrices, 1, 2).astype(coords.dtype, copy=False))
    return np.moveaxis(out, 0, 1).reshape(lead + (K, M))


@dataclass(frozen=True)
class SourceSpec:
    """Sources sampled on the time nodes: fluid G, beam H, controls g on omega and h on J.

    Each entry is None or an array with a leading time axis (length = number of
    time nodes); fluid arrays are n_points x n_layers, beam arrays n_points.
    Controls require ``regions``.
    """

    G: np.ndarray | None = None
    H: np.ndarray | None = None
    g: np.ndarray | None = None
    h: np.ndarray | None = None
    regions: ObservationRegions | None = None

    def __post_init__(self):
        if (self.g is not None or self.h is not None) and self.regions is None:
            raise ValueError("control sources need observation regions")

    @property
    def is_empty(self) -> bool:
        return all(x is None for x in (self.G, self.H, self.g, self.h))

    def modal(self, system: ModeSystem, n_nodes: int) -> np.ndarray | None:
        if self.is_empty:
            return None
        grid = system.grid
        n = grid.torus.n_points
        fluid = np.zeros((n_nodes,) + grid.shape)
        beam = np.zeros((n_nodes, n))
        for name, arr, target, mask in (
                ("G", self.G, fluid, None), ("H", self.H, beam, None),
                ("g", self.g, fluid, None if self.regions is None else self.regions.omega_mask(grid)),
                ("h", self.h, beam, None if self.regions is None else self.regions.J_mask(grid.torus))):
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=float)
            if arr.shape != target.shape:
                raise ValueError(f"source {name} has shape {arr.shape}, expected {target.shape}")
            target += arr if mask is None else arr * mask
        return system.forcing_to_modes(fluid, beam)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """States on the time nodes, stored as arrays; ``states`` builds CoupledState views."""

    time_grid: TimeGrid
    grid: RectGrid
    w: np.ndarray
    zeta: np.ndarray
    zeta_t: np.ndarray
    scheme: str
    alpha: float
    dissipation: dict = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        return self.time_grid.nodes

    def state(self, index: int) -> CoupledState:
        return CoupledState.from_arrays(self.grid, self.w[index], self.zeta[index], self.zeta_t[index])

    @cached_property
    def states(self) -> list[CoupledState]:
        return [self.state(i) for i in range(self.w.shape[0])]

    def arrays(self):
        return self.w, self.zeta, self.zeta_t

    def norms(self) -> np.ndarray:
        return np.sqrt(np.maximum(hilbert_inner_arrays(self.arrays(), self.arrays(), self.grid), 0.0))

    def component_norms(self) -> dict:
        dx = self.grid.torus.spacing
        from .operators import a1_values
        return {"fluid": np.sqrt(np.sum(self.w ** 2 * self.grid.vertical_weights, axis=(1, 2)) * dx),
                "displacement": np.sqrt(np.maximum(np.sum(a1_values(self.zeta) * self.zeta, axis=1) * dx, 0)),
                "velocity": np.sqrt(np.sum(self.zeta_t ** 2, axis=1) * dx)}

    def to_csv(self, path, snapshots: bool = False) -> None:
        """Columns: time, energy norm, per-component norms; optional flattened fields."""
        comps = self.component_norms()
        norms = self.norms()
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            header = ["time", "h_norm", "fluid_norm", "displacement_norm", "velocity_norm"]
            if snapshots:
                n, L = self.grid.shape
                header += [f"w_{i}_{j}" for i in range(n) for j in range(L)]
                header += [f"zeta_{i}" for i in range(n)] + [f"zeta_t_{i}" for i in range(n)]
            writer.writerow(header)
            for idx, t in enumerate(self.times):
                row = [t, norms[idx], comps["fluid"][idx], comps["displacement"][idx], comps["velocity"][idx]]
                if snapshots:
                    row += list(self.w[idx].ravel()) + list(self.zeta[idx]) + list(self.zeta_t[idx])
                writer.writerow([format(float(v), ".17g") for v in row])


_STEPPERS: dict = {}


def mode_stepper(grid: RectGrid, alpha: float, dt: float, scheme: str) -> ModeStepper:
    key = (grid, float(alpha), float(dt), scheme)
    if key not in _STEPPERS:
        if len(_STEPPERS) > 64:
            _STEPPERS.clear()
        _STEPPERS[key] = ModeStepper(ModeSystem(grid, alpha), dt, scheme)
    return _STEPPERS[key]


def _integrate(Y0: CoupledState, src: SourceSpec | None, tg: TimeGrid, alpha: float, scheme: str,
               adjoint: bool) -> Trajectory:
    if tg.interior_only:
        raise ValueError("time stepping needs a grid that includes t = 0")
    if not Y0.in_domain():
        raise ValueError(f"initial state violates trace compatibility (defect {Y0.trace_defect():.3e})")
    stepper = mode_stepper(Y0.grid, alpha, tg.step, _check_scheme(scheme))
    system = stepper.system
    n_nodes = tg.nodes.size
    forcing = None if src is None else src.modal(system, n_nodes)
    coords = np.empty((n_nodes,) + (system.k.size, system.size), dtype=complex)
    coords[0] = system.state_to_modes(Y0)
    for n in range(1, n_nodes):
        if forcing is None:
            coords[n] = stepper.step(coords[n - 1], adjoint=adjoint)
        else:
            coords[n] = stepper.step(coords[n - 1], forcing[n - 1], forcing[n], adjoint=adjoint)
    w, zeta, zeta_t = system.from_modes(coords)
    traj = Trajectory(tg, Y0.grid, w, zeta, zeta_t, scheme, float(alpha))
    if src is None or src.is_empty:
        object.__setattr__(traj, "dissipation", energy_audit(traj, alpha))
    return traj


def solve_forward(Y0: CoupledState, src: SourceSpec | None, tg: TimeGrid, alpha: float,
                  scheme: str = "implicit-euler") -> Trajectory:
    """Controlled forward dynamics dY/dt = A Y + F, monolithic per-mode solves."""
    return _integrate(Y0, src, tg, alpha, scheme, adjoint=False)


def solve_adjoint(V0: CoupledState, tg: TimeGrid, alpha: float, scheme: str = "implicit-euler") -> Trajectory:
    """Homogeneous adjoint system from data (u0, eta0, eta1); same kernel as the forward solve."""
    return _integrate(V0, None, tg, alpha, scheme, adjoint=False)


def solve_dual(V0: CoupledState, tg: TimeGrid, alpha: float, scheme: str = "implicit-euler") -> Trajectory:
    """Evolution under the discrete transpose of the forward scheme (generator A*)."""
    return _integrate(V0, None, tg, alpha, scheme, adjoint=True)


def flip_displacement(Y: CoupledState) -> CoupledState:
    """S Y with S = diag(1, -1, 1); A* = S A S."""
    return CoupledState.from_arrays(Y.grid, Y.w.values, -Y.zeta.values, Y.zeta_t.values)


# ---------------------------------------------------------------- energy

def dissipation_rate(w, zeta_t, grid: RectGrid, alpha: float) -> np.ndarray:
    """||grad w||^2 + alpha ||d_x1 zeta_t||^2 + alpha ||zeta_t||^2 in the discrete norms of the scheme."""
    h = grid.layer_spacing
    dx = grid.torus.spacing
    vertical = np.sum(np.diff(w, axis=-1) ** 2, axis=(-2, -1)) / h * dx
    k2 = grid.torus.wavenumbers ** 2
    weights = grid.torus.parseval_weights * dx  # |rfft|^2 -> L^2 via Parseval
    w_hat = np.fft.rfft(w, axis=-2)
    horizontal = np.sum(k2[:, None] * np.abs(w_hat) ** 2 * grid.vertical_weights * weights[:, None], axis=(-2, -1))
    v_hat = np.fft.rfft(zeta_t, axis=-1)
    beam = alpha * np.sum((k2 + 1) * np.abs(v_hat) ** 2 * weights, axis=-1)
    return vertical + horizontal + beam


def energy_audit(traj: Trajectory, alpha: float) -> dict:
    """Per-step energy E = ||Y||^2/2 and residuals of the discrete energy identity.

    ``residual`` is the literal E' + D balance (E_{n+1} - E_n + dt D); for
    implicit Euler it equals minus the numerical dissipation ||Y_{n+1} - Y_n||^2/2,
    which ``scheme_residual`` adds back (zero up to rounding).  ``alpha_term``
    is the beam damping part of D at each node.
    """
    grid = traj.grid
    arrays = traj.arrays()
    energy = 0.5 * hilbert_inner_arrays(arrays, arrays, grid)
    dt = traj.time_grid.step
    w, zeta, v = arrays
    if traj.scheme == "implicit-euler":
        rate = dissipation_rate(w[1:], v[1:], grid, alpha)
        jumps = tuple(a[1:] - a[:-1] for a in arrays)
        numerical = 0.5 * hilbert_inner_arrays(jumps, jumps, grid)
    else:
        rate = dissipation_rate(0.5 * (w[1:] + w[:-1]), 0.5 * (v[1:] + v[:-1]), grid, alpha)
        numerical = np.zeros_like(rate)
    residual = energy[1:] - energy[:-1] + dt * rate
    dx = grid.torus.spacing
    k2 = grid.torus.wavenumbers ** 2
    v_hat = np.fft.rfft(v, axis=-1)
    alpha_term = alpha * np.sum((k2 + 1) * np.abs(v_hat) ** 2 * grid.torus.parseval_weights * dx, axis=-1)
    return {"energy": energy, "dissipation": rate, "residual": residual,
            "scheme_residual": residual + numerical, "alpha_term": alpha_term}


def modal_energy(traj: Trajectory) -> np.ndarray:
    """Energy per Fourier mode and time node (shape n_times x n_modes)."""
    system = ModeSystem(traj.grid, traj.alpha)
    coords = system.to_modes(*traj.arrays())
    return 0.5 * np.sum(system.gram * np.abs(coords) ** 2, axis=-1)


# ---------------------------------------------------------------- resolvent bound

def check_resolvent_bound(alpha: float, n_samples: int, grid: RectGrid | None = None,
                          rng: np.random.Generator | None = None, single_mode: int | None = None,
                          n_modes: int = 3, vertical_modes: int = 3) -> float:
    """min over random trace-compatible Y of (1 + alpha) ||A Y|| / ||Y||.

    Samples carry only low horizontal and vertical content, where the infimum lives.
    """
    from .operators import random_state
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    grid = grid or RectGrid.uniform(64, 33)
    rng = rng or np.random.default_rng(0)
    system = ModeSystem(grid, alpha)
    best = np.inf
    for _ in range(n_samples):
        coords = system.state_to_modes(random_state(grid, rng, 2.0, n_modes, vertical_modes))
        if single_mode is not None:
            keep = np.zeros_like(coords)
            keep[single_mode] = coords[single_mode]
            coords = keep
        image = system.apply(coords)
        ratio = np.sqrt(system.inner(image, image) / system.inner(coords, coords))
        best = min(best, float(ratio))
    return (1 + alpha) * best


def resolvent_constant_exact(alpha: float, grid: RectGrid | None = None, modes=None) -> float:
    """(1 + alpha) * min over modes of the smallest singular value of A_k in the energy metric."""
    grid = grid or RectGrid.uniform(64, 33)
    system = ModeSystem(grid, alpha)
    modes = range(system.k.size) if modes is None else modes
    smallest = np.inf
    for m in modes:
        root = np.sqrt(system.gram[m])
        scaled = root[:, None] * system.matrices[m] / root[None, :]
        smallest = min(smallest, np.linalg.svd(scaled, compute_uv=False)[-1])
    return (1 + alpha) * float(smallest)


# ---------------------------------------------------------------- semi-discrete reference

def exponential_reference(Y0: CoupledState, alpha: float, t: float, forcing_profile=None) -> CoupledState:
    """Exact semi-discrete solution at time t for sources e^{-t} (G, H) (optional).

    ``forcing_profile`` = (G, H) spatial profiles; the source is e^{-t} times them.
    """
    system = ModeSystem(Y0.grid, alpha)
    x0 = system.state_to_modes(Y0)
    out = np.empty_like(x0)
    f = None if forcing_profile is None else system.forcing_to_modes(*forcing_profile)
    eye = np.eye(system.size)
    for m in range(system.k.size):
        prop = expm(system.matrices[m] * t)
        if f is None:
            out[m] = prop @ x0[m]
        else:
            c = -np.linalg.solve(system.matrices[m] + eye, f[m])
            out[m] = prop @ (x0[m] - c) + np.exp(-t) * c
    return system.modes_to_state(out)
