"""Null controls by penalized HUM, observability Gramians and control-cost sweeps.

Discrete setting (implicit Euler, step map R, n_steps = N):
    Y_n = R (Y_{n-1} + dt P B u_n),  n = 1..N.
The transpose of the control-to-final-state map is W -> (B* V_n)_n with
V_N = R^T W, V_{n-1} = R^T V_n, where R^T is the energy-adjoint step (generator A*).
The dual functional
    J(W) = 1/2 sum_n dt |B* V_n|^2 + eps/2 |W|^2 + <R^N Y0, W>
is minimized by CG on (Lambda + eps) W = -R^N Y0; its minimizer gives the
controls u_n = B* V_n and the final state Y_N = -eps W.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh

from .grid import RectGrid, TimeGrid
from .operators import CoupledState, ModeSystem
from .simulator import SourceSpec, mode_stepper, solve_forward
from .weights import ObservationRegions

CG_TOL = 1e-10
CG_MAX_ITER = 500
DEFAULT_DT = 1.0 / 64


class ControlProblem:
    """Discrete controlled system on a fixed grid, horizon and step."""

    def __init__(self, grid: RectGrid, regions: ObservationRegions, alpha: float, T: float,
                 n_steps: int | None = None):
        if not T > 0:
            raise ValueError("T must be positive")
        self.grid = grid
        self.regions = regions
        self.alpha = float(alpha)
        self.T = float(T)
        self.n_steps = n_steps or max(1, int(round(T / DEFAULT_DT)))
        self.time_grid = TimeGrid.uniform(T, self.n_steps)
        self.dt = self.time_grid.step
        self.stepper = mode_stepper(grid, alpha, self.dt, "implicit-euler")
        self.system: ModeSystem = self.stepper.system
        self.omega_mask = regions.omega_mask(grid).astype(float)
        self.J_mask = regions.J_mask(grid.torus).astype(float)
        n = grid.torus.n_points
        # physical-space weights of the observation pairing
        self.omega_weights = self.omega_mask * grid.vertical_weights * grid.torus.spacing
        self.J_weights = self.J_mask * grid.torus.spacing
        self._n = n

    # physical <-> modal helpers on batches
    def observe(self, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """B* of modal states: (u on omega, eta_2 on J), zero-padded."""
        w, _, v = self.system.from_modes(coords)
        return w * self.omega_mask, v * self.J_mask

    def inject(self, g: np.ndarray, h: np.ndarray) -> np.ndarray:
        """P B (g, h) in modal coordinates."""
        return self.system.forcing_to_modes(g * self.omega_mask, h * self.J_mask)

    def observation_energy(self, g, h) -> np.ndarray:
        return np.sum(g * g * self.omega_weights, axis=(-2, -1)) + np.sum(h * h * self.J_weights, axis=-1)

    # building blocks
    def free_final(self, coords0: np.ndarray) -> np.ndarray:
        x = coords0
        for _ in range(self.n_steps):
            x = self.stepper.step(x)
        return x

    def dual_observations(self, W: np.ndarray):
        """Controls u_n = B* V_n, n = 1..N, for terminal adjoint data W (modal)."""
        N = self.n_steps
        g = np.empty((N,) + W.shape[:-2] + self.grid.shape)
        h = np.empty((N,) + W.shape[:-2] + (self._n,))
        v = W
        for n in range(N - 1, -1, -1):
            v = self.stepper.step(v, adjoint=True)
            g[n], h[n] = self.observe(v)
        return g, h

    def controlled_final(self, coords0: np.ndarray, g: np.ndarray, h: np.ndarray) -> np.ndarray:
        x = coords0
        for n in range(self.n_steps):
            forcing = self.inject(g[n], h[n])
            x = self.stepper.step(x, forcing, forcing)
        return x

    def normal_operator(self, W: np.ndarray) -> np.ndarray:
        """Lambda W = (control-to-state map)(its transpose) W."""
        g, h = self.dual_observations(W)
        return self.controlled_final(np.zeros_like(W), g, h)

    def inner(self, a: np.ndarray, b: np.ndarray):
        return self.system.inner(a, b)

    # real coordinates: real parts of every mode, imaginary parts of modes 1 .. K-2
    @property
    def dimension(self) -> int:
        K, M = self.system.k.size, self.system.size
        return (2 * K - 2) * M

    def to_real(self, coords: np.ndarray) -> np.ndarray:
        lead = coords.shape[:-2]
        return np.concatenate([coords.real.reshape(lead + (-1,)),
                               coords[..., 1:-1, :].imag.reshape(lead + (-1,))], axis=-1)

    def from_real(self, vectors: np.ndarray) -> np.ndarray:
        K, M = self.system.k.size, self.system.size
        lead = vectors.shape[:-1]
        coords = vectors[..., :K * M].reshape(lead + (K, M)).astype(complex)
        coords[..., 1:-1, :] += 1j * vectors[..., K * M:].reshape(lead + (K - 2, M))
        return coords

    def real_gram(self) -> np.ndarray:
        gram = self.system.gram
        return np.concatenate([gram.ravel(), gram[1:-1].ravel()])

    def normal_matrix(self) -> np.ndarray:
        """Lambda in real coordinates, by the recursion Lambda <- R (Lambda + dt Q) R^T.

        Q = P B B* is assembled column by column; R^T is the energy adjoint of the step.
        """
        D = self.dimension
        weights = self.real_gram()
        unit = self.from_real(np.eye(D))
        Q = self.to_real(self.inject(*self.observe(unit))).T

        inverse = self.stepper.inverse
        blocks = np.concatenate([inverse, inverse[1:-1]])       # step map, block diagonal in this layout
        n_blocks, M = blocks.shape[0], blocks.shape[1]
        blocks_t = np.ascontiguousarray(np.swapaxes(blocks, 1, 2))
        total = np.zeros((D, D))
        for _ in range(self.n_steps):
            total = np.matmul(blocks, (total + self.dt * Q).reshape(n_blocks, M, D)).reshape(D, D)
            scaled = (total / weights[None, :]).reshape(D, n_blocks, M).transpose(1, 0, 2)
            total = np.matmul(scaled, blocks_t).transpose(1, 0, 2).reshape(D, D) * weights[None, :]
        return total

    def averaged_gramian(self) -> np.ndarray:
        """Per-mode Gramian with the omega and J masks replaced by their x1-averages.

        It is block diagonal in the Fourier modes and energy-self-adjoint, and
        serves as the CG preconditioner.
        """
        system = self.system
        N = system.n_intervals
        regions = self.regions
        diag = np.zeros(system.size)
        if regions.omega is not None:
            x1_fraction = float(np.mean(regions.omega.x1.contains(self.grid.torus.nodes)))
            x2 = self.grid.vertical_nodes[1:N]
            rows = (x2 > regions.omega.x2_low) & (x2 < regions.omega.x2_high)
            diag[:N - 1] = x1_fraction * rows
        diag[N] = float(np.mean(self.J_mask)) / system.mass
        step = self.stepper.inverse
        adjoint_step = system.sign[:, None] * step * system.sign[None, :]
        total = np.zeros_like(step)
        left = np.broadcast_to(np.eye(system.size), step.shape).copy()
        right = left.copy()
        for _ in range(self.n_steps):
            left = step @ left
            right = right @ adjoint_step
            total += self.dt * (left * diag[None, None, :]) @ right
        return total


@dataclass
class ControlResult:
    g: np.ndarray
    h: np.ndarray
    cost: float
    terminal_norm: float
    epsilon: float
    cg_iterations: int
    dual_value: float
    converged: bool = True
    residual: float = 0.0
    initial_norm: float = 0.0
    time_grid: TimeGrid | None = None
    penalty_bound: float = 0.0
    extras: dict = field(default_factory=dict)

    @property
    def penalty_identity_holds(self) -> bool:
        """terminal_norm^2 <= 2 eps J (dual value), up to rounding."""
        return self.terminal_norm ** 2 <= self.penalty_bound ** 2 * (1 + 1e-8) + 1e-300


def _check_hum_inputs(epsilon, regions):
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if regions.omega is None and regions.J is None:
        raise ValueError("HUM needs a nonempty control region")


def hum_control(Y0: CoupledState, T: float, regions: ObservationRegions, alpha: float, epsilon: float,
                n_steps: int | None = None, tol: float = CG_TOL, max_iter: int = CG_MAX_ITER,
                basis: np.ndarray | None = None, strict: bool = False, solver: str = "direct") -> ControlResult:
    """Penalized HUM control steering Y0 towards zero at time T.

    ``solver='direct'`` assembles Lambda exactly and factors Lambda + eps;
    ``solver='cg'`` runs preconditioned CG on the same normal equation.

    ``basis`` (modal coordinates, shape b x modes x size, energy-orthonormal)
    restricts the adjoint data W to its span (dense Galerkin solve instead of CG).
    With ``strict`` a CG stall raises RuntimeError; otherwise it is reported.
    """
    _check_hum_inputs(epsilon, regions)
    if not Y0.in_domain():
        raise ValueError("initial state violates trace compatibility")
    problem = ControlProblem(Y0.grid, regions, alpha, T, n_steps)
    x0 = problem.system.state_to_modes(Y0)
    initial_norm = math.sqrt(max(float(problem.inner(x0, x0)), 0.0))
    rhs = -problem.free_final(x0)
    if basis is not None:
        W, iterations, residual, converged = _galerkin_solve(problem, basis, rhs, epsilon)
    elif solver == "direct":
        W, iterations, residual, converged = _direct_solve(problem, rhs, epsilon)
    elif solver == "cg":
        W, iterations, residual, converged = _conjugate_gradient(problem, rhs, epsilon, tol, max_iter)
        if strict and not converged:
            raise RuntimeError(f"CG did not converge in {max_iter} iterations (relative residual {residual:.3e})")
    else:
        raise ValueError(f"unknown solver {solver!r}; use 'direct' or 'cg'")
    g, h = problem.dual_observations(W)
    final = problem.controlled_final(x0, g, h)
    terminal = math.sqrt(max(float(problem.inner(final, final)), 0.0))
    cost_sq = float(np.sum(problem.observation_energy(g, h)) * problem.dt)
    dual_value = 0.5 * (cost_sq + epsilon * float(problem.inner(W, W)))
    return ControlResult(g, h, math.sqrt(cost_sq), terminal, epsilon, iterations, dual_value, converged,
                         residual, initial_norm, problem.time_grid, math.sqrt(2 * epsilon * dual_value),
                         {"W_norm": math.sqrt(float(problem.inner(W, W)))})


def _conjugate_gradient(problem: ControlProblem, rhs: np.ndarray, epsilon: float, tol: float, max_iter: int,
                        precondition: bool = True):
    """Preconditioned CG in the energy product; stops on the relative residual."""
    inner = problem.inner
    b_norm = math.sqrt(float(inner(rhs, rhs)))
    W = np.zeros_like(rhs)
    if b_norm == 0:
        return W, 0, 0.0, True
    if precondition:
        eye = np.eye(problem.system.size)
        inverse = np.linalg.inv(problem.averaged_gramian() + epsilon * eye)

        def apply_inverse(x):
            return np.einsum("kij,...kj->...ki", inverse, x)
    else:
        def apply_inverse(x):
            return x
    r = rhs.copy()
    z = apply_inverse(r)
    p = z.copy()
    rz = float(inner(r, z))
    for it in range(1, max_iter + 1):
        q = problem.normal_operator(p) + epsilon * p
        step = rz / float(inner(p, q))
        W = W + step * p
        r = r - step * q
        res = math.sqrt(float(inner(r, r))) / b_norm
        if res <= tol:
            return W, it, res, True
        z = apply_inverse(r)
        rz_new = float(inner(r, z))
        p = z + (rz_new / rz) * p
        rz = rz_new
    return W, max_iter, res, False


def _direct_solve(problem: ControlProblem, rhs: np.ndarray, epsilon: float):
    from scipy.linalg import cho_factor, cho_solve
    matrix = problem.normal_matrix()
    root = np.sqrt(problem.real_gram())
    sym = root[:, None] * matrix / root[None, :]
    sym = 0.5 * (sym + sym.T) + epsilon * np.eye(sym.shape[0])
    b = problem.to_real(rhs)
    coef = cho_solve(cho_factor(sym), root * b) / root
    W = problem.from_real(coef)
    resid = problem.normal_operator(W) + epsilon * W - rhs
    rel = math.sqrt(float(problem.inner(resid, resid)) / max(float(problem.inner(rhs, rhs)), 1e-300))
    return W, 0, rel, rel <= 1e-6


def _galerkin_solve(problem: ControlProblem, basis: np.ndarray, rhs: np.ndarray, epsilon: float):
    images = problem.normal_operator(basis)
    gram = problem.system.inner_matrix(basis, images)
    gram = 0.5 * (gram + gram.T)
    mass = problem.system.inner_matrix(basis, basis)
    load = problem.inner(basis, rhs[None])
    coef = np.linalg.solve(gram + epsilon * mass, load)
    W = np.tensordot(coef, basis, axes=1)
    res = np.linalg.norm((gram + epsilon * mass) @ coef - load) / max(np.linalg.norm(load), 1e-300)
    return W, 0, float(res), True


# ---------------------------------------------------------------- sweeps

def _fit_log_cost(T_values, costs) -> dict:
    T_values = np.asarray(T_values, dtype=float)
    costs = np.asarray(costs, dtype=float)
    positive = costs > 0
    if positive.sum() < 3 or np.ptp(np.log(costs[positive])) < 1e-12:
        return {"slope": float("nan"), "intercept": float("nan"), "r_squared": float("nan"), "degenerate": True}
    x = 1.0 / T_values[positive]
    y = np.log(costs[positive])
    slope, intercept = np.polyfit(x, y, 1)
    fitted = slope * x + intercept
    ss_res = float(np.sum((y - fitted) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return {"slope": float(slope), "intercept": float(intercept), "r_squared": 1 - ss_res / ss_tot,
            "degenerate": False}


def cost_sweep_T(Y0: CoupledState, T_list, regions: ObservationRegions, alpha: float, epsilon: float,
                 dt: float = DEFAULT_DT) -> dict:
    """Control cost per horizon with a fixed step, and the fit log(cost) = C/T + c."""
    T_list = [float(T) for T in T_list]
    if any(b <= a for a, b in zip(T_list, T_list[1:])):
        raise ValueError("T_list must be increasing")
    rows = []
    for T in T_list:
        n_steps = max(1, int(round(T / dt)))
        res = hum_control(Y0, T, regions, alpha, epsilon, n_steps=n_steps)
        rows.append({"T": T, "cost": res.cost, "terminal_norm": res.terminal_norm,
                     "cg_iterations": res.cg_iterations, "converged": res.converged})
    fit = _fit_log_cost([r["T"] for r in rows], [r["cost"] for r in rows])
    return {"rows": rows, "fit": fit}


def lambda_branch(alpha: float) -> str:
    return "tau/alpha^2" if alpha < 1 else "tau*alpha^(2/3)"


def cost_sweep_alpha(Y0: CoupledState, alpha_list, T: float, regions: ObservationRegions, epsilon: float,
                     dt: float = DEFAULT_DT) -> dict:
    alpha_list = [float(a) for a in alpha_list]
    if any(a <= 0 for a in alpha_list):
        raise ValueError("alpha values must be positive")
    n_steps = max(1, int(round(T / dt)))
    rows = []
    for alpha in alpha_list:
        res = hum_control(Y0, T, regions, alpha, epsilon, n_steps=n_steps)
        rows.append({"alpha": alpha, "cost": res.cost, "terminal_norm": res.terminal_norm,
                     "branch": lambda_branch(alpha), "converged": res.converged})
    costs = np.array([r["cost"] for r in rows])
    order = np.argsort(alpha_list)
    # the double-exponential envelope grows away from alpha = 1 on both branches
    envelope = [math.exp(a ** (2 / 3)) if a >= 1 else math.exp(a ** -2) for a in alpha_list]
    return {"rows": rows, "envelope": envelope,
            "finite_positive": bool(np.all(np.isfinite(costs)) and np.all(costs >= 0)),
            "alpha_sorted": [alpha_list[i] for i in order]}


# ---------------------------------------------------------------- observability

@dataclass
class GramianReport:
    dimension: int
    lambda_min: float
    K_T: float
    T: float
    alpha: float
    regions: dict
    gramian: np.ndarray
    symmetry_defect: float
    min_eigenvector: np.ndarray | None
    basis: np.ndarray
    n_steps: int
    iterations: int = 0
    initial_constant: float = float("nan")
    initial_vector: np.ndarray | None = None


def adjoint_basis(grid: RectGrid, size: int) -> tuple[np.ndarray, list]:
    """Lowest-frequency energy-orthonormal states, in modal coordinates.

    Candidates: fluid sin(j pi x2) cos/sin(k x1) (frequency pi^2 j^2 + k^2), beam
    displacement cos/sin(k x1) and beam velocity cos/sin(k x1) with its interface
    lift (frequency sqrt(k^4 + 1)).  They are mutually orthogonal.
    """
    system = ModeSystem(grid, 0.0)
    N = system.n_intervals
    n = grid.torus.n_points
    n_modes = n // 2 + 1
    candidates = []
    for k in range(n_modes):
        parts = ("cos",) if k in (0, n // 2) else ("cos", "sin")
        for part in parts:
            for j in range(1, N):
                candidates.append((math.pi ** 2 * j * j + k * k, "fluid", k, part, j))
            beam = math.sqrt(k ** 4 + 1.0)
            candidates.append((beam, "displacement", k, part, 0))
            candidates.append((beam, "velocity", k, part, 0))
    candidates.sort(key=lambda c: (c[0], c[1], c[2], c[3], c[4]))
    if not 1 <= size <= len(candidates):
        raise ValueError(f"basis_size must lie in 1..{len(candidates)} (the discrete dimension)")
    chosen = candidates[:size]
    x1 = grid.torus.nodes
    x2 = grid.vertical_nodes
    basis = np.zeros((size, n_modes, system.size), dtype=complex)
    for i, (_, kind, k, part, j) in enumerate(chosen):
        profile = np.cos(k * x1) if part == "cos" else np.sin(k * x1)
        w = np.zeros(grid.shape)
        zeta = np.zeros(n)
        v = np.zeros(n)
        if kind == "fluid":
            w = np.outer(profile, np.sin(j * math.pi * x2))
            w[:, -1] = 0.0
        elif kind == "displacement":
            zeta = profile
        else:
            v = profile
            w[:, -1] = profile
        coords = system.to_modes(w, zeta, v)
        basis[i] = coords / math.sqrt(float(system.inner(coords, coords)))
    return basis, chosen


def smallest_eigenpair(matrix: np.ndarray, tol: float = 1e-13, max_iter: int = 2000):
    """Inverse iteration (Cholesky-factored) for the smallest eigenvalue of an SPD matrix."""
    from scipy.linalg import cho_factor, cho_solve
    factor = cho_factor(matrix)
    vec = np.ones(matrix.shape[0]) / math.sqrt(matrix.shape[0])
    value = float(vec @ matrix @ vec)
    for it in range(1, max_iter + 1):
        nxt = cho_solve(factor, vec)
        nxt /= np.linalg.norm(nxt)
        new_value = float(nxt @ matrix @ nxt)
        done = abs(new_value - value) <= tol * abs(new_value)
        vec, value = nxt, new_value
        if done:
            return value, vec, it
    return value, vec, max_iter


def observability_gramian(T: float, regions: ObservationRegions, alpha: float, basis_size: int = 200,
                          grid: RectGrid | None = None, dt: float = DEFAULT_DT,
                          memory_budget_bytes: float = 2e9) -> GramianReport:
    """Observability Gramian over a low-frequency orthonormal basis of terminal adjoint data.

    For terminal data W_i the discrete adjoint trajectories V_i,n (n = N..1) give
    G_ij = sum_n dt <B* V_i,n, B* V_j,n>, the normal operator restricted to the
    span; lambda_min(G) is the best constant in |W|^2 lambda_min <= sum dt |B* V|^2
    and K_T = 1 / lambda_min.
    """
    grid = grid or RectGrid.uniform(64, 33)
    n_steps = max(1, int(round(T / dt)))
    system_size = ModeSystem(grid, alpha).size * (grid.torus.n_points // 2 + 1)
    if basis_size * system_size * 16 * 4 > memory_budget_bytes:
        raise MemoryError(f"basis_size {basis_size} exceeds the memory budget")
    basis, _ = adjoint_basis(grid, basis_size)
    problem = ControlProblem(grid, regions, alpha, T, n_steps)
    size = basis.shape[0]
    gram = np.zeros((size, size))
    v = basis
    sqrt_omega = np.sqrt(problem.omega_weights).ravel()
    sqrt_J = np.sqrt(problem.J_weights)
    for _ in range(n_steps):
        v = problem.stepper.step(v, adjoint=True)
        g, h = problem.observe(v)
        obs = np.concatenate([g.reshape(size, -1) * sqrt_omega, h * sqrt_J], axis=1)
        gram += problem.dt * (obs @ obs.T)
    scale = max(float(np.max(np.abs(gram))), 1e-300)
    symmetry = float(np.max(np.abs(gram - gram.T))) / scale
    gram = 0.5 * (gram + gram.T)
    if regions.omega is None and regions.J is None or float(np.max(np.abs(gram))) == 0.0:
        return GramianReport(size, 0.0, math.inf, T, alpha, regions.describe(), gram, symmetry, None,
                             basis, n_steps)
    try:
        value, vector, iterations = smallest_eigenpair(gram)
    except np.linalg.LinAlgError:  # numerically singular
        return GramianReport(size, 0.0, math.inf, T, alpha, regions.describe(), gram, symmetry, None,
                             basis, n_steps)
    value = max(value, 0.0)
    K_T = math.inf if value == 0 else 1.0 / value
    # initial-state pencil: largest restricted control cost over unit initial data
    initial = problem.system.inner_matrix(v, v)
    initial = 0.5 * (initial + initial.T)
    pencil_values, pencil_vectors = eigh(initial, gram)
    return GramianReport(size, value, K_T, T, alpha, regions.describe(), gram, symmetry, vector, basis,
                         n_steps, iterations, float(pencil_values[-1]), pencil_vectors[:, -1])


def worst_case_datum(report: GramianReport, grid: RectGrid, sharp: bool = False) -> CoupledState:
    """Unit initial state (R^T)^N W, normalized.

    W is the least observable terminal datum, or with ``sharp`` the top
    eigenvector of the initial-state pencil, which maximizes the restricted cost.
    """
    coefficients = report.initial_vector if sharp else report.min_eigenvector
    if coefficients is None:
        raise ValueError("the Gramian is singular; no worst-case datum")
    system = ModeSystem(grid, report.alpha)
    stepper = mode_stepper(grid, report.alpha, report.T / report.n_steps, "implicit-euler")
    v = np.tensordot(coefficients, report.basis, axes=1)
    for _ in range(report.n_steps):
        v = stepper.step(v, adjoint=True)
    v = v / math.sqrt(float(system.inner(v, v)))
    return system.modes_to_state(v)


def duality_check(report: GramianReport, regions: ObservationRegions, grid: RectGrid,
                  epsilon: float = 1e-12) -> dict:
    """HUM with adjoint data restricted to the Gramian basis on both worst-case data; cost^2 vs K_T."""
    out = {"K_T": report.K_T, "initial_constant": report.initial_constant}
    for label, sharp in (("least_observable", False), ("sharp", True)):
        Y0 = worst_case_datum(report, grid, sharp)
        res = hum_control(Y0, report.T, regions, report.alpha, epsilon, n_steps=report.n_steps,
                          basis=report.basis)
        out[label] = {"cost_squared": res.cost ** 2, "ratio": res.cost ** 2 / report.K_T,
                      "terminal_norm": res.terminal_norm}
    return out


def K_T_sweep(T_list, regions: ObservationRegions, alpha: float, basis_size: int = 200,
              grid: RectGrid | None = None, dt: float = DEFAULT_DT) -> dict:
    reports = [observability_gramian(T, regions, alpha, basis_size, grid, dt) for T in T_list]
    K = [r.K_T for r in reports]
    fit = _fit_log_cost(T_list, K)
    return {"T": list(T_list), "K_T": K, "lambda_min": [r.lambda_min for r in reports],
            "strictly_decreasing": all(b < a for a, b in zip(K, K[1:])), "fit": fit}


def normal_operator_consistency(problem: ControlProblem, basis: np.ndarray, epsilon: float,
                                coefficients: np.ndarray) -> float:
    """|| (Lambda + eps) W - (G + eps) W || / ||(Lambda + eps) W|| on the span of ``basis``."""
    W = np.tensordot(coefficients, basis, axes=1)
    direct = problem.normal_operator(W) + epsilon * W
    images = problem.normal_operator(basis)
    gram = problem.system.inner_matrix(basis, images)
    mass = problem.system.inner_matrix(basis, basis)
    proj_direct = problem.inner(basis, direct[None])
    assembled = (gram + epsilon * mass) @ coefficients
    return float(np.linalg.norm(proj_direct - assembled) / max(np.linalg.norm(proj_direct), 1e-300))


# controlled forward solve, for callers who want the closed-loop trajectory
def closed_loop(Y0: CoupledState, result: ControlResult, regions: ObservationRegions, alpha: float):
    tg = result.time_grid
    n = Y0.grid.torus.n_points
    g = np.concatenate([np.zeros((1,) + Y0.grid.shape), result.g])
    h = np.concatenate([np.zeros((1, n)), result.h])
    return solve_forward(Y0, SourceSpec(g=g, h=h, regions=regions), tg, alpha)
