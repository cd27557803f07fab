"""Discrete beam operators, coupled generator and its adjoint, control/observation maps, energy product.

Discretization of the coupled generator on a uniform vertical grid x2_j = j h,
j = 0..N, per Fourier mode k in x1:

* unknowns are the interior fluid values w_1..w_{N-1}, the displacement zeta
  and the velocity v; the wall value w_0 = 0 and the interface value w_N = v
  are eliminated;
* the fluid product is the trapezoid rule in x2, so the interface row carries
  weight h/2 and adds a mass h/2 to the velocity equation;
* the resulting per-mode system is exactly skew/self-adjoint where it must be,
  so the discrete energy identity and the forward/adjoint transpose pairing
  hold to rounding.

``apply_generator`` returns the triple (Delta w, zeta_t, -A1 zeta - A2 zeta_t
- d_n w) on the full grid; ``project_to_domain`` maps it to the time
derivative used by the dynamics.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import RectFunction, RectGrid, TorusFunction, TorusGrid, fourier_derivative
from .weights import ObservationRegions

DOMAIN_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class CoupledState:
    """Fluid field w on the channel, beam displacement zeta and velocity zeta_t on the torus."""

    w: RectFunction
    zeta: TorusFunction
    zeta_t: TorusFunction

    def __post_init__(self):
        if self.w.grid.torus != self.zeta.grid or self.zeta.grid != self.zeta_t.grid:
            raise ValueError("fluid and beam grids are incompatible")

    @property
    def grid(self) -> RectGrid:
        return self.w.grid

    @classmethod
    def from_arrays(cls, grid: RectGrid, w, zeta, zeta_t) -> "CoupledState":
        return cls(RectFunction(grid, w), TorusFunction(grid.torus, zeta), TorusFunction(grid.torus, zeta_t))

    @classmethod
    def zeros(cls, grid: RectGrid) -> "CoupledState":
        n = grid.torus.n_points
        return cls.from_arrays(grid, np.zeros(grid.shape), np.zeros(n), np.zeros(n))

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.w.values, self.zeta.values, self.zeta_t.values

    def trace_defect(self) -> float:
        w = self.w.values
        return float(max(np.max(np.abs(w[:, 0])), np.max(np.abs(w[:, -1] - self.zeta_t.values))))

    def in_domain(self, tol: float = DOMAIN_TOL) -> bool:
        """Trace compatibility w = 0 on the wall and w = zeta_t on the interface."""
        scale = max(1.0, float(np.max(np.abs(self.w.values))), float(np.max(np.abs(self.zeta_t.values))))
        return self.trace_defect() <= tol * scale

    def scaled(self, factor: float) -> "CoupledState":
        return CoupledState.from_arrays(self.grid, factor * self.w.values, factor * self.zeta.values,
                                        factor * self.zeta_t.values)

    def __add__(self, other: "CoupledState") -> "CoupledState":
        return CoupledState.from_arrays(self.grid, *(a + b for a, b in zip(self.arrays(), other.arrays())))

    def __sub__(self, other: "CoupledState") -> "CoupledState":
        return self + other.scaled(-1.0)


# ---------------------------------------------------------------- beam operators

def _multiplier(values: np.ndarray, symbol, axis: int = -1) -> np.ndarray:
    n = values.shape[axis]
    k = np.arange(n // 2 + 1, dtype=float)
    shape = [1] * values.ndim
    shape[axis] = k.size
    coeffs = np.fft.rfft(values, axis=axis) * symbol(k).reshape(shape)
    return np.fft.irfft(coeffs, n=n, axis=axis)


def a1_values(zeta: np.ndarray, axis: int = -1) -> np.ndarray:
    return _multiplier(zeta, lambda k: k ** 4 + 1, axis)


def a2_values(zeta: np.ndarray, alpha: float, axis: int = -1) -> np.ndarray:
    return _multiplier(zeta, lambda k: alpha * (k ** 2 + 1), axis)


def apply_A1(zeta: TorusFunction) -> TorusFunction:
    return TorusFunction(zeta.grid, a1_values(zeta.values))


def apply_A2(zeta: TorusFunction, alpha: float) -> TorusFunction:
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    return TorusFunction(zeta.grid, a2_values(zeta.values, alpha))


def lift_trace(zeta: TorusFunction) -> tuple[TorusFunction, TorusFunction]:
    """Boundary data of the lift: (values on the wall x2 = 0, values on the interface x2 = 1)."""
    return TorusFunction(zeta.grid, np.zeros(zeta.grid.n_points)), zeta


def extract_trace(w: RectFunction) -> TorusFunction:
    return TorusFunction(w.grid.torus, w.values[:, -1])


def interface_flux(w: np.ndarray, h: float) -> np.ndarray:
    """Outward normal derivative at x2 = 1, 3-point one-sided stencil (last axis vertical)."""
    return (3 * w[..., -1] - 4 * w[..., -2] + w[..., -3]) / (2 * h)


def normal_derivative(w: RectFunction) -> TorusFunction:
    grid = w.grid
    if grid.n_layers < 5:
        raise ValueError("grid too coarse: normal_derivative needs n_layers >= 5")
    nodes = grid.vertical_nodes
    if grid.is_uniform:
        return TorusFunction(grid.torus, interface_flux(w.values, grid.layer_spacing))
    from .grid import fornberg_weights
    weights = fornberg_weights(1.0, nodes[-3:], 1)
    return TorusFunction(grid.torus, w.values[:, -3:] @ weights)


# ---------------------------------------------------------------- generator

def _require_uniform(grid: RectGrid) -> float:
    if grid.n_layers < 5:
        raise ValueError("the coupled generator needs n_layers >= 5")
    return grid.layer_spacing


def _laplacian_raw(w: np.ndarray, h: float) -> np.ndarray:
    """Delta_h w on the full grid: centered interior rows, one-sided interface row, zero wall row."""
    out = np.zeros_like(w)
    out[..., 1:-1] = (w[..., 2:] - 2 * w[..., 1:-1] + w[..., :-2]) / h ** 2
    out[..., -1] = (w[..., -1] - 2 * w[..., -2] + w[..., -3]) / h ** 2
    horizontal = fourier_derivative(w, 2, axis=-2)
    out[..., 1:] += horizontal[..., 1:]
    return out


def generator_arrays(w, zeta, zeta_t, alpha: float, h: float, adjoint: bool = False):
    lap = _laplacian_raw(w, h)
    flux = interface_flux(w, h)
    if adjoint:
        return lap, -zeta_t, a1_values(zeta) - a2_values(zeta_t, alpha) - flux
    return lap, zeta_t, -a1_values(zeta) - a2_values(zeta_t, alpha) - flux


def _check_domain(Y: CoupledState, name: str):
    if not Y.in_domain():
        raise ValueError(f"{name}: state violates trace compatibility (defect {Y.trace_defect():.3e}); "
                         "need w = 0 on x2 = 0 and w = zeta_t on x2 = 1")


def apply_generator(Y: CoupledState, alpha: float) -> CoupledState:
    _check_domain(Y, "apply_generator")
    h = _require_uniform(Y.grid)
    return CoupledState.from_arrays(Y.grid, *generator_arrays(*Y.arrays(), alpha, h))


def apply_adjoint_generator(V: CoupledState, alpha: float) -> CoupledState:
    _check_domain(V, "apply_adjoint_generator")
    h = _require_uniform(V.grid)
    return CoupledState.from_arrays(V.grid, *generator_arrays(*V.arrays(), alpha, h, adjoint=True))


def project_arrays(w, zeta, zeta_t, h: float):
    """Energy-orthogonal projection onto trace-compatible states."""
    w = np.array(w, dtype=float, copy=True)
    merged = (0.5 * h * w[..., -1] + zeta_t) / (1 + 0.5 * h)
    w[..., 0] = 0.0
    w[..., -1] = merged
    return w, np.array(zeta, dtype=float, copy=True), merged


def project_to_domain(Y: CoupledState) -> CoupledState:
    h = _require_uniform(Y.grid)
    return CoupledState.from_arrays(Y.grid, *project_arrays(*Y.arrays(), h))


def time_derivative(Y: CoupledState, alpha: float, adjoint: bool = False) -> CoupledState:
    """Projected generator: the right-hand side of the semi-discrete dynamics."""
    raw = apply_adjoint_generator(Y, alpha) if adjoint else apply_generator(Y, alpha)
    return project_to_domain(raw)


# ---------------------------------------------------------------- energy product

def hilbert_inner_arrays(first, second, grid: RectGrid) -> np.ndarray:
    """Energy product of (w, zeta, zeta_t) triples; leading axes broadcast."""
    (w1, z1, v1), (w2, z2, v2) = first, second
    dx = grid.torus.spacing
    fluid = np.sum(w1 * w2 * grid.vertical_weights, axis=(-2, -1)) * dx
    beam = np.sum(a1_values(z1) * z2, axis=-1) * dx
    velocity = np.sum(v1 * v2, axis=-1) * dx
    return fluid + beam + velocity


def hilbert_inner(Y: CoupledState, V: CoupledState) -> float:
    return float(hilbert_inner_arrays(Y.arrays(), V.arrays(), Y.grid))


def hilbert_norm(Y: CoupledState) -> float:
    return float(np.sqrt(max(hilbert_inner(Y, Y), 0.0)))


@dataclass(frozen=True, eq=False)
class ScriptHMetric:
    """Quadratures behind the energy norm ||w||^2 + ||A1^(1/2) zeta||^2 + ||zeta_t||^2."""

    grid: RectGrid

    def inner(self, Y: CoupledState, V: CoupledState) -> float:
        return hilbert_inner(Y, V)

    def norm(self, Y: CoupledState) -> float:
        return hilbert_norm(Y)

    def components(self, Y: CoupledState) -> dict:
        w, z, v = Y.arrays()
        dx = self.grid.torus.spacing
        return {"fluid": float(np.sqrt(np.sum(w * w * self.grid.vertical_weights) * dx)),
                "displacement": float(np.sqrt(max(np.sum(a1_values(z) * z) * dx, 0.0))),
                "velocity": float(np.sqrt(np.sum(v * v) * dx))}


# ---------------------------------------------------------------- control and observation

def control_injection(g: np.ndarray, h: np.ndarray, regions: ObservationRegions, grid: RectGrid) \
        -> CoupledState:
    """B(g, h) = (1_omega g, 0, 1_J h); inputs are full-grid arrays, masked here."""
    g = np.asarray(g, dtype=float)
    h = np.asarray(h, dtype=float)
    return CoupledState.from_arrays(grid, g * regions.omega_mask(grid), np.zeros(grid.torus.n_points),
                                    h * regions.J_mask(grid.torus))


def observation(V: CoupledState, regions: ObservationRegions) -> tuple[np.ndarray, np.ndarray]:
    """B* V = (u restricted to omega, eta_2 restricted to J), zero-padded to full grids."""
    grid = V.grid
    return V.w.values * regions.omega_mask(grid), V.zeta_t.values * regions.J_mask(grid.torus)


def observation_inner(first, second, regions: ObservationRegions, grid: RectGrid) -> np.ndarray:
    """L^2(omega) x L^2(J) pairing of observation pairs; leading axes broadcast."""
    (g1, h1), (g2, h2) = first, second
    dx = grid.torus.spacing
    fluid = np.sum(g1 * g2 * regions.omega_mask(grid) * grid.vertical_weights, axis=(-2, -1)) * dx
    beam = np.sum(h1 * h2 * regions.J_mask(grid.torus), axis=-1) * dx
    return fluid + beam


# ---------------------------------------------------------------- per-mode representation

class ModeSystem:
    """Per-Fourier-mode matrices of the projected generator in reduced coordinates.

    Coordinates per mode k: (w_1..w_{N-1}, zeta, v) as complex rfft coefficients.
    """

    def __init__(self, grid: RectGrid, alpha: float):
        if alpha < 0:
            raise ValueError("alpha must be non-negative")
        self.grid = grid
        self.alpha = float(alpha)
        self.h = h = _require_uniform(grid)
        self.n_intervals = N = grid.n_layers - 1
        self.size = N + 1
        self.mass = 1 + h / 2
        k = grid.torus.wavenumbers
        self.k = k
        size = self.size
        mats = np.zeros((k.size, size, size))
        fl = N - 1
        main = -2.0 / h ** 2
        for j in range(fl):
            mats[:, j, j] = main - k ** 2
            if j > 0:
                mats[:, j, j - 1] = 1 / h ** 2
            if j < fl - 1:
                mats[:, j, j + 1] = 1 / h ** 2
        mats[:, fl - 1, N] = 1 / h ** 2          # w_N = v enters the last interior row
        mats[:, N - 1, N] = 1.0                   # zeta' = v
        mats[:, N, fl - 1] = 1 / (h * self.mass)
        mats[:, N, N - 1] = -(k ** 4 + 1) / self.mass
        mats[:, N, N] = (-1 / h - 0.5 * h * k ** 2 - alpha * (k ** 2 + 1)) / self.mass
        self.matrices = mats
        # energy weights per coordinate (before the Parseval and dx factors)
        gram = np.empty((k.size, size))
        gram[:, :fl] = h
        gram[:, fl] = k ** 4 + 1
        gram[:, N] = self.mass
        self.gram = gram * (grid.torus.parseval_weights * grid.torus.spacing)[:, None]
        self.sign = np.ones(size)
        self.sign[fl] = -1.0

    # conversions; leading batch axes allowed
    def to_modes(self, w, zeta, zeta_t) -> np.ndarray:
        N = self.n_intervals
        fluid = np.fft.rfft(w[..., 1:N], axis=-2)
        beam = np.fft.rfft(np.stack([zeta, zeta_t], axis=-1), axis=-2)
        return np.concatenate([fluid, beam], axis=-1)

    def from_modes(self, coords: np.ndarray):
        n = self.grid.torus.n_points
        N = self.n_intervals
        phys = np.fft.irfft(coords, n=n, axis=-2)
        w = np.zeros(coords.shape[:-2] + (n, N + 1))
        w[..., 1:N] = phys[..., :N - 1]
        w[..., N] = phys[..., N]
        return w, phys[..., N - 1], phys[..., N]

    def state_to_modes(self, Y: CoupledState) -> np.ndarray:
        return self.to_modes(*Y.arrays())

    def modes_to_state(self, coords: np.ndarray) -> CoupledState:
        return CoupledState.from_arrays(self.grid, *self.from_modes(coords))

    def apply(self, coords: np.ndarray, adjoint: bool = False) -> np.ndarray:
        if adjoint:  # A* = S A S with S flipping the displacement
            return self.sign * np.einsum("kij,...kj->...ki", self.matrices, coords * self.sign)
        return np.einsum("kij,...kj->...ki", self.matrices, coords)

    def inner(self, first: np.ndarray, second: np.ndarray) -> np.ndarray:
        return np.sum(self.gram * (first.real * second.real + first.imag * second.imag), axis=(-2, -1))

    def inner_matrix(self, first: np.ndarray, second: np.ndarray) -> np.ndarray:
        """Matrix of energy products between two batches of modal states (b1 x b2)."""
        root = np.sqrt(self.gram)

        def flat(batch):
            scaled = (batch * root).reshape(batch.shape[0], -1)
            return np.concatenate([scaled.real, scaled.imag], axis=1)

        return flat(first) @ flat(second).T

    def forcing_to_modes(self, G=None, H=None) -> np.ndarray:
        """Projected raw source (G, 0, H) in reduced coordinates; G full grid, H on the torus."""
        n = self.grid.torus.n_points
        N = self.n_intervals
        if G is None:
            G = np.zeros(self.grid.shape)
        if H is None:
            H = np.zeros(np.shape(G)[:-2] + (n,))
        w, zeta, v = project_arrays(G, np.zeros_like(H), H, self.h)
        return self.to_modes(w, zeta, v)


def random_state(grid: RectGrid, rng: np.random.Generator, decay: float = 1.5, n_modes: int | None = None,
                 vertical_modes: int | None = None) -> CoupledState:
    """Random trace-compatible state with algebraically decaying Fourier content.

    ``n_modes`` caps the horizontal wavenumbers, ``vertical_modes`` the number of
    sin(j pi x2) profiles in the fluid bubble; amplitudes decay like (1 + k)^-decay.
    """
    n = grid.torus.n_points
    modes = n // 2 if n_modes is None else n_modes
    k = np.arange(n // 2 + 1)
    envelope = np.where(k < modes, (1.0 + k) ** -decay, 0.0)

    def field():
        coeff = rng.standard_normal(k.size) + 1j * rng.standard_normal(k.size)
        coeff = coeff * envelope
        coeff[0] = coeff[0].real
        coeff[-1] = coeff[-1].real
        return np.fft.irfft(coeff, n=n) * np.sqrt(n)

    zeta = field()
    zeta_t = field()
    x2 = grid.vertical_nodes
    n_vert = grid.n_layers - 2 if vertical_modes is None else vertical_modes
    w = zeta_t[:, None] * x2[None, :]
    for j in range(1, n_vert + 1):
        w = w + np.outer(field(), np.sin(j * np.pi * x2)) * j ** -decay
    w[:, 0] = 0.0
    w[:, -1] = zeta_t
    return CoupledState.from_arrays(grid, w, zeta, zeta_t)
