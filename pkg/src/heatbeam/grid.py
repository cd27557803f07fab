"""Discrete torus, channel rectangle and time grids with differentiation and quadrature.

The horizontal direction is the periodic torus [0, 2pi) discretized by Fourier
collocation; the vertical direction (0, 1) uses finite differences.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * np.pi


def _frozen(array) -> np.ndarray:
    out = np.array(array, dtype=float, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class TorusGrid:
    """Uniform grid of ``n_points`` nodes on the torus [0, 2pi)."""

    n_points: int

    def __post_init__(self):
        n = self.n_points
        if not isinstance(n, (int, np.integer)) or n < 8 or n % 2:
            raise ValueError(f"n_points must be an even integer >= 8, got {n!r}")

    @property
    def spacing(self) -> float:
        return TWO_PI / self.n_points

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.n_points) * self.spacing

    @property
    def wavenumbers(self) -> np.ndarray:
        """Non-negative wavenumbers of the real FFT layout (0 .. n/2)."""
        return np.arange(self.n_points // 2 + 1, dtype=float)

    @property
    def parseval_weights(self) -> np.ndarray:
        """Weights c_k with sum_i f_i g_i = sum_k c_k Re(F_k conj(G_k)) for rfft coefficients."""
        n = self.n_points
        weights = np.full(n // 2 + 1, 2.0 / n)
        weights[0] = 1.0 / n
        weights[-1] = 1.0 / n
        return weights


@dataclass(frozen=True, eq=False)
class RectGrid:
    """Tensor grid on the channel: torus in x1 times ordered nodes on [0, 1] in x2."""

    torus: TorusGrid
    vertical_nodes: np.ndarray

    def __post_init__(self):
        nodes = _frozen(self.vertical_nodes)
        if nodes.ndim != 1 or nodes.size < 2:
            raise ValueError("vertical_nodes must be a 1-D sequence with at least two entries")
        if abs(nodes[0]) > 1e-14 or abs(nodes[-1] - 1.0) > 1e-14:
            raise ValueError("vertical nodes must start at 0 and end at 1")
        if np.any(np.diff(nodes) <= 0):
            raise ValueError("vertical nodes must be strictly increasing")
        object.__setattr__(self, "vertical_nodes", nodes)

    @classmethod
    def uniform(cls, n_points: int, n_layers: int) -> "RectGrid":
        if n_layers < 2:
            raise ValueError("n_layers must be at least 2")
        return cls(TorusGrid(n_points), np.linspace(0.0, 1.0, n_layers))

    @property
    def n_layers(self) -> int:
        return self.vertical_nodes.size

    @property
    def shape(self) -> tuple[int, int]:
        return (self.torus.n_points, self.n_layers)

    @property
    def is_uniform(self) -> bool:
        gaps = np.diff(self.vertical_nodes)
        return bool(np.allclose(gaps, gaps[0], rtol=1e-12, atol=0.0))

    @property
    def layer_spacing(self) -> float:
        if not self.is_uniform:
            raise ValueError("layer_spacing requires a uniform vertical grid")
        return 1.0 / (self.n_layers - 1)

    @property
    def vertical_weights(self) -> np.ndarray:
        """Trapezoid weights of the vertical rule."""
        gaps = np.diff(self.vertical_nodes)
        weights = np.zeros(self.n_layers)
        weights[:-1] += gaps / 2
        weights[1:] += gaps / 2
        return weights

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.torus.nodes, self.vertical_nodes, indexing="ij")

    def __eq__(self, other):
        return (isinstance(other, RectGrid) and self.torus == other.torus
                and np.array_equal(self.vertical_nodes, other.vertical_nodes))

    def __hash__(self):
        return hash((self.torus, self.vertical_nodes.tobytes()))


@dataclass(frozen=True, eq=False)
class TorusFunction:
    grid: TorusGrid
    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values)
        if values.shape != (self.grid.n_points,):
            raise ValueError(f"expected {self.grid.n_points} values, got shape {values.shape}")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True, eq=False)
class RectFunction:
    grid: RectGrid
    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values)
        if values.shape != self.grid.shape:
            raise ValueError(f"expected shape {self.grid.shape}, got {values.shape}")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Time nodes in [0, T].

    With ``interior_only`` the endpoints are excluded and integrands are
    extended by zero at t = 0 and t = T in :func:`time_weights`.
    """

    horizon: float
    n_steps: int
    nodes: np.ndarray
    interior_only: bool = False

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if int(self.n_steps) < 1:
            raise ValueError("n_steps must be positive")
        nodes = _frozen(self.nodes)
        if nodes.ndim != 1 or nodes.size < 1:
            raise ValueError("nodes must be a nonempty 1-D sequence")
        if np.any(np.diff(nodes) <= 0):
            raise ValueError("time nodes must be strictly increasing")
        if nodes[0] < 0 or nodes[-1] > self.horizon * (1 + 1e-14):
            raise ValueError("time nodes must lie in [0, T]")
        if self.interior_only and (nodes[0] <= 0 or nodes[-1] >= self.horizon):
            raise ValueError("interior-only grids must exclude both endpoints")
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def uniform(cls, horizon: float, n_steps: int) -> "TimeGrid":
        return cls(horizon, n_steps, np.linspace(0.0, horizon, n_steps + 1))

    @classmethod
    def interior(cls, horizon: float, n_steps: int) -> "TimeGrid":
        """Cell midpoints: nodes on [dT, T - dT] with d = 1/(2 n_steps)."""
        return cls(horizon, n_steps, (np.arange(n_steps) + 0.5) * horizon / n_steps, True)

    @property
    def step(self) -> float:
        gaps = np.diff(self.nodes)
        if gaps.size and not np.allclose(gaps, gaps[0], rtol=1e-12, atol=0.0):
            raise ValueError("time step requested on a non-uniform grid")
        return self.horizon / self.n_steps

    def time_weights(self) -> np.ndarray:
        """Trapezoid weights; interior-only grids are padded with zero values at 0 and T."""
        nodes = self.nodes
        if self.interior_only:
            padded = np.concatenate([[0.0], nodes, [self.horizon]])
            return _trapezoid_weights(padded)[1:-1]
        if nodes.size == 1:
            return np.array([self.horizon])
        return _trapezoid_weights(nodes)


def _trapezoid_weights(nodes: np.ndarray) -> np.ndarray:
    gaps = np.diff(nodes)
    weights = np.zeros(nodes.size)
    weights[:-1] += gaps / 2
    weights[1:] += gaps / 2
    return weights


# ---------------------------------------------------------------- differentiation

def fourier_derivative(values: np.ndarray, order: int, axis: int = 0) -> np.ndarray:
    """Fourier-collocation derivative of real samples along ``axis`` (period 2pi).

    Odd derivatives annihilate the Nyquist mode, as is standard for the
    trigonometric interpolant of real data.
    """
    if order == 0:
        return np.array(values, dtype=float, copy=True)
    n = values.shape[axis]
    coeffs = np.fft.rfft(values, axis=axis)
    k = np.arange(n // 2 + 1, dtype=float)
    multiplier = (1j * k) ** order
    if order % 2:
        multiplier[-1] = 0.0
    shape = [1] * values.ndim
    shape[axis] = k.size
    return np.fft.irfft(coeffs * multiplier.reshape(shape), n=n, axis=axis)


def spectral_derivative(f: TorusFunction, order: int) -> TorusFunction:
    if order not in (1, 2, 3, 4):
        raise ValueError(f"order must be in 1..4, got {order}")
    return TorusFunction(f.grid, fourier_derivative(f.values, order))


def fornberg_weights(x0: float, nodes: np.ndarray, order: int) -> np.ndarray:
    """Finite-difference weights for the ``order``-th derivative at x0 (Fornberg's recursion)."""
    nodes = np.asarray(nodes, dtype=float)
    n = nodes.size
    c = np.zeros((n, order + 1))
    c1, c4 = 1.0, nodes[0] - x0
    c[0, 0] = 1.0
    for i in range(1, n):
        mn = min(i, order)
        c2, c5, c4 = 1.0, c4, nodes[i] - x0
        for j in range(i):
            c3 = nodes[i] - nodes[j]
            c2 *= c3
            if j == i - 1:
                for m in range(mn, 0, -1):
                    c[i, m] = c1 * (m * c[i - 1, m - 1] - c5 * c[i - 1, m]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for m in range(mn, 0, -1):
                c[j, m] = (c4 * c[j, m] - m * c[j, m - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c[:, order]


def vertical_stencils(nodes: np.ndarray, order: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-node (indices, weights) for the vertical derivative of the given order.

    Interior nodes use the 3-point centered stencil; the end nodes use
    one-sided stencils of matching accuracy (3 points for order 1, 4 for order 2).
    """
    size = nodes.size
    if size < 5:
        raise ValueError("vertical stencils need at least 5 layers")
    width = 3 if order == 1 else 4
    stencils = []
    for j in range(size):
        if j == 0:
            idx = np.arange(width)
        elif j == size - 1:
            idx = np.arange(size - width, size)
        else:
            idx = np.array([j - 1, j, j + 1])
        stencils.append((idx, fornberg_weights(nodes[j], nodes[idx], order)))
    return stencils


def vertical_derivative_values(values: np.ndarray, nodes: np.ndarray, order: int) -> np.ndarray:
    """Apply the vertical stencils along the last axis of ``values``."""
    out = np.empty_like(values, dtype=float)
    for j, (idx, weights) in enumerate(vertical_stencils(nodes, order)):
        out[..., j] = values[..., idx] @ weights
    return out


def vertical_derivative(f: RectFunction, order: int) -> RectFunction:
    if order not in (1, 2):
        raise ValueError(f"order must be 1 or 2, got {order}")
    if f.grid.n_layers < 5:
        raise ValueError("grid too coarse: vertical_derivative needs n_layers >= 5")
    return RectFunction(f.grid, vertical_derivative_values(f.values, f.grid.vertical_nodes, order))


# ---------------------------------------------------------------- quadrature

def quadrature(values, time_grid: TimeGrid | None, spatial_grid) -> float:
    """Integrate samples over time x space.

    ``values`` has a leading time axis when ``time_grid`` is given, followed by
    the spatial axes of ``spatial_grid`` (TorusGrid: n_points; RectGrid:
    n_points x n_layers; None: no spatial axes).
    """
    data = np.asarray(values, dtype=float)
    weights = _space_time_weights(time_grid, spatial_grid)
    if data.shape != weights.shape:
        raise ValueError(f"dimension mismatch: values {data.shape} vs grid {weights.shape}")
    return float(np.sum(data * weights))


def _space_time_weights(time_grid, spatial_grid) -> np.ndarray:
    if isinstance(spatial_grid, RectGrid):
        spatial = np.full(spatial_grid.torus.n_points, spatial_grid.torus.spacing)[:, None] \
            * spatial_grid.vertical_weights[None, :]
    elif isinstance(spatial_grid, TorusGrid):
        spatial = np.full(spatial_grid.n_points, spatial_grid.spacing)
    elif spatial_grid is None:
        spatial = np.array(1.0)
    else:
        raise ValueError("spatial_grid must be a TorusGrid, RectGrid or None")
    if time_grid is None:
        return spatial
    temporal = time_grid.time_weights()
    return temporal.reshape((-1,) + (1,) * spatial.ndim) * spatial
