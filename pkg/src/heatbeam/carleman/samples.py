"""Smooth space-time test functions with exact derivatives."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import Polynomial

from ..grid import TWO_PI
from .jets import Jet

ENVELOPE_POWER = 3
COEFF_DECAY = 3.0


@dataclass(frozen=True)
class BeamSample:
    """eta(t, x) = b(t) sum_m (t/T)^m F_m(x) with b = (t(T-t)/T^2)^3.

    F_m are real trigonometric polynomials on the 2pi-torus with complex
    coefficients ``coeffs[m, k]`` (k = 0..K).  The envelope vanishes to third
    order at t = 0 and t = T, which removes every time-boundary term.
    """

    T: float
    coeffs: np.ndarray  # (n_poly, K + 1) complex

    @property
    def n_modes(self) -> int:
        return self.coeffs.shape[1] - 1

    def time_polynomials(self) -> list[Polynomial]:
        T = self.T
        bump = Polynomial([0.0, 1.0 / T, -1.0 / T ** 2]) ** ENVELOPE_POWER
        return [bump * Polynomial([0.0, 1.0 / T]) ** m if m else bump for m in range(self.coeffs.shape[0])]

    def space_derivative(self, x, m: int, order: int):
        k = np.arange(self.n_modes + 1)
        phase = np.exp(1j * np.multiply.outer(np.asarray(x, dtype=float), k))
        return (phase * (1j * k) ** order) @ self.coeffs[m] if order else (phase @ self.coeffs[m])

    def space_values(self, x, m: int, order: int):
        return np.real(self.space_derivative(x, m, order))

    def jet(self, t, x, ta: int, xb: int) -> Jet:
        t = np.asarray(t, dtype=float)
        polys = self.time_polynomials()
        data = [[0.0] * (xb + 1) for _ in range(ta + 1)]
        for m, poly in enumerate(polys):
            tvals = [poly.deriv(a)(t) if a else poly(t) for a in range(ta + 1)]
            xvals = [self.space_values(x, m, b) for b in range(xb + 1)]
            for a in range(ta + 1):
                for b in range(xb + 1):
                    data[a][b] = data[a][b] + np.multiply.outer(tvals[a], xvals[b])
        return Jet(data)

    def scaled(self, factor: float) -> "BeamSample":
        return BeamSample(self.T, self.coeffs * factor)


def random_beam_sample(rng: np.random.Generator, T: float = 1.0, n_x: int = 64, n_poly: int = 3,
                       n_modes: int | None = None) -> BeamSample:
    """Band-limited in x (at most n_x/4 modes, coefficients decaying like (1+k)^-3)."""
    top = n_x // 4 if n_modes is None else n_modes
    if not 0 <= top <= n_x // 4:
        raise ValueError(f"n_modes must lie in [0, {n_x // 4}]")
    k = np.arange(top + 1)
    coeffs = (rng.standard_normal((n_poly, top + 1)) + 1j * rng.standard_normal((n_poly, top + 1)))
    coeffs = coeffs / (1.0 + k) ** COEFF_DECAY
    coeffs[:, 0] = coeffs[:, 0].real
    return BeamSample(T, coeffs)


def zero_beam_sample(T: float = 1.0) -> BeamSample:
    return BeamSample(T, np.zeros((1, 1), dtype=complex))


def interior_times(T: float, n: int) -> np.ndarray:
    """n - 1 interior nodes of the uniform partition of [0, T] (endpoints carry zero weight)."""
    if n < 2:
        raise ValueError("need at least two time intervals")
    return T * np.arange(1, n) / n


def torus_nodes(n: int) -> np.ndarray:
    return TWO_PI * np.arange(n) / n


@dataclass(frozen=True)
class HeatSample:
    """u(t, x1, x2) = b(t) sum_m (t/T)^m sum_j x2^(j+1) G_mj(x1), vanishing on the wall x2 = 0.

    G_mj are real trigonometric polynomials with complex coefficients
    ``coeffs[m, j, k]``; b is the same flat envelope as for beam samples.
    """

    T: float
    coeffs: np.ndarray  # (n_poly, n_vert, K + 1) complex

    def time_polynomials(self) -> list[Polynomial]:
        return BeamSample(self.T, self.coeffs[:, 0]).time_polynomials()

    def derivative(self, t, x1, x2, a: int = 0, b1: int = 0, b2: int = 0) -> np.ndarray:
        """d_t^a d_x1^b1 d_x2^b2 u on the tensor grid t x x1 x x2, shape (nt, n1, n2)."""
        t, x1, x2 = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (t, x1, x2))
        k = np.arange(self.coeffs.shape[2])
        phase = np.exp(1j * np.multiply.outer(x1, k)) * (1j * k) ** b1
        out = np.zeros((t.size, x1.size, x2.size))
        for m, poly in enumerate(self.time_polynomials()):
            tvals = poly.deriv(a)(t) if a else poly(t)
            for j in range(self.coeffs.shape[1]):
                mono = Polynomial.basis(j + 1)
                vert = mono.deriv(b2)(x2) if b2 else mono(x2)
                horiz = np.real(phase @ self.coeffs[m, j])
                out += np.multiply.outer(tvals, np.multiply.outer(horiz, vert))
        return out

    def scaled(self, factor: float) -> "HeatSample":
        return HeatSample(self.T, self.coeffs * factor)


def random_heat_sample(rng: np.random.Generator, T: float = 1.0, n_x: int = 64, n_poly: int = 3,
                       n_vert: int = 3, n_modes: int | None = None) -> HeatSample:
    """Random heat sample, band-limited like :func:`random_beam_sample`, cubic-or-lower in x2."""
    top = n_x // 4 if n_modes is None else n_modes
    if not 0 <= top <= n_x // 4:
        raise ValueError(f"n_modes must lie in [0, {n_x // 4}]")
    if n_vert < 1:
        raise ValueError("n_vert must be positive")
    k = np.arange(top + 1)
    shape = (n_poly, n_vert, top + 1)
    coeffs = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / (1.0 + k) ** COEFF_DECAY
    coeffs[..., 0] = coeffs[..., 0].real
    return HeatSample(T, coeffs)
