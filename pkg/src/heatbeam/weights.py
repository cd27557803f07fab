"""Spatial weight profiles, Carleman weight families, parameter regimes and damping thresholds.

Exponentials of the weights are never formed directly when they may leave
the double range: every evaluator works with logarithms and exposes a
clamped linear value together with a saturation flag.
"""
from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .grid import RectFunction, RectGrid, TorusFunction, TorusGrid, TWO_PI, fourier_derivative, \
    vertical_derivative_values

LOG_CLAMP = 700.0


def clamp_exp(log_value):
    """exp with the argument clamped to [-700, 700]; returns (value, saturated)."""
    log_value = np.asarray(log_value, dtype=float)
    saturated = np.abs(log_value) > LOG_CLAMP
    value = np.exp(np.clip(log_value, -LOG_CLAMP, LOG_CLAMP))
    value = np.where(np.isneginf(log_value), 0.0, value)
    return value, bool(np.any(saturated & np.isfinite(log_value)))


# ---------------------------------------------------------------- regions

@dataclass(frozen=True)
class Arc:
    """Open arc (start, start + length) on the torus; may wrap through 0."""

    start: float
    length: float

    def __post_init__(self):
        if not 0 < self.length < TWO_PI:
            raise ValueError(f"arc length must lie in (0, 2pi), got {self.length}")
        object.__setattr__(self, "start", float(self.start) % TWO_PI)

    @property
    def stop(self) -> float:
        return self.start + self.length

    @property
    def center(self) -> float:
        return (self.start + self.length / 2) % TWO_PI

    def offset(self, x):
        """Position of x measured from the arc start, in [0, 2pi)."""
        return np.mod(np.asarray(x, dtype=float) - self.start, TWO_PI)

    def contains(self, x):
        pos = self.offset(x)
        return (pos > 0) & (pos < self.length)

    def margin_inside(self, outer: "Arc") -> float:
        """Smallest gap between this arc and the complement of ``outer`` (negative if not nested)."""
        lead = float(outer.offset(self.start))
        if lead >= outer.length:
            return -1.0
        return min(lead, outer.length - lead - self.length)


@dataclass(frozen=True)
class Box:
    """Rectangle arc x (x2_low, x2_high) inside the channel."""

    x1: Arc
    x2_low: float
    x2_high: float

    def __post_init__(self):
        if not 0 < self.x2_low < self.x2_high < 1:
            raise ValueError("vertical extent must satisfy 0 < low < high < 1")

    def contains(self, x1, x2):
        x2 = np.asarray(x2, dtype=float)
        return self.x1.contains(x1) & (x2 > self.x2_low) & (x2 < self.x2_high)

    def margin_inside(self, outer: "Box") -> float:
        return min(self.x1.margin_inside(outer.x1), self.x2_low - outer.x2_low,
                   outer.x2_high - self.x2_high)


@dataclass(frozen=True)
class ObservationRegions:
    """Interior patch omega with core omega0, beam arc J with the chain J0 < J1 < ... < J4 < J."""

    omega: Box | None
    omega0: Box
    J: Arc | None
    J_chain: tuple[Arc, Arc, Arc, Arc, Arc]

    def __post_init__(self):
        if len(self.J_chain) != 5:
            raise ValueError("J_chain must hold the five arcs J0..J4")
        if self.omega is not None and self.omega0.margin_inside(self.omega) <= 0:
            raise ValueError("omega0 must be strictly inside omega")
        arcs = list(self.J_chain) + ([self.J] if self.J is not None else [])
        for inner, outer in zip(arcs, arcs[1:]):
            if inner.margin_inside(outer) <= 0:
                raise ValueError(f"arc {inner} is not strictly inside {outer}")

    @property
    def J0(self) -> Arc:
        return self.J_chain[0]

    @classmethod
    def default(cls) -> "ObservationRegions":
        chain = tuple(Arc(0.5 - 0.1 * i, 1.0 + 0.2 * i) for i in range(5))
        return cls(omega=Box(Arc(1.9, 2.8), 0.2, 0.8),
                   omega0=Box(Arc(2.2, 2.2), 0.3, 0.7),
                   J=Arc(0.0, 2.0), J_chain=chain)

    def without_observation(self) -> "ObservationRegions":
        """Same weight geometry with empty observation sets (omega = J = empty)."""
        return ObservationRegions(None, self.omega0, None, self.J_chain)

    def omega_mask(self, grid: RectGrid) -> np.ndarray:
        if self.omega is None:
            return np.zeros(grid.shape, dtype=bool)
        x1, x2 = grid.mesh()
        return self.omega.contains(x1, x2)

    def J_mask(self, grid: TorusGrid) -> np.ndarray:
        if self.J is None:
            return np.zeros(grid.n_points, dtype=bool)
        return self.J.contains(grid.nodes)

    def describe(self) -> dict:
        def box(b):
            return None if b is None else {"x1": [b.x1.start, b.x1.stop], "x2": [b.x2_low, b.x2_high]}

        def arc(a):
            return None if a is None else [a.start, a.stop]

        return {"omega": box(self.omega), "omega0": box(self.omega0), "J": arc(self.J),
                "J_chain": [arc(a) for a in self.J_chain]}


# ---------------------------------------------------------------- periodic profiles

@dataclass(frozen=True, eq=False)
class PeriodicProfile:
    """Real 2pi-periodic function stored by its Fourier coefficients c_m, |m| <= M.

    Evaluation accepts complex arguments, so the profile is usable with
    complex-step differentiation.
    """

    coefficients: np.ndarray  # c_0 .. c_M; c_{-m} = conj(c_m)

    @classmethod
    def from_function(cls, func, n_samples: int = 4096, rel_cut: float = 1e-16) -> "PeriodicProfile":
        x = np.arange(n_samples) * TWO_PI / n_samples
        coeffs = np.fft.rfft(func(x)) / n_samples
        keep = np.nonzero(np.abs(coeffs) > rel_cut * np.abs(coeffs).max())[0]
        top = int(keep.max()) + 1 if keep.size else 1
        if top >= n_samples // 2 - 1:
            raise ValueError("profile is not resolved by the construction grid")
        return cls(np.array(coeffs[:top], copy=True))

    def __call__(self, x, derivative: int = 0):
        x = np.asarray(x)
        m = np.arange(self.coefficients.size)
        angle = np.multiply.outer(x, m)
        # derivative of cos/sin: shift the phase by derivative * pi/2
        shift = derivative * np.pi / 2
        cos_part = np.cos(angle + shift) * m ** derivative
        sin_part = np.sin(angle + shift) * m ** derivative
        weights_cos = 2 * self.coefficients.real
        weights_sin = -2 * self.coefficients.imag
        weights_cos[0] = self.coefficients[0].real if derivative == 0 else 0.0
        weights_sin[0] = 0.0
        return cos_part @ weights_cos + sin_part @ weights_sin


def two_critical_profile(arc: Arc, inset: float = 0.2) -> tuple[PeriodicProfile, float, float]:
    """Smooth periodic profile with values in [0, 1], maximum at a and minimum at b.

    a < b are placed inside ``arc`` at ``inset`` times its length from the ends.
    A Moebius map of the circle sends the two points to antipodes, so the
    profile has exactly these two critical points.
    """
    a = arc.start + inset * arc.length
    b = arc.stop - inset * arc.length
    center, half = (a + b) / 2, (b - a) / 2
    rho = (1.0 - math.sin(half)) / math.cos(half)

    def profile(x):
        z = np.exp(1j * (x - center))
        moebius = (z - rho) / (1.0 - rho * z)
        return (1.0 - moebius.imag) / 2.0

    return PeriodicProfile.from_function(profile), a % TWO_PI, b % TWO_PI


# ---------------------------------------------------------------- spatial weights

PSI_I_FLOOR = 0.1
PSI_OMEGA_BUMP = 1.0


@dataclass(frozen=True, eq=False)
class SpatialWeights:
    psi_I: TorusFunction
    psi_Omega: RectFunction
    Psi: float
    torus_profile: PeriodicProfile
    channel_profile: PeriodicProfile
    psi_I_amplitude: float
    bump: float
    report: dict = field(default_factory=dict)

    def psi_I_at(self, x1, derivative: int = 0):
        base = PSI_I_FLOOR if derivative == 0 else 0.0
        return base + self.psi_I_amplitude * self.torus_profile(x1, derivative)

    def psi_Omega_at(self, x1, x2, d1: int = 0, d2: int = 0):
        """psi_Omega = x2(1-x2) + bump * x2^2 (1-x2)^2 (B(x1) - 1/2) and its partial derivatives."""
        x2 = np.asarray(x2)
        quad = [x2 * (1 - x2), 1 - 2 * x2, -2.0 + 0 * x2]
        quart_poly = np.polynomial.Polynomial([0, 0, 1, -2, 1])
        quart = quart_poly.deriv(d2)(x2) if d2 else quart_poly(x2)
        base = (quad[d2] if d2 <= 2 else 0 * x2) if d1 == 0 else 0.0
        centered = self.channel_profile(x1, d1) - (0.5 if d1 == 0 else 0.0)
        return base + self.bump * quart * centered


def torus_amplitude_for_mu0(profile: PeriodicProfile, arc: Arc, mu0_target: float) -> float:
    """Amplitude A so that mu psi'' + mu^2 psi'^2 >= mu^2 psi'^2 / 5 off the core arc for mu >= mu0_target."""
    x = np.linspace(0, TWO_PI, 8192, endpoint=False)
    outside = ~arc.contains(x)
    d1, d2 = profile(x[outside], 1), profile(x[outside], 2)
    worst = np.max(-d2 / d1 ** 2)
    return max(1.25 * worst / mu0_target, 1e-3)


def build_psi_torus(regions: ObservationRegions, grid: TorusGrid, amplitude: float | None = None) \
        -> TorusFunction:
    return _torus_weight(regions, grid, amplitude)[0]


def _torus_weight(regions, grid, amplitude=None):
    arc = regions.J0
    profile, a, b = two_critical_profile(arc)
    separation = arc.length * 0.7
    if separation < 2 * grid.spacing:
        raise ValueError(f"J0 of length {arc.length:.3g} cannot hold two separated critical points "
                         f"at grid spacing {grid.spacing:.3g}; enlarge J0 or refine the grid")
    if amplitude is None:
        amplitude = torus_amplitude_for_mu0(profile, arc, DEFAULT_MU0_TARGET)
    values = PSI_I_FLOOR + amplitude * profile(grid.nodes)
    return TorusFunction(grid, values), profile, amplitude, (a, b)


def critical_nodes_torus(psi: TorusFunction, exact_derivative: np.ndarray) -> tuple[np.ndarray, float]:
    """Nodes adjacent to sign changes of psi' or with |psi'| below the gradient floor."""
    spectral = fourier_derivative(psi.values, 1)
    floor = 10.0 * float(np.max(np.abs(spectral - exact_derivative)))
    sign_change = np.sign(spectral) != np.sign(np.roll(spectral, -1))
    flagged = sign_change | np.roll(sign_change, 1) | (np.abs(spectral) < floor)
    return np.nonzero(flagged)[0], floor


def build_psi_omega(regions: ObservationRegions, grid: RectGrid) -> RectFunction:
    return _channel_weight(regions, grid)[0]


def _channel_weight(regions, grid):
    core = regions.omega0
    if not core.x2_low < 0.5 < core.x2_high:
        raise ValueError("psi_Omega has its critical points on the line x2 = 1/2; omega0 spans "
                         f"x2 in ({core.x2_low}, {core.x2_high}). Enlarge omega0 or move it to "
                         "cover x2 = 1/2")
    profile, a, b = two_critical_profile(core.x1)
    weights = SpatialWeights(None, None, 0.0, None, profile, 0.0, PSI_OMEGA_BUMP)  # evaluator only
    x1, x2 = grid.mesh()
    values = weights.psi_Omega_at(x1, x2)
    report = verify_psi_omega(values, weights, regions, grid)
    return RectFunction(grid, values), profile, report


def verify_psi_omega(values, weights, regions, grid) -> dict:
    """Check the defining conditions of psi_Omega on the grid; raise with advice on failure."""
    x1, x2 = grid.mesh()
    exact = (weights.psi_Omega_at(x1, x2, d1=1), weights.psi_Omega_at(x1, x2, d2=1))
    discrete = (fourier_derivative(values, 1, axis=0),
                vertical_derivative_values(values, grid.vertical_nodes, 1))
    interior = slice(1, -1)
    err = max(float(np.max(np.abs(d[:, interior] - e[:, interior]))) for d, e in zip(discrete, exact))
    floor = 10.0 * err
    magnitude = np.hypot(*discrete)
    low = np.zeros(grid.shape, dtype=bool)
    low[:, interior] = magnitude[:, interior] < floor
    escaped = low & ~regions.omega0.contains(x1, x2)
    if np.any(escaped):
        where = [(round(float(x1[i, j]), 3), round(float(x2[i, j]), 3)) for i, j in np.argwhere(escaped)[:5]]
        raise ValueError(f"critical points of psi_Omega escape omega0 at {where}; enlarge omega0 "
                         "along x1 or move it to cover the critical set near x2 = 1/2")
    normal_gamma1 = discrete[1][:, -1]
    normal_gamma0 = -discrete[1][:, 0]
    boundary = max(float(np.max(np.abs(values[:, 0]))), float(np.max(np.abs(values[:, -1]))))
    return {"gradient_floor": floor, "n_low_gradient_nodes": int(low.sum()),
            "boundary_max_abs": boundary,
            "normal_derivative_deviation": float(max(np.max(np.abs(normal_gamma1 + 1)),
                                                     np.max(np.abs(normal_gamma0 + 1)))),
            "min_interior": float(values[:, 1:-1].min())}


def build_spatial_weights(regions: ObservationRegions, grid: RectGrid,
                          amplitude: float | None = None) -> SpatialWeights:
    psi_I, torus_profile, amp, (a, b) = _torus_weight(regions, grid.torus, amplitude)
    crit, floor = critical_nodes_torus(psi_I, amp * torus_profile(grid.torus.nodes, 1))
    outside = crit[~regions.J0.contains(grid.torus.nodes[crit])]
    if outside.size:
        raise ValueError("critical points of psi_I escape J0; enlarge J0")
    psi_Omega, channel_profile, report = _channel_weight(regions, grid)
    psi_max = 0.25 + PSI_OMEGA_BUMP / 32.0
    report = dict(report, torus_gradient_floor=floor, torus_critical_points=(a, b))
    return SpatialWeights(psi_I, psi_Omega, psi_max + PSI_I_FLOOR + amp, torus_profile,
                          channel_profile, amp, PSI_OMEGA_BUMP, report)


# ---------------------------------------------------------------- calibration

@dataclass(frozen=True)
class Calibration:
    version: str
    c1: float
    s_hat0: float
    mu0: float
    tau_default: float
    theta_default: float
    C_hat: dict

    @classmethod
    def load(cls, path: str | Path | None = None) -> "Calibration":
        parser = configparser.ConfigParser()
        if path is None:
            parser.read_string(resources.files("heatbeam.data").joinpath("calibration.txt").read_text())
        else:
            with open(path, encoding="utf-8") as handle:
                parser.read_file(handle)
        main = parser["calibration"]
        c_hat = {key: float(val) for key, val in parser["C_hat_per_inequality"].items()}
        return cls(main["version"], main.getfloat("c1"), main.getfloat("s_hat0"), main.getfloat("mu0"),
                   main.getfloat("tau_default"), main.getfloat("theta_default"), c_hat)

    def dump(self) -> str:
        lines = ["[calibration]", f"version = {self.version}"]
        for key in ("c1", "s_hat0", "mu0", "tau_default", "theta_default"):
            lines.append(f"{key} = {getattr(self, key)!r}")
        lines.append("")
        lines.append("[C_hat_per_inequality]")
        lines.extend(f"{key} = {val!r}" for key, val in self.C_hat.items())
        return "\n".join(lines) + "\n"


DEFAULT_MU0_TARGET = 1.25
_CALIBRATION: Calibration | None = None


def calibration() -> Calibration:
    global _CALIBRATION
    if _CALIBRATION is None:
        _CALIBRATION = Calibration.load()
    return _CALIBRATION


# ---------------------------------------------------------------- parameters

@dataclass(frozen=True)
class CarlemanParams:
    alpha: float
    s: float
    lam: float
    mu: float
    k: float = 2.0
    T: float = 1.0
    tau: float | None = None
    theta: float | None = None
    c1: float = 1.0
    s_hat0: float = 1.0
    conditions: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not self.T > 0:
            raise ValueError("T must be positive")
        if self.k < 2:
            raise ValueError("k must be at least 2")
        if not self.lam >= self.mu > 0:
            raise ValueError(f"need lambda >= mu > 0, got lambda={self.lam}, mu={self.mu}")

    @property
    def admissible(self) -> bool:
        return bool(self.conditions) and all(self.conditions.values())

    def violated(self) -> list[str]:
        return [name for name, ok in self.conditions.items() if not ok]

    def as_dict(self) -> dict:
        return {"alpha": self.alpha, "s": self.s, "lambda": self.lam, "mu": self.mu, "k": self.k,
                "T": self.T, "tau": self.tau, "theta": self.theta, "c1": self.c1,
                "s_hat0": self.s_hat0, "admissible": self.admissible}


def admissibility_conditions(alpha, s, lam, mu, k, T, c1, s_hat0, mu0) -> dict:
    if alpha <= 0:
        return {"alpha_positive": False}
    return {
        "lambda_ge_mu": lam >= mu,
        "mu_ge_mu0": mu >= mu0,
        "lambda_ge_c1(1+1/alpha^2)": lam >= c1 * (1 + alpha ** -2),
        "lambda_ge_c1*alpha^(2/3)*mu^(4/3)": lam >= c1 * alpha ** (2 / 3) * mu ** (4 / 3),
        "lambda_le_(1+alpha^2)*mu^2/c1": lam <= (1 + alpha ** 2) * mu ** 2 / c1,
        "s_ge_s_hat0(1+alpha)(T^k+T^(k-1))": s >= s_hat0 * (1 + alpha) * (T ** k + T ** (k - 1)) * (1 - 1e-14),
    }


def regime_params(alpha: float, tau: float | None = None, theta: float | None = None, T: float = 1.0,
                  k: float = 2.0, calib: Calibration | None = None) -> CarlemanParams:
    """Parameters lambda, mu, s from the damping regime and the admissibility report."""
    if not alpha > 0:
        raise ValueError("regime_params needs alpha > 0")
    calib = calib or calibration()
    tau = calib.tau_default if tau is None else tau
    theta = calib.theta_default if theta is None else theta
    if alpha >= 1:
        lam, mu = tau * alpha ** (2 / 3), theta
    else:
        lam, mu = tau / alpha ** 2, theta / alpha
    s = calib.s_hat0 * (1 + alpha) * (T ** k + T ** (k - 1))
    conditions = admissibility_conditions(alpha, s, lam, mu, k, T, calib.c1, calib.s_hat0, calib.mu0)
    if lam < mu:  # keep the record constructible; the violation is reported
        lam_stored = mu
    else:
        lam_stored = lam
    params = CarlemanParams(alpha, s, lam_stored, mu, k, T, tau, theta, calib.c1, calib.s_hat0, conditions)
    return params


def beam_params(alpha: float, tau: float | None = None, theta: float | None = None, T: float = 1.0,
                k: float = 2.0, calib: Calibration | None = None) -> CarlemanParams:
    """Parameters for the standalone beam estimates, which also allow alpha = 0.

    For alpha > 0 this is :func:`regime_params`; at alpha = 0 the damping
    scalings are undefined and lambda = tau, mu = theta are used.  Only
    mu >= mu0 and the lower bound on s are required by the beam estimates.
    """
    calib = calib or calibration()
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if alpha > 0:
        base = regime_params(alpha, tau, theta, T, k, calib)
        lam, mu, s = base.lam, base.mu, base.s
        tau, theta = base.tau, base.theta
    else:
        tau = calib.tau_default if tau is None else tau
        theta = calib.theta_default if theta is None else theta
        lam, mu = max(tau, theta), theta
        s = calib.s_hat0 * (T ** k + T ** (k - 1))
    conditions = {
        "mu_ge_mu0": mu >= calib.mu0,
        "s_ge_s_hat0(1+alpha)(T^k+T^(k-1))": s >= calib.s_hat0 * (1 + alpha) * (T ** k + T ** (k - 1)) * (1 - 1e-14),
    }
    return CarlemanParams(alpha, s, lam, mu, k, T, tau, theta, calib.c1, calib.s_hat0, conditions)


def explicit_params(alpha: float, s: float, lam: float, mu: float, k: float = 2.0, T: float = 1.0,
                    calib: Calibration | None = None) -> CarlemanParams:
    calib = calib or calibration()
    conditions = admissibility_conditions(alpha, s, lam, mu, k, T, calib.c1, calib.s_hat0, calib.mu0)
    return CarlemanParams(alpha, s, lam, mu, k, T, None, None, calib.c1, calib.s_hat0, conditions)


# ---------------------------------------------------------------- weight family

@dataclass(frozen=True)
class WeightValues:
    ell: np.ndarray
    phi: np.ndarray
    xi: np.ndarray
    phi0: np.ndarray
    xi0: np.ndarray
    phi1: np.ndarray
    xi1: np.ndarray
    phi2: np.ndarray
    xi2: np.ndarray
    saturated: bool


class WeightFamily:
    """Carleman weights built from the spatial profiles and the parameters.

    With E(x) = mu psi_I + lambda psi_Omega + 8 lambda Psi and g(t) = ell(t)^(-k/2):
    xi = e^E g and phi = (e^E - e^(10 lambda Psi)) g.
    """

    def __init__(self, spatial: SpatialWeights, params: CarlemanParams):
        self.spatial = spatial
        self.params = params
        self.lam_psi = params.lam * spatial.Psi

    # time factors
    def ell(self, t):
        t = np.asarray(t, dtype=float)
        return t * (self.params.T - t)

    def log_g(self, t):
        return -0.5 * self.params.k * np.log(self.ell(t))

    def g_derivatives(self, t, order: int = 4) -> np.ndarray:
        """g, g', ..., g^(order) for g = ell^p with p = -k/2 (ell''' = 0)."""
        t = np.asarray(t, dtype=float)
        p = -0.5 * self.params.k
        ell, d1, d2 = self.ell(t), self.params.T - 2 * t, -2.0
        out = np.empty((order + 1,) + t.shape)
        out[0] = ell ** p
        if order >= 1:
            out[1] = p * ell ** (p - 1) * d1
        if order >= 2:
            out[2] = p * (p - 1) * ell ** (p - 2) * d1 ** 2 + p * ell ** (p - 1) * d2
        if order >= 3:
            out[3] = p * (p - 1) * (p - 2) * ell ** (p - 3) * d1 ** 3 \
                + 3 * p * (p - 1) * ell ** (p - 2) * d1 * d2
        if order >= 4:
            out[4] = p * (p - 1) * (p - 2) * (p - 3) * ell ** (p - 4) * d1 ** 4 \
                + 6 * p * (p - 1) * (p - 2) * ell ** (p - 3) * d1 ** 2 * d2 \
                + 3 * p * (p - 1) * ell ** (p - 2) * d2 ** 2
        return out

    # spatial exponents
    def exponent(self, x1, x2=None):
        p = self.params
        value = p.mu * self.spatial.psi_I_at(x1) + 8 * self.lam_psi
        if x2 is not None:
            value = value + p.lam * self.spatial.psi_Omega_at(x1, x2)
        return value

    def numerator(self, x1, x2=None):
        """e^E - e^(10 lambda Psi), negative; spatial part of phi."""
        return self.numerator_from_exponent(self.exponent(x1, x2))

    def numerator_from_exponent(self, E):
        top = 10 * self.lam_psi
        return -np.exp(top) * -np.expm1(np.asarray(E, dtype=float) - top)

    def relative_exponent(self, t, E, g_min: float | None = None, E_max: float | None = None):
        """2s(phi(t, x) - phi*) on the grid t x E(x), free of cancellation.

        phi* = g_min (e^(E_max) - e^(10 lambda Psi)) is the largest value of phi
        over the sampled set (g is smallest at t = T/2, phi grows with E).  With
        N(E) = e^E - e^(10 lambda Psi) < 0,

            phi - phi* = (g - g_min) N(E) + g_min e^(E_max) expm1(E - E_max),

        both parts non-positive and accurate, whereas phi itself is ~ -e^(10 lambda Psi)
        with spatial variation far below its ulp once lambda Psi is large.
        """
        g = np.exp(self.log_g(t))
        E = np.asarray(E, dtype=float)
        g_min = float(np.min(g)) if g_min is None else g_min
        E_max = float(np.max(E)) if E_max is None else E_max
        if np.any(g < g_min) or np.any(E > E_max):
            raise ValueError("g_min / E_max must bound the sampled values")
        first = np.multiply.outer(g - g_min, self.numerator_from_exponent(E))
        second = g_min * np.exp(E_max) * np.expm1(E - E_max)
        return 2 * self.params.s * (first + second)

    def log_xi(self, t, x1, x2=None):
        return self.exponent(x1, x2) + self.log_g(t)

    def phi(self, t, x1, x2=None):
        return self.numerator(x1, x2) * np.exp(self.log_g(t))

    def boundary_numerator_derivative(self, x1, order: int):
        """d^order/dx1^order of the boundary numerator (order >= 1): e^(8 lambda Psi) (e^(mu psi_I))^(order)."""
        p = self.params
        derivs = [self.spatial.psi_I_at(x1, j) for j in range(order + 1)]
        base = np.exp(p.mu * derivs[0] + 8 * self.lam_psi)
        a = [None] + [p.mu * derivs[j] for j in range(1, order + 1)]
        return base * _bell(a, order)

    def flat_log_xi(self, t, level: int):
        """log xi_1 (level 8) or log xi_2 (level 9)."""
        return level * self.lam_psi + self.log_g(t)

    def flat_phi(self, t, level: int):
        top = 10 * self.lam_psi
        return -np.exp(top) * -np.expm1((level - 10) * self.lam_psi) * np.exp(self.log_g(t))


def _bell(a, order):
    """Complete Bell polynomial B_order(a1, .., a_order)."""
    if order == 0:
        return 1.0
    if order == 1:
        return a[1]
    if order == 2:
        return a[1] ** 2 + a[2]
    if order == 3:
        return a[1] ** 3 + 3 * a[1] * a[2] + a[3]
    if order == 4:
        return a[1] ** 4 + 6 * a[1] ** 2 * a[2] + 4 * a[1] * a[3] + 3 * a[2] ** 2 + a[4]
    raise ValueError("Bell polynomial implemented up to order 4")


def eval_weight_family(wf: WeightFamily, t, x) -> WeightValues:
    """All weights at (t, x) with x = (x1, x2); arrays broadcast."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0) or np.any(t >= wf.params.T):
        raise ValueError("weights are defined for 0 < t < T only")
    x1, x2 = x
    log_g = wf.log_g(t)
    xi, s1 = clamp_exp(wf.exponent(x1, x2) + log_g)
    xi0, s2 = clamp_exp(wf.exponent(x1) + log_g)
    xi1, s3 = clamp_exp(wf.flat_log_xi(t, 8))
    xi2, s4 = clamp_exp(wf.flat_log_xi(t, 9))
    return WeightValues(wf.ell(t), wf.phi(t, x1, x2), xi, wf.phi(t, x1), xi0, wf.flat_phi(t, 8), xi1,
                        wf.flat_phi(t, 9), xi2, s1 or s2 or s3 or s4)


def log_rho(wf: WeightFamily, t) -> dict:
    """Logarithms of rho_0 .. rho_5 (minus infinity at t in {0, T})."""
    p = wf.params
    t = np.asarray(t, dtype=float)
    inside = (t > 0) & (t < p.T)
    safe_t = np.where(inside, t, p.T / 2)
    lx1, lx2 = wf.flat_log_xi(safe_t, 8), wf.flat_log_xi(safe_t, 9)
    ph1, ph2 = wf.flat_phi(safe_t, 8), wf.flat_phi(safe_t, 9)
    ls, ll = math.log(p.s), math.log(p.lam)
    logs = {
        "rho0": 1.5 * ls + ll + 1.5 * lx1 + p.s * ph1,
        "rho1": 3.5 * ls + 4 * ll + 3.5 * lx2 + p.s * ph2,
        "rho2": 5.5 * ls + 3 * ll + 5.5 * lx2 + 2 * p.s * ph2 - p.s * ph1,
        "rho3": -0.5 * ls + ll - 0.5 * lx1 + p.s * ph1,
        "rho4": -2.5 * ls + ll - 2.5 * lx1 + p.s * ph1,
        "rho5": 1.5 * ls + 2 * ll + 1.5 * lx2 + p.s * ph2,
    }
    return {key: np.where(inside, val, -np.inf) for key, val in logs.items()}


def eval_rho(wf: WeightFamily, t) -> dict:
    out = {}
    saturated = False
    for key, val in log_rho(wf, t).items():
        out[key], sat = clamp_exp(val)
        saturated = saturated or sat
    out["saturated"] = saturated
    return out


def rho_log_derivative(wf: WeightFamily, t, which: str):
    """(log rho)' for rho_3 or rho_4; rho' = rho * this."""
    p = wf.params
    g = wf.g_derivatives(t, 1)
    ratio = g[1] / g[0]
    power = {"rho3": -0.5, "rho4": -2.5}[which]
    dphi1 = -np.exp(10 * wf.lam_psi) * -np.expm1(-2 * wf.lam_psi) * g[1]
    return power * ratio + p.s * dphi1


# ---------------------------------------------------------------- damping thresholds

def _cubic(beta):
    return ((36 * beta + 111) * beta + 77) * beta - 58


def alpha_star() -> dict:
    """Unique real root beta* of 36b^3 + 111b^2 + 77b - 58 and alpha* = sqrt(6(2-b*)/(4+b*))."""
    low, high = 0.0, 1.0
    if not (_cubic(low) < 0 < _cubic(high)):
        raise RuntimeError("bracket lost")
    for _ in range(60):
        mid = 0.5 * (low + high)
        if _cubic(mid) < 0:
            low = mid
        else:
            high = mid
    beta = 0.5 * (low + high)
    for _ in range(5):
        slope = (108 * beta + 222) * beta + 77
        step = _cubic(beta) / slope
        beta -= step
        if abs(step) < 1e-17:
            break
    return {"beta_star": beta, "alpha_star": math.sqrt(6 * (2 - beta) / (4 + beta))}


@dataclass(frozen=True)
class AbsorptionWindow:
    alpha1_star: float
    alpha2_star: float
    theta1_window: tuple[float, float]
    theta2_window: tuple[float, float]
    feasible: bool


def absorption_window(beta: float, alpha: float) -> AbsorptionWindow:
    if not 0 <= beta < 4 / 3:
        raise ValueError("beta must lie in [0, 4/3)")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    a2 = alpha * alpha
    alpha1 = math.sqrt(6 * beta * (33 + 18 * beta) / (18 * beta ** 2 + 42 * beta + 29))
    alpha2 = math.sqrt(6 * (2 - beta) / (4 + beta))
    # theta1 lower bound is undefined at beta = 0 only when alpha = 0; alpha > 0 here.
    theta1 = ((8 + 3 * beta) * a2 / ((3 * a2 + 6 * beta) * (33 + 18 * beta)), 1 / (16 + 6 * beta))
    theta2 = (a2 / ((a2 + 6) * (2 - beta)), 1 / 6)
    feasible = theta1[0] < theta1[1] and theta2[0] < theta2[1]
    return AbsorptionWindow(alpha1, alpha2, theta1, theta2, feasible)
