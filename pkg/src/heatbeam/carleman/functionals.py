"""Weighted Carleman functionals: beam, heat, coupled and the d_t eta observation inequality.

Every term is an integral of e^{log w} times a product of factors.  At
theorem-admissible parameters the weights span hundreds of decades (s phi_0
is of order -1e250), so integrals are accumulated in the log domain: each
term is stored as (log|value|, sign) and a sample's terms are reported
relative to their common largest magnitude.  Factors are multiplied as sums
of logarithms, never as raw products, because conjugated derivatives such as
s d_t phi_0 u reach 1e260 and their squares would overflow.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import logsumexp

from ..grid import RectGrid, TimeGrid, fourier_derivative, vertical_derivative_values
from ..operators import CoupledState, interface_flux, random_state
from ..simulator import Trajectory, solve_adjoint
from ..weights import (CarlemanParams, ObservationRegions, WeightFamily, absorption_window, alpha_star,
                       build_spatial_weights)
from .jets import Jet
from .samples import BeamSample, HeatSample, interior_times, torus_nodes

LOG_UNDERFLOW = -700.0  # terms this far below the sample's largest term vanish in double precision
BEAM_THEOREMS = ("1.6", "1.7", "1.8")
BEAM_ORDERS = ((0, 0), (0, 1), (0, 2), (0, 3), (0, 4), (1, 0), (1, 1), (1, 2), (2, 0))


class InadmissibleError(ValueError):
    """Parameter or theorem combination outside the hypotheses; ``details`` says why."""

    def __init__(self, message: str, details: dict | None = None):
        super().__init__(message)
        self.details = details or {}


# ---------------------------------------------------------------- log-domain terms

def log_term(log_weight, factors, quad, coefficient: float = 1.0) -> tuple[float, float]:
    """(log|I|, sign I) for I = coefficient * sum e^{log_weight} prod(factors) quad."""
    if coefficient == 0:
        return -math.inf, 0.0
    with np.errstate(divide="ignore"):
        log_abs = np.asarray(log_weight, dtype=float) + np.log(np.abs(quad))
        sign = np.ones(np.shape(log_abs))
        for f in factors:
            f = np.asarray(f, dtype=float)
            log_abs = log_abs + np.log(np.abs(f))
            sign = sign * np.sign(f)
    log_abs = np.broadcast_to(log_abs, np.broadcast_shapes(log_abs.shape, sign.shape))
    sign = np.broadcast_to(sign, log_abs.shape)
    finite = np.isfinite(log_abs)
    if not finite.any():
        return -math.inf, 0.0
    value, out_sign = logsumexp(log_abs[finite], b=sign[finite], return_sign=True)
    if out_sign == 0 or not np.isfinite(value):
        return -math.inf, 0.0
    return float(value + math.log(abs(coefficient))), float(out_sign * np.sign(coefficient))


def square(values):
    return (values, values)


@dataclass
class SampleFunctional:
    """Terms of one sample relative to ``log_base`` (the largest term magnitude)."""

    lhs: dict
    rhs: dict
    log_base: float
    saturated: dict

    @property
    def lhs_total(self) -> float:
        return float(sum(self.lhs.values()))

    @property
    def rhs_total(self) -> float:
        return float(sum(self.rhs.values()))

    @property
    def ratio(self) -> float:
        lhs, rhs = self.lhs_total, self.rhs_total
        if rhs == 0:
            return 0.0 if lhs == 0 else math.inf
        return lhs / rhs


def assemble(lhs_logs: dict, rhs_logs: dict) -> SampleFunctional:
    everything = list(lhs_logs.values()) + list(rhs_logs.values())
    base = max((la for la, _ in everything), default=-math.inf)
    if not np.isfinite(base):
        zero = {**{k: 0.0 for k in lhs_logs}}, {k: 0.0 for k in rhs_logs}
        return SampleFunctional(zero[0], zero[1], -math.inf, {})

    def rel(pair):
        la, sign = pair
        return 0.0 if not np.isfinite(la) or la - base < -745.0 else sign * math.exp(la - base)

    saturated = {k: bool(np.isfinite(la) and la - base < LOG_UNDERFLOW)
                 for k, (la, _) in {**lhs_logs, **rhs_logs}.items()}
    return SampleFunctional({k: rel(v) for k, v in lhs_logs.items()},
                            {k: rel(v) for k, v in rhs_logs.items()}, base, saturated)


@dataclass
class FunctionalReport:
    name: str
    params: dict
    samples: list
    extra: dict = field(default_factory=dict)

    @property
    def ratios(self) -> np.ndarray:
        return np.array([s.ratio for s in self.samples])

    @property
    def max_ratio(self) -> float:
        return float(np.max(self.ratios)) if self.samples else 0.0

    @property
    def lhs_terms(self) -> list:
        return [s.lhs for s in self.samples]

    @property
    def rhs_terms(self) -> list:
        return [s.rhs for s in self.samples]

    @property
    def saturation_flags(self) -> dict:
        flags = {}
        for s in self.samples:
            for key, val in s.saturated.items():
                flags[key] = flags.get(key, False) or val
        return flags

    def as_dict(self) -> dict:
        return {"name": self.name, "params": self.params, "ratios": [float(r) for r in self.ratios],
                "max_ratio": self.max_ratio, "saturation_flags": self.saturation_flags,
                "lhs_terms": self.lhs_terms, "rhs_terms": self.rhs_terms, "extra": self.extra}


@dataclass(frozen=True)
class CalibrationCheck:
    c_hat: float
    margin: float
    verification_ratios: np.ndarray
    violations: int

    @property
    def passed(self) -> bool:
        """No violation and a usable (finite) calibrated constant."""
        return self.violations == 0 and math.isfinite(self.c_hat)

    def as_dict(self) -> dict:
        return {"c_hat": self.c_hat, "margin": self.margin, "violations": self.violations, "passed": self.passed,
                "max_verification_ratio": float(np.max(self.verification_ratios, initial=0.0))}


def calibrate_then_verify(calibration_ratios, verification_ratios, margin: float = 2.0) -> CalibrationCheck:
    """c_hat = max calibration ratio; a fresh sample violates when its ratio exceeds margin * c_hat."""
    cal = np.asarray(calibration_ratios, dtype=float)
    ver = np.asarray(verification_ratios, dtype=float)
    if cal.size == 0:
        raise ValueError("calibration set is empty")
    if not margin >= 1:
        raise ValueError("margin must be at least 1")
    c_hat = float(np.max(cal))
    return CalibrationCheck(c_hat, margin, ver, int(np.sum(ver > margin * c_hat)))


# ---------------------------------------------------------------- sampled fields

@dataclass
class BeamFields:
    """d_t^a d_x^b eta on (times x nodes) with quadrature weights; ``flux`` is d_n u on the interface."""

    times: np.ndarray
    quad_t: np.ndarray
    nodes: np.ndarray
    quad_x: np.ndarray
    derivs: dict
    alpha: float | None = None
    flux: np.ndarray | None = None

    def __getitem__(self, key):
        return self.derivs[key]

    @property
    def quad(self) -> np.ndarray:
        return np.multiply.outer(self.quad_t, self.quad_x)

    def beam_residual(self, alpha: float) -> np.ndarray:
        """d_t^2 eta - alpha d_t d_x^2 eta + d_x^4 eta."""
        d = self.derivs
        return d[2, 0] - alpha * d[1, 2] + d[0, 4]

    def adjoint_residual(self, alpha: float) -> np.ndarray:
        """Full beam line of the adjoint system, including alpha d_t eta + eta + d_n u."""
        d = self.derivs
        flux = 0.0 if self.flux is None else self.flux
        return self.beam_residual(alpha) + alpha * d[1, 0] + d[0, 0] + flux


def beam_fields_from_sample(sample: BeamSample, n_t: int = 64, n_x: int = 64) -> BeamFields:
    t, x = interior_times(sample.T, n_t), torus_nodes(n_x)
    jet = sample.jet(t, x, 2, 4)
    derivs = {key: np.asarray(jet[key], dtype=float) for key in BEAM_ORDERS}
    return BeamFields(t, np.full(t.size, sample.T / n_t), x, np.full(x.size, 2 * np.pi / n_x), derivs)


def _interior_time_derivative(values: np.ndarray, dt: float) -> np.ndarray:
    return (values[2:] - values[:-2]) / (2 * dt)


def beam_fields_from_trajectory(traj: Trajectory) -> BeamFields:
    """Interior time nodes; d_t of the velocity by centered differences, x-derivatives spectral."""
    dt = traj.time_grid.step
    if traj.w.shape[0] < 3:
        raise ValueError("trajectory needs at least two steps")
    zeta, vel = traj.zeta[1:-1], traj.zeta_t[1:-1]
    acc = _interior_time_derivative(traj.zeta_t, dt)
    derivs = {(0, b): fourier_derivative(zeta, b, axis=-1) for b in range(5)}
    derivs.update({(1, b): fourier_derivative(vel, b, axis=-1) for b in range(3)})
    derivs[2, 0] = acc
    grid = traj.grid
    flux = interface_flux(traj.w[1:-1], grid.layer_spacing)
    nodes = grid.torus.nodes
    return BeamFields(traj.times[1:-1], np.full(traj.times.size - 2, dt), nodes,
                      np.full(nodes.size, grid.torus.spacing), derivs, traj.alpha, flux)


@dataclass
class FluidFields:
    """u and its derivatives on (times x x1 x x2); residual = d_t u - Delta u where it is defined."""

    times: np.ndarray
    quad_t: np.ndarray
    grid: RectGrid
    u: np.ndarray
    u_t: np.ndarray
    u_x1: np.ndarray
    u_x2: np.ndarray
    lap: np.ndarray
    residual: np.ndarray

    @property
    def quad(self) -> np.ndarray:
        spatial = np.full(self.grid.torus.n_points, self.grid.torus.spacing)[:, None] \
            * self.grid.vertical_weights[None, :]
        return np.multiply.outer(self.quad_t, spatial)

    @property
    def quad_boundary(self) -> np.ndarray:
        return np.multiply.outer(self.quad_t, np.full(self.grid.torus.n_points, self.grid.torus.spacing))

    def boundary(self, side: int) -> dict:
        """Traces on the wall (side 0, outward normal -x2) or the interface (side -1, normal +x2)."""
        normal = -1.0 if side == 0 else 1.0
        return {"u": self.u[..., side], "u_t": self.u_t[..., side], "u_x1": self.u_x1[..., side],
                "u_x2": self.u_x2[..., side], "u_n": normal * self.u_x2[..., side], "normal": normal,
                "x2": float(self.grid.vertical_nodes[side])}


def fluid_fields_from_sample(sample: HeatSample, grid: RectGrid, n_t: int = 64) -> FluidFields:
    t = interior_times(sample.T, n_t)
    x1, x2 = grid.torus.nodes, grid.vertical_nodes
    d = lambda a=0, b1=0, b2=0: sample.derivative(t, x1, x2, a, b1, b2)  # noqa: E731
    u_t = d(1)
    lap = d(0, 2) + d(0, 0, 2)
    return FluidFields(t, np.full(t.size, sample.T / n_t), grid, d(), u_t, d(0, 1), d(0, 0, 1), lap, u_t - lap)


def fluid_fields_from_trajectory(traj: Trajectory) -> FluidFields:
    """Centered time differences; the heat residual is evaluated on interior layers only."""
    dt = traj.time_grid.step
    grid = traj.grid
    w = traj.w[1:-1]
    u_t = _interior_time_derivative(traj.w, dt)
    u_x2 = vertical_derivative_values(w, grid.vertical_nodes, 1)
    lap = fourier_derivative(w, 2, axis=-2) + vertical_derivative_values(w, grid.vertical_nodes, 2)
    residual = np.zeros_like(w)
    residual[..., 1:-1] = u_t[..., 1:-1] - lap[..., 1:-1]
    return FluidFields(traj.times[1:-1], np.full(traj.times.size - 2, dt), grid, w, u_t,
                       fourier_derivative(w, 1, axis=-2), u_x2, lap, residual)


# ---------------------------------------------------------------- weights on sample grids

class _BeamWeights:
    """log(s^a mu^b xi_0^c e^{2 s phi_0}) relative to e^{2 s phi*} on a beam field grid.

    phi* is the largest weight over the reference set ``ref = (g_min, E_max)``
    (default: this grid), so the exponent 2 s (phi_0 - phi*) is computed by
    :meth:`WeightFamily.relative_exponent` without cancellation.
    """

    def __init__(self, wf: WeightFamily, times, nodes, ref: tuple | None = None):
        p = wf.params
        self.p = p
        E0 = wf.exponent(nodes)
        ref = ref or (float(np.min(np.exp(wf.log_g(times)))), float(np.max(E0)))
        self.log_xi0 = np.add.outer(wf.log_g(times), E0)
        self.two_s_phi0 = wf.relative_exponent(times, E0, *ref)

    def log(self, s_pow=0, mu_pow=0, xi_pow=0):
        p = self.p
        return self.two_s_phi0 + s_pow * math.log(p.s) + mu_pow * math.log(p.mu) + xi_pow * self.log_xi0


class _FluidWeights:
    """log weights built on xi, phi (interior) and on xi_0, phi_0 (boundary traces), relative to the
    largest value of phi over the channel grid (which contains the boundary rows)."""

    def __init__(self, wf: WeightFamily, fields: FluidFields, ref: tuple | None = None):
        p = wf.params
        self.p, self.wf = p, wf
        x1, x2 = fields.grid.mesh()
        log_g = wf.log_g(fields.times)
        E = wf.exponent(x1, x2)
        nodes = fields.grid.torus.nodes
        E0 = wf.exponent(nodes)
        self.ref = ref or (float(np.min(np.exp(log_g))), float(max(np.max(E), np.max(E0))))
        self._times, self._E = fields.times, E
        self.log_xi = log_g[:, None, None] + E[None]
        self.log_xi0 = np.add.outer(log_g, E0)
        self.two_s_phi0 = wf.relative_exponent(fields.times, E0, *self.ref)

    @cached_property
    def two_s_phi(self):
        # interior weight; built on demand so a boundary-only reference stays usable
        return self.wf.relative_exponent(self._times, self._E, *self.ref)

    def log(self, s_pow=0, lam_pow=0, xi_pow=0):
        p = self.p
        return self.two_s_phi + s_pow * math.log(p.s) + lam_pow * math.log(p.lam) + xi_pow * self.log_xi

    def log0(self, s_pow=0, lam_pow=0, xi_pow=0, mu_pow=0):
        p = self.p
        return (self.two_s_phi0 + s_pow * math.log(p.s) + lam_pow * math.log(p.lam)
                + mu_pow * math.log(p.mu) + xi_pow * self.log_xi0)


def weight_family(params: CarlemanParams, regions: ObservationRegions | None = None,
                  grid: RectGrid | None = None) -> WeightFamily:
    regions = regions or ObservationRegions.default()
    grid = grid or RectGrid.uniform(64, 33)
    return WeightFamily(build_spatial_weights(regions, grid), params)


# ---------------------------------------------------------------- beam inequalities

def _beam_interior_terms(W: _BeamWeights, F: BeamFields, alpha: float, damped: bool) -> dict:
    """The six weighted norms common to all beam estimates; ``damped`` adds the (1 + alpha^2) factors."""
    q, d = F.quad, F.derivs
    boost = 1 + alpha ** 2 if damped else 1.0
    return {
        "eta": log_term(W.log(7, 8, 7), square(d[0, 0]), q),
        "eta_x": log_term(W.log(5, 6, 5), square(d[0, 1]), q),
        "eta_xx": log_term(W.log(3, 4, 3), square(d[0, 2]), q),
        "eta_t": log_term(W.log(3, 4, 3), square(d[1, 0]), q, boost),
        "eta_xxx": log_term(W.log(1, 2, 1), square(d[0, 3]), q),
        "eta_tx": log_term(W.log(1, 2, 1), square(d[1, 1]), q, boost),
    }


def _check_beam_admissible(theorem: str, alpha: float) -> dict:
    if theorem not in BEAM_THEOREMS:
        raise ValueError(f"theorem must be one of {BEAM_THEOREMS}, got {theorem!r}")
    if alpha < 0:
        raise InadmissibleError("alpha must be non-negative", {"alpha": alpha})
    if theorem == "1.7" and alpha <= 0:
        raise InadmissibleError("the damped beam estimate needs alpha > 0", {"alpha": alpha})
    if theorem == "1.8":
        if alpha <= 0:
            raise InadmissibleError("the absorbed beam estimate needs alpha > 0", {"alpha": alpha})
        consts = alpha_star()
        window = absorption_window(consts["beta_star"], alpha)
        details = {"alpha": alpha, "alpha_star": consts["alpha_star"], "window_feasible": window.feasible,
                   "theta1_window": window.theta1_window, "theta2_window": window.theta2_window}
        if not window.feasible:
            raise InadmissibleError(f"absorption window at beta* is empty for alpha = {alpha} "
                                    f"(alpha* = {consts['alpha_star']:.15g}); no constant is claimed", details)
        return details
    return {"alpha": alpha}


def beam_functional(theorem: str, fields: BeamFields, wf: WeightFamily, regions: ObservationRegions,
                    include_J: bool = True) -> SampleFunctional:
    p = wf.params
    alpha = p.alpha
    _check_beam_admissible(theorem, alpha)
    W = _BeamWeights(wf, fields.times, fields.nodes)
    q, d = fields.quad, fields.derivs
    J = regions.J.contains(fields.nodes)[None, :] if (include_J and regions.J is not None) \
        else np.zeros((1, fields.nodes.size), dtype=bool)
    qJ = q * J
    residual = fields.beam_residual(alpha)
    rhs = {"residual": log_term(W.log(), square(residual), q)}
    if theorem == "1.6":
        lhs = _beam_interior_terms(W, fields, alpha, damped=True)
        rhs.update({
            "obs_J_eta": log_term(W.log(7, 8, 7), square(d[0, 0]), qJ),
            "obs_J_eta_t": log_term(W.log(3, 4, 3), square(d[1, 0]), qJ, 1 + alpha ** 2),
            "obs_J_eta_xxx": log_term(W.log(1, 2, 1), square(d[0, 3]), qJ),
            "obs_J_eta_tx": log_term(W.log(1, 2, 1), square(d[1, 1]), qJ, 1 + alpha ** 2),
            "global_eta_t": log_term(W.log(3, 4, 3), square(d[1, 0]), q, alpha ** 2),
        })
    elif theorem == "1.7":
        lhs = _beam_interior_terms(W, fields, alpha, damped=True)
        frac = alpha ** 2 / (1 + alpha ** 2)
        lhs.update({
            "eta_xxxx": log_term(W.log(-1, 0, -1), square(d[0, 4]), q, frac),
            "eta_tt": log_term(W.log(-1, 0, -1), square(d[2, 0]), q, frac),
            "eta_txx": log_term(W.log(-1, 0, -1), square(d[1, 2]), q, alpha ** 2),
        })
        rhs.update({
            "obs_J_eta": log_term(W.log(7, 8, 7), square(d[0, 0]), qJ, alpha ** -8 + alpha ** 4),
            "global_eta_t": log_term(W.log(3, 4, 3), square(d[1, 0]), q, alpha ** 2),
        })
    else:
        lhs = _beam_interior_terms(W, fields, alpha, damped=False)
        lhs.update({
            "eta_xxxx": log_term(W.log(-1, 0, -1), square(d[0, 4]), q),
            "eta_tt": log_term(W.log(-1, 0, -1), square(d[2, 0]), q),
            "eta_txx": log_term(W.log(-1, 0, -1), square(d[1, 2]), q),
        })
        rhs["obs_J_eta"] = log_term(W.log(7, 8, 7), square(d[0, 0]), qJ)
    return assemble(lhs, rhs)


def _as_beam_fields(sample, n_t: int, n_x: int) -> BeamFields:
    if isinstance(sample, BeamFields):
        return sample
    if isinstance(sample, BeamSample):
        return beam_fields_from_sample(sample, n_t, n_x)
    if isinstance(sample, Trajectory):
        return beam_fields_from_trajectory(sample)
    raise ValueError(f"unsupported beam sample type {type(sample).__name__}")


def beam_inequality_check(theorem: str, eta_samples, params: CarlemanParams,
                          regions: ObservationRegions | None = None, grid: RectGrid | None = None,
                          n_t: int = 64, include_J: bool = True) -> FunctionalReport:
    """Weighted LHS and RHS of one beam estimate for every sample; raises InadmissibleError if excluded."""
    regions = regions or ObservationRegions.default()
    grid = grid or RectGrid.uniform(64, 33)
    details = _check_beam_admissible(theorem, params.alpha)
    wf = weight_family(params, regions, grid)
    samples = [beam_functional(theorem, _as_beam_fields(s, n_t, grid.torus.n_points), wf, regions, include_J)
               for s in eta_samples]
    return FunctionalReport(f"beam-{theorem}", params.as_dict(), samples, {"admissibility": details})


# ---------------------------------------------------------------- heat inequality and I_Sigma

SIGMA_TERMS = tuple(f"I_sigma_{i}" for i in range(1, 8))


def _conjugated_traces_closed_form(wf: WeightFamily, fields: FluidFields, side: int) -> dict:
    """e^{-s phi_0}-scaled traces of v = e^{s phi} u from the boundary identities
    psi_Omega = 0 and d_n psi_Omega = -1: d_n phi = -lambda xi_0, d_x1 phi = mu psi_I' xi_0."""
    p = wf.params
    tr = fields.boundary(side)
    nodes = fields.grid.torus.nodes
    g = wf.g_derivatives(fields.times, 1)
    xi0 = np.exp(np.add.outer(wf.log_g(fields.times), wf.exponent(nodes)))
    dphi_t = np.multiply.outer(g[1], wf.numerator(nodes))
    u = tr["u"]
    return {"v": u, "v_t": tr["u_t"] + p.s * dphi_t * u,
            "v_x1": tr["u_x1"] + p.s * p.mu * wf.spatial.psi_I_at(nodes, 1)[None] * xi0 * u,
            "v_n": tr["u_n"] - p.s * p.lam * xi0 * u, "phi_t": dphi_t}


def _conjugated_traces_product_rule(wf: WeightFamily, fields: FluidFields, side: int) -> dict:
    """Same traces by the Leibniz rule on jets of F = s phi(t, x1, x2), differentiated in the interior
    variables and restricted to the boundary afterwards."""
    p = wf.params
    tr = fields.boundary(side)
    nodes = fields.grid.torus.nodes
    x2 = np.full(nodes.size, tr["x2"])
    g = wf.g_derivatives(fields.times, 1)
    E = wf.exponent(nodes, x2)
    e_E = np.exp(E)
    numer = wf.numerator(nodes, x2)
    dE_x1 = p.mu * wf.spatial.psi_I_at(nodes, 1) + p.lam * wf.spatial.psi_Omega_at(nodes, x2, d1=1)
    dE_x2 = p.lam * wf.spatial.psi_Omega_at(nodes, x2, d2=1)
    F_t = p.s * np.multiply.outer(g[1], numer)
    F_x1 = p.s * np.multiply.outer(g[0], dE_x1 * e_E)
    F_x2 = p.s * np.multiply.outer(g[0], dE_x2 * e_E)
    zero = np.zeros_like(F_t)
    out = {"v": tr["u"], "phi_t": F_t / p.s}
    for key, Fd, ud in (("v_t", F_t, tr["u_t"]), ("v_x1", F_x1, tr["u_x1"]), ("v_x2", F_x2, tr["u_x2"])):
        Fjet = Jet([[zero, Fd]])  # (F, dF); only derivatives enter exp_relative
        ujet = Jet([[tr["u"], ud]])
        out[key] = (Fjet.exp_relative() * ujet)[0, 1]
    out["v_n"] = tr["normal"] * out.pop("v_x2")
    return out


def sigma_terms(wf: WeightFamily, fields: FluidFields, path: str = "closed-form",
                ref: tuple | None = None) -> dict:
    """The seven boundary terms of I_Sigma for v = e^{s phi} u, as (log|value|, sign) pairs."""
    p = wf.params
    build = {"closed-form": _conjugated_traces_closed_form,
             "product-rule": _conjugated_traces_product_rule}.get(path)
    if build is None:
        raise ValueError(f"unknown path {path!r}")
    W = _FluidWeights(wf, fields, ref)
    q = fields.quad_boundary
    psi_p = wf.spatial.psi_I_at(fields.grid.torus.nodes, 1)[None]
    parts = {name: [] for name in SIGMA_TERMS}
    for side in (0, -1):
        v = build(wf, fields, side)
        parts["I_sigma_1"].append(log_term(W.log0(), (v["v_n"], v["v_t"]), q, -1.0))
        parts["I_sigma_2"].append(log_term(W.log0(3, 3, 3), square(v["v"]), q))
        parts["I_sigma_3"].append(log_term(W.log0(1, 2, 1), (v["v_n"], v["v"]), q, -1.0))
        parts["I_sigma_4"].append(log_term(W.log0(2, 1, 1), (v["phi_t"], v["v"], v["v"]), q))
        parts["I_sigma_5"].append(log_term(W.log0(1, 1, 1), square(v["v_n"]), q))
        parts["I_sigma_6"].append(log_term(W.log0(1, 1, 1), square(v["v_x1"]), q, -1.0))
        parts["I_sigma_7"].append(log_term(W.log0(1, 0, 1, mu_pow=1), (v["v_n"], psi_p, v["v_x1"]), q))
    return {name: _log_add(pairs) for name, pairs in parts.items()}


def _log_add(pairs) -> tuple[float, float]:
    finite = [(la, s) for la, s in pairs if np.isfinite(la) and s != 0]
    if not finite:
        return -math.inf, 0.0
    value, sign = logsumexp([la for la, _ in finite], b=[s for _, s in finite], return_sign=True)
    return (float(value), float(sign)) if sign != 0 and np.isfinite(value) else (-math.inf, 0.0)


def sigma_term_agreement(wf: WeightFamily, fields: FluidFields) -> dict:
    """Relative difference per I_Sigma term between the closed-form and product-rule evaluations."""
    g_min = float(np.min(np.exp(wf.log_g(fields.times))))
    ref = (g_min, float(np.max(wf.exponent(fields.grid.torus.nodes))))  # boundary terms on their own scale
    a, b = sigma_terms(wf, fields, "closed-form", ref), sigma_terms(wf, fields, "product-rule", ref)
    out = {}
    for name in SIGMA_TERMS:
        (la, sa), (lb, sb) = a[name], b[name]
        if not np.isfinite(la) and not np.isfinite(lb):
            out[name] = 0.0
        elif not (np.isfinite(la) and np.isfinite(lb)) or sa != sb:
            out[name] = math.inf if sa != sb or not np.isfinite(la) else 1.0
        else:
            out[name] = abs(math.expm1(lb - la))
    return out


def _heat_volume_terms(W: _FluidWeights, F: FluidFields) -> dict:
    q = F.quad
    return {
        "u_t": log_term(W.log(-1, 0, -1), square(F.u_t), q),
        "lap_u": log_term(W.log(-1, 0, -1), square(F.lap), q),
        "grad_u_x1": log_term(W.log(1, 2, 1), square(F.u_x1), q),
        "grad_u_x2": log_term(W.log(1, 2, 1), square(F.u_x2), q),
        "u": log_term(W.log(3, 4, 3), square(F.u), q),
    }


def weight_peak(wf: WeightFamily, fields: FluidFields, regions: ObservationRegions) -> dict:
    """Node where e^{2 s phi} peaks and the gap (in log units) to the nearest other node.

    At admissible parameters the gap is astronomically large, so every weighted
    integral is carried by this single node.
    """
    W = _FluidWeights(wf, fields)
    flat = W.two_s_phi.ravel()
    idx = int(np.argmax(flat))
    i, j, m = np.unravel_index(idx, W.two_s_phi.shape)
    x1, x2 = fields.grid.torus.nodes[j], fields.grid.vertical_nodes[m]
    others = np.delete(flat, idx)
    return {"t": float(fields.times[i]), "x1": float(x1), "x2": float(x2),
            "in_omega": bool(regions.omega is not None and regions.omega.contains(x1, x2)),
            "log_gap_to_next_node": float(-np.max(others)) if others.size else math.inf}


def heat_functional(fields: FluidFields, wf: WeightFamily, regions: ObservationRegions) -> SampleFunctional:
    W = _FluidWeights(wf, fields)
    q = fields.quad
    lhs = _heat_volume_terms(W, fields)
    lhs.update(sigma_terms(wf, fields, ref=W.ref))
    omega = regions.omega_mask(fields.grid)[None]
    rhs = {"residual": log_term(W.log(), square(fields.residual), q),
           "obs_omega": log_term(W.log(3, 4, 3), square(fields.u), q * omega)}
    return assemble(lhs, rhs)


def _as_fluid_fields(sample, grid: RectGrid, n_t: int) -> FluidFields:
    if isinstance(sample, FluidFields):
        return sample
    if isinstance(sample, HeatSample):
        return fluid_fields_from_sample(sample, grid, n_t)
    if isinstance(sample, Trajectory):
        return fluid_fields_from_trajectory(sample)
    raise ValueError(f"unsupported heat sample type {type(sample).__name__}")


def heat_inequality_check(u_samples, params: CarlemanParams, regions: ObservationRegions | None = None,
                          grid: RectGrid | None = None, n_t: int = 64) -> FunctionalReport:
    """Heat estimate with the full boundary functional; ``extra`` holds the two-path I_Sigma agreement."""
    regions = regions or ObservationRegions.default()
    grid = grid or RectGrid.uniform(64, 33)
    wf = weight_family(params, regions, grid)
    samples, agreement = [], []
    for s in u_samples:
        fields = _as_fluid_fields(s, grid, n_t)
        wall = np.max(np.abs(fields.u[..., 0]), initial=0.0)
        scale = max(np.max(np.abs(fields.u), initial=0.0), 1e-300)
        if wall > 1e-12 * scale:
            raise ValueError(f"heat sample does not vanish on the wall (max |u| = {wall:.3e})")
        samples.append(heat_functional(fields, wf, regions))
        agreement.append(sigma_term_agreement(wf, fields))
    worst = {name: max((a[name] for a in agreement), default=0.0) for name in SIGMA_TERMS}
    return FunctionalReport("heat", params.as_dict(), samples, {"sigma_agreement": worst})


# ---------------------------------------------------------------- coupled estimate

def _check_coupled_admissible(params: CarlemanParams) -> None:
    if not params.admissible:
        raise InadmissibleError(f"parameters violate {params.violated()}", {"violated": params.violated()})


def coupled_functional(traj: Trajectory, wf: WeightFamily, regions: ObservationRegions,
                       include_J: bool = True) -> SampleFunctional:
    p = wf.params
    alpha = p.alpha
    fluid = fluid_fields_from_trajectory(traj)
    beam = beam_fields_from_trajectory(traj)
    W = _FluidWeights(wf, fluid)
    B = _BeamWeights(wf, beam.times, beam.nodes, ref=W.ref)  # one common scale for H and B
    q, qb = fluid.quad, fluid.quad_boundary
    d = beam.derivs
    lhs = {f"H_{k}": v for k, v in _heat_volume_terms(W, fluid).items()}
    lhs["H_boundary_u"] = _log_add([log_term(W.log0(3, 3, 3), square(fluid.boundary(side)["u"]), qb, 2.0)
                                    for side in (0, -1)])
    lhs["H_boundary_u_n"] = _log_add([log_term(W.log0(1, 1, 1), square(fluid.boundary(side)["u_n"]), qb, 2.0)
                                      for side in (0, -1)])
    frac = alpha ** 2 / (1 + alpha ** 2)
    qbeam = beam.quad
    lhs.update({
        "B_eta_xxxx": log_term(B.log(-1, 0, -1), square(d[0, 4]), qbeam, frac),
        "B_eta_tt": log_term(B.log(-1, 0, -1), square(d[2, 0]), qbeam, frac),
        "B_eta_txx": log_term(B.log(-1, 0, -1), square(d[1, 2]), qbeam, alpha ** 2),
    })
    lhs.update({f"B_{k}": v for k, v in _beam_interior_terms(B, beam, alpha, damped=True).items()})
    omega = regions.omega_mask(fluid.grid)[None]
    J = regions.J.contains(beam.nodes)[None] if (include_J and regions.J is not None) \
        else np.zeros((1, beam.nodes.size), dtype=bool)
    rhs = {
        "obs_omega": log_term(W.log(3, 4, 3), square(fluid.u), q * omega),
        "obs_J": log_term(B.log(7, 8, 7), square(d[0, 0]), qbeam * J, alpha ** -8 + alpha ** 4),
        "heat_residual": log_term(W.log(), square(fluid.residual), q),
        "beam_residual": log_term(B.log(), square(beam.adjoint_residual(alpha)), qbeam),
    }
    return assemble(lhs, rhs)


def coupled_inequality_check(adjoint_trajectories, params: CarlemanParams,
                             regions: ObservationRegions | None = None, include_J: bool = True) \
        -> FunctionalReport:
    """H + B_alpha against both observations and both residuals; ``include_J=False`` is the ablation."""
    _check_coupled_admissible(params)
    regions = regions or ObservationRegions.default()
    trajs = list(adjoint_trajectories)
    if not trajs:
        return FunctionalReport("coupled", params.as_dict(), [], {"include_J": include_J})
    grid = trajs[0].grid
    wf = weight_family(params, regions, grid)
    samples = [coupled_functional(t, wf, regions, include_J) for t in trajs]
    needle = weight_peak(wf, fluid_fields_from_trajectory(trajs[0]), regions)
    return FunctionalReport("coupled", params.as_dict(), samples, {"include_J": include_J, "needle": needle})


# ---------------------------------------------------------------- d_t eta observation inequality

def _flat_exponents(wf: WeightFamily, t) -> dict:
    """2 s phi_1, 4 s phi_2 - 2 s phi_1 and 2 s phi_2 relative to their common maximum.

    Each is s g(t) (-2 e^(10 lambda Psi) + delta) with delta in {2 e^(8 lambda Psi),
    4 e^(9 lambda Psi) - 2 e^(8 lambda Psi), 2 e^(9 lambda Psi)}; the shared part is
    differenced in g only and the deltas are compared directly.
    """
    p = wf.params
    g = np.exp(wf.log_g(t))
    g_min = float(np.min(g))
    lp = wf.lam_psi
    deltas = {"lhs": 2 * math.exp(8 * lp), "omega": 4 * math.exp(9 * lp) - 2 * math.exp(8 * lp),
              "J": 2 * math.exp(9 * lp)}
    top = max(deltas.values())
    common = -2 * math.exp(10 * lp) * (g - g_min)
    return {key: p.s * (common + (g - g_min) * d + g_min * (d - top)) for key, d in deltas.items()}


def dteta_functional(traj: Trajectory, wf: WeightFamily, regions: ObservationRegions) -> SampleFunctional:
    p = wf.params
    alpha = p.alpha
    t = traj.times[1:-1]
    grid = traj.grid
    dt = traj.time_grid.step
    dx = grid.torus.spacing
    w, zeta, vel = traj.w[1:-1], traj.zeta[1:-1], traj.zeta_t[1:-1]
    fluid_sq = np.sum(w ** 2 * grid.vertical_weights, axis=(-2, -1)) * dx
    h2_sq = np.sum(zeta ** 2 + fourier_derivative(zeta, 2, axis=-1) ** 2, axis=-1) * dx
    vel_sq = np.sum(vel ** 2, axis=-1) * dx
    ls, ll = math.log(p.s), math.log(p.lam)
    lx1, lx2 = wf.flat_log_xi(t, 8), wf.flat_log_xi(t, 9)
    exps = _flat_exponents(wf, t)
    left = exps["lhs"] + 3 * ls + 2 * ll + 3 * lx1
    qt = np.full(t.size, dt)
    lhs = {"u": log_term(left, (fluid_sq,), qt), "eta_H2": log_term(left, (h2_sq,), qt),
           "eta_t": log_term(left, (vel_sq,), qt)}
    omega = regions.omega_mask(grid)
    obs_u = np.sum(w ** 2 * omega * grid.vertical_weights, axis=(-2, -1)) * dx
    J = regions.J_mask(grid.torus)
    obs_v = np.sum(vel ** 2 * J, axis=-1) * dx
    rhs = {"obs_omega": log_term(exps["omega"] + 11 * ls + 4 * ll + 11 * lx2, (obs_u,), qt,
                                 alpha ** -4 + alpha ** 16),
           "obs_J": log_term(exps["J"] + 7 * ls + 8 * ll + 7 * lx2, (obs_v,), qt, alpha ** -8 + alpha ** 10)}
    return assemble(lhs, rhs)


def check_dteta_inequality(trajectories, params: CarlemanParams, regions: ObservationRegions | None = None) \
        -> FunctionalReport:
    if not params.alpha > 0:
        raise InadmissibleError("the d_t eta observation inequality needs alpha > 0", {"alpha": params.alpha})
    regions = regions or ObservationRegions.default()
    trajs = list(trajectories)
    if not trajs:
        return FunctionalReport("dteta", params.as_dict(), [])
    wf = weight_family(params, regions, trajs[0].grid)
    return FunctionalReport("dteta", params.as_dict(), [dteta_functional(t, wf, regions) for t in trajs])


# ---------------------------------------------------------------- sample sets

def random_adjoint_trajectories(rng: np.random.Generator, count: int, alpha: float, grid: RectGrid | None = None,
                                T: float = 1.0, n_steps: int = 64, scheme: str = "implicit-euler",
                                n_modes: int = 8) -> list[Trajectory]:
    """Adjoint trajectories from random smooth trace-compatible data."""
    grid = grid or RectGrid.uniform(64, 33)
    tg = TimeGrid.uniform(T, n_steps)
    out = []
    for _ in range(count):
        V0: CoupledState = random_state(grid, rng, decay=2.0, n_modes=n_modes, vertical_modes=6)
        out.append(solve_adjoint(V0, tg, alpha, scheme))
    return out
