"""Conjugated decomposition of the damped beam operator.

With P = d_t^2 + d_x^4 - alpha d_t d_x^2, f_eta = P eta and z = e^{s phi0} eta,
the conjugated operator e^{s phi0} P(e^{-s phi0} z) splits as
M11 z + M12 z + M21 z + M22 z + N z.  Each piece is a polynomial in the
derivatives of s phi0 and of z, so it carries the factor e^{s phi0}; we
evaluate every piece divided by that factor ("conjugated coordinates"),
which keeps the computation finite even when e^{s phi0} underflows.

At parameters where the polynomial terms reach 1e800 the cancellation down
to f_eta cannot be resolved in double precision; ``precision="mp"``
switches to gmpy2 multiprecision with enough digits for the cancellation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from ..weights import CarlemanParams, WeightFamily
from .jets import Jet, bell_derivatives, separable, to_object
from .samples import BeamSample, interior_times, torus_nodes

PIECES = ("M11", "M12", "M21", "M22", "N")
Z_ORDER = (2, 4)          # z derivatives needed by the decomposition
PHI_ORDER_IBP = (3, 7)    # weight derivatives needed by the reduced IBP forms
GUARD_DIGITS = 40


# ---------------------------------------------------------------- weight jets

def _numerator_pieces(wf: WeightFamily, x, xb: int):
    """log of e^{8 lambda Psi + mu psi_I} and the Bell factors of e^{mu psi_I}."""
    p = wf.params
    h = [None] + [p.mu * wf.spatial.psi_I_at(x, j) for j in range(1, xb + 1)]
    bell = bell_derivatives(h) if xb else [np.ones_like(np.asarray(x, dtype=float))]
    log_top = p.mu * wf.spatial.psi_I_at(x) + 8 * wf.lam_psi
    return log_top, bell


def phi0_jet(wf: WeightFamily, t, x, ta: int, xb: int) -> Jet:
    """Jet of the boundary weight phi0(t, x1) = g(t) (e^{mu psi_I + 8 lambda Psi} - e^{10 lambda Psi})."""
    g = wf.g_derivatives(t, max(ta, 1))[:ta + 1]
    log_top, bell = _numerator_pieces(wf, x, xb)
    space = [wf.numerator(x)] + [np.exp(log_top) * bell[b] for b in range(1, xb + 1)]
    return separable(g, space)


def phi0_jet_mp(wf: WeightFamily, t, x, ta: int, xb: int, gmpy2) -> Jet:
    mpfr = gmpy2.mpfr
    g = wf.g_derivatives(t, max(ta, 1))[:ta + 1]
    log_top, bell = _numerator_pieces(wf, x, xb)
    lam_psi = mpfr(float(wf.lam_psi))
    top = gmpy2.exp(10 * lam_psi)
    mu_psi = to_object(wf.params.mu * wf.spatial.psi_I_at(x), mpfr)
    numerator = np.array([top * gmpy2.expm1(v - 2 * lam_psi) for v in mu_psi], dtype=object)
    lead = np.array([gmpy2.exp(mpfr(float(v))) for v in log_top], dtype=object)
    space = [numerator] + [lead * to_object(bell[b], mpfr) for b in range(1, xb + 1)]
    gt = [to_object(row, mpfr) for row in g]
    return Jet([[np.multiply.outer(p, q) for q in space] for p in gt])


def log10_jet_scale(wf: WeightFamily, t, x, ta: int, xb: int) -> float:
    """log10 of the largest |d_t^a d_x^b (s phi0)| over the grid, computed without overflow."""
    p = wf.params
    if p.s == 0:  # no weight, nothing to cancel
        return -math.inf
    g = wf.g_derivatives(t, max(ta, 1))[:ta + 1]
    log_top, bell = _numerator_pieces(wf, x, xb)
    log_num = 10 * wf.lam_psi + np.log(-np.expm1(p.mu * wf.spatial.psi_I_at(x) - 2 * wf.lam_psi))
    space_logs = [np.max(log_num)] + [np.max(log_top + np.log(np.abs(bell[b]) + 1e-300)) for b in range(1, xb + 1)]
    time_logs = [np.max(np.log(np.abs(row) + 1e-300)) for row in g]
    best = max(tl + sl for tl in time_logs for sl in space_logs) + math.log(p.s)
    return best / math.log(10)


# ---------------------------------------------------------------- pieces

def conjugated_pieces(P, Z, s, alpha, beta) -> dict:
    """M11..N applied to z, given derivative accessors P(a, b) of phi0 and Z(a, b) of z.

    The formulas are homogeneous: with Z the conjugated jet they return the
    pieces divided by e^{s phi0}.
    """
    Px, Pxx, Pxxx, Pxxxx = P(0, 1), P(0, 2), P(0, 3), P(0, 4)
    Pt, Ptt, Ptx, Ptxx = P(1, 0), P(2, 0), P(1, 1), P(1, 2)
    z, zx, zxx, zxxx, zxxxx = Z(0, 0), Z(0, 1), Z(0, 2), Z(0, 3), Z(0, 4)
    zt, ztx, ztxx, ztt = Z(1, 0), Z(1, 1), Z(1, 2), Z(2, 0)
    M11 = s ** 4 * Px ** 4 * z + 6 * s ** 2 * Px ** 2 * zxx + zxxxx + 2 * s * alpha * Px * ztx + ztt
    M12 = s ** 2 * Pt ** 2 * z + s * alpha * Pt * zxx + s ** 3 * alpha * Px ** 2 * Pt * z
    M21 = (-4 * s ** 3 * Px ** 3 * zx - 4 * s * Px * zxxx - alpha * ztxx - s ** 2 * alpha * Px ** 2 * zt
           - 6 * (1 + beta) * s ** 3 * Px ** 2 * Pxx * z)
    M22 = -2 * s * Pt * zt - 2 * s ** 2 * alpha * Pt * Px * zx
    N = (alpha * (s * Pxx * zt + 2 * s * Ptx * zx + s * Ptxx * z - s ** 2 * Pxx * Pt * z
                  - 2 * s ** 2 * Ptx * Px * z)
         - s * Ptt * z - 6 * s * Pxx * zxx - 4 * s * Pxxx * zx + 12 * s ** 2 * Pxx * Px * zx
         - s * Pxxxx * z + 4 * s ** 2 * Pxxx * Px * z + 3 * s ** 2 * Pxx ** 2 * z
         + 6 * beta * s ** 3 * Pxx * Px ** 2 * z)
    return {"M11": M11, "M12": M12, "M21": M21, "M22": M22, "N": N}


def beam_residual_operator(E, alpha):
    """f = d_t^2 + d_x^4 - alpha d_t d_x^2 applied to a jet accessor E(a, b)."""
    return E(2, 0) + E(0, 4) - alpha * E(1, 2)


# ---------------------------------------------------------------- decomposition record

@dataclass
class ConjugateDecomposition:
    sample: BeamSample
    params: CarlemanParams
    beta: float
    t: np.ndarray
    x: np.ndarray
    cell: float
    log_weight: np.ndarray         # s phi0 on the grid
    phi: Jet                       # phi0 jet (double)
    eta: Jet
    z_conj: Jet                    # e^{-s phi0} d_t^a d_x^b z
    pieces_conj: dict
    f_eta: np.ndarray
    residual: float                # |sum of pieces - f_eta| / |f_eta| in conjugated coordinates
    residual_weighted: float       # same with the weight e^{2 s phi0} in both norms
    precision_digits: int | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def alpha(self) -> float:
        return self.params.alpha

    @property
    def s(self) -> float:
        return self.params.s

    @property
    def saturated(self) -> bool:
        return bool(np.max(self.log_weight) < -700.0)

    def z(self, a: int = 0, b: int = 0) -> np.ndarray:
        """d_t^a d_x^b z in physical coordinates (double)."""
        return np.exp(self.log_weight) * _as_float(self.z_conj[a, b])

    def P(self, a: int = 0, b: int = 0) -> np.ndarray:
        return self.phi[a, b]

    def piece(self, name: str) -> np.ndarray:
        if name not in PIECES:
            raise ValueError(f"unknown piece {name!r}; expected one of {PIECES}")
        return np.exp(self.log_weight) * _as_float(self.pieces_conj[name])

    @property
    def M1z(self):
        return self.piece("M11") + self.piece("M12")

    @property
    def M2z(self):
        return self.piece("M21") + self.piece("M22")

    @property
    def Nz(self):
        return self.piece("N")

    def integrate(self, values) -> float:
        return float(np.sum(values) * self.cell)


def _as_float(values) -> np.ndarray:
    arr = np.asarray(values)
    if arr.dtype == object:
        return np.vectorize(float, otypes=[float])(arr)
    return arr.astype(float)


def _weighted_ratio(relative, numerator, denominator, cell) -> float:
    """sqrt( sum e^{2F} num^2 / sum e^{2F} den^2 ) evaluated in the log domain.

    ``relative`` is F - max F computed without cancellation: |F| can reach
    1e255, where adding log|num| to F directly would be lost to rounding.
    """

    def log_norm(values):
        mags = np.abs(values)
        ok = mags > 0
        if not np.any(ok):
            return -np.inf
        return logsumexp(2 * relative[ok] + 2 * np.log(mags[ok])) + math.log(cell)
    top, bottom = log_norm(numerator), log_norm(denominator)
    if bottom == -np.inf:
        return 0.0 if top == -np.inf else np.inf
    return float(math.exp(0.5 * (top - bottom))) if top > -np.inf else 0.0


def _log_abs(values) -> np.ndarray:
    """log|v| for float or mpfr object arrays (-inf at zero)."""
    arr = np.asarray(values)
    if arr.dtype != object:
        with np.errstate(divide="ignore"):
            return np.log(np.abs(arr))
    import gmpy2
    return np.vectorize(lambda v: float(gmpy2.log(abs(v))) if v != 0 else -np.inf, otypes=[float])(arr)


def conjugate_decompose(eta: BeamSample, params: CarlemanParams, wf: WeightFamily, beta: float,
                        n_t: int = 64, n_x: int = 64, precision: str = "double",
                        phi_order: tuple[int, int] = PHI_ORDER_IBP) -> ConjugateDecomposition:
    """Evaluate z = e^{s phi0} eta and the pieces M11, M12, M21, M22, N on a tensor grid.

    Time nodes are the n_t - 1 interior points of the uniform partition of
    [0, T]; x nodes are n_x uniform points of the torus.  Derivatives are
    exact (analytic sample, analytic weights, Leibniz/Bell recursions).
    precision is "double", "mp" or "auto" (mp when double cannot resolve the
    cancellation).
    """
    if precision not in ("double", "mp", "auto"):
        raise ValueError("precision must be 'double', 'mp' or 'auto'")
    if abs(eta.T - params.T) > 1e-14 * params.T:
        raise ValueError("sample horizon differs from params.T")
    t, x = interior_times(params.T, n_t), torus_nodes(n_x)
    cell = (params.T / n_t) * (2 * math.pi / n_x)
    s, alpha = params.s, params.alpha
    ta, xb = Z_ORDER
    scale = log10_jet_scale(wf, t, x, ta, xb)
    cancellation = 4 * max(scale, 0.0)
    if precision == "auto":
        precision = "mp" if cancellation > 6 else "double"

    phi = phi0_jet(wf, t, x, max(ta, phi_order[0]), max(xb, phi_order[1]))
    eta_jet = eta.jet(t, x, ta, xb)
    f_eta = beam_residual_operator(lambda a, b: eta_jet[a, b], alpha)
    log_weight = s * phi.value
    digits = None
    if precision == "double":
        eps = (phi.truncate(ta, xb) * s).exp_relative()
        z_conj = eps * eta_jet
        pieces = conjugated_pieces(lambda a, b: phi[a, b], lambda a, b: z_conj[a, b], s, alpha, beta)
        total = sum(pieces.values())
        resid = total - f_eta
    else:
        import gmpy2
        digits = int(math.ceil(cancellation)) + GUARD_DIGITS
        with gmpy2.context(gmpy2.get_context(), precision=int(digits * 3.33) + 16):
            mpfr = gmpy2.mpfr
            phi_mp = phi0_jet_mp(wf, t, x, ta, xb, gmpy2)
            eta_mp = eta_jet.map(lambda v: to_object(v, mpfr))
            eps = (phi_mp * mpfr(float(s))).exp_relative()
            z_mp = eps * eta_mp
            pieces_mp = conjugated_pieces(lambda a, b: phi_mp[a, b], lambda a, b: z_mp[a, b],
                                          mpfr(float(s)), mpfr(float(alpha)), mpfr(float(beta)))
            f_mp = to_object(f_eta, mpfr)
            total = sum(pieces_mp.values())
            resid_mp = total - f_mp
            resid = _as_float(resid_mp)
            pieces = pieces_mp
            z_conj = z_mp
    resid = np.asarray(resid, dtype=float) if np.asarray(resid).dtype != object else _as_float(resid)
    f_norm = math.sqrt(float(np.sum(f_eta ** 2)))
    r_norm = math.sqrt(float(np.sum(resid ** 2)))
    residual = r_norm / f_norm if f_norm > 0 else (0.0 if r_norm == 0 else math.inf)
    weighted = _weighted_ratio(0.5 * wf.relative_exponent(t, wf.exponent(x)), resid, f_eta, cell)
    diag = {"log10_piece_scale": cancellation, "precision": precision,
            "max_abs_residual": float(np.max(np.abs(resid))) if resid.size else 0.0}
    return ConjugateDecomposition(eta, params, beta, t, x, cell, log_weight, phi, eta_jet, z_conj, pieces,
                                  f_eta, residual, weighted, digits, diag)
