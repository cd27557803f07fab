"""Cross products I_ij of the conjugated beam operator and their integrated-by-parts forms.

I_ij = iint (term i of M1 z)(term j of M2 z), with M1 = M11 + M12 (terms
1..5 from M11, 6..8 from M12) and M2 = M21 + M22 (terms 1..5 from M21, 6..7
from M22).  ``raw`` is the direct quadrature of that product; ``reduced`` is
the quadrature of the closed form obtained after integrating by parts,
split as main part plus remainder where the derivation separates them.
Samples are periodic in x1 and flat at t in {0, T}, so no boundary term
survives.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decomposition import ConjugateDecomposition

FLOOR_REL = 1e-3  # rel_err floor as a fraction of iint |term_i| |term_j|


class _Ctx:
    """Shorthand accessors for one decomposition."""

    def __init__(self, d: ConjugateDecomposition):
        self.d = d
        self.s, self.a, self.b = d.s, d.alpha, d.beta
        self.phi = d.phi
        self._z = {}

    def z(self, a=0, b=0):
        key = (a, b)
        if key not in self._z:
            self._z[key] = self.d.z(a, b)
        return self._z[key]

    def P(self, a=0, b=0):
        """Jet of d_t^a d_x^b phi0."""
        return self.phi.d(a, b)

    def Q(self, values) -> float:
        return self.d.integrate(values)


# ---------------------------------------------------------------- terms of M1 and M2

def _m1_terms(c: _Ctx):
    s, a = c.s, c.a
    px, pt = c.P(0, 1).value, c.P(1, 0).value
    return {
        1: lambda: s ** 4 * px ** 4 * c.z(),
        2: lambda: 6 * s ** 2 * px ** 2 * c.z(0, 2),
        3: lambda: c.z(0, 4),
        4: lambda: 2 * s * a * px * c.z(1, 1),
        5: lambda: c.z(2, 0),
        6: lambda: s ** 2 * pt ** 2 * c.z(),
        7: lambda: s * a * pt * c.z(0, 2),
        8: lambda: s ** 3 * a * px ** 2 * pt * c.z(),
    }


def _m2_terms(c: _Ctx):
    s, a, b = c.s, c.a, c.b
    px, pxx, pt = c.P(0, 1).value, c.P(0, 2).value, c.P(1, 0).value
    return {
        1: lambda: -4 * s ** 3 * px ** 3 * c.z(0, 1),
        2: lambda: -4 * s * px * c.z(0, 3),
        3: lambda: -a * c.z(1, 2),
        4: lambda: -s ** 2 * a * px ** 2 * c.z(1, 0),
        5: lambda: -6 * (1 + b) * s ** 3 * px ** 2 * pxx * c.z(),
        6: lambda: -2 * s * pt * c.z(1, 0),
        7: lambda: -2 * s ** 2 * a * pt * px * c.z(0, 1),
    }


# ---------------------------------------------------------------- reduced forms
# Each entry returns (main, remainder); reduced = main + remainder.

def _reduced_forms():
    R = {}

    def reg(i, j):
        def deco(fn):
            R[(i, j)] = fn
            return fn
        return deco

    # weight monomials as jets
    def X(c):
        return c.P(0, 1)

    def XX(c):
        return c.P(0, 2)

    def Tt(c):
        return c.P(1, 0)

    z = lambda c, a=0, b=0: c.z(a, b)  # noqa: E731
    sq = lambda v: v * v  # noqa: E731

    # ---- products M11 x M21
    @reg(1, 1)
    def _(c):
        return 14 * c.s ** 7 * c.Q((X(c) ** 6 * XX(c)).value * sq(z(c))), 0.0

    @reg(1, 2)
    def _(c):
        w = X(c) ** 4 * XX(c)
        return (-30 * c.s ** 5 * c.Q(w.value * sq(z(c, 0, 1))),
                10 * c.s ** 5 * c.Q(w[0, 2] * sq(z(c))))

    @reg(1, 3)
    def _(c):
        w = X(c) ** 3 * XX(c)
        main = -4 * c.s ** 4 * c.a * c.Q(w.value * z(c, 0, 1) * z(c, 1, 0))
        rem = (2 * c.s ** 4 * c.a * c.Q(w[1, 1] * sq(z(c)))
               - 2 * c.s ** 4 * c.a * c.Q(c.P(1, 1).value * X(c).value ** 3 * sq(z(c, 0, 1))))
        return main, rem

    @reg(1, 4)
    def _(c):
        return 0.0, 3 * c.s ** 6 * c.a * c.Q(X(c).value ** 5 * c.P(1, 1).value * sq(z(c)))

    @reg(1, 5)
    def _(c):
        return -6 * (1 + c.b) * c.s ** 7 * c.Q((X(c) ** 6 * XX(c)).value * sq(z(c))), 0.0

    @reg(2, 1)
    def _(c):
        return 60 * c.s ** 5 * c.Q((X(c) ** 4 * XX(c)).value * sq(z(c, 0, 1))), 0.0

    @reg(2, 2)
    def _(c):
        return 36 * c.s ** 3 * c.Q((X(c) ** 2 * XX(c)).value * sq(z(c, 0, 2))), 0.0

    @reg(2, 3)
    def _(c):
        return 0.0, 6 * c.s ** 2 * c.a * c.Q(c.P(1, 1).value * X(c).value * sq(z(c, 0, 2)))

    @reg(2, 4)
    def _(c):
        main = 24 * c.s ** 4 * c.a * c.Q((X(c) ** 3 * XX(c)).value * z(c, 1, 0) * z(c, 0, 1))
        rem = -12 * c.s ** 4 * c.a * c.Q(X(c).value ** 3 * c.P(1, 1).value * sq(z(c, 0, 1)))
        return main, rem

    @reg(2, 5)
    def _(c):
        w = X(c) ** 4 * XX(c)
        return (36 * (1 + c.b) * c.s ** 5 * c.Q(w.value * sq(z(c, 0, 1))),
                -18 * (1 + c.b) * c.s ** 5 * c.Q(w[0, 2] * sq(z(c))))

    @reg(3, 1)
    def _(c):
        w = X(c) ** 2 * XX(c)
        return (-18 * c.s ** 3 * c.Q(w.value * sq(z(c, 0, 2))),
                6 * c.s ** 3 * c.Q(w[0, 2] * sq(z(c, 0, 1))))

    @reg(3, 2)
    def _(c):
        return 2 * c.s * c.Q(XX(c).value * sq(z(c, 0, 3))), 0.0

    @reg(3, 3)
    def _(c):
        return 0.0, 0.0

    @reg(3, 4)
    def _(c):
        w = X(c) * XX(c)
        main = -4 * c.s ** 2 * c.a * c.Q(w.value * z(c, 0, 2) * z(c, 1, 1))
        rem = (c.s ** 2 * c.a * c.Q(X(c).value * c.P(1, 1).value * sq(z(c, 0, 2)))
               - 2 * c.s ** 2 * c.a * c.Q(w[0, 1] * z(c, 0, 2) * z(c, 1, 0)))
        return main, rem

    @reg(3, 5)
    def _(c):
        w = X(c) ** 2 * XX(c)
        k = (1 + c.b) * c.s ** 3
        return (-6 * k * c.Q(w.value * sq(z(c, 0, 2))),
                -3 * k * c.Q(w[0, 4] * sq(z(c))) + 12 * k * c.Q(w[0, 2] * sq(z(c, 0, 1))))

    @reg(4, 1)
    def _(c):
        return 0.0, 16 * c.s ** 4 * c.a * c.Q(c.P(1, 1).value * X(c).value ** 3 * sq(z(c, 0, 1)))

    @reg(4, 2)
    def _(c):
        main = 16 * c.s ** 2 * c.a * c.Q((X(c) * XX(c)).value * z(c, 0, 2) * z(c, 1, 1))
        rem = -8 * c.s ** 2 * c.a * c.Q(X(c).value * c.P(1, 1).value * sq(z(c, 0, 2)))
        return main, rem

    @reg(4, 3)
    def _(c):
        return c.s * c.a ** 2 * c.Q(XX(c).value * sq(z(c, 1, 1))), 0.0

    @reg(4, 4)
    def _(c):
        return 3 * c.s ** 3 * c.a ** 2 * c.Q((X(c) ** 2 * XX(c)).value * sq(z(c, 1, 0))), 0.0

    @reg(4, 5)
    def _(c):
        w = X(c) ** 3 * XX(c)
        k = (1 + c.b) * c.s ** 4 * c.a
        return 12 * k * c.Q(w.value * z(c, 0, 1) * z(c, 1, 0)), -6 * k * c.Q(w[1, 1] * sq(z(c)))

    @reg(5, 1)
    def _(c):
        main = -6 * c.s ** 3 * c.Q((X(c) ** 2 * XX(c)).value * sq(z(c, 1, 0)))
        rem = 12 * c.s ** 3 * c.Q(X(c).value ** 2 * c.P(1, 1).value * z(c, 0, 1) * z(c, 1, 0))
        return main, rem

    @reg(5, 2)
    def _(c):
        main = 6 * c.s * c.Q(XX(c).value * sq(z(c, 1, 1)))
        rem = (4 * c.s * c.Q(c.P(1, 1).value * z(c, 0, 3) * z(c, 1, 0))
               - 2 * c.s * c.Q(c.P(0, 4).value * sq(z(c, 1, 0))))
        return main, rem

    @reg(5, 3)
    def _(c):
        return 0.0, 0.0

    @reg(5, 4)
    def _(c):
        return 0.0, c.s ** 2 * c.a * c.Q(X(c).value * c.P(1, 1).value * sq(z(c, 1, 0)))

    @reg(5, 5)
    def _(c):
        w = X(c) ** 2 * XX(c)
        k = (1 + c.b) * c.s ** 3
        return 6 * k * c.Q(w.value * sq(z(c, 1, 0))), -3 * k * c.Q(w[2, 0] * sq(z(c)))

    # ---- remainder products (rows 1..5 with M22, rows 6..8 with all of M2)
    @reg(1, 6)
    def _(c):
        return 0.0, c.s ** 5 * c.Q((X(c) ** 4 * Tt(c))[1, 0] * sq(z(c)))

    @reg(1, 7)
    def _(c):
        return 0.0, c.a * c.s ** 6 * c.Q((X(c) ** 5 * Tt(c))[0, 1] * sq(z(c)))

    @reg(2, 6)
    def _(c):
        w = X(c) ** 2 * Tt(c)
        return 0.0, (12 * c.s ** 3 * c.Q(w[0, 1] * z(c, 0, 1) * z(c, 1, 0))
                     - 6 * c.s ** 3 * c.Q(w[1, 0] * sq(z(c, 0, 1))))

    @reg(2, 7)
    def _(c):
        return 0.0, 6 * c.s ** 4 * c.a * c.Q((X(c) ** 3 * Tt(c))[0, 1] * sq(z(c, 0, 1)))

    @reg(3, 6)
    def _(c):
        return 0.0, (-2 * c.s * c.Q(c.P(1, 2).value * z(c, 1, 0) * z(c, 0, 2))
                     - 4 * c.s * c.Q(c.P(1, 1).value * z(c, 1, 1) * z(c, 0, 2))
                     + c.s * c.Q(c.P(2, 0).value * sq(z(c, 0, 2))))

    @reg(3, 7)
    def _(c):
        w = X(c) * Tt(c)
        return 0.0, (c.s ** 2 * c.a * c.Q(w[0, 3] * sq(z(c, 0, 1)))
                     - 3 * c.a * c.s ** 2 * c.Q(w[0, 1] * sq(z(c, 0, 2))))

    @reg(4, 6)
    def _(c):
        return 0.0, 2 * c.s ** 2 * c.a * c.Q((X(c) * Tt(c))[0, 1] * sq(z(c, 1, 0)))

    @reg(4, 7)
    def _(c):
        return 0.0, 2 * c.s ** 3 * c.a ** 2 * c.Q((X(c) ** 2 * Tt(c))[1, 0] * sq(z(c, 0, 1)))

    @reg(5, 6)
    def _(c):
        return 0.0, c.s * c.Q(c.P(2, 0).value * sq(z(c, 1, 0)))

    @reg(5, 7)
    def _(c):
        w = X(c) * Tt(c)
        return 0.0, (2 * c.s ** 2 * c.a * c.Q(w[1, 0] * z(c, 0, 1) * z(c, 1, 0))
                     - c.s ** 2 * c.a * c.Q(w[0, 1] * sq(z(c, 1, 0))))

    @reg(6, 1)
    def _(c):
        return 0.0, 2 * c.s ** 5 * c.Q((X(c) ** 3 * Tt(c) ** 2)[0, 1] * sq(z(c)))

    @reg(6, 2)
    def _(c):
        w = X(c) * Tt(c) ** 2
        return 0.0, (2 * c.s ** 3 * c.Q(w[0, 3] * sq(z(c)))
                     - 6 * c.s ** 3 * c.Q(w[0, 1] * sq(z(c, 0, 1))))

    @reg(6, 3)
    def _(c):
        w = c.P(1, 1) * Tt(c)
        return 0.0, (c.s ** 2 * c.a * c.Q(w[1, 1] * sq(z(c)))
                     - 2 * c.s ** 2 * c.a * c.Q(w.value * z(c, 1, 0) * z(c, 0, 1))
                     - c.s ** 2 * c.a * c.Q(c.P(2, 0).value * Tt(c).value * sq(z(c, 0, 1))))

    @reg(6, 4)
    def _(c):
        return 0.0, 0.5 * c.s ** 4 * c.a * c.Q((X(c) ** 2 * Tt(c) ** 2)[1, 0] * sq(z(c)))

    @reg(6, 5)
    def _(c):
        return 0.0, -6 * (1 + c.b) * c.s ** 5 * c.Q((X(c) ** 2 * XX(c) * Tt(c) ** 2).value * sq(z(c)))

    @reg(6, 6)
    def _(c):
        return 0.0, 3 * c.s ** 3 * c.Q(c.P(2, 0).value * Tt(c).value ** 2 * sq(z(c)))

    @reg(6, 7)
    def _(c):
        return 0.0, c.s ** 4 * c.a * c.Q((X(c) * Tt(c) ** 3)[0, 1] * sq(z(c)))

    @reg(7, 1)
    def _(c):
        return 0.0, 2 * c.s ** 4 * c.a * c.Q((X(c) ** 3 * Tt(c))[0, 1] * sq(z(c, 0, 1)))

    @reg(7, 2)
    def _(c):
        return 0.0, 2 * c.s ** 2 * c.a * c.Q((X(c) * Tt(c))[0, 1] * sq(z(c, 0, 2)))

    @reg(7, 3)
    def _(c):
        return 0.0, 0.5 * c.s * c.a ** 2 * c.Q(c.P(2, 0).value * sq(z(c, 0, 2)))

    @reg(7, 4)
    def _(c):
        w = X(c) ** 2 * Tt(c)
        return 0.0, (c.s ** 3 * c.a ** 2 * c.Q(w[0, 1] * z(c, 1, 0) * z(c, 0, 1))
                     - 0.5 * c.s ** 3 * c.a ** 2 * c.Q(w[1, 0] * sq(z(c, 0, 1))))

    @reg(7, 5)
    def _(c):
        w = X(c) ** 2 * XX(c) * Tt(c)
        k = (1 + c.b) * c.s ** 4 * c.a
        return 0.0, -3 * k * c.Q(w[0, 2] * sq(z(c))) + 6 * k * c.Q(w.value * sq(z(c, 0, 1)))

    @reg(7, 6)
    def _(c):
        return 0.0, (4 * c.s ** 2 * c.a * c.Q(Tt(c).value * c.P(1, 1).value * z(c, 1, 0) * z(c, 0, 1))
                     - 2 * c.s ** 2 * c.a * c.Q(Tt(c).value * c.P(2, 0).value * sq(z(c, 0, 1))))

    @reg(7, 7)
    def _(c):
        return 0.0, c.s ** 3 * c.a ** 2 * c.Q((X(c) * Tt(c) ** 2)[0, 1] * sq(z(c, 0, 1)))

    @reg(8, 1)
    def _(c):
        return 0.0, 2 * c.s ** 6 * c.a * c.Q((X(c) ** 5 * Tt(c))[0, 1] * sq(z(c)))

    @reg(8, 2)
    def _(c):
        w = X(c) ** 3 * Tt(c)
        return 0.0, (2 * c.s ** 4 * c.a * c.Q(w[0, 3] * sq(z(c)))
                     - 6 * c.s ** 4 * c.a * c.Q(w[0, 1] * sq(z(c, 0, 1))))

    @reg(8, 3)
    def _(c):
        w = X(c) ** 2 * Tt(c)
        k = c.s ** 3 * c.a ** 2
        return 0.0, (0.5 * k * c.Q(w[1, 2] * sq(z(c))) - k * c.Q(w[0, 1] * z(c, 1, 0) * z(c, 0, 1))
                     - 0.5 * k * c.Q(w[1, 0] * sq(z(c, 0, 1))))

    @reg(8, 4)
    def _(c):
        return 0.0, 0.5 * c.s ** 5 * c.a ** 2 * c.Q((X(c) ** 4 * Tt(c))[1, 0] * sq(z(c)))

    @reg(8, 5)
    def _(c):
        return 0.0, -6 * (1 + c.b) * c.s ** 6 * c.a * c.Q((X(c) ** 4 * XX(c) * Tt(c)).value * sq(z(c)))

    @reg(8, 6)
    def _(c):
        return 0.0, c.s ** 4 * c.a * c.Q((X(c) ** 2 * Tt(c) ** 2)[1, 0] * sq(z(c)))

    @reg(8, 7)
    def _(c):
        return 0.0, c.s ** 5 * c.a ** 2 * c.Q((X(c) ** 3 * Tt(c) ** 2)[0, 1] * sq(z(c)))

    return R


REDUCED = _reduced_forms()
MAIN_PAIRS = [(i, j) for i in range(1, 6) for j in range(1, 6)]
REMAINDER_PAIRS = [(i, j) for i in range(1, 9) for j in range(1, 8) if not (i <= 5 and j <= 5)]
ALL_PAIRS = MAIN_PAIRS + REMAINDER_PAIRS


@dataclass(frozen=True)
class IbpRecord:
    i: int
    j: int
    raw: float
    reduced: float
    main: float
    remainder: float
    scale: float
    rel_err: float

    def as_dict(self) -> dict:
        return {"i": self.i, "j": self.j, "raw": self.raw, "reduced": self.reduced, "main": self.main,
                "remainder": self.remainder, "scale": self.scale, "rel_err": self.rel_err}


def _relative(raw, reduced, scale) -> float:
    floor = max(abs(raw), FLOOR_REL * scale)
    if floor == 0:
        return 0.0 if reduced == 0 else float("inf")
    return abs(raw - reduced) / floor


def verify_ibp_identity(i: int, j: int, decomp: ConjugateDecomposition) -> IbpRecord:
    if (i, j) not in REDUCED:
        raise ValueError(f"unknown index pair ({i}, {j}); i in 1..8 and j in 1..7")
    if decomp.saturated:
        raise ValueError("weights underflow on this decomposition; use moderate parameters for IBP audits")
    c = _Ctx(decomp)
    ti, tj = _m1_terms(c)[i](), _m2_terms(c)[j]()
    raw = c.Q(ti * tj)
    scale = c.Q(np.abs(ti) * np.abs(tj))
    main, rem = REDUCED[(i, j)](c)
    reduced = main + rem
    return IbpRecord(i, j, raw, reduced, main, rem, scale, _relative(raw, reduced, scale))


@dataclass(frozen=True)
class CrossProductLedger:
    records: dict  # (i, j) -> IbpRecord

    @property
    def max_rel_err(self) -> float:
        return max((r.rel_err for r in self.records.values()), default=0.0)

    def failing(self, tol: float) -> list[tuple[int, int]]:
        return [key for key, r in self.records.items() if not r.rel_err <= tol]


def cross_product_ledger(decomp: ConjugateDecomposition, pairs=None) -> CrossProductLedger:
    pairs = ALL_PAIRS if pairs is None else pairs
    return CrossProductLedger({key: verify_ibp_identity(*key, decomp) for key in pairs})


# ---------------------------------------------------------------- assembled cross product

def closed_form_terms(decomp: ConjugateDecomposition) -> dict:
    """The eight weighted integrals I_1..I_8 (without their coefficients)."""
    c = _Ctx(decomp)
    s = c.s
    X, XX = c.P(0, 1), c.P(0, 2)
    z = c.z
    return {
        1: s ** 7 * c.Q((X ** 6 * XX).value * z() ** 2),
        2: s ** 5 * c.Q((X ** 4 * XX).value * z(0, 1) ** 2),
        3: s ** 3 * c.Q((X ** 2 * XX).value * z(0, 2) ** 2),
        4: s ** 3 * c.Q((X ** 2 * XX).value * z(1, 0) ** 2),
        5: s * c.Q(XX.value * z(0, 3) ** 2),
        6: s * c.Q(XX.value * z(1, 1) ** 2),
        7: s ** 4 * c.Q((X ** 3 * XX).value * z(1, 0) * z(0, 1)),
        8: s ** 2 * c.Q((X * XX).value * z(0, 2) * z(1, 1)),
    }


def closed_form_coefficients(alpha: float, beta: float) -> dict:
    return {1: 8 - 6 * beta, 2: 66 + 36 * beta, 3: 12 - 6 * beta, 4: 3 * alpha ** 2 + 6 * beta, 5: 2.0,
            6: alpha ** 2 + 6, 7: (32 + 12 * beta) * alpha, 8: 12 * alpha}


@dataclass(frozen=True)
class ClosedFormRecord:
    lhs: float
    rhs: float
    terms: dict
    R2: float
    rel_err: float
    beta: float


def cross_product_closed_form(decomp: ConjugateDecomposition) -> ClosedFormRecord:
    """iint M11 z * M21 z against the eight-term combination plus R2.

    R2 collects every remainder piece of the 25 products of the M11 and M21
    terms (the parts of the reduced forms that are not among I_1..I_8).
    """
    if decomp.saturated:
        raise ValueError("weights underflow on this decomposition; use moderate parameters")
    c = _Ctx(decomp)
    lhs = c.Q(decomp.piece("M11") * decomp.piece("M21"))
    R2 = 0.0
    for key in MAIN_PAIRS:
        main, rem = REDUCED[key](c)
        R2 += rem
    terms = closed_form_terms(decomp)
    coeff = closed_form_coefficients(decomp.alpha, decomp.beta)
    rhs = sum(coeff[k] * terms[k] for k in terms) + R2
    scale = max(abs(lhs), sum(abs(coeff[k] * terms[k]) for k in terms) + abs(R2))
    rel = abs(lhs - rhs) / max(abs(lhs), FLOOR_REL * scale) if scale > 0 else 0.0
    return ClosedFormRecord(lhs, rhs, terms, R2, rel, decomp.beta)
