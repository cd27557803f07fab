"""Mixed-derivative jets on a space-time tensor grid.

A jet of f holds every partial derivative d_t^a d_x^b f with a <= ta and
b <= xb, sampled on a common (nt, nx) grid.  Products follow the Leibniz
rule and exponentials the recursion d(e^F) = dF e^F, so no derivative is
ever approximated by differencing.  The arithmetic is dtype-agnostic: the
same code runs on float64 arrays and on object arrays of gmpy2.mpfr.
"""
from __future__ import annotations

from math import comb

import numpy as np


class Jet:
    def __init__(self, data):
        # data[a][b] = d_t^a d_x^b f
        self.data = [list(row) for row in data]
        width = {len(row) for row in self.data}
        if len(width) != 1:
            raise ValueError("jet rows must have equal length")

    @property
    def ta(self) -> int:
        return len(self.data) - 1

    @property
    def xb(self) -> int:
        return len(self.data[0]) - 1

    def __getitem__(self, index):
        a, b = index
        if a > self.ta or b > self.xb:
            raise ValueError(f"derivative ({a},{b}) beyond jet order ({self.ta},{self.xb})")
        return self.data[a][b]

    @property
    def value(self):
        return self.data[0][0]

    def d(self, a: int = 0, b: int = 0) -> "Jet":
        """Jet of d_t^a d_x^b f (lower order)."""
        if a > self.ta or b > self.xb:
            raise ValueError(f"cannot differentiate ({a},{b}) times a jet of order ({self.ta},{self.xb})")
        return Jet([row[b:] for row in self.data[a:]])

    def truncate(self, ta: int, xb: int) -> "Jet":
        return Jet([row[:xb + 1] for row in self.data[:ta + 1]])

    def _binary(self, other, op):
        if isinstance(other, Jet):
            ta, xb = min(self.ta, other.ta), min(self.xb, other.xb)
            return Jet([[op(self.data[a][b], other.data[a][b]) for b in range(xb + 1)] for a in range(ta + 1)])
        out = [[op(v, 0 * v) for v in row] for row in self.data]  # derivatives of a constant vanish
        out[0][0] = op(self.data[0][0], other)
        return Jet(out)

    def __add__(self, other):
        return self._binary(other, lambda u, v: u + v)

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, lambda u, v: u - v)

    def __neg__(self):
        return Jet([[-v for v in row] for row in self.data])

    def scale(self, c) -> "Jet":
        return Jet([[c * v for v in row] for row in self.data])

    def __mul__(self, other):
        if not isinstance(other, Jet):
            return self.scale(other)
        ta, xb = min(self.ta, other.ta), min(self.xb, other.xb)
        out = []
        for a in range(ta + 1):
            row = []
            for b in range(xb + 1):
                acc = None
                for i in range(a + 1):
                    for j in range(b + 1):
                        term = (comb(a, i) * comb(b, j)) * (self.data[i][j] * other.data[a - i][b - j])
                        acc = term if acc is None else acc + term
                row.append(acc)
            out.append(row)
        return Jet(out)

    __rmul__ = __mul__

    def __pow__(self, n: int) -> "Jet":
        if n < 1:
            raise ValueError("only positive integer powers")
        out = self
        for _ in range(n - 1):
            out = out * self
        return out

    def exp_relative(self) -> "Jet":
        """Jet of e^{-F} d(e^F): derivatives of e^F divided by e^F (complete Bell polynomials)."""
        ta, xb = self.ta, self.xb
        one = self.data[0][0] * 0 + 1
        E = [[None] * (xb + 1) for _ in range(ta + 1)]
        E[0][0] = one
        for a in range(ta + 1):
            for b in range(xb + 1):
                if a == 0 and b == 0:
                    continue
                acc = None
                if b > 0:  # d_x E = F_x E, differentiated (a, b-1) times
                    for i in range(a + 1):
                        for j in range(b):
                            term = (comb(a, i) * comb(b - 1, j)) * (self.data[i][j + 1] * E[a - i][b - 1 - j])
                            acc = term if acc is None else acc + term
                else:  # d_t E = F_t E, differentiated (a-1) times
                    for i in range(a):
                        term = comb(a - 1, i) * (self.data[i + 1][0] * E[a - 1 - i][0])
                        acc = term if acc is None else acc + term
                E[a][b] = acc
        return Jet(E)

    def map(self, func) -> "Jet":
        return Jet([[func(v) for v in row] for row in self.data])


def separable(time_derivs, space_derivs, factor=1.0) -> Jet:
    """Jet of factor * p(t) q(x) from the derivative stacks of p (ta+1, nt) and q (xb+1, nx)."""
    return Jet([[factor * np.multiply.outer(p, q) for q in space_derivs] for p in time_derivs])


def bell_derivatives(log_derivs):
    """Derivatives of e^h divided by e^h, from h', h'', ... (1D complete Bell recursion).

    ``log_derivs[j]`` holds h^(j) for j >= 1 (entry 0 is ignored).  Returns
    B_0 .. B_n with B_0 = 1.
    """
    n = len(log_derivs) - 1
    B = [np.ones_like(np.asarray(log_derivs[1], dtype=float))]
    for m in range(n):
        acc = 0.0
        for k in range(m + 1):
            acc = acc + comb(m, k) * log_derivs[k + 1] * B[m - k]
        B.append(acc)
    return B


def to_object(array, converter):
    """Convert a float array to an object array of ``converter`` values (exact for mpfr)."""
    flat = [converter(float(v)) for v in np.asarray(array, dtype=float).ravel()]
    out = np.empty(len(flat), dtype=object)
    out[:] = flat
    return out.reshape(np.shape(array))
