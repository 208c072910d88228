"""Vectorized forward-mode automatic differentiation with dual numbers.

A :class:`Dual` carries a value array of shape ``S`` and a derivative array of
shape ``S + (ndir,)`` holding partials along ``ndir`` seed directions. All
arithmetic broadcasts over ``S``, so a whole trajectory of model evaluations
can be differentiated in one batched pass.
"""

from __future__ import annotations

import numpy as np


class Dual:
    """Value/derivative pair for first-order forward-mode differentiation."""

    __slots__ = ("val", "der")

    # make ndarray <op> Dual defer to our reflected operators instead of
    # building object arrays
    __array_ufunc__ = None

    def __init__(self, val, der):
        self.val = np.asarray(val, dtype=float)
        self.der = np.asarray(der, dtype=float)

    @property
    def ndir(self) -> int:
        return self.der.shape[-1]

    # -- helpers -------------------------------------------------------

    def _coerce(self, other):
        """Return (val, der) of `other`, promoting plain numbers to zero-derivative."""
        if isinstance(other, Dual):
            return other.val, other.der
        v = np.asarray(other, dtype=float)
        return v, np.zeros(v.shape + (self.ndir,))

    # -- arithmetic -----------------------------------------------------

    def __add__(self, other):
        ov, od = self._coerce(other)
        return Dual(self.val + ov, self.der + od)

    __radd__ = __add__

    def __sub__(self, other):
        ov, od = self._coerce(other)
        return Dual(self.val - ov, self.der - od)

    def __rsub__(self, other):
        ov, od = self._coerce(other)
        return Dual(ov - self.val, od - self.der)

    def __neg__(self):
        return Dual(-self.val, -self.der)

    def __mul__(self, other):
        ov, od = self._coerce(other)
        return Dual(self.val * ov, self.der * ov[..., None] + od * self.val[..., None])

    __rmul__ = __mul__

    def __truediv__(self, other):
        ov, od = self._coerce(other)
        q = self.val / ov
        dq = (self.der - od * q[..., None]) / ov[..., None]
        return Dual(q, dq)

    def __rtruediv__(self, other):
        ov, od = self._coerce(other)
        q = ov / self.val
        dq = (od - self.der * q[..., None]) / self.val[..., None]
        return Dual(q, dq)

    def __pow__(self, k):
        if not isinstance(k, (int, float)):
            raise TypeError("dual exponent not supported; use exp/log form")
        v = self.val ** k
        return Dual(v, (k * self.val ** (k - 1))[..., None] * self.der)

    def __rpow__(self, base):
        # base ** x = exp(x * ln(base));  needed for the 2**(x/10 - 5/2) term
        return exp(self * float(np.log(base)))

    def exp(self):
        e = np.exp(self.val)
        return Dual(e, e[..., None] * self.der)

    def __repr__(self):  # pragma: no cover
        return f"Dual(val={self.val!r})"


def exp(x):
    """exp() that works on Dual and plain numpy values alike."""
    if isinstance(x, Dual):
        return x.exp()
    return np.exp(x)


def seed(values, index, ndir, shape=()):
    """Make a Dual from `values` whose partial along direction `index` is 1.

    `values` may be a scalar or an array of shape `shape`; the derivative is
    `shape + (ndir,)` with ones in column `index`.
    """
    v = np.broadcast_to(np.asarray(values, dtype=float), shape).copy()
    d = np.zeros(shape + (ndir,))
    d[..., index] = 1.0
    return Dual(v, d)


def constant(values, ndir, shape=()):
    """Make a Dual with zero derivative (a known constant in this pass)."""
    v = np.broadcast_to(np.asarray(values, dtype=float), shape).copy()
    return Dual(v, np.zeros(shape + (ndir,)))


def value(x):
    """Strip the Dual wrapper if present."""
    return x.val if isinstance(x, Dual) else x
