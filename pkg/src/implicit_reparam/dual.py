"""Forward-mode automatic differentiation with a single tangent.

A :class:`Dual` carries a value and the derivative of that value with respect
to one active parameter.  Both fields may be Python floats, NumPy scalars or
arrays; arithmetic is elementwise and the floating dtype of ``val`` is kept, so
``float32`` inputs give single-precision derivatives and ``float64`` inputs give
double-precision ones.

The module-level functions (:func:`exp`, :func:`log`, :func:`lgamma`, ...)
accept either plain numbers/arrays or duals, which lets numerical kernels be
written once and evaluated with or without derivatives.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special as _sp

from .errors import DomainError

__all__ = [
    "Dual",
    "lift_const",
    "lift_var",
    "value",
    "tangent",
    "is_dual",
    "elementary",
    "exp",
    "log",
    "log1p",
    "sqrt",
    "sin",
    "cos",
    "lgamma",
    "digamma",
    "trigamma",
    "psi",
    "psi1",
    "where",
    "sum_",
]


def _scale_tan(q, tan):
    """q * tan, with an overflowed q times a zero tangent giving zero rather than nan."""
    with np.errstate(invalid="ignore"):
        out = q * tan
    if np.all(np.isfinite(q)):
        return out
    return np.where(np.asarray(tan) == 0, np.zeros_like(out), out)


class Dual:
    """Value plus one directional derivative."""

    __slots__ = ("val", "tan")
    # Make ndarray binary operators defer to the reflected Dual methods.
    __array_ufunc__ = None

    def __init__(self, val, tan):
        self.val = val
        self.tan = tan

    def __repr__(self):
        return f"Dual(val={self.val!r}, tan={self.tan!r})"

    @property
    def shape(self):
        return np.shape(self.val)

    @property
    def dtype(self):
        return np.result_type(self.val)

    def __len__(self):
        return len(self.val)

    def __getitem__(self, idx):
        tan = self.tan
        if np.shape(tan) != np.shape(self.val):
            tan = np.broadcast_to(tan, np.shape(self.val))
        return Dual(self.val[idx], tan[idx])

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val + other.val, self.tan + other.tan)
        return Dual(self.val + other, self.tan)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val - other.val, self.tan - other.tan)
        return Dual(self.val - other, self.tan)

    def __rsub__(self, other):
        return Dual(other - self.val, -self.tan)

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val * other.val, self.val * other.tan + self.tan * other.val)
        return Dual(self.val * other, self.tan * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            q = self.val / other.val
            return Dual(q, (self.tan - _scale_tan(q, other.tan)) / other.val)
        return Dual(self.val / other, self.tan / other)

    def __rtruediv__(self, other):
        q = other / self.val
        return Dual(q, -_scale_tan(q, self.tan) / self.val)

    def __neg__(self):
        return Dual(-self.val, -self.tan)

    def __pos__(self):
        return self

    def __pow__(self, other):
        if isinstance(other, Dual):
            return exp(other * log(self))
        v = self.val**other
        return Dual(v, other * self.val ** (other - 1) * self.tan)

    def __rpow__(self, other):
        v = other**self.val
        return Dual(v, v * np.log(other) * self.tan)


def lift_const(x) -> Dual:
    """Embed a constant: zero tangent."""
    return Dual(x, np.zeros_like(x))


def lift_var(x) -> Dual:
    """Embed the active parameter: unit tangent."""
    return Dual(x, np.ones_like(x))


def is_dual(x) -> bool:
    return isinstance(x, Dual)


def value(x):
    return x.val if isinstance(x, Dual) else x


def tangent(x):
    """Tangent of ``x``; zero for plain numbers."""
    return x.tan if isinstance(x, Dual) else np.zeros_like(x)


def where(cond, a, b):
    """Elementwise select that also works when either branch is a dual."""
    if isinstance(a, Dual) or isinstance(b, Dual):
        return Dual(np.where(cond, value(a), value(b)), np.where(cond, tangent(a), tangent(b)))
    return np.where(cond, a, b)


def sum_(x, axis=-1):
    """Sum along ``axis``; duals sum their tangents too."""
    if isinstance(x, Dual):
        tan = np.broadcast_to(x.tan, np.shape(x.val))
        return Dual(np.sum(x.val, axis=axis), np.sum(tan, axis=axis))
    return np.sum(x, axis=axis)


# ---------------------------------------------------------------------------
# polygamma helpers

# B_{2k} / (2k) for the digamma asymptotic series, k = 1..6
_PSI_COEF = (1.0 / 12, -1.0 / 120, 1.0 / 252, -1.0 / 240, 1.0 / 132, -691.0 / 32760)
# B_{2k} for the trigamma asymptotic series, k = 1..7
_PSI1_COEF = (1.0 / 6, -1.0 / 30, 1.0 / 42, -1.0 / 30, 5.0 / 66, -691.0 / 2730, 7.0 / 6)
# Shift point for the recurrences; the truncated asymptotic tails are below
# 1e-16 from here on.
_ASYMPTOTIC_FROM = 10.0


def _as_float_array(x):
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    return x


def _shift_up(x, step):
    """Apply ``acc += step(x); x += 1`` until every element is >= the asymptotic region."""
    acc = np.zeros_like(x)
    while True:
        low = x < _ASYMPTOTIC_FROM
        if not low.any():
            return x, acc
        acc = acc + np.where(low, step(np.where(low, x, 1.0)), 0.0)
        x = np.where(low, x + 1.0, x)


def psi(x):
    """Digamma function for positive arguments.

    Upward recurrence psi(x) = psi(x + 1) - 1/x into the asymptotic region,
    then the Stirling-type series in 1/x^2.
    """
    x = _as_float_array(x)
    if np.any(~(x > 0)):
        raise DomainError("digamma is only implemented for x > 0")
    x, acc = _shift_up(x, lambda t: -1.0 / t)
    w = 1.0 / (x * x)
    series = _PSI_COEF[-1]
    for c in reversed(_PSI_COEF[:-1]):
        series = series * w + c
    return np.log(x) - 0.5 / x - w * series + acc


def psi1(x):
    """Trigamma function for positive arguments."""
    x = _as_float_array(x)
    if np.any(~(x > 0)):
        raise DomainError("trigamma is only implemented for x > 0")
    x, acc = _shift_up(x, lambda t: 1.0 / (t * t))
    w = 1.0 / (x * x)
    series = _PSI1_COEF[-1]
    for c in reversed(_PSI1_COEF[:-1]):
        series = series * w + c
    return 1.0 / x + 0.5 * w + w / x * series + acc


# ---------------------------------------------------------------------------
# elementary functions


def exp(x):
    if isinstance(x, Dual):
        v = np.exp(x.val)
        return Dual(v, v * x.tan)
    return np.exp(x)


def log(x):
    v = value(x)
    if np.any(~(np.asarray(v) > 0)):
        raise DomainError("log of a non-positive number")
    if isinstance(x, Dual):
        return Dual(np.log(v), x.tan / v)
    return np.log(x)


def log1p(x):
    v = value(x)
    if np.any(~(np.asarray(v) > -1)):
        raise DomainError("log1p of a number <= -1")
    if isinstance(x, Dual):
        return Dual(np.log1p(v), x.tan / (1.0 + v))
    return np.log1p(x)


def sqrt(x):
    v = value(x)
    if np.any(np.asarray(v) < 0):
        raise DomainError("sqrt of a negative number")
    if isinstance(x, Dual):
        s = np.sqrt(v)
        return Dual(s, 0.5 * x.tan / s)
    return np.sqrt(x)


def sin(x):
    if isinstance(x, Dual):
        return Dual(np.sin(x.val), np.cos(x.val) * x.tan)
    return np.sin(x)


def cos(x):
    if isinstance(x, Dual):
        return Dual(np.cos(x.val), -np.sin(x.val) * x.tan)
    return np.cos(x)


def lgamma(x):
    """log Gamma(x) for x > 0; the tangent uses :func:`psi`."""
    v = value(x)
    if np.any(~(np.asarray(v) > 0)):
        raise DomainError("lgamma is only implemented for x > 0")
    lg = _sp.gammaln(v)
    if isinstance(x, Dual):
        return Dual(lg, psi(v) * x.tan)
    return lg


def digamma(x):
    if isinstance(x, Dual):
        return Dual(psi(x.val), psi1(x.val) * x.tan)
    return psi(x)


def trigamma(x):
    if isinstance(x, Dual):
        raise NotImplementedError("derivatives of trigamma are not supported")
    return psi1(x)


def _div(a, b):
    if np.any(np.asarray(value(b)) == 0):
        raise DomainError("division by zero")
    return a / b


def _pow(a, b):
    if isinstance(b, Dual) and np.any(~(np.asarray(value(a)) > 0)):
        raise DomainError("pow with a differentiated exponent needs a positive base")
    return a**b


_BINARY = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": _div,
    "pow": _pow,
}
_UNARY = {
    "neg": lambda a: -a,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "sin": sin,
    "cos": cos,
    "lgamma": lgamma,
    "digamma": digamma,
}


def elementary(kind: str, a, b=None):
    """Apply the named elementary operation, validating its domain.

    ``kind`` is one of add, sub, mul, div, neg, exp, log, pow, sqrt, sin, cos,
    lgamma, digamma.  NaN operands raise :class:`DomainError`.
    """
    for operand in (a, b):
        if operand is not None and np.any(np.isnan(value(operand))):
            raise DomainError(f"NaN operand for {kind}")
    if kind in _UNARY:
        if b is not None:
            raise TypeError(f"{kind} takes one operand")
        return _UNARY[kind](a)
    if kind in _BINARY:
        if b is None:
            raise TypeError(f"{kind} takes two operands")
        return _BINARY[kind](a, b)
    raise ValueError(f"unknown elementary operation {kind!r}")


EULER_GAMMA = 0.5772156649015329
LOG_2PI = math.log(2.0 * math.pi)
