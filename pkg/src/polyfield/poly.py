"""Polynomial value functions attached to each key.

Coefficients follow Taylor-series convention: the coefficient of monomial
``x**a * y**b * z**c`` is a symmetric-tensor entry and the monomial is
scaled by ``1 / (a! b! c!)``.  For degree 2 this gives exactly
``0.5 * x^T S x`` with ``S`` stored as its 6 unique entries in the order
``xx, xy, xz, yy, yz, zz``.  Cubic terms are stored in the order
``xxx, xxy, xxz, xyy, xyz, xzz, yyy, yyz, yzz, zzz``.

The ``cube`` form holds 8 trilinear coefficients for the monomials
``1, x, y, z, xy, xz, yz, xyz`` (unit scale).
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement
from math import factorial

import numpy as np

from .errors import ConfigError

CUBE = 4
"""Degree code for the trilinear-coefficient value function."""

DEGREES = (0, 1, 2, 3, CUBE)


def _taylor_exponents(degree: int) -> list[tuple[int, int, int]]:
    exps = []
    for total in range(degree + 1):
        for combo in combinations_with_replacement(range(3), total):
            exps.append(tuple(combo.count(axis) for axis in range(3)))
    return exps


_CUBE_EXPONENTS = [
    (0, 0, 0),
    (1, 0, 0), (0, 1, 0), (0, 0, 1),
    (1, 1, 0), (1, 0, 1), (0, 1, 1),
    (1, 1, 1),
]


def exponents(degree: int) -> np.ndarray:
    """Monomial exponent table, shape ``(P, 3)``."""
    if degree == CUBE:
        return np.array(_CUBE_EXPONENTS, dtype=np.int64)
    if degree not in (0, 1, 2, 3):
        raise ConfigError(f"unsupported polynomial degree {degree!r}")
    return np.array(_taylor_exponents(degree), dtype=np.int64)


def monomial_scales(degree: int) -> np.ndarray:
    """Per-monomial scale factors, shape ``(P,)``."""
    exps = exponents(degree)
    if degree == CUBE:
        return np.ones(len(exps))
    return np.array([1.0 / (factorial(a) * factorial(b) * factorial(c)) for a, b, c in exps])


def num_coeffs(degree: int) -> int:
    return len(exponents(degree))


def parse_degree(value) -> int:
    """Accept ``0..3``, ``"cube"`` or the numeric cube code."""
    if isinstance(value, str):
        v = value.strip().lower()
        if v == "cube":
            return CUBE
        try:
            value = int(v)
        except ValueError:
            raise ConfigError(f"unsupported polynomial degree {value!r}") from None
    if value not in DEGREES:
        raise ConfigError(f"unsupported polynomial degree {value!r}")
    return int(value)


def degree_name(degree: int) -> str:
    return "cube" if degree == CUBE else str(degree)


def basis(x: np.ndarray, degree: int) -> np.ndarray:
    """Scaled monomials evaluated at ``x`` (``(..., 3)``) -> ``(..., P)``."""
    x = np.asarray(x, dtype=np.float64)
    exps = exponents(degree)
    scl = monomial_scales(degree)
    pw = [np.ones_like(x), x, x * x, x * x * x]
    cols = [
        s * pw[a][..., 0] * pw[b][..., 1] * pw[c][..., 2]
        for (a, b, c), s in zip(exps, scl)
    ]
    return np.stack(cols, axis=-1)


def basis_grad(x: np.ndarray, degree: int) -> np.ndarray:
    """Derivatives of the scaled monomials, ``(..., P, 3)``."""
    x = np.asarray(x, dtype=np.float64)
    exps = exponents(degree)
    scl = monomial_scales(degree)
    pw = [np.ones_like(x), x, x * x, x * x * x]
    zero = np.zeros(x.shape[:-1])
    cols = []
    for (a, b, c), s in zip(exps, scl):
        e = (a, b, c)
        parts = []
        for d in range(3):
            if e[d] == 0:
                parts.append(zero)
                continue
            term = s * e[d]
            for dd in range(3):
                k = e[dd] - 1 if dd == d else e[dd]
                term = term * pw[k][..., dd]
            parts.append(term)
        cols.append(np.stack(parts, axis=-1))
    return np.stack(cols, axis=-2)


@dataclass(frozen=True)
class PolyValue:
    degree: int
    coeffs: tuple[float, ...]

    def __post_init__(self):
        deg = parse_degree(self.degree)
        object.__setattr__(self, "degree", deg)
        object.__setattr__(self, "coeffs", tuple(float(c) for c in self.coeffs))
        if len(self.coeffs) != num_coeffs(deg):
            raise ConfigError(
                f"degree {degree_name(deg)} expects {num_coeffs(deg)} coefficients, "
                f"got {len(self.coeffs)}"
            )

    @classmethod
    def from_parts(cls, degree, const=0.0, linear=None, quad=None, cubic=None) -> "PolyValue":
        """Build from Taylor parts.  ``quad`` may be a full 3x3 symmetric matrix."""
        deg = parse_degree(degree)
        if deg == CUBE:
            raise ConfigError("cube values have no Taylor parts; pass the 8 coefficients directly")
        coeffs = [float(const)]
        if deg >= 1:
            coeffs += list(np.zeros(3) if linear is None else np.asarray(linear, float))
        if deg >= 2:
            if quad is None:
                coeffs += [0.0] * 6
            else:
                q = np.asarray(quad, float)
                if q.shape == (3, 3):
                    q = q[np.triu_indices(3)]
                coeffs += list(q)
        if deg >= 3:
            coeffs += list(np.zeros(10) if cubic is None else np.asarray(cubic, float))
        return cls(deg, tuple(coeffs))


def poly_eval(x, f: PolyValue) -> float:
    return float(basis(np.asarray(x, float), f.degree) @ np.asarray(f.coeffs))


def poly_grad_x(x, f: PolyValue) -> np.ndarray:
    g = basis_grad(np.asarray(x, float), f.degree)
    return np.asarray(f.coeffs) @ g
