"""Butcher tableaux of the embedded Runge-Kutta pairs and their stability functions.

Tableaux are stored as exact rationals and converted to floats once.  The
``b`` row is the propagating method of order ``p``; ``b_hat`` is the embedded
method of order ``p_hat`` used for error estimation.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from fractions import Fraction as F

import numpy as np

from .linalg import SingularMatrixError, solve

EXPLICIT = "explicit"
DIRK = "dirk"


class UnknownMethodError(KeyError):
    pass


class StabilityPoleError(ArithmeticError):
    """``I - zA`` is singular at the requested point."""


@dataclass(frozen=True, eq=False)
class ButcherTableau:
    name: str
    a: np.ndarray
    b: np.ndarray
    b_hat: np.ndarray
    c: np.ndarray
    p: int
    p_hat: int
    scheme_class: str = field(default="")

    def __post_init__(self):
        a = np.array(self.a, dtype=float)
        nu = a.shape[0]
        if a.shape != (nu, nu):
            raise ValueError("a must be square")
        for attr in ("b", "b_hat", "c"):
            v = np.array(getattr(self, attr), dtype=float)
            if v.shape != (nu,):
                raise ValueError(f"{attr} must have length {nu}")
            v.setflags(write=False)
            object.__setattr__(self, attr, v)
        a.setflags(write=False)
        object.__setattr__(self, "a", a)
        cls = self.scheme_class or (EXPLICIT if not np.any(np.triu(a)) else DIRK)
        if cls == EXPLICIT and np.any(np.triu(a)):
            raise ValueError("explicit tableau must be strictly lower triangular")
        if cls == DIRK and np.any(np.triu(a, 1)):
            raise ValueError("DIRK tableau must be lower triangular")
        if cls not in (EXPLICIT, DIRK):
            raise ValueError(f"unknown scheme class {cls!r}")
        object.__setattr__(self, "scheme_class", cls)

    @property
    def stages(self) -> int:
        return self.a.shape[0]

    @property
    def is_explicit(self) -> bool:
        return self.scheme_class == EXPLICIT

    def digest(self) -> str:
        """Short hash of the coefficients, used to pin transcriptions in tests."""
        h = hashlib.sha256()
        for arr in (self.a, self.b, self.b_hat, self.c):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


def _tab(name, a, b, b_hat, p, p_hat, c=None):
    nu = len(b)
    rows = [list(r) + [0] * (nu - len(r)) for r in a]
    if c is None:
        c = [sum(r, F(0)) for r in rows]
    to_f = lambda seq: [float(x) for x in seq]  # noqa: E731
    return ButcherTableau(
        name=name,
        a=np.array([to_f(r) for r in rows]),
        b=np.array(to_f(b)),
        b_hat=np.array(to_f(b_hat)),
        c=np.array(to_f(c)),
        p=p,
        p_hat=p_hat,
    )


def _build_all() -> dict[str, ButcherTableau]:
    tabs = {}
    tabs["HEU-2-2-1"] = _tab(
        "HEU-2-2-1",
        [[0], [1]],
        b=[F(1, 2), F(1, 2)],
        b_hat=[1, 0],
        p=2,
        p_hat=1,
    )
    tabs["SDIRK-2-2-1"] = _tab(
        "SDIRK-2-2-1",
        [[1], [-1, 1]],
        b=[F(1, 2), F(1, 2)],
        b_hat=[1, 0],
        p=2,
        p_hat=1,
    )
    dp_b = [F(35, 384), 0, F(500, 1113), F(125, 192), F(-2187, 6784), F(11, 84), 0]
    tabs["DP-7-5-4"] = _tab(
        "DP-7-5-4",
        [
            [0],
            [F(1, 5)],
            [F(3, 40), F(9, 40)],
            [F(44, 45), F(-56, 15), F(32, 9)],
            [F(19372, 6561), F(-25360, 2187), F(64448, 6561), F(-212, 729)],
            [F(9017, 3168), F(-355, 33), F(46732, 5247), F(49, 176), F(-5103, 18656)],
            dp_b[:6],
        ],
        b=dp_b,
        b_hat=[F(5179, 57600), 0, F(7571, 16695), F(393, 640), F(-92097, 339200), F(187, 2100), F(1, 40)],
        p=5,
        p_hat=4,
    )
    tabs["BS-4-2-3"] = _tab(
        "BS-4-2-3",
        [[0], [F(1, 2)], [0, F(3, 4)], [F(2, 9), F(1, 3), F(4, 9)]],
        b=[F(2, 9), F(1, 3), F(4, 9), 0],
        b_hat=[F(7, 24), F(1, 4), F(1, 3), F(1, 8)],
        p=3,
        p_hat=2,
    )
    g = F(5, 6)
    tabs["SDIRK-3-2-3"] = _tab(
        "SDIRK-3-2-3",
        # a31 = -23/183 (row sum c3 = 1/6); the 3-stage weights are the order-3 row,
        # the 2-stage weights (25/61, 36/61, 0) only reach order 2
        [[g], [F(-61, 108), g], [F(-23, 183), F(-33, 61), g]],
        b=[F(26, 61), F(324, 671), F(1, 11)],
        b_hat=[F(25, 61), F(36, 61), 0],
        p=3,
        p_hat=2,
    )
    q = F(1, 4)
    tabs["SDIRK-4-2-3"] = _tab(
        "SDIRK-4-2-3",
        [[q], [F(1, 7), q], [F(61, 144), F(-49, 144), q], [0, 0, F(3, 4), q]],
        b=[0, 0, F(3, 4), F(1, 4)],
        b_hat=[F(-61, 600), F(49, 600), F(79, 100), F(23, 100)],
        p=3,
        p_hat=2,
    )
    gk = F(1767732205903, 4055673282236)
    esd_b = [
        F(1471266399579, 7840856788654),
        F(-4482444167858, 7529755066697),
        F(11266239266428, 11593286722821),
        gk,
    ]
    tabs["ESDIRK-4-2-3"] = _tab(
        "ESDIRK-4-2-3",
        [
            [0],
            [gk, gk],
            [F(2746238789719, 10658868560708), F(-640167445237, 6845629431997), gk],
            esd_b,
        ],
        b=esd_b,
        b_hat=[
            F(2756255671327, 12835298489170),
            F(-10771552573575, 22201958757719),
            F(9247589265047, 10645013368117),
            F(2193209047091, 5459859503100),
        ],
        p=3,
        p_hat=2,
        # printed abscissae; the rational a-rows reproduce them only to ~1e-13
        c=[0, F(1767732205903, 2027836641118), F(3, 5), 1],
    )
    return tabs


_BUILTINS = _build_all()
BUILTIN_NAMES = tuple(_BUILTINS)


def builtin(name: str) -> ButcherTableau:
    try:
        return _BUILTINS[name.upper()]
    except KeyError:
        raise UnknownMethodError(f"unknown method {name!r}; choose from {', '.join(BUILTIN_NAMES)}") from None


def implicit_euler() -> ButcherTableau:
    """One-stage implicit Euler (no useful embedding: ``b_hat`` equals ``b``).

    Not one of the builtin pairs; meant for fixed-step experiments.
    """
    return ButcherTableau("IE-1-1-1", a=[[1.0]], b=[1.0], b_hat=[1.0], c=[1.0], p=1, p_hat=1)


def stability_function(tab: ButcherTableau, z: complex) -> complex:
    """Psi(z) = 1 + z b^T (I - zA)^{-1} 1, solved over real pairs.

    With z = x + iy and (I - zA)(u + iv) = 1 the real block system is
    [[I - xA, yA], [-yA, I - xA]] [u; v] = [1; 0].
    """
    return _psi(tab, z, tab.b)


def _psi(tab: ButcherTableau, z: complex, weights: np.ndarray) -> complex:
    z = complex(z)
    x, y = z.real, z.imag
    if not (np.isfinite(x) and np.isfinite(y)):
        raise ValueError("z must be finite")
    nu = tab.stages
    if not np.any(np.triu(tab.a, 1)):
        return _psi_lower(tab, x, y, weights)
    eye = np.eye(nu)
    m = np.block([[eye - x * tab.a, y * tab.a], [-y * tab.a, eye - x * tab.a]])
    rhs = np.concatenate([np.ones(nu), np.zeros(nu)])
    try:
        uv = solve(m, rhs)
    except SingularMatrixError as exc:
        raise StabilityPoleError(f"{tab.name}: I - zA singular at z={z}") from exc
    w = complex(weights @ uv[:nu], weights @ uv[nu:])
    return 1.0 + z * w


def _psi_lower(tab: ButcherTableau, x: float, y: float, weights: np.ndarray) -> complex:
    # forward substitution on (I - zA) w = 1, each complex op spelled out in (re, im);
    # plain floats are faster than numpy slices at these sizes
    a = tab.a.tolist()
    wr: list[float] = []
    wi: list[float] = []
    for i, row in enumerate(a):
        ar = ai = 0.0
        for j in range(i):
            ar += row[j] * wr[j]
            ai += row[j] * wi[j]
        sr = 1.0 + x * ar - y * ai
        si = y * ar + x * ai
        dr = 1.0 - x * row[i]
        di = -y * row[i]
        den = dr * dr + di * di
        if math.sqrt(den) <= 1e-14 * (1.0 + math.hypot(x, y) * abs(row[i])):
            raise StabilityPoleError(f"{tab.name}: I - zA singular at z={complex(x, y)}")
        wr.append((sr * dr + si * di) / den)
        wi.append((si * dr - sr * di) / den)
    br = sum(b * v for b, v in zip(weights.tolist(), wr))
    bi = sum(b * v for b, v in zip(weights.tolist(), wi))
    return complex(1.0 + x * br - y * bi, x * bi + y * br)


def embedded_stability_function(tab: ButcherTableau, z: complex) -> complex:
    """Stability function of the embedded weights ``b_hat``."""
    return _psi(tab, z, tab.b_hat)


def in_restricted_region(tab: ButcherTableau, z: complex, eps: float) -> bool:
    """True iff |Psi(z)| <= 1 - eps."""
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    return abs(stability_function(tab, z)) <= 1.0 - eps


def dump_csv(tab: ButcherTableau) -> str:
    """Coefficients as CSV rows: ``c_i, a_i1..a_inu`` then the ``b`` and ``b_hat`` rows."""
    fmt = lambda v: "%.17g" % v  # noqa: E731
    nu = tab.stages
    lines = ["row,c_or_order," + ",".join(f"col{j}" for j in range(nu))]
    for i in range(nu):
        lines.append(f"a{i},{fmt(tab.c[i])}," + ",".join(fmt(v) for v in tab.a[i]))
    lines.append(f"b,{tab.p}," + ",".join(fmt(v) for v in tab.b))
    lines.append(f"b_hat,{tab.p_hat}," + ",".join(fmt(v) for v in tab.b_hat))
    return "\n".join(lines) + "\n"
