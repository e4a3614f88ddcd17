"""Test ODEs: the rotating 2D linear system, scalar test equations, the compost
bomb model, forced Van der Pol and a finite-difference Fitzhugh-Nagumo chain.

Every constructor returns an immutable :class:`OdeSystem`.  Linear problems
additionally expose their coefficient matrix as ``amat(t)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Callable, Mapping

import numpy as np

ANALYTIC = "analytic"
FINITE_DIFFERENCE = "fd"

Rhs = Callable[[float, np.ndarray], np.ndarray]
Jac = Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class OdeSystem:
    name: str
    dim: int
    rhs: Rhs
    jac_fn: Jac | None = None
    params: Mapping[str, float] = field(default_factory=dict)
    x0: np.ndarray | None = None
    amat: Callable[[float], np.ndarray] | None = None
    """Coefficient matrix A(t) of a linear system x' = A(t) x; ``None`` otherwise."""

    def __post_init__(self):
        object.__setattr__(self, "params", MappingProxyType(dict(self.params)))
        if self.x0 is not None:
            x0 = np.array(self.x0, dtype=float)
            if x0.shape != (self.dim,):
                raise ValueError(f"x0 must have shape ({self.dim},)")
            x0.setflags(write=False)
            object.__setattr__(self, "x0", x0)

    @property
    def jac_kind(self) -> str:
        return ANALYTIC if self.jac_fn is not None else FINITE_DIFFERENCE

    @property
    def is_linear(self) -> bool:
        return self.amat is not None

    def jac(self, t: float, x: np.ndarray) -> np.ndarray:
        if self.jac_fn is not None:
            return self.jac_fn(t, x)
        return fd_jacobian(self, t, x)

    def without_jacobian(self) -> "OdeSystem":
        """Same system with the analytic Jacobian dropped (forces finite differences)."""
        return OdeSystem(self.name, self.dim, self.rhs, None, dict(self.params), self.x0, self.amat)


_SQRT_EPS = math.sqrt(np.finfo(float).eps)


def fd_jacobian(sys: OdeSystem, t: float, x: np.ndarray) -> np.ndarray:
    """Forward-difference Jacobian with column steps sqrt(eps) * max(|x_i|, 1)."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(sys.rhs(t, x), dtype=float)
    n = x.shape[0]
    jac = np.empty((f0.shape[0], n))
    xp = x.copy()
    for i in range(n):
        eta = _SQRT_EPS * max(abs(x[i]), 1.0)
        xp[i] = x[i] + eta
        # use the representable increment
        eta = xp[i] - x[i]
        jac[:, i] = (np.asarray(sys.rhs(t, xp), dtype=float) - f0) / eta
        xp[i] = x[i]
    return jac


def _linear(name: str, amat: Callable[[float], np.ndarray], dim: int, params, x0=None) -> OdeSystem:
    return OdeSystem(
        name=name,
        dim=dim,
        rhs=lambda t, x: amat(t) @ x,
        jac_fn=lambda t, x: amat(t),
        params=params,
        x0=x0,
        amat=amat,
    )


def make_2dlin(
    lam1: float = 0.1,
    lam2: float = -0.2,
    beta0: float = 1000.0,
    beta1: float = 0.001,
    a1: float = 2 * math.pi,
    a2: float = 2 * math.pi,
) -> OdeSystem:
    """x' = L(t) C(t) L(t)^T x with a rotating, strongly non-normal C(t).

    C(t) = [[lam1, beta(t)], [0, lam2]], beta(t) = beta0 (1 + cos(a1 t) / (1 + beta1 t^2)),
    L(t) the rotation by omega(t) = a2 t.  Defaults are the experiment parameters;
    the discriminant condition on (lam, beta0, a1) is not enforced.
    """
    for k, v in dict(lam1=lam1, lam2=lam2, beta0=beta0, beta1=beta1, a1=a1, a2=a2).items():
        if not math.isfinite(v):
            raise ValueError(f"{k} must be finite")
    if min(beta0, beta1, a1, a2) < 0:
        raise ValueError("beta0, beta1, a1, a2 must be non-negative")

    def amat(t: float) -> np.ndarray:
        beta = beta0 * (1.0 + math.cos(a1 * t) / (1.0 + beta1 * t * t))
        cw, sw = math.cos(a2 * t), math.sin(a2 * t)
        # L C L^T expanded for 2x2
        c11, c12, c22 = lam1, beta, lam2
        return np.array(
            [
                [cw * cw * c11 - cw * sw * c12 + sw * sw * c22, cw * sw * c11 + cw * cw * c12 - sw * cw * c22],
                [sw * cw * c11 - sw * sw * c12 - cw * sw * c22, sw * sw * c11 + sw * cw * c12 + cw * cw * c22],
            ]
        )

    params = dict(lam1=lam1, lam2=lam2, beta0=beta0, beta1=beta1, a1=a1, a2=a2)
    return _linear("2dlin", amat, 2, params, x0=(1.0, -1.0))


def make_scalar_test(kind: str = "constant", **params: float) -> OdeSystem:
    """Scalar test equations.

    ``constant``               x' = lam x
    ``cosine_counterexample``  x' = (D cos(2 pi (t - t0) / h0) - alpha) x
    ``smooth_decay``           x' = (-1 + sin t) x
    ``forced_decay``           x' = -x + cos t   (affine; exact solution known)
    """
    if kind == "constant":
        p = dict(lam=-1.0) | params
        lam = float(p["lam"])
        return _linear("scalar", lambda t: np.array([[lam]]), 1, p, x0=(1.0,))
    if kind == "cosine_counterexample":
        p = dict(D=0.6, alpha=0.1, h0=1.0, t0=0.0) | params
        d, alpha, h0, t0 = (float(p[k]) for k in ("D", "alpha", "h0", "t0"))
        if not (d > alpha > 0 and h0 > 0):
            raise ValueError("cosine_counterexample needs D > alpha > 0 and h0 > 0")
        return _linear(
            "scalar",
            lambda t: np.array([[d * math.cos(2 * math.pi * (t - t0) / h0) - alpha]]),
            1,
            p | dict(kind=kind),
            x0=(1.0,),
        )
    if kind == "smooth_decay":
        if params:
            raise ValueError("smooth_decay takes no parameters")
        return _linear("scalar", lambda t: np.array([[-1.0 + math.sin(t)]]), 1, dict(kind=kind), x0=(1.0,))
    if kind == "forced_decay":
        if params:
            raise ValueError("forced_decay takes no parameters")
        return OdeSystem(
            name="scalar",
            dim=1,
            rhs=lambda t, x: np.array([-x[0] + math.cos(t)]),
            jac_fn=lambda t, x: np.array([[-1.0]]),
            params=dict(kind=kind),
            x0=(0.5,),
        )
    raise ValueError(f"unknown scalar test kind {kind!r}")


def forced_decay_exact(t: float, x0: float = 0.5, t0: float = 0.0) -> float:
    """Exact solution of x' = -x + cos t through x(t0) = x0."""
    part = lambda s: 0.5 * (math.cos(s) + math.sin(s))  # noqa: E731
    return part(t) + (x0 - part(t0)) * math.exp(-(t - t0))


COMPOST_CONSTANTS = MappingProxyType(
    dict(r=0.01, alpha=math.log(2.5) / 10.0, lam=5.049e6, A=3.9e7, Pi=1.055)
)


def taylor_exp(y: float, degree: int = 6) -> float:
    """sum_{k=0}^{degree} y^k / k!"""
    term, total = 1.0, 1.0
    for k in range(1, degree + 1):
        term *= y / k
        total += term
    return total


def make_compost_bomb(nu: float = 0.09) -> OdeSystem:
    """Compost bomb model (T, C, T_a) with exp(alpha T) replaced by its degree-6 Taylor polynomial."""
    if not nu > 0:
        raise ValueError("nu must be positive")
    r, alpha, lam, big_a, pi_ = (COMPOST_CONSTANTS[k] for k in ("r", "alpha", "lam", "A", "Pi"))
    k = lam / big_a

    def rhs(t, x):
        T, C, Ta = x
        growth = C * r * taylor_exp(alpha * T)
        return np.array([growth - k * (T - Ta), pi_ - growth, nu])

    def jac(t, x):
        T, C, _ = x
        p6 = taylor_exp(alpha * T)
        dp6 = alpha * taylor_exp(alpha * T, 5)
        return np.array(
            [
                [C * r * dp6 - k, r * p6, k],
                [-C * r * dp6, -r * p6, 0.0],
                [0.0, 0.0, 0.0],
            ]
        )

    return OdeSystem("compost", 3, rhs, jac, dict(COMPOST_CONSTANTS) | dict(nu=nu), x0=(8.15, 50.0, 0.0))


def make_vdp(mu: float = 100.0, amp: float = 1.0, omega: float = 1.0) -> OdeSystem:
    """Forced Van der Pol: x1' = mu (1 - x1^2) x2 + x1 - amp sin(omega t), x2' = x1."""
    if not mu > 0:
        raise ValueError("mu must be positive")

    def rhs(t, x):
        x1, x2 = x
        return np.array([mu * (1.0 - x1 * x1) * x2 + x1 - amp * math.sin(omega * t), x1])

    def jac(t, x):
        x1, x2 = x
        return np.array([[-2.0 * mu * x1 * x2 + 1.0, mu * (1.0 - x1 * x1)], [1.0, 0.0]])

    return OdeSystem("vdp", 2, rhs, jac, dict(mu=mu, amp=amp, omega=omega), x0=(0.0, 2.0))


def fhn_laplacian(J: int) -> np.ndarray:
    """(J+1)x(J+1) difference matrix of D(u_j) with the one-sided boundary rows, scaled by 1/dx^2."""
    n = J + 1
    inv_dx2 = float(J * J)
    lap = np.zeros((n, n))
    for j in range(1, J):
        lap[j, j - 1] = lap[j, j + 1] = inv_dx2
        lap[j, j] = -2.0 * inv_dx2
    lap[0, 0], lap[0, 1] = -inv_dx2, inv_dx2
    lap[J, J], lap[J, J - 1] = -inv_dx2, inv_dx2
    return lap


def make_fhn(J: int = 14, eps: float = 0.1, alpha: float = 0.3, delta: float = 0.01) -> OdeSystem:
    """Fitzhugh-Nagumo chain of dimension 2J+2, state ordered (u_0..u_J, v_0..v_J)."""
    J = int(J)
    if J < 2:
        raise ValueError("J must be at least 2")
    n = J + 1
    lap = alpha * fhn_laplacian(J)
    eye = np.eye(n)

    def rhs(t, x):
        u, v = x[:n], x[n:]
        du = -2.0 * u**3 + 6.0 * u - v + lap @ u
        dv = eps * (u - delta * v)
        return np.concatenate([du, dv])

    def jac(t, x):
        u = x[:n]
        return np.block([[lap + np.diag(6.0 - 6.0 * u * u), -eye], [eps * eye, -eps * delta * eye]])

    grid = np.arange(n) / J
    x0 = np.concatenate([np.sin(0.5 * np.pi * grid), np.cos(0.5 * np.pi * grid)])
    return OdeSystem("fhn", 2 * n, rhs, jac, dict(J=J, eps=eps, alpha=alpha, delta=delta), x0=x0)


def make_problem(problem_id: str, **params) -> OdeSystem:
    """Construct a problem by its CLI id with keyword overrides."""
    builders = {
        "2dlin": make_2dlin,
        "scalar": make_scalar_test,
        "compost": make_compost_bomb,
        "vdp": make_vdp,
        "fhn": make_fhn,
    }
    try:
        build = builders[problem_id]
    except KeyError:
        raise ValueError(f"unknown problem {problem_id!r}; choose from {', '.join(builders)}") from None
    if problem_id == "fhn" and "J" in params:
        params["J"] = int(params["J"])
    return build(**params)


def linear_from_matrix(a, name: str = "linear", x0=None) -> OdeSystem:
    """Autonomous linear system x' = a x."""
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return _linear(name, lambda t: a, a.shape[0], {}, _initial(x0, a.shape[0]))


def linear_from_function(amat: Callable[[float], np.ndarray], dim: int, name: str = "linear", x0=None) -> OdeSystem:
    return _linear(name, amat, dim, {}, _initial(x0, dim))


def _initial(x0, dim: int):
    if x0 is None:
        return np.ones(dim)
    x0 = np.array(x0, dtype=float)
    if x0.shape != (dim,):
        raise ValueError(f"x0 must have shape ({dim},)")
    return x0
