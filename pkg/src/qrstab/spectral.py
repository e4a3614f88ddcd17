"""QR-based growth-rate estimation for the numerical flow.

Two families live here:

* per-step estimates along a trajectory: one power-iteration step on the
  Heun propagator of the variational equation (``sigma1``) and on that of the
  adjoint equation (``sigmad``), the windowed stiffness indicator built from
  them, and the logarithmic-norm indicator for comparison;
* long-run spectral estimates from a discrete QR iteration: running Lyapunov
  averages, windowed Sacker-Sell endpoints, integral-separation envelopes, and
  a continuous-QR (Steklov average) oracle for linear systems.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .linalg import qr_positive, sym_eig_extremes
from .problems import OdeSystem
from .tableaux import ButcherTableau


class ZeroVectorError(ArithmeticError):
    pass


class WindowError(IndexError):
    pass


class RunTooShortError(ValueError):
    pass


# -- per-step estimates -------------------------------------------------------


def heun_propagator(a0: np.ndarray, a1: np.ndarray, h: float) -> np.ndarray:
    """Transition matrix of Heun's method for x' = A(t) x with A frozen at the two endpoints."""
    a0 = np.asarray(a0, dtype=float)
    a1 = np.asarray(a1, dtype=float)
    return np.eye(a0.shape[0]) + 0.5 * h * (a0 + a1 + h * (a1 @ a0))


def variational_propagator(sys: OdeSystem, t: float, x, x_next, h: float) -> np.ndarray:
    """Heun propagator of the linearization about the step (t, x) -> (t + h, x_next)."""
    return heun_propagator(sys.jac(t, np.asarray(x, float)), sys.jac(t + h, np.asarray(x_next, float)), h)


def power_step(phi: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, float]:
    v = np.asarray(phi, dtype=float) @ np.asarray(q, dtype=float)
    growth = float(np.sqrt(v @ v))
    if not growth >= 1e-300:
        raise ZeroVectorError("power iteration produced a (numerically) zero vector")
    return v / growth, growth


def _initial_vector(d: int, seed: int | None) -> np.ndarray:
    if seed is None:
        q = np.ones(d)
    else:
        q = np.random.default_rng(seed).standard_normal(d)
    return q / np.linalg.norm(q)


@dataclass
class SpectralTrace:
    """Per-step rate estimates; entry n belongs to the step [t_n, t_n + h_n]."""

    q_fwd: np.ndarray
    q_adj: np.ndarray
    times: list[float] = field(default_factory=list)
    steps: list[float] = field(default_factory=list)
    sigma1: list[float] = field(default_factory=list)
    sigmad: list[float] = field(default_factory=list)

    @classmethod
    def start(cls, dim: int, seed: int | None = None) -> "SpectralTrace":
        if seed is None:
            q = _initial_vector(dim, None)
            return cls(q_fwd=q, q_adj=q.copy())
        rng = np.random.default_rng(seed)
        qs = rng.standard_normal((2, dim))
        qs /= np.linalg.norm(qs, axis=1)[:, None]
        return cls(q_fwd=qs[0], q_adj=qs[1])

    def __len__(self) -> int:
        return len(self.sigma1)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return (np.array(self.times), np.array(self.steps), np.array(self.sigma1), np.array(self.sigmad))


def sigma_pair(a0: np.ndarray, a1: np.ndarray, t: float, h: float, trace: SpectralTrace) -> tuple[float, float]:
    """Advance both power iterations over one step and record (sigma1, sigmad).

    ``a0``/``a1`` are the Jacobians at the start and end of the step.  The
    adjoint x' = -A^T x is propagated with the same Heun formula; its top rate
    is minus the bottom rate of the original system.
    """
    phi = heun_propagator(a0, a1, h)
    phi_adj = heun_propagator(-np.transpose(a0), -np.transpose(a1), h)
    trace.q_fwd, g_fwd = power_step(phi, trace.q_fwd)
    trace.q_adj, g_adj = power_step(phi_adj, trace.q_adj)
    s1 = math.log(g_fwd) / h
    sd = -math.log(g_adj) / h
    trace.times.append(t)
    trace.steps.append(h)
    trace.sigma1.append(s1)
    trace.sigmad.append(sd)
    return s1, sd


def trace_trajectory(sys: OdeSystem, times, states, seed: int | None = None) -> SpectralTrace:
    """Spectral trace along a stored trajectory, Jacobians at the solution values."""
    times = np.asarray(times, dtype=float)
    states = np.asarray(states, dtype=float)
    trace = SpectralTrace.start(sys.dim, seed)
    a_prev = sys.jac(times[0], states[0])
    for n in range(len(times) - 1):
        a_next = sys.jac(times[n + 1], states[n + 1])
        sigma_pair(a_prev, a_next, times[n], times[n + 1] - times[n], trace)
        a_prev = a_next
    return trace


def stiffness_SI(trace: SpectralTrace, n: int, w: int) -> float:
    """Step-length-weighted mean of sigma1 - sigmad over steps n-w .. n+w."""
    if w < 0 or n < w or n + w >= len(trace):
        raise WindowError(f"window [{n - w}, {n + w}] outside recorded steps 0..{len(trace) - 1}")
    lo, hi = n - w, n + w + 1
    h = np.asarray(trace.steps[lo:hi])
    diff = np.asarray(trace.sigma1[lo:hi]) - np.asarray(trace.sigmad[lo:hi])
    return float(diff @ h / h.sum())


def si_series(trace: SpectralTrace, w: int) -> np.ndarray:
    """SI(n, w) for every step; NaN where the window does not fit."""
    h = np.asarray(trace.steps)
    diff = np.asarray(trace.sigma1) - np.asarray(trace.sigmad)
    out = np.full(len(h), np.nan)
    if len(h) < 2 * w + 1:
        return out
    cw = np.concatenate([[0.0], np.cumsum(diff * h)])
    ch = np.concatenate([[0.0], np.cumsum(h)])
    n = np.arange(w, len(h) - w)
    out[n] = (cw[n + w + 1] - cw[n - w]) / (ch[n + w + 1] - ch[n - w])
    return out


def sigma_lognorm(a) -> float:
    """Spread of the Hermitian part: lambda_max(He[a]) - lambda_min(He[a])."""
    a = np.asarray(a, dtype=float)
    lo, hi = sym_eig_extremes(0.5 * (a + a.T))
    return max(hi - lo, 0.0)


# -- transition matrices of linear systems -------------------------------------


def linear_step_matrix(amat: Callable[[float], np.ndarray], tab: ButcherTableau, t: float, h: float) -> np.ndarray:
    """Exact one-step transition matrix of an RK method applied to x' = A(t) x.

    Stages are solved as matrix equations, (I - h a_ii A_i) K_i = A_i (I + h sum_j a_ij K_j).
    """
    a = tab.a
    mats = [np.asarray(amat(t + ci * h), dtype=float) for ci in tab.c]
    d = mats[0].shape[0]
    eye = np.eye(d)
    ks = []
    for i in range(tab.stages):
        base = eye.copy()
        for j in range(i):
            if a[i, j] != 0.0:
                base += (h * a[i, j]) * ks[j]
        rhs = mats[i] @ base
        if a[i, i] == 0.0:
            ks.append(rhs)
        else:
            ks.append(np.linalg.solve(eye - (h * a[i, i]) * mats[i], rhs))
    out = eye.copy()
    for i, bi in enumerate(tab.b):
        if bi != 0.0:
            out += (h * bi) * ks[i]
    return out


def linear_propagators(sys: OdeSystem, tab: ButcherTableau, times, chunk: int = 4096) -> Iterable[np.ndarray]:
    """Transition matrices over consecutive intervals of ``times`` (lazily).

    Same result as :func:`linear_step_matrix` step by step, computed in
    batches of ``chunk`` steps.
    """
    if sys.amat is None:
        raise ValueError(f"{sys.name} is not a linear system with explicit A(t)")
    times = np.asarray(times, dtype=float)
    amat, a, nu, d = sys.amat, tab.a, tab.stages, sys.dim
    eye = np.eye(d)
    for lo in range(0, len(times) - 1, chunk):
        t = times[lo : lo + chunk + 1]
        h = np.diff(t)[:, None, None]
        ks = []
        for i in range(nu):
            mats = np.array([amat(s) for s in t[:-1] + tab.c[i] * h[:, 0, 0]], dtype=float)
            base = np.broadcast_to(eye, mats.shape).copy()
            for j in range(i):
                if a[i, j] != 0.0:
                    base += (h * a[i, j]) * ks[j]
            rhs = mats @ base
            if a[i, i] != 0.0:
                rhs = np.linalg.solve(eye - (h * a[i, i]) * mats, rhs)
            ks.append(rhs)
        out = np.broadcast_to(eye, ks[0].shape).copy()
        for i, bi in enumerate(tab.b):
            if bi != 0.0:
                out += (h * bi) * ks[i]
        yield from out


# -- discrete QR iteration ----------------------------------------------------


@dataclass
class QrDiagonalLog:
    """ln R_ii(n) per step (rows) and the step grid t_0 < t_1 < ... (one longer)."""

    times: np.ndarray
    logs: np.ndarray
    q_final: np.ndarray | None = None

    @property
    def nsteps(self) -> int:
        return self.logs.shape[0]

    @property
    def dim(self) -> int:
        return self.logs.shape[1]

    def rates(self) -> np.ndarray:
        """Per-step rates ln R_ii(n) / h_n."""
        return self.logs / np.diff(self.times)[:, None]


def discrete_qr_run(phis: Iterable[np.ndarray], q0, times=None) -> QrDiagonalLog:
    """Phi_n Q_n = Q_{n+1} R_n with positive diagonals; logs ln R_ii(n).

    ``times`` defaults to the unit grid 0, 1, 2, ...
    """
    q = np.array(q0, dtype=float)
    logs = []
    for phi in phis:
        q, r = qr_positive(np.asarray(phi, dtype=float) @ q)
        logs.append(np.log(np.diag(r)))
    logs = np.array(logs)
    if times is None:
        times = np.arange(len(logs) + 1, dtype=float)
    times = np.asarray(times, dtype=float)
    if len(times) != len(logs) + 1:
        raise ValueError("times must have one more entry than the number of propagators")
    return QrDiagonalLog(times=times, logs=logs, q_final=q)


@dataclass(frozen=True)
class LyapunovEstimates:
    times: np.ndarray
    series: np.ndarray
    tail_min: np.ndarray
    tail_max: np.ndarray


def lyapunov_estimates(log: QrDiagonalLog) -> LyapunovEstimates:
    """Running averages s_i(n) = sum_{k<=n} ln R_ii(k) / (t_{n+1} - t_0).

    The liminf/limsup proxies are the min/max over the second half of the run.
    """
    if log.nsteps < 2:
        raise RunTooShortError("need at least 2 steps")
    elapsed = log.times[1:] - log.times[0]
    series = np.cumsum(log.logs, axis=0) / elapsed[:, None]
    tail = series[log.nsteps // 2 :]
    return LyapunovEstimates(log.times[1:], series, tail.min(axis=0), tail.max(axis=0))


@dataclass(frozen=True)
class SackerSellEstimates:
    window_time: float
    alpha: np.ndarray
    beta: np.ndarray


def sackersell_estimates(log: QrDiagonalLog, window_time: float) -> SackerSellEstimates:
    """Min/max over windows of duration >= H of the per-unit-time average of ln R_ii."""
    H = float(window_time)
    t = log.times
    if not H > 0 or t[-1] - t[0] < 3 * H:
        raise RunTooShortError(f"run of length {t[-1] - t[0]:g} shorter than 3H = {3 * H:g}")
    cum = np.vstack([np.zeros(log.dim), np.cumsum(log.logs, axis=0)])
    # first end index m with t_m - t_n >= H (minus a rounding allowance)
    ends = np.searchsorted(t, t + H - 1e-9 * max(1.0, H), side="left")
    starts = np.nonzero(ends < len(t))[0]
    ends = ends[starts]
    avg = (cum[ends] - cum[starts]) / (t[ends] - t[starts])[:, None]
    return SackerSellEstimates(H, avg.min(axis=0), avg.max(axis=0))


@dataclass(frozen=True)
class SeparationReport:
    separated: bool
    a: float
    b: float


def integral_separation_diag(log: QrDiagonalLog, i: int, j: int, max_points: int = 2000) -> SeparationReport:
    """Lower affine envelope of sum_{k=m}^{n} (ln R_ii - ln R_jj) against t_{n+1} - t_m.

    The slope ``a`` is the smallest gap rate over windows spanning at least a
    quarter of the run; ``b`` is the largest intercept with the envelope below
    every window sum.  Separated iff ``a > 0``.
    """
    if not i < j:
        raise ValueError("need i < j")
    if log.nsteps < 10:
        raise RunTooShortError("need at least 10 steps")
    gap = np.concatenate([[0.0], np.cumsum(log.logs[:, i] - log.logs[:, j])])
    t = log.times
    idx = np.unique(np.linspace(0, len(t) - 1, min(len(t), max_points)).round().astype(int))
    g, tt = gap[idx], t[idx]
    sums = g[None, :] - g[:, None]
    spans = tt[None, :] - tt[:, None]
    upper = spans > 0
    long = spans >= 0.25 * (t[-1] - t[0])
    a = float(np.min(sums[long] / spans[long]))
    b = float(np.min(sums[upper] - a * spans[upper]))
    b = min(b, 0.0)
    return SeparationReport(a > 0.0, a, b)


# -- continuous QR oracle -----------------------------------------------------


def _s_matrix(qaq: np.ndarray) -> np.ndarray:
    low = np.tril(qaq, -1)
    return low - low.T


def _qflow_rhs(amat, t, q):
    qaq = q.T @ amat(t) @ q
    return q @ _s_matrix(qaq), np.diag(qaq).copy()


def _substeps_for(amat, t: float, dt: float, substeps: int, resolution: float) -> int:
    # refine until tau * |A| <= resolution, sampling |A| at a few points of the interval
    size = max(np.linalg.norm(amat(s), 2) for s in np.linspace(t, t + dt, 9))
    return max(substeps, int(math.ceil(dt * size / resolution)))


def steklov_series(
    sys: OdeSystem, times, q0=None, substeps: int = 100, resolution: float = 0.02
) -> tuple[np.ndarray, np.ndarray]:
    """Steklov averages of diag(Q^T A Q) over each interval of ``times``.

    Integrates the continuous QR flow Q' = Q S(Q, A) from ``times[0]`` with
    classical RK4 and averages B_ii = (Q^T A Q)_ii by the trapezoid rule.  Each
    interval uses at least ``substeps`` RK4 steps, more if needed to keep
    tau * |A(t)|_2 <= ``resolution``.  Returns (averages per interval, final Q).
    """
    if sys.amat is None:
        raise ValueError(f"{sys.name} is not a linear system with explicit A(t)")
    if substeps < 1:
        raise ValueError("substeps must be positive")
    amat = sys.amat
    times = np.asarray(times, dtype=float)
    q = np.eye(sys.dim) if q0 is None else np.array(q0, dtype=float)
    out = np.empty((len(times) - 1, sys.dim))
    _, bdiag = _qflow_rhs(amat, times[0], q)
    for n in range(len(times) - 1):
        t, dt = times[n], times[n + 1] - times[n]
        m = _substeps_for(amat, t, dt, substeps, resolution)
        tau = dt / m
        acc = 0.5 * bdiag
        for k in range(m):
            s = t + k * tau
            k1, _ = _qflow_rhs(amat, s, q)
            k2, _ = _qflow_rhs(amat, s + 0.5 * tau, q + 0.5 * tau * k1)
            k3, _ = _qflow_rhs(amat, s + 0.5 * tau, q + 0.5 * tau * k2)
            k4, _ = _qflow_rhs(amat, s + tau, q + tau * k3)
            q = q + (tau / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            _, bdiag = _qflow_rhs(amat, s + tau, q)
            acc = acc + (bdiag if k < m - 1 else 0.5 * bdiag)
        out[n] = acc * tau / dt
        q = qr_positive(q)[0]
    return out, q


def steklov_oracle(
    sys: OdeSystem, t: float, dt: float, substeps: int = 100, q=None, t0: float | None = None, resolution: float = 0.02
) -> np.ndarray:
    """Steklov averages s_i(t, dt) of the continuous QR flow.

    ``q`` is the orthogonal factor at ``t0`` (default: identity at ``t``); when
    ``t0 < t`` the flow is first carried from ``t0`` to ``t``.
    """
    if substeps < 100:
        raise ValueError("substeps must be at least 100")
    q = np.eye(sys.dim) if q is None else np.asarray(q, dtype=float)
    if t0 is not None and t0 < t:
        _, q = steklov_series(sys, [t0, t], q, substeps, resolution)
    avg, _ = steklov_series(sys, [t, t + dt], q, substeps, resolution)
    return avg[0]
