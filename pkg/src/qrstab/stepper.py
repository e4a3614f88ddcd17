"""One-step integration engine for explicit and diagonally implicit RK pairs.

Step control: a trial step is retried with ``reduce_factor * h`` (25% cuts by
default) until the embedded error estimate passes; after an accepted step the
next trial is ``h * min(2, 0.9 * err**(-1/(p_hat+1)))`` clamped to ``h_max``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import linalg
from .problems import OdeSystem, fd_jacobian
from .tableaux import ButcherTableau

EXPLICIT_TAG = "E"
IMPLICIT_TAG = "I"


class StepError(ArithmeticError):
    """A single step attempt failed; adaptive callers reject it and shrink ``h``."""


class NonFiniteStageError(StepError):
    pass


class NewtonDivergenceError(StepError):
    pass


class MinimumStepError(ArithmeticError):
    """The step size collapsed below ``1e-12 * (1 + |t|)``."""


@dataclass(frozen=True)
class StepperConfig:
    atol: float = 1e-6
    rtol: float = 1e-6
    h0: float = 0.05
    h_max: float = 0.5
    reduce_factor: float = 0.75
    newton_tol: float = 1e-12
    newton_max_iter: int = 25
    jac_mode: str = "analytic"
    fixed_step: float | None = None
    safety: float = 0.9
    growth_cap: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.reduce_factor < 1.0:
            raise ValueError("reduce_factor must lie in (0, 1)")
        if not (self.atol > 0 and self.rtol > 0):
            raise ValueError("atol and rtol must be positive")
        if not 0 < self.h0 <= self.h_max:
            raise ValueError("need 0 < h0 <= h_max")
        if self.jac_mode not in ("analytic", "fd"):
            raise ValueError("jac_mode must be 'analytic' or 'fd'")
        if self.fixed_step is not None and not self.fixed_step > 0:
            raise ValueError("fixed_step must be positive")

    @classmethod
    def with_tol(cls, tol: float, **kw) -> "StepperConfig":
        """Equal absolute and relative tolerance, as in the benchmark tables."""
        return cls(atol=tol, rtol=tol, **kw)


@dataclass
class Stats:
    nexp: int = 0
    nimp: int = 0
    feval: int = 0
    jaceval: int = 0
    lsol: int = 0
    nsteps_accepted: int = 0
    nsteps_rejected: int = 0
    h_mean: float = float("nan")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    step_sizes: np.ndarray
    method_used: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.times)


@dataclass(frozen=True)
class StepRecord:
    t: float
    h: float
    x_next: np.ndarray
    err: float
    rejected: int


def jacobian(sys: OdeSystem, cfg: StepperConfig, t: float, x: np.ndarray, stats: Stats) -> np.ndarray:
    stats.jaceval += 1
    if cfg.jac_mode == "fd":
        return fd_jacobian(sys, t, x)
    return sys.jac(t, x)


def rk_step_explicit(
    sys: OdeSystem, tab: ButcherTableau, t: float, x: np.ndarray, h: float, stats: Stats | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """One explicit RK step returning the propagated and the embedded solution."""
    if not tab.is_explicit:
        raise ValueError(f"{tab.name} is not explicit")
    a, c = tab.a, tab.c
    ks = []
    for i in range(tab.stages):
        g = x
        for j in range(i):
            if a[i, j] != 0.0:
                g = g + (h * a[i, j]) * ks[j]
        k = np.asarray(sys.rhs(t + c[i] * h, g), dtype=float)
        ks.append(k)
    if stats is not None:
        stats.feval += tab.stages
    kmat = np.array(ks)
    if not np.all(np.isfinite(kmat)):
        raise NonFiniteStageError(f"non-finite stage derivative at t={t}")
    return x + h * (tab.b @ kmat), x + h * (tab.b_hat @ kmat)


def rk_step_dirk(
    sys: OdeSystem,
    tab: ButcherTableau,
    t: float,
    x: np.ndarray,
    h: float,
    cfg: StepperConfig,
    stats: Stats | None = None,
    jac: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """One DIRK step; stage equations solved by plain Newton from the initial guess ``x``.

    One Jacobian per step, reused for every stage and iteration.  If an
    iteration contracts too slowly to meet the tolerance within the iteration
    budget, the Jacobian is re-evaluated once at the current stage iterate.  Newton stops when the residual max-norm is at
    most ``newton_tol * max(1, |g|_inf)``.
    """
    if stats is None:
        stats = Stats()
    a, c = tab.a, tab.c
    d = x.shape[0]
    if jac is None:
        jac = jacobian(sys, cfg, t, x, stats)
    counter = linalg.LinearSolveCounter()
    factors: dict[float, tuple] = {}
    ks = []
    try:
        for i in range(tab.stages):
            base = x
            for j in range(i):
                if a[i, j] != 0.0:
                    base = base + (h * a[i, j]) * ks[j]
            ti = t + c[i] * h
            gamma = a[i, i]
            if gamma == 0.0:
                k = np.asarray(sys.rhs(ti, base), dtype=float)
                stats.feval += 1
                if not np.all(np.isfinite(k)):
                    raise NonFiniteStageError(f"non-finite stage derivative at t={t}")
                ks.append(k)
                continue
            hg = h * gamma
            g = x.copy()
            prev = math.inf
            refreshed = False
            for it in range(cfg.newton_max_iter + 1):
                fg = np.asarray(sys.rhs(ti, g), dtype=float)
                stats.feval += 1
                r = g - base - hg * fg
                rnorm = np.max(np.abs(r))
                if not math.isfinite(rnorm):
                    raise NonFiniteStageError(f"non-finite Newton residual at t={t}")
                tol = cfg.newton_tol * max(1.0, np.max(np.abs(g)))
                if rnorm <= tol:
                    break
                if it == cfg.newton_max_iter:
                    raise NewtonDivergenceError(f"Newton failed to converge at t={t}, h={h}")
                # stale Jacobian: the observed contraction cannot reach tol in the remaining budget
                rate = rnorm / prev
                if not refreshed and it > 0 and (rate >= 1.0 or rnorm * rate ** (cfg.newton_max_iter - it) > tol):
                    jac = jacobian(sys, cfg, ti, g, stats)
                    factors.clear()
                    refreshed = True
                prev = rnorm
                if hg not in factors:
                    try:
                        factors[hg] = linalg.lu_factor(np.eye(d) - hg * jac)
                    except linalg.SingularMatrixError as exc:
                        raise NewtonDivergenceError(str(exc)) from exc
                g = g + linalg.lu_solve(factors[hg], -r, counter)
            ks.append(fg)
    finally:
        stats.lsol += counter.count
    kmat = np.array(ks)
    return x + h * (tab.b @ kmat), x + h * (tab.b_hat @ kmat)


def take_step(sys, tab, cfg, t, x, h, stats, jac=None):
    if tab.is_explicit:
        return rk_step_explicit(sys, tab, t, x, h, stats)
    return rk_step_dirk(sys, tab, t, x, h, cfg, stats, jac)


def error_norm(x_next, x_embedded, x_prev, atol: float, rtol: float) -> float:
    """max_i |x_next - x_emb|_i / (atol + rtol * max(|x_prev_i|, |x_next_i|)); accept iff <= 1."""
    x_next = np.asarray(x_next, dtype=float)
    scale = atol + rtol * np.maximum(np.abs(np.asarray(x_prev, dtype=float)), np.abs(x_next))
    return float(np.max(np.abs(x_next - np.asarray(x_embedded, dtype=float)) / scale))


def propose_step(h: float, err: float, p_hat: int, cfg: StepperConfig) -> float:
    if err <= 0.0:
        factor = cfg.growth_cap
    else:
        factor = min(cfg.growth_cap, cfg.safety * err ** (-1.0 / (p_hat + 1)))
    return min(cfg.h_max, h * factor)


def advance(
    sys: OdeSystem,
    tab: ButcherTableau,
    cfg: StepperConfig,
    t: float,
    x: np.ndarray,
    h_try: float,
    stats: Stats | None = None,
    error_sequence=None,
    jac: np.ndarray | None = None,
) -> tuple[StepRecord, float]:
    """Take one accepted step starting from the trial size ``h_try``.

    ``error_sequence`` (an iterator of floats) replaces the embedded error
    estimate; it exists to exercise the controller deterministically.
    ``jac`` is a Jacobian at (t, x) the caller already holds; implicit
    attempts use it instead of evaluating their own.
    """
    if stats is None:
        stats = Stats()
    if cfg.fixed_step is not None:
        x_next, _ = take_step(sys, tab, cfg, t, x, h_try, stats, jac)
        if not np.all(np.isfinite(x_next)):
            raise NonFiniteStageError(f"non-finite solution at t={t}")
        stats.nsteps_accepted += 1
        return StepRecord(t, h_try, x_next, 0.0, 0), h_try
    if not 0.0 < h_try <= cfg.h_max * (1 + 1e-12):
        raise ValueError("h_try must lie in (0, h_max]")
    h = h_try
    rejected = 0
    while True:
        if h < 1e-12 * (1.0 + abs(t)):
            raise MinimumStepError(f"step size {h:.3e} too small at t={t}")
        try:
            x_next, x_emb = take_step(sys, tab, cfg, t, x, h, stats, jac)
            err = error_norm(x_next, x_emb, x, cfg.atol, cfg.rtol)
            if error_sequence is not None:
                err = next(error_sequence)
            ok = math.isfinite(err) and err <= 1.0
        except StepError:
            ok, err = False, math.inf
        if ok:
            stats.nsteps_accepted += 1
            return StepRecord(t, h, x_next, err, rejected), propose_step(h, err, tab.p_hat, cfg)
        stats.nsteps_rejected += 1
        rejected += 1
        h *= cfg.reduce_factor


def _clamp(h: float, t: float, t_end: float) -> float:
    remaining = t_end - t
    # absorb a sliver that would otherwise become a degenerate final step
    if h >= remaining or remaining - h < 1e-12 * max(1.0, abs(t_end)):
        return remaining
    return h


def integrate(
    sys: OdeSystem,
    tab: ButcherTableau,
    cfg: StepperConfig,
    t0: float,
    x0,
    t_end: float,
) -> tuple[Trajectory, Stats]:
    """Integrate from ``t0`` to exactly ``t_end`` with a single method."""
    if not t_end > t0:
        raise ValueError("t_end must exceed t0")
    stats = Stats()
    x = np.array(x0, dtype=float)
    t = float(t0)
    times, states, steps = [t], [x], []
    tag = EXPLICIT_TAG if tab.is_explicit else IMPLICIT_TAG
    h = cfg.fixed_step if cfg.fixed_step is not None else cfg.h0
    while t < t_end:
        h_try = _clamp(h, t, t_end)
        rec, h_next = advance(sys, tab, cfg, t, x, h_try, stats)
        x = rec.x_next
        t = t_end if h_try == t_end - t and rec.h == h_try else t + rec.h
        times.append(t)
        states.append(x)
        steps.append(rec.h)
        if tab.is_explicit:
            stats.nexp += 1
        else:
            stats.nimp += 1
        if cfg.fixed_step is None:
            h = h_next
    stats.h_mean = (t_end - t0) / stats.nsteps_accepted
    traj = Trajectory(np.array(times), np.array(states), np.diff(np.array(times)), [tag] * len(steps))
    return traj, stats
