"""Step-by-step switching between an explicit and an implicit RK pair.

After every accepted step the growth-rate estimates ``sigma1``/``sigmad`` of
the linearized flow are updated, and the next step is explicit only if both
rates, scaled by the smallest tolerated stability step ``H0``, fall inside the
window ``[d1, d2]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .problems import OdeSystem
from .spectral import SpectralTrace, sigma_pair
from .stepper import (
    EXPLICIT_TAG,
    IMPLICIT_TAG,
    Stats,
    StepperConfig,
    Trajectory,
    _clamp,
    advance,
    integrate,
    jacobian,
)
from .tableaux import ButcherTableau

THRESHOLD_MODES = ("divide", "multiply")


@dataclass(frozen=True)
class Calibration:
    """Explicit-only window used to set ``H0 = alpha * mean step``."""

    interval_start: float
    interval_end: float
    alpha: float

    def __post_init__(self):
        if not self.interval_end > self.interval_start:
            raise ValueError("calibration interval must have positive length")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")


@dataclass(frozen=True)
class ImexConfig:
    explicit_tab: ButcherTableau
    implicit_tab: ButcherTableau
    d1: float = -2.0
    d2: float = 2.0
    H0: float | None = None
    calibration: Calibration | None = None
    w: int = 1
    stepper: StepperConfig = field(default_factory=StepperConfig)
    threshold_mode: str = "divide"
    seed: int | None = None

    def __post_init__(self):
        if not self.explicit_tab.is_explicit:
            raise ValueError(f"{self.explicit_tab.name} is not explicit")
        if self.implicit_tab.is_explicit:
            raise ValueError(f"{self.implicit_tab.name} is not implicit")
        if self.explicit_tab.p != self.implicit_tab.p:
            raise ValueError("explicit and implicit methods must share the order p")
        if not (self.d1 < 0 < self.d2):
            raise ValueError("need d1 < 0 < d2")
        if (self.H0 is None) == (self.calibration is None):
            raise ValueError("give exactly one of H0 and calibration")
        if self.H0 is not None and not self.H0 > 0:
            raise ValueError("H0 must be positive")
        if self.w < 0:
            raise ValueError("w must be non-negative")
        if self.threshold_mode not in THRESHOLD_MODES:
            raise ValueError(f"threshold_mode must be one of {THRESHOLD_MODES}")


def calibrate_H0(sys: OdeSystem, cfg: ImexConfig, t0: float = 0.0, x0=None) -> float:
    """alpha times the mean accepted explicit step over the calibration interval.

    The explicit method runs alone from ``t0`` (state ``x0``, default the
    problem's initial state) to the end of the interval; only steps starting
    inside the interval enter the mean.
    """
    cal = cfg.calibration
    if cal is None:
        raise ValueError("config has no calibration interval")
    if cal.interval_start < t0:
        raise ValueError("calibration interval starts before t0")
    x0 = sys.x0 if x0 is None else x0
    traj, _ = integrate(sys, cfg.explicit_tab, cfg.stepper, t0, x0, cal.interval_end)
    starts = traj.times[:-1]
    inside = traj.step_sizes[starts >= cal.interval_start - 1e-12 * max(1.0, abs(cal.interval_start))]
    if inside.size == 0:
        raise ValueError("no explicit step started inside the calibration interval")
    return cal.alpha * float(np.mean(inside))


def thresholds(d1: float, d2: float, H0: float, mode: str = "divide") -> tuple[float, float]:
    if not H0 > 0:
        raise ValueError("H0 must be positive")
    if mode == "divide":
        return d1 / H0, d2 / H0
    if mode == "multiply":
        return d1 * H0, d2 * H0
    raise ValueError(f"threshold_mode must be one of {THRESHOLD_MODES}")


def choose_scheme(sigma1: float, sigmad: float, d1: float, d2: float, H0: float, mode: str = "divide") -> str:
    """``E`` iff sigmad >= lower and sigma1 <= upper threshold, else ``I``."""
    lo, hi = thresholds(d1, d2, H0, mode)
    return EXPLICIT_TAG if (sigmad >= lo and sigma1 <= hi) else IMPLICIT_TAG


def imex_integrate(
    sys: OdeSystem, cfg: ImexConfig, t0: float, x0, t_end: float, H0: float | None = None
) -> tuple[Trajectory, Stats, SpectralTrace]:
    """Integrate with per-step explicit/implicit selection.

    ``H0`` overrides the configured value (or the calibration).  Jacobians
    evaluated for the rate estimates are charged to ``jaceval`` and reused as
    the Newton Jacobian of a following implicit step.
    """
    if not t_end > t0:
        raise ValueError("t_end must exceed t0")
    if H0 is None:
        H0 = cfg.H0 if cfg.H0 is not None else calibrate_H0(sys, cfg, t0, x0)
    scfg = cfg.stepper
    stats = Stats()
    trace = SpectralTrace.start(sys.dim, cfg.seed)
    x = np.array(x0, dtype=float)
    t = float(t0)
    times, states, steps, used = [t], [x], [], []
    h = scfg.fixed_step if scfg.fixed_step is not None else scfg.h0
    scheme = EXPLICIT_TAG
    a_here = jacobian(sys, scfg, t, x, stats)
    while t < t_end:
        tab = cfg.explicit_tab if scheme == EXPLICIT_TAG else cfg.implicit_tab
        h_try = _clamp(h, t, t_end)
        rec, h_next = advance(sys, tab, scfg, t, x, h_try, stats, jac=None if tab.is_explicit else a_here)
        t_new = t_end if h_try == t_end - t and rec.h == h_try else t + rec.h
        x = rec.x_next
        if scheme == EXPLICIT_TAG:
            stats.nexp += 1
        else:
            stats.nimp += 1
        used.append(scheme)
        a_next = jacobian(sys, scfg, t_new, x, stats)
        s1, sd = sigma_pair(a_here, a_next, t, rec.h, trace)
        scheme = choose_scheme(s1, sd, cfg.d1, cfg.d2, H0, cfg.threshold_mode)
        a_here = a_next
        t = t_new
        times.append(t)
        states.append(x)
        steps.append(rec.h)
        if scfg.fixed_step is None:
            h = h_next
    stats.h_mean = (t_end - t0) / stats.nsteps_accepted
    traj = Trajectory(np.array(times), np.array(states), np.diff(np.array(times)), used)
    return traj, stats, trace


def implicit_fraction(stats: Stats) -> float:
    total = stats.nexp + stats.nimp
    return stats.nimp / total if total else math.nan
