import math

import numpy as np
import pytest

from qrstab.problems import OdeSystem, linear_from_matrix, make_2dlin, make_scalar_test
from qrstab.stepper import (
    MinimumStepError,
    NonFiniteStageError,
    Stats,
    StepperConfig,
    advance,
    error_norm,
    integrate,
    propose_step,
    rk_step_dirk,
    rk_step_explicit,
)
from qrstab.tableaux import BUILTIN_NAMES, builtin, implicit_euler, stability_function

EXPLICIT = [n for n in BUILTIN_NAMES if builtin(n).is_explicit]
IMPLICIT = [n for n in BUILTIN_NAMES if not builtin(n).is_explicit]


def scalar(lam):
    return linear_from_matrix([[lam]])


def test_config_validation():
    with pytest.raises(ValueError):
        StepperConfig(reduce_factor=1.0)
    with pytest.raises(ValueError):
        StepperConfig(atol=0)
    with pytest.raises(ValueError):
        StepperConfig(h0=1.0, h_max=0.5)
    with pytest.raises(ValueError):
        StepperConfig(jac_mode="exact")
    cfg = StepperConfig.with_tol(1e-4)
    assert cfg.atol == cfg.rtol == 1e-4


@pytest.mark.parametrize("name", EXPLICIT)
def test_explicit_zero_rhs(name):
    stats = Stats()
    x = np.array([1.0, 2.0])
    zero = OdeSystem("z", 2, lambda t, x: np.zeros(2))
    xn, _ = rk_step_explicit(zero, builtin(name), 0.0, x, 0.1, stats)
    np.testing.assert_array_equal(xn, x)
    assert stats.feval == builtin(name).stages


def test_heun_on_growth():
    h = 0.3
    xn, xe = rk_step_explicit(scalar(1.0), builtin("HEU-2-2-1"), 0.0, np.array([2.0]), h)
    assert xn[0] == pytest.approx(2 * (1 + h + h * h / 2))
    assert xe[0] == pytest.approx(2 * (1 + h))


def test_explicit_rejects_dirk():
    with pytest.raises(ValueError):
        rk_step_explicit(scalar(1.0), builtin("SDIRK-2-2-1"), 0.0, np.array([1.0]), 0.1)


def test_nonfinite_stage():
    bad = OdeSystem("bad", 1, lambda t, x: np.array([math.inf]))
    with pytest.raises(NonFiniteStageError):
        rk_step_explicit(bad, builtin("HEU-2-2-1"), 0.0, np.array([1.0]), 0.1)


@pytest.mark.parametrize("name", BUILTIN_NAMES)
@pytest.mark.parametrize("z", [-0.5, -2.0, 0.3])
def test_step_ratio_equals_stability_function(name, z):
    tab = builtin(name)
    lam = -4.0 if z < 0 else 3.0
    h = z / lam
    cfg = StepperConfig(newton_tol=1e-15)
    if tab.is_explicit:
        xn, _ = rk_step_explicit(scalar(lam), tab, 0.0, np.array([1.0]), h)
    else:
        xn, _ = rk_step_dirk(scalar(lam), tab, 0.0, np.array([1.0]), h, cfg)
    assert xn[0] == pytest.approx(stability_function(tab, z).real, abs=1e-12)


def test_dirk_zero_rhs_no_solves():
    stats = Stats()
    zero = OdeSystem("z", 2, lambda t, x: np.zeros(2), lambda t, x: np.zeros((2, 2)))
    xn, _ = rk_step_dirk(zero, builtin("SDIRK-4-2-3"), 0.0, np.ones(2), 0.1, StepperConfig(), stats)
    np.testing.assert_array_equal(xn, 1.0)
    assert stats.lsol == 0 and stats.jaceval == 1 and stats.feval == 4


def test_dirk_sdirk221_closed_form():
    z = -0.1
    xn, _ = rk_step_dirk(scalar(-1.0), builtin("SDIRK-2-2-1"), 0.0, np.array([1.0]), 0.1, StepperConfig())
    assert xn[0] == pytest.approx((2 - 2 * z - z * z) / (2 * (1 - z) ** 2), rel=1e-12)


def test_dirk_stiff_decay():
    xn, _ = rk_step_dirk(scalar(-1e4), builtin("SDIRK-4-2-3"), 0.0, np.array([1.0]), 0.1, StepperConfig())
    assert abs(xn[0]) < 1


def test_dirk_counters_linear():
    # linear problem: each implicit stage converges after one Newton update
    stats = Stats()
    rk_step_dirk(scalar(-2.0), builtin("SDIRK-3-2-3"), 0.0, np.array([1.0]), 0.1, StepperConfig(), stats)
    assert stats.jaceval == 1
    assert stats.lsol == 3
    assert stats.feval == 6


def test_error_norm_examples():
    assert error_norm([1.0], [1.0], [1.0], 1e-4, 1e-4) == 0.0
    assert error_norm([1.0], [1.0 + 1e-4], [1.0], 1e-4, 1e-4) == pytest.approx(0.5)
    e = error_norm([1.0, 100.0], [1.0 + 1e-3, 100.0 + 1e-3], [1.0, 100.0], 1e-3, 1e-3)
    assert e == pytest.approx(0.5)


def test_propose_step_rules():
    cfg = StepperConfig(h_max=0.5)
    assert propose_step(0.1, 0.0, 1, cfg) == pytest.approx(0.2)
    assert propose_step(0.1, 1.0, 1, cfg) == pytest.approx(0.09)
    assert propose_step(0.4, 0.0, 2, cfg) == 0.5


def test_advance_forced_rejection():
    stats = Stats()
    cfg = StepperConfig(h_max=0.5)
    rec, h_next = advance(scalar(-1.0), builtin("HEU-2-2-1"), cfg, 0.0, np.array([1.0]), 0.2, stats, iter([4.0, 0.5]))
    assert rec.h == pytest.approx(0.15)
    assert rec.rejected == 1 and stats.nsteps_rejected == 1 and stats.nsteps_accepted == 1
    assert stats.feval == 4
    assert h_next == pytest.approx(0.15 * min(2, 0.9 * 0.5**-0.5))


def test_advance_minimum_step():
    with pytest.raises(MinimumStepError):
        advance(scalar(-1.0), builtin("HEU-2-2-1"), StepperConfig(), 0.0, np.array([1.0]), 0.1, Stats(), iter([2.0] * 500))


def test_advance_rejects_bad_h():
    with pytest.raises(ValueError):
        advance(scalar(-1.0), builtin("HEU-2-2-1"), StepperConfig(h_max=0.5), 0.0, np.array([1.0]), 0.8)


@pytest.mark.parametrize("name", BUILTIN_NAMES)
def test_integrate_exponential(name):
    tol = 1e-8
    traj, stats = integrate(scalar(-1.0), builtin(name), StepperConfig.with_tol(tol), 0.0, [1.0], 1.0)
    assert traj.times[-1] == 1.0
    assert abs(traj.states[-1, 0] - math.exp(-1)) <= 10 * tol
    assert np.all(np.diff(traj.times) > 0)
    np.testing.assert_allclose(traj.step_sizes, np.diff(traj.times), atol=1e-14)
    assert stats.h_mean == pytest.approx(1.0 / stats.nsteps_accepted)
    assert stats.nexp + stats.nimp == stats.nsteps_accepted


@pytest.mark.parametrize("name", EXPLICIT)
def test_explicit_feval_counts(name):
    tab = builtin(name)
    sys = make_scalar_test("smooth_decay")
    _, stats = integrate(sys, tab, StepperConfig.with_tol(1e-9, h0=0.5), 0.0, [1.0], 3.0)
    assert stats.nsteps_rejected > 0
    assert stats.feval == tab.stages * (stats.nsteps_accepted + stats.nsteps_rejected)


def test_deterministic():
    sys = make_2dlin(beta0=10.0)
    cfg = StepperConfig.with_tol(1e-6)
    t1, s1 = integrate(sys, builtin("SDIRK-4-2-3"), cfg, 0.0, sys.x0, 2.0)
    t2, s2 = integrate(sys, builtin("SDIRK-4-2-3"), cfg, 0.0, sys.x0, 2.0)
    np.testing.assert_array_equal(t1.states, t2.states)
    assert s1 == s2


def test_fixed_step_hits_end():
    traj, stats = integrate(scalar(-1.0), builtin("HEU-2-2-1"), StepperConfig(fixed_step=0.3), 0.0, [1.0], 1.0)
    np.testing.assert_allclose(traj.step_sizes, [0.3, 0.3, 0.3, 0.1], atol=1e-15)
    assert traj.times[-1] == 1.0
    assert stats.nsteps_accepted == 4


def test_integrate_needs_forward_span():
    with pytest.raises(ValueError):
        integrate(scalar(-1.0), builtin("HEU-2-2-1"), StepperConfig(), 1.0, [1.0], 1.0)


@pytest.mark.parametrize("name", BUILTIN_NAMES)
def test_convergence_order(name):
    tab = builtin(name)
    sys = make_scalar_test("smooth_decay")
    exact = math.exp(-2.0 + 1.0 - math.cos(2.0))
    errs = []
    for h in (0.2, 0.1, 0.05, 0.025):
        traj, _ = integrate(sys, tab, StepperConfig(fixed_step=h, newton_tol=1e-14), 0.0, [1.0], 2.0)
        errs.append(abs(traj.states[-1, 0] - exact))
    slope = math.log2(errs[-2] / errs[-1])
    assert tab.p - 0.3 <= slope <= tab.p + 0.5


def test_implicit_euler_2dlin_growth():
    sys = make_2dlin()
    traj, _ = integrate(sys, implicit_euler(), StepperConfig(fixed_step=1.0), 0.0, sys.x0, 100.0)
    norms = np.linalg.norm(traj.states, axis=1)
    ratios = norms[51:] / norms[50:-1]
    np.testing.assert_allclose(ratios, 1 / 0.9, rtol=1e-6)
