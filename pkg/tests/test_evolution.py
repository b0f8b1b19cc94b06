import math

import numpy as np
import pytest

from conftest import Case
from fastdiff import diagnostics as dg
from fastdiff.discretization import h1_norm
from fastdiff.evolution import (EvolutionConfig, StepFailure, amplitude_bisection, estimate_extinction_time,
                                extinction_envelope, extinction_fit, run_original, run_rescaled,
                                step_original, step_rescaled)
from fastdiff.experiments import generic_datum, separable_datum


@pytest.fixture(scope="module")
def small():
    return Case(3.0, 100, m=8)


@pytest.fixture(scope="module")
def shadow(small):
    """Bisected run from phi + 0.05 e_2 (coarse grid, ds = 0.02)."""
    cfg = EvolutionConfig(q=3.0, dt=0.02, dt_max=0.02)
    shape = small.profile.phi + 0.05 * small.spec.eigvecs[1]
    theta, traj = amplitude_bisection(shape, cfg, small.ops, small.profile, small.spec)
    return cfg, shape, theta, traj


def test_config_validation():
    with pytest.raises(ValueError):
        EvolutionConfig(q=3.0, dt=1.0, dt_max=0.5)
    with pytest.raises(ValueError):
        EvolutionConfig(q=3.0, dt_min=0.0)
    with pytest.raises(ValueError):
        EvolutionConfig(q=3.0, blowup_threshold=1.0, extinction_threshold=2.0)
    with pytest.raises(ValueError):
        EvolutionConfig(q=2.0)


# -- original flow ------------------------------------------------------------------

def test_separable_single_step(small):
    # u0 = T^(1/(q-2)) phi evolves as (T - t)^(1/(q-2)) phi; one implicit step is O(dt^2) off
    p = small.profile
    cfg = EvolutionConfig(q=3.0)
    errs = []
    for dt in (4e-3, 2e-3, 1e-3):
        u = step_original(separable_datum(p, 1.0), dt, cfg, small.ops)
        errs.append(np.max(np.abs(u - (1.0 - dt) * p.phi)) / p.phi.max())
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.05)
    assert errs[1] / errs[2] == pytest.approx(4.0, rel=0.05)


@pytest.mark.parametrize("q", [2.5, 3.0])
def test_separable_first_order_in_time(q):
    case = Case(q, 100, m=None)
    p = case.profile
    cfg = EvolutionConfig(q=q, dt=1e-3, dt_max=0.1)
    errs = []
    for dt in (0.02, 0.01, 0.005):
        u = separable_datum(p, 1.0)
        for _ in range(round(0.5 / dt)):
            u = step_original(u, dt, cfg, case.ops)
        errs.append(np.max(np.abs(u - 0.5 ** (1 / (q - 2)) * p.phi)))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(np.abs(orders - 1.0) < 0.1)


def test_separable_extinction_time(small):
    cfg = EvolutionConfig(q=3.0, dt=1e-3)
    traj = run_original(separable_datum(small.profile, 1.0), cfg, small.ops)
    assert traj.outcome == "extinct"
    t_star, quality = estimate_extinction_time(traj, 3.0)
    assert abs(t_star - 1.0) <= 1e-3 and quality > 0.999
    assert traj.meta["dissipation_violations"] == 0
    # adaptive steps shrink towards extinction
    dt = np.diff(traj.column("t"))
    assert dt[-1] < 0.1 * dt.max()


def test_extinction_time_first_order_in_step_control(small):
    errs = []
    for rc in (2e-3, 1e-3):
        cfg = EvolutionConfig(q=3.0, dt=1e-3, rel_change=rc)
        t_star, _ = estimate_extinction_time(run_original(separable_datum(small.profile, 1.0), cfg,
                                                          small.ops), 3.0)
        errs.append(abs(t_star - 1.0))
    assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.1)


@pytest.mark.parametrize("q", [2.5, 3.0, 4.0])
def test_generic_envelope(q):
    case = Case(q, 100, m=None)
    u0 = generic_datum(case.grid, 5.0)
    cfg = EvolutionConfig(q=q, dt=1e-3)
    traj = run_original(u0, cfg, case.ops)
    t_star, _ = estimate_extinction_time(traj, q)
    lo, hi = extinction_envelope(traj, t_star, q)
    assert 0 < lo <= hi < math.inf and hi / lo <= 3.0
    assert traj.meta["dissipation_violations"] == 0
    # positivity is preserved
    u = step_original(u0, 1e-2, cfg, case.ops)
    assert np.all(u > 0)


def test_original_records(small):
    cfg = EvolutionConfig(q=3.0, dt=1e-3, horizon=0.05)
    traj = run_original(small.profile.phi, cfg, small.ops)
    assert traj.outcome == "horizon"
    s0 = traj.samples[0]
    assert s0.h1 == pytest.approx(small.profile.h1_norm)
    assert s0.J == pytest.approx(small.profile.energy)
    assert s0.lq == pytest.approx(small.profile.lq_norm)


def test_extinction_fit_errors():
    t = np.linspace(0, 1, 5)
    with pytest.raises(ValueError):
        extinction_fit(t, 1 - t + 1e-3, 3.0)
    with pytest.raises(ValueError):
        extinction_fit(np.linspace(0, 1, 50), np.ones(50), 3.0)


def test_rejects_bad_fields(small):
    cfg = EvolutionConfig(q=3.0)
    bad = small.profile.phi.copy()
    bad[3] = np.nan
    with pytest.raises(ValueError):
        step_original(bad, 1e-3, cfg, small.ops)
    with pytest.raises(ValueError):
        run_original(np.zeros(small.grid.n), cfg, small.ops)


def test_step_failure_surfaces(small):
    cfg = EvolutionConfig(q=3.0, max_newton=1, dt_min=1e-3, dt=1e-2)
    with pytest.raises(StepFailure):
        step_original(generic_datum(small.grid, 50.0), 1e-2, cfg, small.ops)


# -- rescaled flow --------------------------------------------------------------------

def test_fixed_point(small):
    cfg = EvolutionConfig(q=3.0)
    v = step_rescaled(small.profile.phi, 0.01, cfg, small.ops)
    assert np.max(np.abs(v - small.profile.phi)) <= 1e-10 * small.profile.phi.max()


def test_rescaled_step_limit(small):
    cfg = EvolutionConfig(q=3.0, dt_max=1.0)
    with pytest.raises(ValueError):
        step_rescaled(small.profile.phi, 0.5, cfg, small.ops)  # lam_q ds = 1


@pytest.mark.parametrize("factor,outcome", [(1.0, "converged"), (0.5, "extinct"), (2.0, "blowup")])
def test_rescaled_outcomes(small, factor, outcome):
    cfg = EvolutionConfig(q=3.0, dt=0.02, dt_max=0.02)
    traj = run_rescaled(factor * small.profile.phi, cfg, small.ops, small.profile, small.spec)
    assert traj.outcome == outcome
    if factor == 1.0:
        assert len(traj.samples) == 1
    assert traj.meta["dissipation_violations"] == 0
    assert traj.meta["positivity_violations"] == 0


def test_bisection_on_profile(small):
    cfg = EvolutionConfig(q=3.0, dt=0.02, dt_max=0.02)
    theta, _ = amplitude_bisection(small.profile.phi, cfg, small.ops, small.profile)
    assert abs(theta - 1.0) <= 1e-6


def test_bisection_perturbed(small, shadow):
    cfg, shape, theta, traj = shadow
    assert 0.8 < theta < 1.2
    lo, hi = traj.meta["bracket"]
    assert hi - lo <= 1e-12 * theta
    # monotone classification on either side of theta*
    below = run_rescaled(theta * (1 - 1e-6) * shape, cfg, small.ops, small.profile, record=False)
    above = run_rescaled(theta * (1 + 1e-6) * shape, cfg, small.ops, small.profile, record=False)
    assert (below.outcome, above.outcome) == ("extinct", "blowup")
    s = traj.times
    gap = traj.column("J_gap")
    window = dg.default_window(s, gap)
    fit = dg.fit_rate(s, gap, window)
    assert fit.r_squared > 0.999 and fit.lambda_hat > 0
    assert traj.meta["dissipation_violations"] == 0
    assert np.all(gap[s <= window[1]] >= -1e-8)


def test_bisection_bracket_failure(small):
    cfg = EvolutionConfig(q=3.0, dt=0.02, dt_max=0.02)
    shape = small.profile.phi + 0.05 * small.spec.eigvecs[1]
    with pytest.raises(ValueError):
        amplitude_bisection(shape, cfg, small.ops, small.profile, max_expand=1, factor=1.0 + 1e-12)
    with pytest.raises(ValueError):
        amplitude_bisection(np.zeros(small.grid.n), cfg, small.ops, small.profile)


def test_relative_error_decays(small, shadow):
    _, _, _, traj = shadow
    s = traj.times
    delta = traj.column("delta_sup")
    window = dg.default_window(s, traj.column("J_gap"))
    fit = dg.fit_rate(s, delta, window)
    assert fit.lambda_hat > 0


def test_trajectory_csv(small, shadow, tmp_path):
    _, _, _, traj = shadow
    path = tmp_path / "t.csv"
    traj.write_csv(path)
    lines = path.read_text().splitlines()
    head = lines[0].split(",")
    assert head[:7] == ["s", "J", "J_minus_Jphi", "entropy", "h1_err", "delta_sup", "hneg_residual"]
    assert head[7:] == [f"sigma_{j}" for j in range(1, small.spec.m + 1)]
    assert len(lines) == len(traj.samples) + 1
    assert float(lines[1].split(",")[2]) == traj.samples[0].J_gap


def test_rescaled_without_spectrum_records_no_sigma(small):
    cfg = EvolutionConfig(q=3.0, dt=0.02, dt_max=0.02, horizon=0.1)
    traj = run_rescaled(1.001 * small.profile.phi, cfg, small.ops, small.profile)
    assert traj.outcome == "horizon"
    assert traj.samples[-1].sigma.size == 0
    assert h1_norm(small.ops, small.profile.phi) == pytest.approx(small.profile.h1_norm)
