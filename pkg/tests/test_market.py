import dataclasses
import math

import numpy as np
import pytest

from hawkesmfg.hawkes import simulate_hawkes
from hawkesmfg.market import (ConstantValue, FixedPath, StrategyProfile, build_nash_profile, estimate_objective,
                              mean_log_wealth_consistency, phi_i, profile_controls, simulate_market, solve_phi_i)
from hawkesmfg.meanfield import solve_equilibrium
from hawkesmfg.model import AgentType, JumpRateFn, MeanFieldParams, PopulationSpec, uniform_grid


@pytest.fixture(scope="module")
def eq100():
    p = MeanFieldParams()
    ip, ep = solve_equilibrium(p, 100)
    return p, ip, ep


def test_agent_root_equals_mean_field_root(eq100):
    p, ip, ep = eq100
    k = 30
    root = solve_phi_i(ip.lambda_f[k], p.o, ep.pi_star[k], p.o.sigma0)
    assert root == pytest.approx(ep.pi_star[k], abs=1e-12)


def test_agent_root_without_competition_ignores_mean_field():
    o = AgentType(theta=0.0)
    assert solve_phi_i(0.5, o, 0.1, 0.2) == solve_phi_i(0.5, o, 0.9, 0.2)


def test_agent_root_decreases_in_intensity(eq100):
    p, ip, ep = eq100
    k = 30
    assert solve_phi_i(2 * ip.lambda_f[k], p.o, ep.pi_star[k], p.o.sigma0) < ep.pi_star[k]


def test_agent_root_can_be_negative():
    o = AgentType(b=0.01, theta=1.0, sigma0=0.5, gamma=0.9)
    root = solve_phi_i(0.3, o, 0.8, 0.5)
    assert root < 0
    assert abs(phi_i(root, 0.3, o, 0.8, 0.5)) <= 1e-12


def test_agent_root_vectorised(eq100):
    p, ip, ep = eq100
    roots = solve_phi_i(ip.lambda_f, p.o, ep.pi_star, p.o.sigma0)
    assert roots.shape == ep.pi_star.shape
    assert np.max(np.abs(roots - ep.pi_star)) <= 1e-12


def test_nash_profile_matches_mean_field_without_contagion():
    # dt = 0.01 keeps the RK4 factor within 1e-12 of the exact flow used by the kernel
    p = MeanFieldParams(o=AgentType(beta=0.0))
    ip, ep = solve_equilibrium(p, 1000)
    pop = PopulationSpec.from_type(p.o, 5)
    hp = simulate_hawkes(pop, p.f, p.T, ep.grid, 3)
    ctrl = profile_controls(build_nash_profile(pop, ep), pop, p.f, hp)
    assert np.max(np.abs(ctrl - ep.pi_star[:-1, None])) <= 1e-10


def test_nash_profile_bounded_and_deterministic(eq100):
    p, ip, ep = eq100
    pop = PopulationSpec.from_type(p.o, 16, 0.5)
    prof = build_nash_profile(pop, ep)
    hp = simulate_hawkes(pop, p.f, p.T, ep.grid, 4)
    a = profile_controls(prof, pop, p.f, hp)
    b = profile_controls(prof, pop, p.f, hp)
    assert np.array_equal(a, b)
    assert np.all(a < 1 - p.eps0) and np.all(a > -1e6)


def test_controls_are_predictable(eq100):
    p, ip, ep = eq100
    pop = PopulationSpec.from_type(p.o, 8)
    prof = build_nash_profile(pop, ep)
    hp = simulate_hawkes(pop, p.f, p.T, ep.grid, 6)
    k = 40
    other = hp.factor_class.copy()
    other[k + 1:] = np.random.default_rng(0).uniform(0, 2, other[k + 1:].shape)
    changed = dataclasses.replace(hp, factor_class=other)
    a = profile_controls(prof, pop, p.f, hp)
    b = profile_controls(prof, pop, p.f, changed)
    assert np.array_equal(a[:k + 1], b[:k + 1])


def test_zero_allocation_grows_at_riskless_rate():
    pop = PopulationSpec.from_type(AgentType(x0=2.0), 3)
    grid = uniform_grid(5.0, 50)
    mp = simulate_market(pop, JumpRateFn(), StrategyProfile.constant(3, 0.0), grid, 1, r=0.03)
    assert np.allclose(mp.log_wealth, np.log(2.0) + 0.03 * grid[:, None], atol=1e-13, rtol=0)


def test_lognormal_without_jumps():
    o = AgentType()
    pop = PopulationSpec(1, (o,))
    grid = uniform_grid(2.0, 20)
    pi, paths = 0.5, 4000
    logs = np.array([simulate_market(pop, JumpRateFn.constant(0.0), StrategyProfile.constant(1, pi), grid,
                                     np.random.SeedSequence(1, spawn_key=(k,))).log_wealth[-1, 0]
                     for k in range(paths)])
    var = pi ** 2 * (o.sigma ** 2 + o.sigma0 ** 2) * 2.0
    mean = (o.b * pi - 0.5 * var / 2.0) * 2.0
    assert abs(logs.mean() - mean) <= 3 * math.sqrt(var / paths)
    assert abs(logs.var(ddof=1) - var) <= 3 * var * math.sqrt(2 / (paths - 1))


def test_jump_multiplies_wealth_by_one_minus_pi():
    o = AgentType()
    pop = PopulationSpec(1, (o,))
    grid = uniform_grid(1.0, 10)
    hp = simulate_hawkes(pop, JumpRateFn(M=50.0), 1.0, grid, 1)
    forced = dataclasses.replace(hp, times=np.array([0.55]), components=np.array([0]))
    none = dataclasses.replace(hp, times=np.array([]), components=np.array([], dtype=np.int64))
    prof = StrategyProfile.constant(1, 0.4)
    a = simulate_market(pop, JumpRateFn(), prof, grid, 7, hawkes=forced).log_wealth[:, 0]
    b = simulate_market(pop, JumpRateFn(), prof, grid, 7, hawkes=none).log_wealth[:, 0]
    assert np.array_equal(a[:6], b[:6])
    assert np.allclose(a[6:] - b[6:], math.log(0.6), atol=1e-14)


def test_inadmissible_strategy_rejected():
    pop = PopulationSpec.from_type(AgentType(), 2)
    with pytest.raises(ValueError):
        simulate_market(pop, JumpRateFn(), StrategyProfile.constant(2, 1.0), uniform_grid(1.0, 4), 0)
    with pytest.raises(ValueError):
        simulate_market(pop, JumpRateFn(), StrategyProfile((ConstantValue(0.2), FixedPath(np.ones(3)))),
                        uniform_grid(1.0, 4), 0)


def test_common_random_numbers_across_profiles(eq100):
    p, ip, ep = eq100
    pop = PopulationSpec.from_type(p.o, 4)
    base = build_nash_profile(pop, ep)
    dev = base.with_agent(1, ConstantValue(0.1))
    a = simulate_market(pop, p.f, base, ep.grid, 9)
    b = simulate_market(pop, p.f, dev, ep.grid, 9)
    assert np.array_equal(a.hawkes.times, b.hawkes.times)
    assert np.array_equal(a.w0, b.w0) and np.array_equal(a.wi, b.wi)
    keep = [0, 2, 3]
    assert np.array_equal(a.log_wealth[:, keep], b.log_wealth[:, keep])
    assert not np.array_equal(a.log_wealth[:, 1], b.log_wealth[:, 1])


def test_full_relative_concern_cancels_wealth():
    o = AgentType(theta=1.0)
    pop = PopulationSpec(1, (o,))
    est = estimate_objective(pop, JumpRateFn(), StrategyProfile.constant(1, 0.3), 0, 50, 1, uniform_grid(1.0, 10))
    assert est.mean == pytest.approx(2.5, abs=1e-12) and est.std_error < 1e-12


def test_standard_error_scaling():
    pop = PopulationSpec(1, (AgentType(theta=0.0),))
    grid = uniform_grid(5.0, 10)
    prof = StrategyProfile.constant(1, 0.5)
    a = estimate_objective(pop, JumpRateFn(), prof, 0, 2000, 3, grid)
    b = estimate_objective(pop, JumpRateFn(), prof, 0, 4000, 3, grid)
    assert b.std_error / a.std_error == pytest.approx(1 / math.sqrt(2), rel=0.2)
    with pytest.raises(ValueError):
        estimate_objective(pop, JumpRateFn(), prof, 0, 1, 3, grid)


def test_consistency_without_idiosyncratic_risk():
    p = MeanFieldParams(o=AgentType(sigma=1e-300), f=JumpRateFn.constant(0.0))
    ip, ep = solve_equilibrium(p, 100)
    assert mean_log_wealth_consistency(p, ep, ip, 16, 2) <= 1e-12


def test_consistency_reproducible(eq100):
    p, ip, ep = eq100
    a = mean_log_wealth_consistency(p, ep, ip, 500, 4)
    assert a == mean_log_wealth_consistency(p, ep, ip, 500, 4)
    assert a > 0
    with pytest.raises(ValueError):
        mean_log_wealth_consistency(p, ep, ip, 1, 4)
