import io
import math

import numpy as np
import pytest

from hawkesmfg.hawkes import (HawkesState, apply_jump, decay_factor, read_jumps, replay_factors,
                              simulate_hawkes, write_jumps)
from hawkesmfg.model import AgentType, JumpRateFn, PopulationSpec, eval_f, uniform_grid


def _seed(k, base=0):
    return np.random.SeedSequence(base, spawn_key=(k,))


def test_decay_factor():
    assert decay_factor(0.1, 0.5, 0.6, 0.0) == 0.1
    assert decay_factor(0.1, 0.5, 0.6, 2.0) == pytest.approx(0.6 - 0.5 * math.exp(-1.0))
    with pytest.raises(ValueError):
        decay_factor(0.1, 0.5, 0.6, -1.0)


def test_apply_jump_scales_with_n():
    o = AgentType()
    pop = PopulationSpec.from_type(o, 4)
    st = HawkesState(0.0, pop.column("lambda0"), np.zeros(4, dtype=np.int64))
    after = apply_jump(st, 2, pop)
    assert np.allclose(after.lambda_factors, 0.1 + 0.4 * 0.2 / 4)
    assert list(after.counts) == [0, 0, 1, 0]
    with pytest.raises(IndexError):
        apply_jump(st, 4, pop)


@pytest.mark.parametrize("pert", [0.0, 0.5])
def test_kernel_matches_reference_replay(pert):
    pop = PopulationSpec.from_type(AgentType(), 6, pert)
    grid = uniform_grid(10.0, 50)
    hp = simulate_hawkes(pop, JumpRateFn(), 10.0, grid, 42)
    assert len(hp.times) > 0 and np.all(np.diff(hp.times) > 0)
    assert np.max(np.abs(replay_factors(hp, pop) - hp.factor_snapshots)) < 1e-12


def test_same_seed_same_path():
    pop = PopulationSpec.from_type(AgentType(), 8)
    grid = uniform_grid(5.0, 10)
    a = simulate_hawkes(pop, JumpRateFn(), 5.0, grid, _seed(3))
    b = simulate_hawkes(pop, JumpRateFn(), 5.0, grid, _seed(3))
    assert np.array_equal(a.times, b.times) and np.array_equal(a.components, b.components)


def test_zero_rate_has_no_jumps():
    pop = PopulationSpec.from_type(AgentType(), 3)
    hp = simulate_hawkes(pop, JumpRateFn.constant(0.0), 10.0, uniform_grid(10.0, 10), 1)
    assert len(hp.times) == 0 and np.all(hp.compensator == 0)


def test_inhomogeneous_poisson_mean():
    o = AgentType(beta=0.0)
    pop = PopulationSpec(1, (o,))
    T, paths = 10.0, 4000
    grid = uniform_grid(T, 10)
    counts = np.array([len(simulate_hawkes(pop, JumpRateFn(), T, grid, _seed(k, 9)).times) for k in range(paths)])
    exact = 0.6 * T + (0.1 - 0.6) * (1 - math.exp(-0.5 * T)) / 0.5
    assert abs(counts.mean() - exact) <= 3 * counts.std(ddof=1) / math.sqrt(paths)


def test_compensator_closed_form_without_contagion():
    o = AgentType(beta=0.0)
    pop = PopulationSpec(1, (o,))
    grid = uniform_grid(10.0, 20)
    hp = simulate_hawkes(pop, JumpRateFn(), 10.0, grid, 5)
    exact = 0.6 * grid + (0.1 - 0.6) * (1 - np.exp(-0.5 * grid)) / 0.5
    assert np.allclose(hp.compensator[:, 0], exact, atol=1e-12)


def test_compensator_quadrature_beyond_cap():
    # factor starts above the cap, so the compensator goes through Gauss-Legendre
    o = AgentType(beta=0.0, lambda0=150.0, lambda_inf=0.5, alpha=0.1)
    fn = JumpRateFn()
    pop = PopulationSpec(1, (o,))
    grid = uniform_grid(1.0, 4)
    hp = simulate_hawkes(pop, fn, 1.0, grid, 2)
    from scipy import integrate
    f = lambda s: eval_f(fn, 0.5 + 149.5 * math.exp(-0.1 * s))
    exact = integrate.quad(f, 0.0, 1.0, epsabs=1e-12, limit=200)[0]
    assert hp.compensator[-1, 0] == pytest.approx(exact, rel=1e-7)


def test_local_and_global_bounds_agree_in_law():
    pop = PopulationSpec.from_type(AgentType(), 4)
    grid = uniform_grid(5.0, 5)
    fn = JumpRateFn(M=2.0)
    res = {}
    for mode in ("local", "global"):
        n = np.array([len(simulate_hawkes(pop, fn, 5.0, grid, _seed(k, 1 if mode == "local" else 2),
                                          dominating=mode).times) for k in range(3000)])
        res[mode] = (n.mean(), n.var(ddof=1))
    diff = res["local"][0] - res["global"][0]
    se = math.sqrt((res["local"][1] + res["global"][1]) / 3000)
    assert abs(diff) <= 4 * se


def test_counts_and_truncation():
    pop = PopulationSpec.from_type(AgentType(), 5)
    grid = uniform_grid(10.0, 40)
    hp = simulate_hawkes(pop, JumpRateFn(), 10.0, grid, 8)
    counts = hp.counts_on_grid()
    assert counts.shape == (41, 5) and counts[-1].sum() == len(hp.times)
    assert np.all(np.diff(counts, axis=0) >= 0)
    cut = hp.truncated(5.0)
    assert np.all(cut.times <= 5.0)
    assert np.array_equal(cut.counts_on_grid()[:21], counts[:21])


def test_jump_dump_round_trip():
    pop = PopulationSpec.from_type(AgentType(), 7)
    hp = simulate_hawkes(pop, JumpRateFn(), 10.0, uniform_grid(10.0, 10), 3)
    buf = io.BytesIO()
    write_jumps(hp, buf)
    assert len(buf.getvalue()) == 16 + 12 * len(hp.times)
    buf.seek(0)
    n, times, comps = read_jumps(buf)
    assert n == 7 and np.array_equal(times, hp.times) and np.array_equal(comps, hp.components)
    with pytest.raises(ValueError):
        read_jumps(io.BytesIO(b"nope" + bytes(12)))


def test_bad_grid_rejected():
    pop = PopulationSpec.from_type(AgentType(), 2)
    with pytest.raises(ValueError):
        simulate_hawkes(pop, JumpRateFn(), 10.0, np.array([0.0, 5.0]), 1)
