import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hawkesmfg.model import (AgentType, ConfigError, JumpRateFn, PopulationSpec, RunConfig, config_digest,
                             dump_config, eval_f, eval_f_prime, jitter_agents, load_config, path_streams)


def test_defaults_from_empty_document():
    p, pop, run = load_config("{}")
    o = p.o
    assert (o.gamma, o.theta, o.sigma, o.sigma0, o.b) == (0.4, 0.5, 0.3, 0.2, 0.2)
    assert (o.lambda0, o.lambda_inf, o.alpha, o.beta, o.varsigma) == (0.1, 0.6, 0.5, 0.4, 0.2)
    assert p.eps0 == 1e-10 and p.r == 0.0 and p.T == 10.0
    assert pop.n == 1 and run.time_steps == 10_000


@pytest.mark.parametrize("doc, path", [
    ({"limiting_type": {"gamma": 1.2}}, "limiting_type.gamma"),
    ({"limiting_type": {"sigma": -0.1}}, "limiting_type.sigma"),
    ({"limiting_type": {"theta": 1.5}}, "limiting_type.theta"),
    ({"market": {"T": 0}}, "market.T"),
    ({"market": {"f": {"delta0": 0}}}, "market.f.delta0"),
    ({"population": {"n": 0}}, "population.n"),
    ({"run": {"time_steps": 1}}, "run.time_steps"),
    ({"run": {"mc_paths": 2.5}}, "run.mc_paths"),
])
def test_constraint_violation_carries_field_path(doc, path):
    with pytest.raises(ConfigError) as exc:
        load_config(json.dumps(doc))
    assert exc.value.path == path


def test_unknown_keys_and_bad_json_rejected():
    with pytest.raises(ConfigError):
        load_config('{"market": {"rate": 1}}')
    with pytest.raises(ConfigError):
        load_config('{"extra": {}}')
    with pytest.raises(ConfigError):
        load_config("{not json")


def test_zero_contagion_allowed():
    assert AgentType(beta=0.0, varsigma=0.0).beta == 0.0


def test_config_round_trip_is_bit_exact():
    doc = {"limiting_type": {"b": 0.1 + 0.2, "sigma": 1 / 3}, "market": {"r": 0.01, "T": 7.5},
           "population": {"n": 4, "perturbation": 0.3}, "run": {"seed": 2 ** 63 + 5}}
    parsed = load_config(json.dumps(doc))
    again = load_config(dump_config(*parsed))
    assert again[0] == parsed[0] and again[1] == parsed[1] and again[2] == parsed[2]
    assert again[0].o.b == 0.1 + 0.2


def test_digest_ignores_output_directory_only():
    p, pop, run = load_config("{}")
    moved = RunConfig(run.time_steps, run.mc_paths, run.seed, "elsewhere")
    reseeded = RunConfig(run.time_steps, run.mc_paths, run.seed + 1, run.out)
    assert config_digest(p, pop, run) == config_digest(p, pop, moved)
    assert config_digest(p, pop, run) != config_digest(p, pop, reseeded)


def test_capped_linear_values():
    fn = JumpRateFn()
    assert eval_f(fn, 0.5) == 0.5
    assert eval_f(fn, 0.0) == 0.0
    assert 100.0 < eval_f(fn, 100.005) < 100.01
    assert eval_f(fn, 1e6) == pytest.approx(100.01)
    assert eval_f_prime(fn, 3.0) == 1.0
    assert eval_f_prime(fn, 200.0) == 0.0


def test_f_bounded_monotone_on_dense_grid():
    fn = JumpRateFn()
    x = np.linspace(0, 2 * (fn.M + fn.delta0), 10_000)
    x = np.union1d(x, np.linspace(fn.M, fn.M + fn.delta0, 2001))
    v = eval_f(fn, x)
    assert np.all(v >= 0) and np.all(v <= fn.M + fn.delta0)
    assert np.all(np.diff(v) >= 0)


def test_f_prime_matches_finite_differences():
    fn = JumpRateFn()
    x = np.concatenate([np.linspace(99.9, 100.02, 4000), np.linspace(0.1, 300, 2000)])
    x = x[(np.abs(x - fn.M) > 1e-8) & (np.abs(x - fn.M - fn.delta0) > 1e-8)]
    dist = np.minimum(np.abs(x - fn.M), np.abs(x - fn.M - fn.delta0))
    h = np.minimum(1e-6, 0.5 * dist)
    fd = (eval_f(fn, x + h) - eval_f(fn, x - h)) / (2 * h)
    assert np.max(np.abs(fd - eval_f_prime(fn, x))) < 1e-6


def test_f_c1_across_knots():
    fn = JumpRateFn()
    for knot in (fn.M, fn.M + fn.delta0):
        left, right = eval_f_prime(fn, knot - 1e-9), eval_f_prime(fn, knot + 1e-9)
        assert abs(left - right) < 1e-6


def test_negative_argument_rejected():
    with pytest.raises(ValueError):
        eval_f(JumpRateFn(), -1e-9)
    with pytest.raises(ValueError):
        eval_f_prime(JumpRateFn(), np.array([1.0, -1.0]))


def test_custom_tables():
    assert eval_f(JumpRateFn.constant(0.7), 12.0) == 0.7
    fn = JumpRateFn(kind="custom", table=((0, 0), (1, 2), (3, 2.5)))
    x = np.linspace(0, 5, 1001)
    assert np.all(np.diff(eval_f(fn, x)) >= 0)
    assert eval_f(fn, 1.0) == pytest.approx(2.0)
    assert eval_f(fn, 10.0) == 2.5
    with pytest.raises(ConfigError):
        JumpRateFn(kind="custom", table=((0, 1), (1, 0.5)))
    with pytest.raises(ConfigError):
        JumpRateFn(kind="custom", table=((0.5, 1),))


@settings(max_examples=200, deadline=None)
@given(a=st.floats(0, 500), b=st.floats(0, 500))
def test_f_monotone_property(a, b):
    fn = JumpRateFn()
    lo, hi = min(a, b), max(a, b)
    assert eval_f(fn, lo) <= eval_f(fn, hi) <= fn.M + fn.delta0


def test_dirac_population():
    o = AgentType()
    pop = PopulationSpec.from_type(o, 4, 0.0)
    assert pop.agents == (o,) * 4
    types, index = pop.classes()
    assert len(types) == 1 and list(index) == [0, 0, 0, 0]


def test_jitter_rule_and_rate():
    o = AgentType()
    agents = jitter_agents(o, 6, 0.5)
    assert agents[0].b == pytest.approx(o.b * (1 - 0.5 / 6))
    assert agents[1].b == pytest.approx(o.b * (1 + 0.5 / 6))
    assert PopulationSpec.from_type(o, 6, 0.5).classes()[0].__len__() == 2
    # theta stays admissible
    assert all(a.theta <= 1 for a in jitter_agents(o.replace(theta=1.0), 3, 0.9))
    # deviation of the empirical mean decays like 1/n
    dev = [abs(np.mean([a.b for a in jitter_agents(o, n, 0.5)]) - o.b) for n in (11, 101, 1001)]
    assert dev[1] < dev[0] / 5 and dev[2] < dev[1] / 5


def test_path_streams_independent_and_reproducible():
    a = [np.random.default_rng(s).random() for s in path_streams(3, 7)]
    b = [np.random.default_rng(s).random() for s in path_streams(3, 7)]
    c = [np.random.default_rng(s).random() for s in path_streams(3, 8)]
    assert a == b and len(set(a)) == 3 and a != c
