"""n-player market: wealth simulation under strategy profiles, the
mean-field based approximate Nash profile and Monte Carlo objectives."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import integrate

from .hawkes import HawkesPath, simulate_hawkes
from .meanfield import (EquilibriumPath, IntensityPath, NumericalError, PI_UPPER,
                        common_noise, log_m_star, safeguarded_newton)
from .model import AgentType, JumpRateFn, MeanFieldParams, PopulationSpec, eval_f, path_seed, split_streams
from .parallel import ordered_map

D0_FLOOR = -1e6


# ---------------------------------------------------------------------------
# Per-agent equilibrium map
# ---------------------------------------------------------------------------

def phi_i(pi, lam, o_i: AgentType, pi_star_t, sigma0: float):
    """Agent-level first-order condition. The competition term uses the
    mean-field allocation ``pi_star_t`` and the limiting common volatility
    ``sigma0``; time enters only through ``pi_star_t``."""
    g = o_i.gamma
    pi = np.asarray(pi, dtype=float)
    with np.errstate(invalid="ignore", divide="ignore"):
        return ((g - 1.0) * (o_i.sigma ** 2 + o_i.sigma0 ** 2) * pi
                - o_i.theta * g * o_i.sigma0 * sigma0 * np.asarray(pi_star_t, dtype=float)
                - lam * (1.0 - pi) ** (g - 1.0) + lam + o_i.b)


def _phi_i_dpi(pi, lam, o_i: AgentType):
    g = o_i.gamma
    with np.errstate(invalid="ignore", divide="ignore"):
        return (g - 1.0) * (o_i.sigma ** 2 + o_i.sigma0 ** 2) + (g - 1.0) * lam * (1.0 - pi) ** (g - 2.0)


def solve_phi_i(lam, o_i: AgentType, pi_star_t, sigma0: float, tol: float = 1e-14):
    """Root of the agent-level condition in pi on (-inf, 1); vectorised over
    ``lam`` and ``pi_star_t``.

    The bracket starts at ``[0, 1 - 1e-15]`` and its left end moves out
    (0, -1, -3, -7, ...) until the function is nonnegative there, because
    the competition term can push the root below zero. With ``lam == 0`` the
    linear closed form is returned, possibly >= 1.
    """
    lam_a, ps = np.broadcast_arrays(np.asarray(lam, dtype=float), np.asarray(pi_star_t, dtype=float))
    scalar = lam_a.ndim == 0
    lam_a = np.atleast_1d(lam_a).astype(float)
    ps = np.atleast_1d(ps).astype(float)
    if np.any(~(lam_a >= 0)):
        raise ValueError("lambda must be >= 0")
    out = np.empty_like(lam_a)
    zero = lam_a == 0
    if zero.any():
        c = o_i.b - o_i.theta * o_i.gamma * o_i.sigma0 * sigma0 * ps[zero]
        out[zero] = c / ((1.0 - o_i.gamma) * (o_i.sigma ** 2 + o_i.sigma0 ** 2))
    pos = ~zero
    if pos.any():
        lp, pp = lam_a[pos], ps[pos]
        F = lambda x: phi_i(x, lp, o_i, pp, sigma0)
        lo = np.zeros(lp.shape)
        while True:
            neg = F(lo) < 0
            if not neg.any():
                break
            lo = np.where(neg, 2.0 * lo - 1.0, lo)
            if np.any(lo < D0_FLOOR):
                raise NumericalError("agent root fell below the admissibility floor")
        hi = np.full(lp.shape, PI_UPPER)
        hi = np.where(F(hi) > 0, np.nextafter(1.0, 0.0), hi)
        x0 = np.where(lo < 0, 0.5 * (lo + hi), 0.5)
        out[pos] = safeguarded_newton(F, lambda x: _phi_i_dpi(x, lp, o_i), lo, hi, x0, tol)
    if np.any(out < D0_FLOOR):
        raise NumericalError("agent root fell below the admissibility floor")
    return float(out[0]) if scalar else out.reshape(np.shape(np.broadcast_arrays(lam, pi_star_t)[0]))


# ---------------------------------------------------------------------------
# Strategy profiles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NashFeedback:
    """``pi_t = phi_i(t, f(factor_i(t)))`` evaluated on the running path."""


@dataclass(frozen=True)
class FixedPath:
    values: np.ndarray  # one value per grid node


@dataclass(frozen=True)
class ConstantValue:
    value: float


@dataclass(frozen=True)
class StrategyProfile:
    strategies: tuple
    ep: Optional[EquilibriumPath] = None

    def with_agent(self, i: int, strategy) -> "StrategyProfile":
        s = list(self.strategies)
        s[i] = strategy
        return StrategyProfile(tuple(s), self.ep)

    @classmethod
    def constant(cls, n: int, value: float) -> "StrategyProfile":
        return cls((ConstantValue(float(value)),) * n)


def build_nash_profile(pop: PopulationSpec, ep: EquilibriumPath) -> StrategyProfile:
    """Approximate Nash profile built from the mean-field equilibrium."""
    if ep.o is None:
        raise ValueError("equilibrium path does not carry its limiting type")
    return StrategyProfile((NashFeedback(),) * pop.n, ep)


def profile_controls(profile: StrategyProfile, pop: PopulationSpec, fn: JumpRateFn,
                     hawkes: HawkesPath, tol: float = 1e-14) -> np.ndarray:
    """Controls at the left end of every grid interval, shape ``(S, n)``.

    Row k depends only on the path up to ``t_k``.
    """
    grid = hawkes.grid
    S = len(grid) - 1
    out = np.empty((S, pop.n))
    nash = [i for i, s in enumerate(profile.strategies) if isinstance(s, NashFeedback)]
    if nash:
        ep = profile.ep
        if ep is None or len(ep.grid) != len(grid) or not np.allclose(ep.grid, grid, rtol=0, atol=1e-12):
            raise ValueError("Nash feedback needs an equilibrium path on the simulation grid")
        types, index = pop.classes()
        lam_f = eval_f(fn, np.maximum(hawkes.factor_class[:-1], 0.0))
        pi_star = ep.pi_star[:-1]
        for c in np.unique(index[nash]):
            roots = solve_phi_i(lam_f[:, c], types[c], pi_star, ep.o.sigma0, tol)
            cols = [i for i in nash if index[i] == c]
            out[:, cols] = roots[:, None]
    for i, s in enumerate(profile.strategies):
        if isinstance(s, ConstantValue):
            out[:, i] = s.value
        elif isinstance(s, FixedPath):
            v = np.asarray(s.values, dtype=float)
            if v.shape != (S + 1,):
                raise ValueError("fixed path must have one value per grid node")
            out[:, i] = v[:-1]
        elif not isinstance(s, NashFeedback):
            raise TypeError(f"unknown strategy {s!r}")
    return out


# ---------------------------------------------------------------------------
# Wealth simulation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MarketPath:
    hawkes: HawkesPath
    w0: np.ndarray
    wi: np.ndarray
    controls: np.ndarray
    log_wealth: np.ndarray  # (S + 1, n)

    @property
    def log_geometric_mean(self) -> np.ndarray:
        return self.log_wealth.mean(axis=1)


@dataclass(frozen=True)
class ObjectiveEstimate:
    mean: float
    std_error: float
    paths: int


class _Agents:
    # per-agent parameter columns, built once per population
    def __init__(self, pop: PopulationSpec):
        self.x0 = pop.column("x0")
        self.b = pop.column("b")
        self.sigma = pop.column("sigma")
        self.sigma0 = pop.column("sigma0")
        self.gamma = pop.column("gamma")
        self.theta = pop.column("theta")


def log_wealth_increments(controls, agents, r, dt, comp_incr, counts, w0, wi):
    """Log-wealth increments per interval for the given controls.

    Between jumps the control is frozen at the interval's left end; the
    jump compensator enters through its exact integral ``comp_incr``; each
    default multiplies wealth by ``1 - pi``.
    """
    pi = controls
    if np.any(pi >= 1):
        raise ValueError("inadmissible strategy: every control must be < 1")
    var = agents.sigma ** 2 + agents.sigma0 ** 2
    dtc = dt[:, None]
    inc = ((r + agents.b * pi - 0.5 * var * pi ** 2) * dtc + pi * comp_incr
           + pi * agents.sigma * wi + pi * agents.sigma0 * w0[:, None])
    if counts is not None:
        hit = counts > 0
        if hit.any():
            inc[hit] += counts[hit] * np.log1p(-pi[hit])
    return inc


def _noise(grid, streams, n):
    w0 = common_noise(grid, streams[1])
    dt = np.diff(grid)
    wi = np.random.default_rng(streams[2]).standard_normal((len(dt), n)) * np.sqrt(dt)[:, None]
    return w0, wi


def simulate_market(pop: PopulationSpec, fn: JumpRateFn, profile: StrategyProfile, grid,
                    seed, r: float = 0.0, hawkes: Optional[HawkesPath] = None,
                    _agents: Optional[_Agents] = None) -> MarketPath:
    """One n-player trajectory under ``profile``.

    ``seed`` (int or SeedSequence) is split into independent streams for
    the jumps, the common noise and the idiosyncratic noise, so profiles
    that differ in one agent see identical randomness. A prebuilt
    ``hawkes`` path replaces the simulated one.
    """
    grid = np.asarray(grid, dtype=float)
    streams = split_streams(seed)
    if hawkes is None:
        hawkes = simulate_hawkes(pop, fn, float(grid[-1]), grid, streams[0])
    agents = _agents or _Agents(pop)
    w0, wi = _noise(grid, streams, pop.n)
    controls = profile_controls(profile, pop, fn, hawkes)
    inc = log_wealth_increments(controls, agents, r, np.diff(grid),
                                np.diff(hawkes.compensator, axis=0), hawkes.interval_counts(), w0, wi)
    logw = np.empty((len(grid), pop.n))
    logw[0] = np.log(agents.x0)
    np.cumsum(inc, axis=0, out=logw[1:])
    logw[1:] += logw[0]
    if not np.all(np.isfinite(logw)):
        raise NumericalError("non-finite log-wealth")
    return MarketPath(hawkes=hawkes, w0=w0, wi=wi, controls=controls, log_wealth=logw)


def relative_utility(log_x_i, log_xbar, gamma, theta):
    """CRRA utility of wealth relative to the geometric mean, in log form."""
    return np.exp(gamma * log_x_i - theta * gamma * log_xbar) / gamma


def estimate_objective(pop: PopulationSpec, fn: JumpRateFn, profile: StrategyProfile, i: int,
                       mc_paths: int, seed: int, grid, r: float = 0.0) -> ObjectiveEstimate:
    """Monte Carlo estimate of agent i's relative-performance objective.

    Path k uses seed ``(seed, k)``, so estimates for different profiles are
    computed with common random numbers.
    """
    if mc_paths < 2:
        raise ValueError("mc_paths must be >= 2")
    if not 0 <= i < pop.n:
        raise IndexError("agent index out of range")
    agents = _Agents(pop)
    g, th = pop.agents[i].gamma, pop.agents[i].theta

    def one(k):
        mp = simulate_market(pop, fn, profile, grid, path_seed(seed, k), r=r, _agents=agents)
        lw = mp.log_wealth[-1]
        return relative_utility(lw[i], lw.mean(), g, th)

    u = np.array(ordered_map(one, range(mc_paths)))
    return ObjectiveEstimate(mean=float(u.mean()), std_error=float(u.std(ddof=1) / math.sqrt(mc_paths)),
                             paths=mc_paths)


def moment_oracle(o: AgentType, r: float, pi: float, T: float, intensity) -> float:
    """Closed-form expected utility for one agent with constant allocation
    ``pi``, no competition and deterministic jump intensity
    ``intensity(t)``::

        x0^g exp(int_0^T g[r + b pi + (g-1) pi^2 (sigma^2+sigma0^2)/2]
                 + ((1-pi)^g + g pi - 1) intensity(s) ds) / g
    """
    g = o.gamma
    var = o.sigma ** 2 + o.sigma0 ** 2
    diff = g * (r + o.b * pi + 0.5 * (g - 1.0) * pi ** 2 * var) * T
    jump, _ = integrate.quad(lambda s: intensity(s), 0.0, T, epsabs=1e-13, epsrel=1e-13, limit=200)
    return o.x0 ** g * math.exp(diff + ((1.0 - pi) ** g + g * pi - 1.0) * jump) / g


# ---------------------------------------------------------------------------
# Consistency of the geometric mean
# ---------------------------------------------------------------------------

def _trapezoid_cells(values, dt):
    return 0.5 * (values[:-1] + values[1:]) * dt


def mean_log_wealth_consistency(p: MeanFieldParams, ep: EquilibriumPath, ip: IntensityPath, K: int,
                                seed, chunk: int = 4096) -> float:
    """Sup over the grid of ``|exp(mean_k log X^k_t) - m*_t|`` for ``K``
    independent representative agents sharing one common-noise path.

    Agents follow the deterministic equilibrium allocation and default at
    the deterministic limiting intensity. Time integrals use the trapezoid
    rule on each cell (jump counts are Poisson with the cell's integrated
    intensity), matching the quadrature of m*, so the two sides differ only
    by idiosyncratic sampling noise.
    """
    if K < 2:
        raise ValueError("K must be >= 2")
    o = p.o
    grid = ep.grid
    dt = np.diff(grid)
    streams = split_streams(seed)
    w0 = common_noise(grid, streams[1])
    log_m = log_m_star(p, ep, w0)
    pi = ep.pi_star
    lam = ip.lambda_f
    with np.errstate(invalid="ignore", divide="ignore"):
        jump_log = np.where(lam == 0, 0.0, lam * np.log1p(-np.minimum(pi, PI_UPPER)))
    cell_rate = _trapezoid_cells(lam, dt)
    cell_jump = _trapezoid_cells(jump_log, dt)
    with np.errstate(invalid="ignore", divide="ignore"):
        weight = np.where(cell_rate > 0, cell_jump / cell_rate, 0.0)
    drift = p.r + (o.b + lam) * pi - 0.5 * (o.sigma ** 2 + o.sigma0 ** 2) * pi ** 2
    common = _trapezoid_cells(drift, dt) + o.sigma0 * pi[:-1] * w0
    rng_w = np.random.default_rng(streams[2])
    rng_n = np.random.default_rng(streams[0])
    idio_sum = np.zeros(len(dt))
    done = 0
    while done < K:
        m = min(chunk, K - done)
        z = rng_w.standard_normal((len(dt), m)) * np.sqrt(dt)[:, None]
        idio_sum += o.sigma * pi[:-1] * z.sum(axis=1)
        if np.any(cell_rate > 0):
            cnt = rng_n.poisson(np.broadcast_to(cell_rate[:, None], (len(dt), m)))
            idio_sum += weight * cnt.sum(axis=1)
        done += m
    mean_log = np.empty(len(grid))
    mean_log[0] = math.log(o.x0)
    mean_log[1:] = mean_log[0] + np.cumsum(common + idio_sum / K)
    return float(np.max(np.abs(np.exp(mean_log) - np.exp(log_m))))
