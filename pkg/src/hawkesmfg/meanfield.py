"""Limiting (mean-field) model: intensity ODE, equilibrium equation, the
deterministic equilibrium path and its adjoint scalars."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit
from scipy.integrate import cumulative_trapezoid

from .model import AgentType, FIELD_NAMES, JumpRateFn, MeanFieldParams, _hermite_scalar, eval_f

PI_UPPER = 1.0 - 1e-15
MAX_ITER = 200


class NumericalError(RuntimeError):
    """A root solve or integration failed to converge."""


# ---------------------------------------------------------------------------
# Intensity ODE
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IntensityPath:
    grid: np.ndarray
    lambda_l: np.ndarray
    lambda_f: np.ndarray


@njit(cache=True)
def _rk4(xs, ys, ds, lam0, alpha, lam_inf, excite, grid):
    out = np.empty(grid.shape[0])
    lam = lam0
    out[0] = lam
    for k in range(grid.shape[0] - 1):
        h = grid[k + 1] - grid[k]
        # RHS: alpha (lam_inf - lam) + beta varsigma f(lam); f is clamped at 0
        # from below so a transient negative stage value cannot leave its domain
        k1 = alpha * (lam_inf - lam) + excite * _hermite_scalar(xs, ys, ds, max(lam, 0.0))[0]
        y = lam + 0.5 * h * k1
        k2 = alpha * (lam_inf - y) + excite * _hermite_scalar(xs, ys, ds, max(y, 0.0))[0]
        y = lam + 0.5 * h * k2
        k3 = alpha * (lam_inf - y) + excite * _hermite_scalar(xs, ys, ds, max(y, 0.0))[0]
        y = lam + h * k3
        k4 = alpha * (lam_inf - y) + excite * _hermite_scalar(xs, ys, ds, max(y, 0.0))[0]
        lam = lam + h * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
        out[k + 1] = lam
    return out


def solve_intensity_ode(p: MeanFieldParams, steps: int, grid: Optional[np.ndarray] = None) -> IntensityPath:
    """Classical RK4 solution of the limiting intensity factor on a uniform
    grid of ``steps`` intervals over [0, T] (or on ``grid`` if given)."""
    if grid is None:
        if steps < 2:
            raise ValueError("steps must be >= 2")
        grid = np.linspace(0.0, p.T, int(steps) + 1)
    grid = np.asarray(grid, dtype=float)
    o = p.o
    xs, ys, ds = p.f.knots
    lam_l = _rk4(xs, ys, ds, o.lambda0, o.alpha, o.lambda_inf, o.beta * o.varsigma, grid)
    lam_f = eval_f(p.f, lam_l)
    return IntensityPath(grid=grid, lambda_l=lam_l, lambda_f=lam_f)


def explicit_intensity(p: MeanFieldParams, t):
    """Closed-form limiting factor, valid while it stays below the cap M."""
    o = p.o
    k = o.alpha - o.beta * o.varsigma
    level = o.alpha * o.lambda_inf / k
    return level + (o.lambda0 - level) * np.exp(-k * np.asarray(t, dtype=float))


def long_run_intensity(o: AgentType) -> float:
    if o.beta * o.varsigma >= o.alpha:
        raise ValueError("no stationary level: beta*varsigma >= alpha")
    return o.alpha * o.lambda_inf / (o.alpha - o.beta * o.varsigma)


# ---------------------------------------------------------------------------
# Equilibrium equation
# ---------------------------------------------------------------------------

def _total_var(o: AgentType) -> float:
    return o.sigma ** 2 + o.sigma0 ** 2


def _phi_raw(pi, lam, o: AgentType):
    g = o.gamma
    with np.errstate(invalid="ignore", divide="ignore"):
        return ((g - 1.0) * _total_var(o) * pi - o.theta * g * o.sigma0 ** 2 * pi
                - lam * (1.0 - pi) ** (g - 1.0) + lam + o.b)


def phi_big(pi, lam, o: AgentType):
    """Equilibrium function Phi(pi, lambda); strictly decreasing in pi < 1."""
    pi_a = np.asarray(pi, dtype=float)
    if np.any(pi_a >= 1):
        raise ValueError("Phi is defined for pi < 1 only")
    val = _phi_raw(pi_a, np.asarray(lam, dtype=float), o)
    return float(val) if val.ndim == 0 else val


def phi_big_dpi(pi, lam, o: AgentType):
    g = o.gamma
    pi_a = np.asarray(pi, dtype=float)
    val = ((g - 1.0) * _total_var(o) - o.theta * g * o.sigma0 ** 2
           + (g - 1.0) * np.asarray(lam, dtype=float) * (1.0 - pi_a) ** (g - 2.0))
    return float(val) if val.ndim == 0 else val


def no_jump_root(o: AgentType) -> float:
    """Constant equilibrium without jump risk (lambda = 0); may exceed 1."""
    return o.b / ((1.0 - o.gamma) * _total_var(o) + o.theta * o.gamma * o.sigma0 ** 2)


def safeguarded_newton(F, dF, lo, hi, x0, tol, maxiter=MAX_ITER):
    """Vectorised Newton iteration kept inside a shrinking bracket.

    ``F`` must be decreasing on ``[lo, hi]`` with ``F(lo) >= 0 >= F(hi)``.
    Newton steps that leave the bracket are replaced by bisection. An entry
    stops when ``|F| <= tol`` or the bracket has shrunk to a few ulps; the
    endpoint with the smaller residual is returned in the latter case.
    """
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    x = np.array(x0, dtype=float)
    lo, hi, x = np.broadcast_arrays(lo, hi, x)
    lo, hi, x = lo.copy(), hi.copy(), x.copy()
    best = x.copy()
    best_res = np.full(x.shape, np.inf)
    done = np.zeros(x.shape, dtype=bool)
    for _ in range(maxiter):
        fx = F(x)
        res = np.abs(fx)
        better = ~done & (res < best_res)
        best[better] = x[better]
        best_res[better] = res[better]
        done |= res <= tol
        if done.all():
            return _polish(F, best, best_res)
        lo = np.where(~done & (fx > 0), x, lo)
        hi = np.where(~done & (fx < 0), x, hi)
        width = hi - lo
        done |= width <= 4.0 * np.spacing(np.maximum(np.abs(lo), np.abs(hi)))
        if done.all():
            return _polish(F, best, best_res)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = x - fx / dF(x)
        # Newton has stalled at the resolution of the float grid
        done |= np.abs(step - x) <= 2.0 * np.spacing(np.abs(x))
        if done.all():
            return _polish(F, best, best_res)
        mid = 0.5 * (lo + hi)
        ok = np.isfinite(step) & (step > lo) & (step < hi)
        x = np.where(done, x, np.where(ok, step, mid))
    raise NumericalError(f"root solve did not converge in {maxiter} iterations")


def _polish(F, x, res):
    # neighbouring doubles may have a smaller residual than the last iterate
    for direction in (-np.inf, np.inf):
        y = np.nextafter(x, direction)
        with np.errstate(invalid="ignore", divide="ignore"):
            ry = np.abs(F(y))
        take = ry < res
        x = np.where(take, y, x)
        res = np.where(take, ry, res)
    return x


def _solve_phi_array(lam: np.ndarray, o: AgentType, tol: float) -> np.ndarray:
    lam = np.asarray(lam, dtype=float)
    out = np.empty_like(lam)
    zero = lam == 0
    out[zero] = no_jump_root(o)
    pos = ~zero
    if pos.any():
        lp = lam[pos]
        hi = np.full(lp.shape, PI_UPPER)
        # for tiny lambda the root can sit above 1 - 1e-15; widen to the last double below 1
        hi = np.where(_phi_raw(hi, lp, o) > 0, np.nextafter(1.0, 0.0), hi)
        out[pos] = safeguarded_newton(
            lambda x: _phi_raw(x, lp, o),
            lambda x: phi_big_dpi(x, lp, o),
            np.zeros(lp.shape), hi, np.full(lp.shape, 0.5), tol,
        )
    return out


def solve_phi(lam, o: AgentType, tol: float = 1e-14):
    """Unique root pi of Phi(., lambda) on (-inf, 1).

    For lambda > 0 the root lies in (0, 1). For lambda = 0 the closed form
    ``b / ((1-gamma)(sigma^2+sigma0^2) + theta gamma sigma0^2)`` is returned
    even when it exceeds 1.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    lam_a = np.asarray(lam, dtype=float)
    if np.any(~(lam_a >= 0)):
        raise ValueError("lambda must be >= 0")
    out = _solve_phi_array(np.atleast_1d(lam_a), o, tol)
    return float(out[0]) if lam_a.ndim == 0 else out.reshape(lam_a.shape)


# ---------------------------------------------------------------------------
# Equilibrium path
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EquilibriumPath:
    grid: np.ndarray
    pi_star: np.ndarray
    eta_star: np.ndarray
    rho: np.ndarray
    varphi: np.ndarray
    lambda_f: np.ndarray
    outside_unit: np.ndarray  # roots >= 1 (only possible where lambda_f == 0)
    o: Optional[AgentType] = None

    def replace(self, **changes) -> "EquilibriumPath":
        return dataclasses.replace(self, **changes)


def eta(pi, lam_f, o: AgentType, r: float):
    """Log-growth functional r + (b+lambda) pi - sigma^2 pi^2 / 2 + lambda log(1-pi)."""
    pi = np.asarray(pi, dtype=float)
    lam_f = np.asarray(lam_f, dtype=float)
    with np.errstate(invalid="ignore", divide="ignore"):
        jump = np.where(lam_f == 0, 0.0, lam_f * np.log1p(-pi))
    return r + (o.b + lam_f) * pi - 0.5 * o.sigma ** 2 * pi ** 2 + jump


def rho_adjoint(pi, lam_f, o: AgentType, r: float):
    """Drift rate of the adjoint scaling function along the equilibrium."""
    pi = np.asarray(pi, dtype=float)
    lam_f = np.asarray(lam_f, dtype=float)
    g, th, s2, s02 = o.gamma, o.theta, o.sigma ** 2, o.sigma0 ** 2
    tg = th * g
    with np.errstate(invalid="ignore", divide="ignore"):
        jump = np.where(lam_f == 0, 0.0, ((1.0 - pi) ** (g - 1.0) - 1.0) * lam_f)
    return (-g * r - (g - 1.0) * (o.b + lam_f) * pi + tg * eta(pi, lam_f, o, r)
            + tg * (g - 1.0) * s02 * pi ** 2
            - 0.5 * (g - 1.0) * (g - 2.0) * (s2 + s02) * pi ** 2
            - 0.5 * tg * (tg + 1.0) * s02 * pi ** 2
            - jump)


def mfe_path(p: MeanFieldParams, ip: IntensityPath, tol: float = 1e-14) -> EquilibriumPath:
    o = p.o
    pi = solve_phi(ip.lambda_f, o, tol)
    eta_star = eta(pi, ip.lambda_f, o, p.r)
    rho = rho_adjoint(pi, ip.lambda_f, o, p.r)
    cum = cumulative_trapezoid(rho, ip.grid, initial=0.0)
    varphi = np.exp(cum[-1] - cum)
    varphi[-1] = 1.0
    return EquilibriumPath(
        grid=ip.grid, pi_star=pi, eta_star=eta_star, rho=rho, varphi=varphi,
        lambda_f=ip.lambda_f, outside_unit=pi >= 1.0, o=o,
    )


def solve_equilibrium(p: MeanFieldParams, steps: int, tol: float = 1e-14):
    ip = solve_intensity_ode(p, steps)
    return ip, mfe_path(p, ip, tol)


# ---------------------------------------------------------------------------
# Geometric mean wealth
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MStarPath:
    grid: np.ndarray
    w0_increments: np.ndarray
    m_star: np.ndarray


def common_noise(grid: np.ndarray, seed) -> np.ndarray:
    """Brownian increments of the common noise on ``grid``.

    ``seed`` may be an int, a SeedSequence or a Generator; the same seed
    always yields the same increments, which couples the n-player market
    with the mean-field geometric mean.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.standard_normal(len(grid) - 1) * np.sqrt(np.diff(grid))


def log_m_star(p: MeanFieldParams, ep: EquilibriumPath, w0_increments: np.ndarray) -> np.ndarray:
    o = p.o
    pi = ep.pi_star
    drift = ep.eta_star - 0.5 * (o.sigma0 * pi) ** 2
    dt = np.diff(ep.grid)
    # ds-integral by the trapezoid rule, stochastic integral at left endpoints
    incr = 0.5 * (drift[:-1] + drift[1:]) * dt + o.sigma0 * pi[:-1] * w0_increments
    out = np.empty(len(ep.grid))
    out[0] = math.log(o.x0)
    np.cumsum(incr, out=out[1:])
    out[1:] += out[0]
    return out


def sample_m_star(p: MeanFieldParams, ep: EquilibriumPath, ip: IntensityPath, seed=None,
                  w0_increments: Optional[np.ndarray] = None) -> MStarPath:
    """Draw one common-noise path and evaluate the equilibrium geometric
    mean wealth along it."""
    if len(ep.grid) != len(ip.grid) or not np.array_equal(ep.grid, ip.grid):
        raise ValueError("equilibrium and intensity paths must share a grid")
    if w0_increments is None:
        w0_increments = common_noise(ep.grid, seed)
    m = np.exp(log_m_star(p, ep, w0_increments))
    m[0] = p.o.x0
    return MStarPath(grid=ep.grid, w0_increments=w0_increments, m_star=m)


# ---------------------------------------------------------------------------
# Comparative statics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StaticsGradient:
    d_b: float
    d_sigma: float
    d_sigma0: float
    d_gamma: float
    d_theta: float
    d_lambda: float
    pi_star: float


def statics_derivatives(lam: float, o: AgentType) -> StaticsGradient:
    """Implicit-function derivatives of the equilibrium root in each
    preference/market parameter and in lambda."""
    pi = solve_phi(lam, o)
    g, th, s, s0 = o.gamma, o.theta, o.sigma, o.sigma0
    if lam == 0:
        jump_pi, jump_gamma, d_lam_phi = 0.0, 0.0, math.nan
    else:
        u = 1.0 - pi
        jump_pi = (g - 1.0) * lam * u ** (g - 2.0)
        jump_gamma = -lam * u ** (g - 1.0) * math.log(u)
        d_lam_phi = 1.0 - u ** (g - 1.0)
    dpi = (g - 1.0) * (s * s + s0 * s0) - th * g * s0 * s0 + jump_pi
    partial = {
        "b": 1.0,
        "sigma": 2.0 * (g - 1.0) * s * pi,
        "sigma0": 2.0 * (g - 1.0) * s0 * pi - 2.0 * th * g * s0 * pi,
        "gamma": (s * s + s0 * s0) * pi - th * s0 * s0 * pi + jump_gamma,
        "theta": -g * s0 * s0 * pi,
        "lambda": d_lam_phi,
    }
    d = {k: -v / dpi for k, v in partial.items()}
    return StaticsGradient(d_b=d["b"], d_sigma=d["sigma"], d_sigma0=d["sigma0"],
                           d_gamma=d["gamma"], d_theta=d["theta"], d_lambda=d["lambda"],
                           pi_star=pi)


SWEEPABLE = tuple(n for n in FIELD_NAMES if n != "x0")


def sensitivity_sweep(p: MeanFieldParams, param_name: str, values, t_eval: float,
                      steps: int = 10_000) -> np.ndarray:
    """Equilibrium allocation at ``t_eval`` as one limiting-type parameter
    varies. Returns an array of rows ``(value, pi_star)``.

    The ODE is integrated on [0, t_eval] with the step size that ``steps``
    intervals would give on [0, T].
    """
    if param_name not in SWEEPABLE:
        raise ValueError(f"cannot sweep {param_name!r}; choose from {', '.join(SWEEPABLE)}")
    if not 0 <= t_eval:
        raise ValueError("t_eval must be >= 0")
    n_steps = max(2, math.ceil(steps * t_eval / p.T))
    rows = []
    for v in values:
        q = p.replace(o=p.o.replace(**{param_name: float(v)}))
        if t_eval == 0:
            lam_f = eval_f(q.f, q.o.lambda0)
        else:
            ip = solve_intensity_ode(q, n_steps, grid=np.linspace(0.0, t_eval, n_steps + 1))
            lam_f = ip.lambda_f[-1]
        rows.append((float(v), solve_phi(float(lam_f), q.o)))
    return np.array(rows, dtype=float).reshape(-1, 2)
