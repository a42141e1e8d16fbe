"""Parameter types, the jump-rate function and JSON configuration loading."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np
from numba import njit


class ConfigError(ValueError):
    """Raised when a configuration document or parameter object is invalid.

    ``path`` carries the dotted location of the offending field.
    """

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


def _require(cond: bool, message: str, path: str) -> None:
    if not cond:
        raise ConfigError(message, path)


@dataclass(frozen=True)
class AgentType:
    """Type vector of one agent: wealth, intensity, market and preference
    parameters.

    ``beta`` and ``varsigma`` may be zero, which switches off contagion and
    gives a deterministic intensity.
    """

    x0: float = 1.0
    lambda0: float = 0.1
    alpha: float = 0.5
    lambda_inf: float = 0.6
    beta: float = 0.4
    varsigma: float = 0.2
    b: float = 0.2
    sigma: float = 0.3
    sigma0: float = 0.2
    gamma: float = 0.4
    theta: float = 0.5

    def __post_init__(self):
        for name in ("x0", "lambda0", "alpha", "lambda_inf", "b", "sigma", "sigma0"):
            v = getattr(self, name)
            _require(math.isfinite(v) and v > 0, f"must be > 0, got {v}", name)
        for name in ("beta", "varsigma"):
            v = getattr(self, name)
            _require(math.isfinite(v) and v >= 0, f"must be >= 0, got {v}", name)
        _require(0.0 < self.gamma < 1.0, f"must lie in (0, 1), got {self.gamma}", "gamma")
        _require(0.0 <= self.theta <= 1.0, f"must lie in [0, 1], got {self.theta}", "theta")

    def replace(self, **changes) -> "AgentType":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


FIELD_NAMES = tuple(f.name for f in fields(AgentType))


# ---------------------------------------------------------------------------
# Jump rate function
# ---------------------------------------------------------------------------

@njit(cache=True)
def _hermite_scalar(xs, ys, ds, x):
    # constant beyond the last knot; ds[-1] is forced to 0 so this is C^1
    m = xs.shape[0]
    if x >= xs[m - 1]:
        return ys[m - 1], 0.0
    lo = 0
    hi = m - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if xs[mid] <= x:
            lo = mid
        else:
            hi = mid
    h = xs[hi] - xs[lo]
    if ds[lo] == ds[hi] and ys[hi] - ys[lo] == ds[lo] * h:
        # linear segment: exact evaluation (identity part of the capped rate)
        return ys[lo] + ds[lo] * (x - xs[lo]), ds[lo]
    s = (x - xs[lo]) / h
    s2 = s * s
    s3 = s2 * s
    h00 = 2.0 * s3 - 3.0 * s2 + 1.0
    h10 = s3 - 2.0 * s2 + s
    h01 = -2.0 * s3 + 3.0 * s2
    h11 = s3 - s2
    val = h00 * ys[lo] + h10 * h * ds[lo] + h01 * ys[hi] + h11 * h * ds[hi]
    dh00 = (6.0 * s2 - 6.0 * s) / h
    dh10 = 3.0 * s2 - 4.0 * s + 1.0
    dh01 = (-6.0 * s2 + 6.0 * s) / h
    dh11 = 3.0 * s2 - 2.0 * s
    der = dh00 * ys[lo] + dh10 * ds[lo] + dh01 * ys[hi] + dh11 * ds[hi]
    return val, der


@njit(cache=True)
def _hermite_array(xs, ys, ds, x, out_val, out_der):
    for k in range(x.shape[0]):
        v, d = _hermite_scalar(xs, ys, ds, x[k])
        out_val[k] = v
        out_der[k] = d


@dataclass(frozen=True)
class JumpRateFn:
    """Bounded, nondecreasing, C^1 jump rate f.

    ``kind="capped_linear"``: f(x) = x on [0, M], f = M + delta0 beyond
    M + delta0, with a monotone cubic Hermite bridge in between.
    ``kind="custom"``: monotone (PCHIP) interpolation of ``table`` rows
    ``(x, f(x))``, first knot at x = 0, constant after the last knot.
    A one-row table gives a constant rate.
    """

    M: float = 100.0
    delta0: float = 0.01
    kind: str = "capped_linear"
    table: Optional[tuple] = None

    def __post_init__(self):
        if self.kind == "capped_linear":
            _require(self.M > 0, f"must be > 0, got {self.M}", "M")
            _require(self.delta0 > 0, f"must be > 0, got {self.delta0}", "delta0")
        elif self.kind == "custom":
            _require(self.table is not None and len(self.table) >= 1,
                     "custom rate needs a non-empty table", "table")
            tab = tuple((float(a), float(c)) for a, c in self.table)
            object.__setattr__(self, "table", tab)
            xs = [a for a, _ in tab]
            vs = [c for _, c in tab]
            _require(xs[0] == 0.0, "first knot must be at x = 0", "table")
            _require(all(b > a for a, b in zip(xs, xs[1:])), "knots must increase", "table")
            _require(all(v >= 0 for v in vs), "values must be >= 0", "table")
            _require(all(b >= a for a, b in zip(vs, vs[1:])), "values must be nondecreasing", "table")
        else:
            raise ConfigError(f"unknown kind {self.kind!r}", "kind")
        object.__setattr__(self, "_knots", self._build_knots())

    @classmethod
    def constant(cls, c: float) -> "JumpRateFn":
        return cls(kind="custom", table=((0.0, float(c)),))

    def _build_knots(self):
        if self.kind == "capped_linear":
            xs = np.array([0.0, self.M, self.M + self.delta0])
            ys = np.array([0.0, self.M, self.M + self.delta0])
            ds = np.array([1.0, 1.0, 0.0])
        else:
            xs = np.array([a for a, _ in self.table], dtype=float)
            ys = np.array([c for _, c in self.table], dtype=float)
            if len(xs) == 1:
                xs = np.array([0.0, 1.0])
                ys = np.array([ys[0], ys[0]])
                ds = np.zeros(2)
            else:
                from scipy.interpolate import PchipInterpolator
                ds = PchipInterpolator(xs, ys).derivative()(xs)
                ds[-1] = 0.0
        for a in (xs, ys, ds):
            a.setflags(write=False)
        return xs, ys, ds

    @property
    def knots(self):
        """``(xs, ys, slopes)`` of the Hermite representation."""
        return self._knots

    @property
    def sup(self) -> float:
        """Upper bound of f (its value at and beyond the last knot)."""
        return float(self._knots[1][-1])


def _check_nonneg(x):
    arr = np.asarray(x, dtype=float)
    if np.any(~(arr >= 0)):
        raise ValueError("jump rate function is defined on x >= 0 only")
    return arr


def eval_f(fn: JumpRateFn, x):
    """Evaluate f at a nonnegative scalar or array."""
    arr = _check_nonneg(x)
    xs, ys, ds = fn.knots
    flat = np.ascontiguousarray(arr, dtype=float).ravel()
    val = np.empty_like(flat)
    der = np.empty_like(flat)
    _hermite_array(xs, ys, ds, flat, val, der)
    if arr.ndim == 0:
        return float(val[0])
    return val.reshape(arr.shape)


def eval_f_prime(fn: JumpRateFn, x):
    """Derivative of f; 1 on the identity part and 0 on the cap for the
    capped-linear rate."""
    arr = _check_nonneg(x)
    xs, ys, ds = fn.knots
    flat = np.ascontiguousarray(arr, dtype=float).ravel()
    val = np.empty_like(flat)
    der = np.empty_like(flat)
    _hermite_array(xs, ys, ds, flat, val, der)
    if arr.ndim == 0:
        return float(der[0])
    return der.reshape(arr.shape)


# ---------------------------------------------------------------------------
# Mean-field parameters, populations and run settings
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MeanFieldParams:
    o: AgentType = field(default_factory=AgentType)
    r: float = 0.0
    T: float = 10.0
    f: JumpRateFn = field(default_factory=JumpRateFn)
    eps0: float = 1e-10

    def __post_init__(self):
        _require(math.isfinite(self.T) and self.T > 0, f"must be > 0, got {self.T}", "market.T")
        _require(math.isfinite(self.r) and self.r >= 0, f"must be >= 0, got {self.r}", "market.r")
        _require(0 < self.eps0 < 1, f"must lie in (0, 1), got {self.eps0}", "market.eps0")

    def replace(self, **changes) -> "MeanFieldParams":
        return dataclasses.replace(self, **changes)


def jitter_agents(o: AgentType, n: int, perturbation: float) -> tuple:
    """Deterministic heterogeneous population around ``o``.

    Agent i gets every field scaled by ``1 + perturbation * c_i / n`` with
    ``c_i`` alternating -1, +1, so the empirical type mean converges to
    ``o`` at rate 1/n. ``theta`` is clipped to [0, 1].
    """
    if perturbation == 0:
        return (o,) * n
    agents = []
    for i in range(n):
        scale = 1.0 + perturbation * (-1.0 if i % 2 == 0 else 1.0) / n
        vals = {k: v * scale for k, v in o.as_dict().items()}
        vals["theta"] = min(vals["theta"], 1.0)
        agents.append(AgentType(**vals))
    return tuple(agents)


@dataclass(frozen=True)
class PopulationSpec:
    n: int
    agents: tuple
    perturbation: float = 0.0

    def __post_init__(self):
        _require(isinstance(self.n, (int, np.integer)) and self.n >= 1,
                 f"must be an integer >= 1, got {self.n}", "population.n")
        _require(len(self.agents) == self.n, "agents must have length n", "population.agents")
        _require(self.perturbation >= 0, "must be >= 0", "population.perturbation")
        object.__setattr__(self, "agents", tuple(self.agents))

    @classmethod
    def from_type(cls, o: AgentType, n: int, perturbation: float = 0.0) -> "PopulationSpec":
        return cls(n=n, agents=jitter_agents(o, n, perturbation), perturbation=perturbation)

    def column(self, name: str) -> np.ndarray:
        """Per-agent values of one AgentType field."""
        return np.array([getattr(a, name) for a in self.agents], dtype=float)

    def classes(self):
        """Group agents with identical types (initial wealth excluded).

        Returns ``(types, index)`` where ``types`` lists the distinct types
        and ``index[i]`` is the class of agent i.
        """
        keys = {}
        index = np.empty(self.n, dtype=np.int64)
        types = []
        for i, a in enumerate(self.agents):
            key = dataclasses.astuple(a.replace(x0=1.0))
            c = keys.get(key)
            if c is None:
                c = keys[key] = len(types)
                types.append(a)
            index[i] = c
        return types, index


@dataclass(frozen=True)
class RunConfig:
    time_steps: int = 10_000
    mc_paths: int = 1000
    seed: int = 0
    out: str = "out"

    def __post_init__(self):
        _require(int(self.time_steps) >= 2, "must be >= 2", "run.time_steps")
        _require(int(self.mc_paths) >= 1, "must be >= 1", "run.mc_paths")
        _require(0 <= int(self.seed) < 2**64, "must be a 64-bit unsigned integer", "run.seed")


# ---------------------------------------------------------------------------
# JSON configuration
# ---------------------------------------------------------------------------

_MARKET_KEYS = {"r", "T", "eps0", "f"}
_F_KEYS = {"M", "delta0", "kind", "table"}
_POP_KEYS = {"n", "perturbation"}
_RUN_KEYS = {"time_steps", "mc_paths", "seed", "out"}


def _section(doc: dict, name: str, allowed: set) -> dict:
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError("must be an object", name)
    unknown = set(sec) - allowed
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}", name)
    return sec


def _num(sec: dict, key: str, path: str, default, cast=float):
    if key not in sec:
        return default
    v = sec[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"expected a number, got {v!r}", f"{path}.{key}")
    if cast is int:
        if isinstance(v, int):
            return v
        if float(v) != int(v):
            raise ConfigError(f"expected an integer, got {v!r}", f"{path}.{key}")
        return int(v)
    return float(v)


def config_from_dict(doc: dict):
    """Validate a parsed configuration document.

    Missing fields take the defaults (see :class:`AgentType`),
    ``r = 0``, ``T = 10``, ``M = 100``, ``delta0 = 0.01``.
    """
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = set(doc) - {"market", "limiting_type", "population", "run"}
    if unknown:
        raise ConfigError(f"unknown sections {sorted(unknown)}")

    lt = _section(doc, "limiting_type", set(FIELD_NAMES))
    o_defaults = AgentType()
    vals = {k: _num(lt, k, "limiting_type", getattr(o_defaults, k)) for k in FIELD_NAMES}
    try:
        o = AgentType(**vals)
    except ConfigError as e:
        raise ConfigError(str(e).split(": ", 1)[-1], f"limiting_type.{e.path}") from None

    mk = _section(doc, "market", _MARKET_KEYS)
    fsec = _section(mk, "f", _F_KEYS) if "f" in mk else {}
    kind = fsec.get("kind", "capped_linear")
    try:
        fn = JumpRateFn(
            M=_num(fsec, "M", "market.f", 100.0),
            delta0=_num(fsec, "delta0", "market.f", 0.01),
            kind=kind,
            table=tuple(tuple(row) for row in fsec["table"]) if "table" in fsec else None,
        )
    except ConfigError as e:
        raise ConfigError(str(e).split(": ", 1)[-1], f"market.f.{e.path}") from None
    p = MeanFieldParams(
        o=o,
        r=_num(mk, "r", "market", 0.0),
        T=_num(mk, "T", "market", 10.0),
        f=fn,
        eps0=_num(mk, "eps0", "market", 1e-10),
    )

    ps = _section(doc, "population", _POP_KEYS)
    n = _num(ps, "n", "population", 1, int)
    pert = _num(ps, "perturbation", "population", 0.0)
    if n < 1:
        raise ConfigError("must be >= 1", "population.n")
    if pert < 0:
        raise ConfigError("must be >= 0", "population.perturbation")
    try:
        pop = PopulationSpec.from_type(o, n, pert)
    except ConfigError as e:
        raise ConfigError(str(e), "population") from None

    rs = _section(doc, "run", _RUN_KEYS)
    run = RunConfig(
        time_steps=_num(rs, "time_steps", "run", 10_000, int),
        mc_paths=_num(rs, "mc_paths", "run", 1000, int),
        seed=_num(rs, "seed", "run", 0, int),
        out=str(rs.get("out", "out")),
    )
    return p, pop, run


def load_config(text: str):
    """Parse a JSON configuration document into
    ``(MeanFieldParams, PopulationSpec, RunConfig)``."""
    try:
        doc = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as e:
        raise ConfigError(f"parse error: {e}") from None
    return config_from_dict(doc)


def config_to_dict(p: MeanFieldParams, pop: PopulationSpec, run: RunConfig) -> dict:
    f = {"kind": p.f.kind, "M": p.f.M, "delta0": p.f.delta0}
    if p.f.table is not None:
        f["table"] = [list(row) for row in p.f.table]
    return {
        "market": {"r": p.r, "T": p.T, "eps0": p.eps0, "f": f},
        "limiting_type": p.o.as_dict(),
        "population": {"n": pop.n, "perturbation": pop.perturbation},
        "run": {"time_steps": run.time_steps, "mc_paths": run.mc_paths,
                "seed": run.seed, "out": run.out},
    }


def dump_config(p: MeanFieldParams, pop: PopulationSpec, run: RunConfig) -> str:
    # repr-based float formatting round-trips bit-for-bit
    return json.dumps(config_to_dict(p, pop, run), indent=2, sort_keys=True)


def config_digest(p: MeanFieldParams, pop: PopulationSpec, run: RunConfig) -> str:
    doc = config_to_dict(p, pop, run)
    doc["run"].pop("out", None)
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def default_params() -> MeanFieldParams:
    """Limiting model with the default numerical-study parameters."""
    return MeanFieldParams()


def uniform_grid(T: float, steps: int) -> np.ndarray:
    if steps < 2:
        raise ValueError("time grid needs at least 2 steps")
    return np.linspace(0.0, T, steps + 1)


def path_seed(seed: int, path_index: int) -> np.random.SeedSequence:
    """Seed of Monte Carlo path ``path_index``; any path can be regenerated
    alone from the master seed."""
    return np.random.SeedSequence(int(seed), spawn_key=(int(path_index),))


def split_streams(seed, count: int = 3):
    """Independent child seeds: k = 0 drives the jumps, 1 the common noise,
    2 the idiosyncratic noise."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(int(seed))
    return [np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + (k,))
            for k in range(count)]


def path_streams(seed: int, path_index: int, count: int = 3):
    return split_streams(path_seed(seed, path_index), count)


__all__ = (
    "AgentType", "JumpRateFn", "MeanFieldParams", "PopulationSpec", "RunConfig",
    "ConfigError", "eval_f", "eval_f_prime", "load_config", "dump_config",
    "config_from_dict", "config_to_dict", "config_digest", "jitter_agents",
    "default_params", "uniform_grid", "path_seed", "split_streams", "path_streams",
)
