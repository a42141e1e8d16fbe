"""Command-line front end.

Exit codes: 0 success, 1 configuration or usage error, 2 numerical
failure, 3 failed ``--check``.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import meanfield, market, verify
from .hawkes import write_jumps
from .meanfield import NumericalError
from .model import (ConfigError, MeanFieldParams, PopulationSpec, config_digest, eval_f, load_config,
                    path_seed, uniform_grid)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # usage errors exit with 1 instead of argparse's 2
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.17g}"


def write_csv(path: Path, meta: dict, header, rows) -> None:
    """CSV with a leading ``#`` line of JSON metadata; LF line endings."""
    lines = ["# " + json.dumps(meta, sort_keys=True, separators=(",", ":")), ",".join(header)]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_json(path: Path, doc: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")


class Context:
    def __init__(self, args):
        text = Path(args.config).read_text(encoding="utf-8") if args.config else ""
        self.p, self.pop, run = load_config(text)
        if args.seed is not None:
            if not 0 <= args.seed < 2 ** 64:
                raise ConfigError("must be a 64-bit unsigned integer", "--seed")
            run = type(run)(run.time_steps, run.mc_paths, args.seed, run.out)
        self.run = run
        self.out = Path(args.out or run.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.digest = config_digest(self.p, self.pop, self.run)

    def meta(self, command: str, **extra) -> dict:
        return {"command": command, "config_digest": self.digest, "seed": self.run.seed, **extra}


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_mfe_path(ctx: Context, args) -> int:
    steps = args.steps or ctx.run.time_steps
    ip, ep = meanfield.solve_equilibrium(ctx.p, steps)
    path = ctx.out / "equilibrium.csv"
    rows = zip(ep.grid, ip.lambda_l, ip.lambda_f, ep.pi_star, ep.eta_star, ep.rho, ep.varphi)
    write_csv(path, ctx.meta("mfe-path", steps=steps),
              ["t", "lambda_l", "lambda_f", "pi_star", "eta_star", "rho", "varphi"], rows)
    print(f"pi_star(0)={ep.pi_star[0]:.6g} pi_star(T)={ep.pi_star[-1]:.6g} "
          f"lambda_f(T)={ip.lambda_f[-1]:.6g} -> {path}")
    return EXIT_OK


def cmd_sensitivity(ctx: Context, args) -> int:
    if args.points < 2:
        raise ConfigError("must be >= 2", "--points")
    values = np.linspace(args.lo, args.hi, args.points)
    table = meanfield.sensitivity_sweep(ctx.p, args.param, values, args.t,
                                        steps=args.steps or ctx.run.time_steps)
    path = ctx.out / f"sensitivity_{args.param}.csv"
    write_csv(path, ctx.meta("sensitivity", param=args.param, t=args.t), ["param_value", "pi_star"], table)
    print(f"{args.param}: pi_star {table[0, 1]:.6g} .. {table[-1, 1]:.6g} at t={args.t:g} -> {path}")
    return EXIT_OK


def _require_admissible(ep) -> None:
    if ep.outside_unit.any():
        raise NumericalError("equilibrium allocation reaches 1 (no jump risk); no admissible profile")


def cmd_simulate(ctx: Context, args) -> int:
    steps = args.steps or ctx.run.time_steps
    paths = args.paths or ctx.run.mc_paths
    if not 0 <= args.agent < ctx.pop.n:
        raise ConfigError(f"agent index out of range for n = {ctx.pop.n}", "--agent")
    ip, ep = meanfield.solve_equilibrium(ctx.p, steps)
    _require_admissible(ep)
    profile = market.build_nash_profile(ctx.pop, ep)
    o = ctx.pop.agents[args.agent]
    rows, utils = [], []
    for k in range(paths):
        mp = market.simulate_market(ctx.pop, ctx.p.f, profile, ep.grid, path_seed(ctx.run.seed, k), r=ctx.p.r)
        lw = mp.log_wealth[-1]
        counts = mp.hawkes.counts_on_grid()[-1]
        rows.extend((k, i, math.exp(lw[i]), lw[i], counts[i]) for i in range(ctx.pop.n))
        utils.append(market.relative_utility(lw[args.agent], lw.mean(), o.gamma, o.theta))
        if k == 0 and args.dump_jumps:
            with open(ctx.out / "jumps_path0.bin", "wb") as fh:
                write_jumps(mp.hawkes, fh)
    u = np.array(utils)
    se = float(u.std(ddof=1) / math.sqrt(paths)) if paths > 1 else 0.0
    csv_path = ctx.out / "paths.csv"
    write_csv(csv_path, ctx.meta("simulate", steps=steps, paths=paths),
              ["path_id", "agent", "X_T", "logX_T", "N_T"], rows)
    json_path = ctx.out / "objective.json"
    write_json(json_path, {"J_i": float(u.mean()), "se": se, "paths": paths, "seed": ctx.run.seed,
                           "agent": args.agent, "config_digest": ctx.digest})
    print(f"J_{args.agent}={u.mean():.6g} se={se:.3g} paths={paths} -> {csv_path}, {json_path}")
    return EXIT_OK


def cmd_consistency(ctx: Context, args) -> int:
    steps = args.steps or ctx.run.time_steps
    ip, ep = meanfield.solve_equilibrium(ctx.p, steps)
    dev = market.mean_log_wealth_consistency(ctx.p, ep, ip, args.K, ctx.run.seed)
    path = ctx.out / "consistency.json"
    write_json(path, {"K": args.K, "deviation": dev, "steps": steps, "seed": ctx.run.seed,
                      "config_digest": ctx.digest})
    print(f"K={args.K} deviation={dev:.6g} -> {path}")
    return EXIT_OK


def _int_list(text: str):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


_DEFAULT_N = {"intensity-mse": [16, 32, 64, 128, 256], "geom-wealth-mse": [16, 64, 256, 1024],
              "nash-gain": [8, 32, 128, 512]}


def check_experiment(exp: verify.RateExperiment) -> bool:
    if exp.metric == "intensity-mse":
        return -2.5 <= exp.slope <= -1.5
    if exp.metric == "geom-wealth-mse":
        return exp.slope <= -0.3
    return bool(exp.extra.get("decay_accepted"))


def cmd_verify(ctx: Context, args) -> int:
    n_values = args.n or _DEFAULT_N[args.metric]
    paths = args.paths or ctx.run.mc_paths
    o, fn, r = ctx.p.o, ctx.p.f, ctx.p.r
    pert = ctx.pop.perturbation
    if args.metric == "intensity-mse":
        exp = verify.intensity_mse_experiment(o, fn, n_values, paths, ctx.run.seed, T=ctx.p.T,
                                              steps=args.steps, perturbation=pert)
    else:
        _, ep = meanfield.solve_equilibrium(ctx.p, args.steps)
        _require_admissible(ep)
        if args.metric == "geom-wealth-mse":
            exp = verify.geom_wealth_mse_experiment(o, fn, ep, n_values, paths, ctx.run.seed, r=r,
                                                    perturbation=pert)
        else:
            exp = verify.nash_gain_experiment(o, fn, ep, n_values, verify.DeviationFamily(args.family),
                                              paths, ctx.run.seed, r=r, perturbation=pert,
                                              eps0=ctx.p.eps0)
    stem = args.metric.replace("-", "_")
    jpath = ctx.out / f"verify_{stem}.json"
    cpath = ctx.out / f"verify_{stem}.csv"
    write_json(jpath, exp.report(ctx.digest))
    write_csv(cpath, ctx.meta("verify", metric=args.metric, paths=paths, steps=args.steps),
              ["n", "value", "se"], exp.rows)
    ok = check_experiment(exp)
    print(f"{args.metric}: slope={exp.slope:.4g} (se {exp.slope_se:.2g}) "
          f"{'accepted' if ok else 'rejected'} -> {jpath}, {cpath}")
    return EXIT_CHECK if args.check and not ok else EXIT_OK


def oracle_checks(p: MeanFieldParams, steps: int, paths: int, seed: int) -> list:
    """Deterministic closed-form checks plus one Monte Carlo moment check."""
    o = p.o
    out = []

    def add(name, value, tol, passed):
        out.append({"name": name, "value": float(value), "tol": float(tol), "passed": bool(passed)})

    err = abs(meanfield.solve_phi(0.0, o) - meanfield.no_jump_root(o))
    add("no_jump_closed_form", err, 1e-12, err <= 1e-12)

    ip = meanfield.solve_intensity_ode(p, steps)
    explicit = meanfield.explicit_intensity(p, ip.grid)
    if np.all(explicit <= p.f.M):
        err = float(np.max(np.abs(ip.lambda_l - explicit)))
        add("rk4_vs_explicit", err, 1e-8, err <= 1e-8)

    if o.beta * o.varsigma < o.alpha:
        long_p = p.replace(T=100.0)
        lam_end = meanfield.solve_intensity_ode(long_p, steps).lambda_f[-1]
        err = abs(lam_end - meanfield.long_run_intensity(o))
        add("long_run_intensity", err, 1e-6, err <= 1e-6)

    single = o.replace(beta=0.0, theta=0.0)
    pop = PopulationSpec(1, (single,), 0.0)
    grid = uniform_grid(p.T, 100)
    mp = MeanFieldParams(o=single, r=p.r, T=p.T, f=p.f)

    def intensity(s):
        return eval_f(p.f, float(np.asarray(meanfield.explicit_intensity(mp, s))))

    for pi in (0.1, 0.3, 0.6):
        est = market.estimate_objective(pop, p.f, market.StrategyProfile.constant(1, pi), 0, paths, seed,
                                        grid, r=p.r)
        exact = market.moment_oracle(single, p.r, pi, p.T, intensity)
        z = abs(est.mean - exact) / est.std_error
        add(f"moment_oracle_pi_{pi:g}", z, 3.0, z <= 3.0)
    return out


def cmd_oracle_check(ctx: Context, args) -> int:
    checks = oracle_checks(ctx.p, args.steps or ctx.run.time_steps, args.paths, ctx.run.seed)
    path = ctx.out / "oracle_check.json"
    write_json(path, {"checks": checks, "seed": ctx.run.seed, "config_digest": ctx.digest})
    failed = [c["name"] for c in checks if not c["passed"]]
    print(f"{len(checks) - len(failed)}/{len(checks)} oracle checks passed"
          + (f" (failed: {', '.join(failed)})" if failed else "") + f" -> {path}")
    return EXIT_CHECK if args.check and failed else EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    def globals_parser(default):
        g = _Parser(add_help=False)
        g.add_argument("--config", default=default, help="JSON configuration file (defaults apply when omitted)")
        g.add_argument("--out", default=default, help="output directory (default: run.out from the config)")
        g.add_argument("--seed", type=int, default=default, help="master seed, overrides run.seed")
        return g

    # flags may come before or after the subcommand; SUPPRESS keeps the
    # subcommand from resetting values given before it
    common = globals_parser(argparse.SUPPRESS)
    ap = _Parser(prog="hawkesmfg", description="Mean-field game with contagious jumps: equilibrium, "
                 "simulation and verification.", parents=[globals_parser(None)])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("mfe-path", parents=[common], help="mean-field equilibrium on [0, T]")
    s.add_argument("--steps", type=int, help="time steps (default: run.time_steps)")
    s.set_defaults(func=cmd_mfe_path)

    s = sub.add_parser("sensitivity", parents=[common], help="equilibrium allocation vs one parameter")
    s.add_argument("--param", required=True, choices=meanfield.SWEEPABLE)
    s.add_argument("--from", dest="lo", type=float, required=True)
    s.add_argument("--to", dest="hi", type=float, required=True)
    s.add_argument("--points", type=int, default=50)
    s.add_argument("--t", type=float, required=True, help="evaluation time")
    s.add_argument("--steps", type=int)
    s.set_defaults(func=cmd_sensitivity)

    s = sub.add_parser("simulate", parents=[common], help="n-player market under the Nash profile")
    s.add_argument("--steps", type=int)
    s.add_argument("--paths", type=int)
    s.add_argument("--agent", type=int, default=0, help="agent whose objective is reported")
    s.add_argument("--dump-jumps", action="store_true", help="write the jumps of path 0 in binary form")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("consistency", parents=[common], help="mean-field consistency deviation")
    s.add_argument("--K", type=int, required=True, help="number of representative agents")
    s.add_argument("--steps", type=int)
    s.set_defaults(func=cmd_consistency)

    s = sub.add_parser("verify", parents=[common], help="convergence-rate and deviation-gain experiments")
    s.add_argument("--metric", required=True, choices=verify.METRICS)
    s.add_argument("--n", type=_int_list, help="comma-separated population sizes")
    s.add_argument("--paths", type=int)
    s.add_argument("--steps", type=int, default=100)
    s.add_argument("--family", choices=("shift", "constant", "scaled"), default="shift")
    s.add_argument("--check", action="store_true", help="exit 3 when the acceptance band is missed")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("oracle-check", parents=[common], help="closed-form oracle checks")
    s.add_argument("--steps", type=int)
    s.add_argument("--paths", type=int, default=10_000)
    s.add_argument("--check", action="store_true")
    s.set_defaults(func=cmd_oracle_check)
    return ap


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        ctx = Context(args)
        return args.func(ctx, args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_CONFIG
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
