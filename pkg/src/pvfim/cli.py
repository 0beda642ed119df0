"""Command-line entry point: ``pvfim {solve,oracle,constants,certify}``.

Options can also come from a ``--config`` file of ``key = value`` lines
('#' starts a comment); command-line flags win over the file.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 certification failed.
"""
from __future__ import annotations

import argparse
import csv
import importlib
import io
import math
import sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from pvfim.analysis import Tolerances, compute_constants, stationarity_report
from pvfim.errors import NumericalFailure, OracleError, PvfimError
from pvfim.oracle import GridSpec, oracle_sweep, point_oracle
from pvfim.problem import BilevelProblem, LipschitzSpec, as_vector, example3_lipschitz, example3_problem
from pvfim.solver import (
    REFERENCE_C0,
    REFERENCE_EPS,
    reference_schedule,
    custom_schedule,
    minimal_l0,
    pvfim,
    geometric_schedule,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_CERTIFY = 0, 2, 3, 4
TRACE_SCHEMA = "v1"
EXAMPLE3_X0 = "3.03"
EXAMPLE3_Y0 = "0,9"


class ConfigError(Exception):
    pass


def fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def parse_vector(text):
    parts = [p for p in text.replace(",", " ").split() if p]
    if not parts:
        raise ValueError("empty vector")
    return np.array([float(p) for p in parts])


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _positive_int(text):
    v = int(text)
    if v < 1:
        raise ValueError("must be a positive integer")
    return v


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file with defaults for any flag")
    common.add_argument("--problem", help="example3 or module:callable (default example3)")
    common.add_argument("--eps", type=float, help="lower-level tolerance (example3: 0.5)")
    common.add_argument("--c0", type=float, help="barrier margin (example3: 0.25, else eps/2)")
    common.add_argument("--out", help="output CSV path (default stdout)")

    grid = argparse.ArgumentParser(add_help=False)
    grid.add_argument("--grid-x", type=_positive_int, help="oracle x grid points")
    grid.add_argument("--grid-y", type=_positive_int, help="oracle y grid points per dimension")
    grid.add_argument("--refine", type=int, help="oracle refinement rounds")
    grid.add_argument("--workers", type=_positive_int, help="oracle worker threads")
    grid.add_argument("--tol-g", type=float, help="gradient tolerance for certification")
    grid.add_argument("--tol-f", type=float, help="lower residual tolerance")
    grid.add_argument("--tol-F", dest="tol_F", type=float, help="upper residual tolerance")

    p = argparse.ArgumentParser(prog="pvfim", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", parents=[common, grid], help="run the solver and write a trace")
    s.add_argument("--schedule", help="appendix_c | theorem4 | custom:KEY=EXPR,...")
    s.add_argument("--x0", help="initial upper point, comma separated")
    s.add_argument("--y0", help="fixed lower start, comma separated")
    s.add_argument("--lmax", type=_positive_int, help="outer iteration budget (default 5000)")
    s.add_argument("--stop-tol", type=float, help="outer stopping tolerance (default 1e-6)")
    s.add_argument("--max-evals", type=_positive_int, help="objective evaluation budget")
    s.add_argument("--max-seconds", type=float, help="wall-time budget")
    s.add_argument("--selection", choices=("practice", "theory"), help="which inner iterate to return")
    s.add_argument("--warm-start", action="store_const", const=True, help="carry y across steps")
    s.add_argument("--l0", type=_positive_int, help="geometric schedule offset (default: smallest valid)")
    s.add_argument("--l2", type=float, help="theory constant in (0, 1) (default 0.5)")
    s.add_argument("--certify", action="store_const", const=True, help="certify the final point")

    o = sub.add_parser("oracle", parents=[common, grid], help="brute-force value table")

    c = sub.add_parser("constants", parents=[common], help="theory constants report")
    c.add_argument("--J", type=_positive_int, help="lower descent steps (default 1)")
    c.add_argument("--sigma", type=float, help="target accuracy in (0, 1)")
    c.add_argument("--l2", type=float, help="theory constant in (0, 1) (default 0.5)")
    c.add_argument("--tau", type=float, help="barrier weight to check")
    c.add_argument("--T", type=float, help="upper step count to check")
    c.add_argument("--K", type=float, help="ascent step count to check")

    r = sub.add_parser("certify", parents=[common, grid], help="stationarity report")
    r.add_argument("--x", help="candidate upper point")
    r.add_argument("--y", help="candidate lower point")
    r.add_argument("--trace", help="take the candidate from the last row of a trace CSV")
    p.set_defaults(subparsers={"solve": s, "oracle": o, "constants": c, "certify": r})
    return p


def _load_config(path, args):
    """Fill unset attributes of ``args`` from a key = value file.

    Returns a map from option name to its ``file:line`` origin for diagnostics.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as err:
        raise ConfigError(f"{path}: cannot read config: {err.strerror}")
    sub = args.subparsers[args.command]
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config", "subparsers")}
    origin, seen = {}, set()
    for no, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{no}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        dest = key.replace("-", "_")
        if dest not in actions:
            raise ConfigError(f"{path}:{no}: unknown key {key!r} for '{args.command}'")
        if dest in seen:
            raise ConfigError(f"{path}:{no}: duplicate key {key!r}")
        seen.add(dest)
        if getattr(args, dest) is not None:
            continue
        origin[dest] = f"{path}:{no}"
        act = actions[dest]
        try:
            if act.const is True:
                v = value.lower() in ("1", "true", "yes", "on")
                if not v and value.lower() not in ("0", "false", "no", "off"):
                    raise ValueError("expected a boolean")
            elif act.type is not None:
                v = act.type(value)
            else:
                v = value
            if act.choices and v not in act.choices:
                raise ValueError(f"choose from {', '.join(act.choices)}")
        except ValueError as err:
            raise ConfigError(f"{path}:{no}: invalid value for {key}: {err}")
        setattr(args, dest, v)
    return origin


# ---------------------------------------------------------------------------
# resolved configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    command: str
    problem_id: str
    problem: BilevelProblem
    lipschitz: Optional[LipschitzSpec]
    c0: float
    values: dict = field(default_factory=dict)  # resolved settings, echoed in headers

    def header(self):
        lines = [f"pvfim {self.command}", f"problem={self.problem_id}"]
        lines += [f"{k}={fmt(v)}" for k, v in self.values.items()]
        return lines


def _where(origin, key):
    return f"{origin[key]}: " if key in origin else ""


def _load_problem(problem_id, eps):
    if problem_id == "example3":
        eps = REFERENCE_EPS if eps is None else eps
        prob = example3_problem(eps)
        return prob, example3_lipschitz(eps=eps, c=min(REFERENCE_C0, eps / 2))
    if ":" not in problem_id:
        raise ConfigError(f"unknown problem {problem_id!r}; use example3 or module:callable")
    mod_name, attr = problem_id.split(":", 1)
    try:
        factory = getattr(importlib.import_module(mod_name), attr)
    except (ImportError, AttributeError) as err:
        raise ConfigError(f"cannot load problem {problem_id!r}: {err}")
    made = factory() if eps is None else factory(eps)
    if isinstance(made, tuple):
        prob, lip = made
    else:
        prob, lip = made, None
    if not isinstance(prob, BilevelProblem):
        raise ConfigError(f"{problem_id} did not return a BilevelProblem")
    return prob, lip


def _check(cond, origin, key, message):
    if not cond:
        raise ConfigError(f"{_where(origin, key)}{message}")


def resolve(args, origin):
    problem_id = args.problem or "example3"
    _check(args.eps is None or (math.isfinite(args.eps) and args.eps > 0), origin, "eps",
           f"eps must be positive (got {args.eps})")
    prob, lip = _load_problem(problem_id, args.eps)
    c0 = args.c0
    if c0 is None:
        c0 = REFERENCE_C0 if problem_id == "example3" else prob.eps / 2
    _check(math.isfinite(c0) and 0 < c0 <= prob.eps, origin, "c0",
           f"c0 must lie in (0, eps] (got c0={c0}, eps={prob.eps})")
    cfg = RunConfig(args.command, problem_id, prob, lip, c0)
    cfg.values.update(eps=prob.eps, c0=c0)
    return cfg


def _vector(text, dim, origin, key, box=None):
    try:
        v = as_vector(parse_vector(text), dim, key)
    except (ValueError, PvfimError) as err:
        raise ConfigError(f"{_where(origin, key)}invalid {key}: {err}")
    if box is not None and not box.contains(v):
        raise ConfigError(f"{_where(origin, key)}{key} lies outside its feasible box")
    return v


def _grid(args, origin):
    try:
        return GridSpec(
            x_points=args.grid_x if args.grid_x is not None else GridSpec.x_points,
            y_points_per_dim=args.grid_y if args.grid_y is not None else GridSpec.y_points_per_dim,
            refine_rounds=args.refine if args.refine is not None else GridSpec.refine_rounds,
        )
    except PvfimError as err:
        key = next((k for k in ("grid_x", "grid_y", "refine") if k in origin), "grid")
        raise ConfigError(f"{_where(origin, key)}{err}")


def _tolerances(args):
    d = Tolerances()
    return Tolerances(
        grad=d.grad if args.tol_g is None else args.tol_g,
        lower=d.lower if args.tol_f is None else args.tol_f,
        upper=d.upper if args.tol_F is None else args.tol_F,
    )


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def _open_out(path):
    if path is None:
        return sys.stdout, False
    return open(path, "w", encoding="utf-8", newline=""), True


def trace_columns(n, m):
    return (["l", "t"] + [f"x{i}" for i in range(n)] + [f"y{j}" for j in range(m)]
            + ["G_value", "a_norm", "x_gap", "y_grad_norm", "slack", "tau", "J", "K", "eta"])


def write_trace(out, cfg, rows):
    for line in [f"trace schema {TRACE_SCHEMA}"] + cfg.header():
        out.write(f"# {line}\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(trace_columns(cfg.problem.n, cfg.problem.m))
    for r in rows:
        vals = [r.l, r.t, *r.x.tolist(), *r.y.tolist(), r.G_value, r.a_norm, r.x_gap,
                r.y_grad_norm, r.slack, r.tau, r.J, r.K, r.eta]
        w.writerow([fmt(v) for v in vals])


def read_trace_last(path, n, m):
    """(x, y) of the last data row of a trace CSV."""
    try:
        with open(path, encoding="utf-8") as fh:
            data = [ln for ln in fh.read().splitlines() if ln and not ln.startswith("#")]
    except OSError as err:
        raise ConfigError(f"{path}: cannot read trace: {err.strerror}")
    if len(data) < 2:
        raise ConfigError(f"{path}: trace has no data rows")
    header = next(csv.reader([data[0]]))
    row = dict(zip(header, next(csv.reader([data[-1]]))))
    try:
        x = np.array([float(row[f"x{i}"]) for i in range(n)])
        y = np.array([float(row[f"y{j}"]) for j in range(m)])
    except (KeyError, ValueError):
        raise ConfigError(f"{path}: last row does not match the trace schema")
    return x, y


def _report_stationarity(rep, stream):
    stream.write(
        f"grad_F_x_norm={fmt(rep.grad_F_x_norm)}\n"
        f"grad_F_y_norm={fmt(rep.grad_F_y_norm)}\n"
        f"lower_residual={fmt(rep.lower_residual)}\n"
        f"upper_residual={fmt(rep.upper_residual)}\n"
        f"multipliers={','.join(fmt(v) for v in rep.certificate_multipliers)}\n"
        f"stationary={fmt(rep.is_stationary)}\n"
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _make_schedule(args, cfg, origin):
    text = args.schedule or "appendix_c"
    kw = dict(
        L_max=args.lmax or 5000,
        stop_tol=1e-6 if args.stop_tol is None else args.stop_tol,
        warm_start=bool(args.warm_start),
        max_evals=args.max_evals,
        max_seconds=args.max_seconds,
    )
    _check(kw["stop_tol"] > 0, origin, "stop_tol", "stop-tol must be positive")
    _check(args.max_seconds is None or args.max_seconds > 0, origin, "max_seconds",
           "max-seconds must be positive")
    selection = args.selection or ("theory" if text == "theorem4" else "practice")
    try:
        if text == "appendix_c":
            sched = reference_schedule(c0=cfg.c0, selection=selection, **kw)
        elif text == "theorem4":
            if cfg.lipschitz is None:
                raise ConfigError("theorem4 schedule needs a problem with structure constants")
            l2 = 0.5 if args.l2 is None else args.l2
            l0 = args.l0 or minimal_l0(cfg.lipschitz, l2)
            cfg.values.update(l0=l0, l2=l2)
            sched = geometric_schedule(cfg.lipschitz, l0, l2=l2, selection=selection, **kw)
        else:
            spec = text[len("custom:"):] if text.startswith("custom:") else text
            sched = custom_schedule(spec, c0=cfg.c0, selection=selection, **kw)
            sched.entry(1)  # surface schedule errors at load time
    except PvfimError as err:
        raise ConfigError(f"{_where(origin, 'schedule')}invalid schedule: {err}")
    cfg.values.update(schedule=sched.description, selection=selection, **{
        k: v for k, v in kw.items() if v is not None
    })
    return sched


def cmd_solve(args, origin):
    cfg = resolve(args, origin)
    prob = cfg.problem
    ex3 = cfg.problem_id == "example3"
    x0 = _vector(args.x0 or (EXAMPLE3_X0 if ex3 else fmt_vec(prob.X.center)), prob.n, origin, "x0", prob.X)
    y0 = _vector(args.y0 or (EXAMPLE3_Y0 if ex3 else fmt_vec(prob.Y.center)), prob.m, origin, "y0", prob.Y)
    cfg.values.update(x0=fmt_vec(x0), y0=fmt_vec(y0))
    sched = _make_schedule(args, cfg, origin)
    tol = _tolerances(args)
    grid = _grid(args, origin) if args.certify else None
    if args.certify:
        cfg.values.update(certify=True, grid_y=grid.y_points_per_dim, refine=grid.refine_rounds,
                          tol_g=tol.grad, tol_f=tol.lower, tol_F=tol.upper)

    out, close = _open_out(args.out)
    info = sys.stdout if close else sys.stderr
    try:
        try:
            x, y, trace = pvfim(prob, sched, x0, y0)
        except PvfimError as err:
            partial = getattr(err, "trace", None)
            if partial is not None:
                write_trace(out, cfg, partial.rows)
            raise
        write_trace(out, cfg, trace.rows)
    finally:
        if close:
            out.close()
    info.write(f"status={trace.status}\nouter_iterations={trace.n_outer}\n"
               f"evaluations={trace.n_evals}\nx={fmt_vec(x)}\ny={fmt_vec(y)}\n")
    if trace.rows:
        last = trace.rows[-1]
        info.write(f"x_gap={fmt(last.x_gap)}\ny_grad_norm={fmt(last.y_grad_norm)}\nslack={fmt(last.slack)}\n")
    if args.certify:
        rep = stationarity_report(prob, x, y, point_oracle(prob, grid, cfg.lipschitz), tol)
        _report_stationarity(rep, info)
        if not rep.is_stationary:
            return EXIT_CERTIFY
    return EXIT_OK


def fmt_vec(v):
    return ",".join(fmt(float(a)) for a in np.asarray(v).ravel())


def cmd_oracle(args, origin):
    cfg = resolve(args, origin)
    grid = _grid(args, origin)
    cfg.values.update(grid_x=grid.x_points, grid_y=grid.y_points_per_dim, refine=grid.refine_rounds)
    res = oracle_sweep(cfg.problem, grid, cfg.lipschitz, workers=args.workers)
    out, close = _open_out(args.out)
    try:
        res.to_csv(out, header_lines=cfg.header())
    finally:
        if close:
            out.close()
    info = sys.stdout if close else sys.stderr
    info.write(f"phi_min={fmt(res.phi_min)}\nx_argmin={fmt_vec(res.x_argmin)}\n")
    return EXIT_OK


def cmd_constants(args, origin):
    cfg = resolve(args, origin)
    if cfg.lipschitz is None:
        raise ConfigError("constants need a problem that provides structure constants")
    J = args.J or 1
    l2 = 0.5 if args.l2 is None else args.l2
    try:
        rep = compute_constants(cfg.lipschitz, J=J, sigma=args.sigma, l2=l2)
    except PvfimError as err:
        raise ConfigError(f"invalid constants input: {err}")
    lines = [(k, v) for k, v in rep.rows()]
    if args.sigma is not None and None not in (args.tau, args.T, args.K):
        ok = rep.admits(args.tau, args.T, args.K)
        lines += [("admits_tau", ok["tau"]), ("admits_T", ok["T"]), ("admits_K", ok["K"])]
    for name, v in lines:
        sys.stdout.write(f"{name:<24} {fmt('' if v is None else v)}\n")
    if args.out:
        buf = io.StringIO()
        for line in cfg.header():
            buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "value"])
        for name, v in lines:
            w.writerow([name, fmt("" if v is None else v)])
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(buf.getvalue())
    return EXIT_OK


def cmd_certify(args, origin):
    cfg = resolve(args, origin)
    prob = cfg.problem
    if args.trace:
        x, y = read_trace_last(args.trace, prob.n, prob.m)
    elif args.x is not None and args.y is not None:
        x = _vector(args.x, prob.n, origin, "x")
        y = _vector(args.y, prob.m, origin, "y")
    else:
        raise ConfigError("certify needs --x and --y, or --trace")
    if not (prob.X.contains(x) and prob.Y.contains(y)):
        raise ConfigError("candidate lies outside X x Y")
    grid = _grid(args, origin)
    tol = _tolerances(args)
    rep = stationarity_report(prob, x, y, point_oracle(prob, grid, cfg.lipschitz), tol)
    _report_stationarity(rep, sys.stdout)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            for line in cfg.header() + [f"x={fmt_vec(x)}", f"y={fmt_vec(y)}"]:
                fh.write(f"# {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            cols = ["grad_F_x_norm", "grad_F_y_norm", "lower_residual", "upper_residual", "stationary"]
            w.writerow(cols)
            w.writerow([fmt(getattr(rep, c) if c != "stationary" else rep.is_stationary) for c in cols])
    return EXIT_OK if rep.is_stationary else EXIT_CERTIFY


COMMANDS = {"solve": cmd_solve, "oracle": cmd_oracle, "constants": cmd_constants, "certify": cmd_certify}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        origin = _load_config(args.config, args) if args.config else {}
        return COMMANDS[args.command](args, origin)
    except ConfigError as err:
        sys.stderr.write(f"pvfim: error: {err}\n")
        return EXIT_CONFIG
    except (NumericalFailure, OracleError) as err:
        sys.stderr.write(f"pvfim: numerical failure: {err}\n")
        return EXIT_NUMERICAL
    except PvfimError as err:
        sys.stderr.write(f"pvfim: error: {err}\n")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
