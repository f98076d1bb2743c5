"""Command-line entry point: ``diffgas <subcommand> [options]``.

Every run writes ``summary.json`` into ``--out`` echoing the resolved
configuration. Failures print one JSON line ``{"error": kind, "message": ...}``
on standard error and exit 1; ``gradcheck`` exits 2 when the adjoint and
finite-difference gradients disagree beyond ``--gradcheck-tol``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from .adjoint import adjoint_gradient, value_and_gradient
from .controls import HOUR, ControlSchedule
from .cost import (
    DEFAULT_ALPHA,
    DEFAULT_BETA,
    DEFAULT_GAMMA,
    ObjectiveSpec,
    demand_mismatch,
    hourly_mismatch,
    load_demand,
)
from .errors import DiffGasError, NetworkParseError, ValidationError
from .grid import discretize, initial_state, load_initial_state
from .model import BAR, bundled_path, load_network
from .opt import default_controls, optimize, optimize_stochastic, sample_scenarios
from .sim import SimConfig, injected_mass, run_forward

log = logging.getLogger("diffgas")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_GRADCHECK = 2

DEFAULTS = {
    "network": None,
    "demand": None,
    "controls": None,
    "initial_state": None,
    "dx_m": 1000.0,
    "cfl": 0.4,
    "horizon_s": 36000.0,
    "alpha": DEFAULT_ALPHA,
    "beta": DEFAULT_BETA,
    "gamma": DEFAULT_GAMMA,
    "scenarios": 16,
    "sigma": 0.05,
    "seed": 0,
    "max_iters": 50,
    "tol": 1e-6,
    "ftol": 0.0,
    "workers": 1,
    "perturb_demand": False,
    "fd_step": 1e-2,
    "gradcheck_tol": 1e-5,
    "perturb_gradient": None,
    "dx_list": "4000,2000,1000,500",
    "repeats": 3,
    "param_factor": 10,
    "every_s": 60.0,
}


def _add_common(p):
    p.add_argument("--config", help="JSON file of option defaults (keys as in --help, '_' for '-')")
    p.add_argument("--network", help="network JSON (default: bundled ogf11)")
    p.add_argument("--demand", help="demand CSV time_s,demand_mw (bundled ramp with the default network)")
    p.add_argument("--controls", help="controls CSV node,hour,q_kg_s (default: flat starting schedule)")
    p.add_argument("--initial-state", help="state vector saved with numpy.save (default: 70 bar at rest)")
    p.add_argument("--out", required=True, help="output directory, created if absent")
    p.add_argument("--dx-m", type=float, help="target cell size [m]")
    p.add_argument("--cfl", type=float, help="CFL safety factor in (0, 1]")
    p.add_argument("--horizon-s", type=float, help="time horizon [s]")
    p.add_argument("--alpha", type=float, help="demand-mismatch weight")
    p.add_argument("--beta", type=float, help="generation-cost weight")
    p.add_argument("--gamma", type=float, help="pressure-penalty weight")
    p.add_argument("--every-s", type=float, help="output sampling interval [s]")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_opt(p):
    p.add_argument("--max-iters", type=int)
    p.add_argument("--tol", type=float, help="projected-gradient infinity-norm tolerance")
    p.add_argument("--ftol", type=float, help="stop when an accepted step's relative decrease is below this")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffgas", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="forward simulation, trajectory CSV and mass ledger")
    _add_common(p)

    p = sub.add_parser("gradcheck", help="adjoint gradient vs central finite differences")
    _add_common(p)
    p.add_argument("--fd-step", type=float, help="finite-difference step [kg/s]")
    p.add_argument("--gradcheck-tol", type=float, help="max allowed relative error")
    p.add_argument("--perturb-gradient", metavar="INDEX:FACTOR",
                   help="test hook: scale adjoint component INDEX (flat) by FACTOR")

    p = sub.add_parser("optimize", help="deterministic optimal gas flow")
    _add_common(p)
    _add_opt(p)

    p = sub.add_parser("optimize-stochastic", help="sample-average optimal gas flow")
    _add_common(p)
    _add_opt(p)
    p.add_argument("--scenarios", type=int, help="scenario count")
    p.add_argument("--sigma", type=float, help="relative std of withdrawal noise")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, help="threads for scenario evaluation")
    p.add_argument("--perturb-demand", action="store_true", default=None,
                   help="also perturb the demand samples per scenario")

    p = sub.add_parser("bench-scaling", help="wall time vs grid size and parameter count")
    _add_common(p)
    p.add_argument("--dx-list", help="comma-separated target_dx values [m]")
    p.add_argument("--repeats", type=int, help="timing repeats (minimum is kept)")
    p.add_argument("--param-factor", type=int,
                   help="extra run at the finest grid with this many times more parameters")
    return parser


class _Fail(Exception):
    def __init__(self, kind, message):
        super().__init__(message)
        self.kind = kind


def resolve(args) -> dict:
    """Merge defaults, the optional ``--config`` file and explicit flags."""
    cfg = dict(DEFAULTS)
    if args.config:
        try:
            with open(args.config) as fh:
                extra = json.load(fh)
        except OSError as exc:
            raise _Fail("io", f"{args.config}: {exc.strerror or exc}") from exc
        except json.JSONDecodeError as exc:
            raise _Fail("parse", f"{args.config}: {exc}") from exc
        if not isinstance(extra, dict):
            raise _Fail("parse", f"{args.config}: expected a JSON object")
        extra = {k.replace("-", "_"): v for k, v in extra.items()}
        unknown = sorted(set(extra) - set(DEFAULTS))
        if unknown:
            raise _Fail("validation", f"{args.config}: unknown keys {unknown}")
        cfg.update(extra)
    for key, value in vars(args).items():
        if key in DEFAULTS and value is not None:
            cfg[key] = value
    cfg["command"] = args.command
    cfg["out"] = args.out
    if cfg["network"] is None:
        cfg["network"] = str(bundled_path("ogf11.json"))
        if cfg["demand"] is None:
            cfg["demand"] = str(bundled_path("ogf11_demand.csv"))
    for key in ("network", "demand", "controls", "initial_state"):
        if cfg[key] is not None:
            cfg[key] = str(cfg[key])
    return cfg


class Problem:
    """Everything loaded from the resolved configuration."""

    def __init__(self, cfg, need_demand):
        self.cfg = cfg
        self.net = load_network(cfg["network"])
        self.sim = SimConfig(horizon=float(cfg["horizon_s"]), cfl_safety=float(cfg["cfl"]),
                             target_dx=float(cfg["dx_m"]))
        self.sys = discretize(self.net, self.sim.target_dx)
        self.spec = None
        if cfg["demand"] is not None:
            t, d = load_demand(cfg["demand"])
            self.spec = ObjectiveSpec.from_network(self.net, t, d, alpha=float(cfg["alpha"]),
                                                   beta=float(cfg["beta"]),
                                                   gamma=float(cfg["gamma"]))
            if not self.spec.covers(self.sim.horizon):
                raise ValidationError(f"{cfg['demand']}: demand does not cover [0, {self.sim.horizon}] s")
        elif need_demand:
            raise ValidationError("this subcommand needs --demand")
        if cfg["initial_state"] is not None:
            self.ic = load_initial_state(cfg["initial_state"], self.sys)
        else:
            self.ic = initial_state(self.sys, self.net)
        if cfg["controls"] is not None:
            self.controls = ControlSchedule.from_csv(cfg["controls"], self.net.node_ids,
                                                     self.sim.horizon)
        elif self.spec is not None:
            self.controls = default_controls(self.net, self.spec, self.sim.horizon)
        else:
            self.controls = ControlSchedule.constant(np.zeros(self.net.n_nodes), self.sim.horizon)

    def bounds_check(self):
        lo, hi = self.net.bounds()
        th = self.controls.theta
        bad = np.nonzero((th < lo[:, None]) | (th > hi[:, None]))
        if bad[0].size:
            i, h = int(bad[0][0]), int(bad[1][0])
            raise ValidationError(f"control of node {self.net.nodes[i].id!r} hour {h} is outside "
                                  f"[{lo[i]}, {hi[i]}] kg/s")


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _r(x) -> str:
    return repr(float(x))


def _mass_ledger(prob, traj):
    m0 = prob.sys.line_pack(traj.initial_state)
    m1 = prob.sys.line_pack(traj.final_state)
    inj = injected_mass(prob.controls, prob.sim.horizon)
    residual = (m1 - m0) - inj
    return {"initial_mass_kg": m0, "final_mass_kg": m1, "injected_mass_kg": inj,
            "residual_kg": residual, "relative_residual": abs(residual) / m0}


def _write_pressures(path, traj, every_s):
    """Long format: one row per (time, node)."""
    every = max(1, int(round(every_s / traj.dt)))
    times, p = traj.nodal_pressures(every)
    ids = traj.network.node_ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_s", "node", "p_bar"])
        for t, row in zip(times, p):
            for nid, v in zip(ids, row):
                w.writerow([_r(t), nid, _r(v / BAR)])
    return times, p


def _write_mismatch(path, spec, net, controls, horizon, every_s):
    times = np.arange(0.0, horizon, every_s)
    times = np.append(times, horizon)
    d = spec.demand_on(times)
    mis = demand_mismatch(spec, net, controls, times)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_s", "demand_mw", "generation_mw", "mismatch_mw"])
        for t, dv, mv in zip(times, d, mis):
            w.writerow([_r(t), _r(dv), _r(dv - mv), _r(mv)])
    return mis


def cmd_simulate(cfg) -> int:
    prob = Problem(cfg, need_demand=False)
    out = Path(cfg["out"])
    traj, obj = run_forward(prob.net, prob.sys, prob.controls, prob.ic, prob.sim, prob.spec)
    traj.to_csv(out / "trajectory.csv", every_s=float(cfg["every_s"]))
    _, p = traj.nodal_pressures(max(1, int(round(float(cfg["every_s"]) / traj.dt))))
    summary = {
        "config": cfg,
        "n_state": prob.sys.n_state,
        "n_steps": traj.nsteps,
        "dt_s": traj.dt,
        "objective": obj,
        "mass_ledger": _mass_ledger(prob, traj),
        "pressure_bar": {"min": float(p.min() / BAR), "max": float(p.max() / BAR),
                         "finite": bool(np.all(np.isfinite(p)))},
    }
    _write_json(out / "summary.json", summary)
    return EXIT_OK


def gradcheck_errors(adj, fd) -> np.ndarray:
    """Componentwise relative error with a floor of 1e-6 of the largest FD entry."""
    adj = np.asarray(adj, dtype=float)
    fd = np.asarray(fd, dtype=float)
    floor = 1e-6 * float(np.max(np.abs(fd))) if fd.size else 0.0
    denom = np.maximum(np.maximum(np.abs(adj), np.abs(fd)), floor)
    diff = np.abs(adj - fd)
    return np.where(denom > 0, diff / np.where(denom > 0, denom, 1.0), 0.0)


def _parse_perturbation(text):
    try:
        idx, factor = text.split(":")
        return int(idx), float(factor)
    except ValueError as exc:
        raise ValidationError(f"--perturb-gradient expects INDEX:FACTOR, got {text!r}") from exc


def cmd_gradcheck(cfg) -> int:
    prob = Problem(cfg, need_demand=True)
    out = Path(cfg["out"])
    h = float(cfg["fd_step"])
    if not h > 0:
        raise ValidationError("--fd-step must be positive")
    obj, grad = adjoint_gradient(prob.net, prob.sys, prob.controls, prob.ic, prob.sim, prob.spec)
    if cfg["perturb_gradient"]:
        k, factor = _parse_perturbation(cfg["perturb_gradient"])
        if not 0 <= k < grad.size:
            raise ValidationError(f"--perturb-gradient index {k} outside [0, {grad.size})")
        flat = grad.ravel()
        # nudge zero entries too, so the hook always changes the gradient
        flat[k] = flat[k] * factor if flat[k] != 0 else factor - 1.0
        grad = flat.reshape(grad.shape)
    theta = prob.controls.theta
    fd = np.zeros_like(theta)
    for idx in np.ndindex(theta.shape):
        vals = []
        for s in (h, -h):
            t2 = theta.copy()
            t2[idx] += s
            vals.append(run_forward(prob.net, prob.sys, prob.controls.with_theta(t2), prob.ic,
                                    prob.sim, prob.spec)[1])
        fd[idx] = (vals[0] - vals[1]) / (2 * h)
    err = gradcheck_errors(grad, fd)
    ids = prob.net.node_ids
    with open(out / "gradcheck.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "hour", "adjoint", "finite_difference", "rel_error"])
        for (i, hr) in np.ndindex(theta.shape):
            w.writerow([ids[i], hr, _r(grad[i, hr]), _r(fd[i, hr]), _r(err[i, hr])])
    for (i, hr) in np.ndindex(theta.shape):
        print(f"{ids[i]:>8s} h{hr:<3d} adjoint {grad[i, hr]: .10e}  fd {fd[i, hr]: .10e}  "
              f"rel {err[i, hr]:.2e}")
    max_err = float(err.max()) if err.size else 0.0
    ok = max_err <= float(cfg["gradcheck_tol"])
    print(f"max relative error {max_err:.3e} (tolerance {float(cfg['gradcheck_tol']):.1e}): "
          f"{'PASS' if ok else 'FAIL'}")
    _write_json(out / "summary.json", {"config": cfg, "objective": obj, "n_params": int(theta.size),
                                       "max_rel_error": max_err, "passed": ok})
    return EXIT_OK if ok else EXIT_GRADCHECK


def _after_first_hour(times, p):
    mask = times >= HOUR
    if not mask.any():
        return None
    sel = p[mask]
    return {"min": float(sel.min() / BAR), "max": float(sel.max() / BAR)}


def _write_opt_outputs(prob, cfg, report, extra):
    out = Path(cfg["out"])
    with open(out / "loss_history.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "loss", "grad_norm"])
        for k, (f, g) in enumerate(zip(report.loss_history, report.grad_norms)):
            w.writerow([k, _r(f), _r(g)])
    ctl = prob.controls.with_theta(report.theta)
    ctl.to_csv(out / "solution_controls.csv", prob.net.node_ids)
    traj, _ = run_forward(prob.net, prob.sys, ctl, prob.ic, prob.sim, prob.spec)
    times, p = _write_pressures(out / "pressures.csv", traj, float(cfg["every_s"]))
    mis = _write_mismatch(out / "mismatch.csv", prob.spec, prob.net, ctl, prob.sim.horizon,
                          float(cfg["every_s"]))
    hourly = hourly_mismatch(prob.spec, ctl)
    peak = float(np.max(prob.spec.demand_on(np.linspace(0, prob.sim.horizon, 1001))))
    window = [(n.p_min, n.p_max) for n in prob.net.nodes]
    lo = np.array([w[0] for w in window])
    hi = np.array([w[1] for w in window])
    late = times >= HOUR
    summary = {
        "config": cfg,
        "termination_reason": report.reason,
        "iterations": report.iterations,
        "evaluations": report.n_evals,
        "initial_loss": report.loss_history[0],
        "final_loss": report.final_loss,
        "loss_ratio": report.loss_history[0] / report.final_loss if report.final_loss > 0 else math.inf,
        "peak_demand_mw": peak,
        "max_abs_mismatch_mw": float(np.max(np.abs(mis))),
        "max_abs_hourly_mismatch_mw": float(np.max(np.abs(hourly))),
        "pressure_after_first_hour_bar": _after_first_hour(times, p),
        "in_window_after_first_hour": bool(np.all((p[late] >= lo) & (p[late] <= hi))),
    }
    summary.update(extra)
    _write_json(out / "summary.json", summary)


def _optimize_common(cfg):
    prob = Problem(cfg, need_demand=True)
    prob.bounds_check()
    if int(cfg["max_iters"]) < 1:
        raise ValidationError("--max-iters must be >= 1")
    return prob


def cmd_optimize(cfg) -> int:
    prob = _optimize_common(cfg)
    rep = optimize(prob.net, prob.sys, prob.spec, prob.net.bounds(), prob.controls,
                   max_iters=int(cfg["max_iters"]), tol=float(cfg["tol"]), cfg=prob.sim,
                   ic=prob.ic, ftol=float(cfg["ftol"]))
    _write_opt_outputs(prob, cfg, rep, {})
    return EXIT_OK


def _write_bands(path, prob, theta, scenarios, every_s):
    """Per-node mean and std of pressure over scenarios at ``theta`` [bar]."""
    series = []
    times = None
    for s in range(scenarios.size):
        ctl = prob.controls.with_theta(scenarios.realize(theta, s))
        traj, _ = run_forward(prob.net, prob.sys, ctl, prob.ic, prob.sim)
        times, p = traj.nodal_pressures(max(1, int(round(every_s / traj.dt))))
        series.append(p / BAR)
    stack = np.stack(series)
    mean, std = stack.mean(axis=0), stack.std(axis=0)
    ids = prob.net.node_ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_s", "node", "mean_bar", "std_bar", "min_bar", "max_bar"])
        for k, t in enumerate(times):
            for i, nid in enumerate(ids):
                w.writerow([_r(t), nid, _r(mean[k, i]), _r(std[k, i]), _r(stack[:, k, i].min()),
                            _r(stack[:, k, i].max())])
    late = times >= HOUR
    return {"mean_minus_std_min_bar": float((mean - std)[late].min()) if late.any() else None,
            "mean_plus_std_max_bar": float((mean + std)[late].max()) if late.any() else None}


def cmd_optimize_stochastic(cfg) -> int:
    prob = _optimize_common(cfg)
    n_s = int(cfg["scenarios"])
    if n_s < 1:
        raise ValidationError("--scenarios must be >= 1")
    if float(cfg["sigma"]) < 0:
        raise ValidationError("--sigma must be >= 0")
    n_dem = len(prob.spec.demand_times) if cfg["perturb_demand"] else None
    scen = sample_scenarios(prob.net.n_nodes, prob.controls.n_intervals, n_s, float(cfg["sigma"]),
                            int(cfg["seed"]), n_demand_samples=n_dem)
    rep = optimize_stochastic(prob.net, prob.sys, prob.spec, prob.net.bounds(), prob.controls,
                              scen, max_iters=int(cfg["max_iters"]), tol=float(cfg["tol"]),
                              cfg=prob.sim, ic=prob.ic, workers=int(cfg["workers"]),
                              ftol=float(cfg["ftol"]))
    bands = _write_bands(Path(cfg["out"]) / "pressure_bands.csv", prob, rep.theta, scen,
                         float(cfg["every_s"]))
    _write_opt_outputs(prob, cfg, rep, {"scenario_bands": bands})
    return EXIT_OK


def bench_case(prob, dx, interval, repeats):
    """Best-of-``repeats`` wall times of forward and forward+adjoint.

    Always starts from the default initial state, since a state file only
    fits one grid.
    """
    net = prob.net
    sysd = discretize(net, dx)
    sim = SimConfig(horizon=prob.sim.horizon, cfl_safety=prob.sim.cfl_safety, target_dx=dx)
    ic = initial_state(sysd, net)
    base = default_controls(net, prob.spec, sim.horizon) if prob.spec is not None else None
    q = base.theta[:, 0] if base is not None else np.zeros(net.n_nodes)
    ctl = ControlSchedule.constant(q, sim.horizon, interval)
    fwd, adj = math.inf, math.inf
    traj = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        traj, _ = run_forward(net, sysd, ctl, ic, sim, prob.spec)
        fwd = min(fwd, time.perf_counter() - t0)
        t0 = time.perf_counter()
        value_and_gradient(net, sysd, ctl, ic, sim, prob.spec)
        adj = min(adj, time.perf_counter() - t0)
    return {"N_x": int(sysd.n_cells.sum()), "N_u": sysd.n_state, "N_t": traj.nsteps,
            "n_params": ctl.n_params, "forward_s": fwd, "adjoint_s": adj}


def loglog_slope(x, y) -> float:
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])


def cmd_bench(cfg) -> int:
    prob = Problem(cfg, need_demand=True)
    out = Path(cfg["out"])
    try:
        dxs = [float(v) for v in str(cfg["dx_list"]).split(",") if v.strip()]
    except ValueError as exc:
        raise ValidationError(f"--dx-list: {exc}") from exc
    if not dxs or min(dxs) <= 0:
        raise ValidationError("--dx-list needs positive values")
    repeats = max(1, int(cfg["repeats"]))
    # warm the compiled kernels so the first row is not charged for it
    bench_case(prob, max(dxs), HOUR, 1)
    rows = [dict(bench_case(prob, dx, HOUR, repeats), interval_s=HOUR) for dx in dxs]
    factor = int(cfg["param_factor"])
    if factor > 1:
        rows.append(dict(bench_case(prob, min(dxs), HOUR / factor, repeats),
                         interval_s=HOUR / factor))
    cols = ["N_x", "N_t", "forward_s", "adjoint_s", "N_u", "n_params", "interval_s"]
    with open(out / "bench.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([r[c] for c in cols])
    sweep = rows[: len(dxs)]
    summary = {"config": cfg, "rows": rows}
    if len(sweep) >= 2:
        nx = [r["N_x"] for r in sweep]
        summary["slope_forward"] = loglog_slope(nx, [r["forward_s"] for r in sweep])
        summary["slope_adjoint"] = loglog_slope(nx, [r["adjoint_s"] for r in sweep])
    if factor > 1:
        ref = next(r for r in sweep if r["N_x"] == rows[-1]["N_x"])
        summary["param_time_change"] = rows[-1]["adjoint_s"] / ref["adjoint_s"] - 1.0
    _write_json(out / "summary.json", summary)
    for r in rows:
        print(f"N_x {r['N_x']:6d}  N_t {r['N_t']:7d}  params {r['n_params']:5d}  "
              f"forward {r['forward_s']:.4f} s  forward+adjoint {r['adjoint_s']:.4f} s")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "gradcheck": cmd_gradcheck,
    "optimize": cmd_optimize,
    "optimize-stochastic": cmd_optimize_stochastic,
    "bench-scaling": cmd_bench,
}


def _error(kind, message) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": str(message)}) + "\n")
    return EXIT_ERROR


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "verbose", False):
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        cfg = resolve(args)
        Path(cfg["out"]).mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg)
    except _Fail as exc:
        return _error(exc.kind, exc)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        return _error("io", f"{exc.filename}: {exc.strerror}")
    except NetworkParseError as exc:
        return _error("parse", exc)
    except DiffGasError as exc:
        return _error(exc.kind if exc.kind != "error" else "validation", exc)
    except (ValueError, KeyError) as exc:
        # malformed numbers or columns in CSV inputs
        return _error("parse", exc)
    except OSError as exc:
        return _error("io", exc)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
