"""Box-constrained L-BFGS over hourly nodal controls, deterministic and SAA."""

from __future__ import annotations

import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .adjoint import adjoint_gradient
from .controls import HOUR, ControlSchedule, n_intervals
from .cost import ObjectiveSpec
from .grid import initial_state
from .sim import SimConfig

log = logging.getLogger(__name__)

CONVERGED = "converged"
FTOL = "ftol"
MAX_ITERS = "max_iters"
LINE_SEARCH_FAILED = "line_search_failed"


@dataclass
class OptReport:
    theta: np.ndarray
    loss_history: list
    grad_norms: list
    iterations: int
    reason: str
    n_evals: int = 0
    step_sizes: list = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.loss_history[-1]


def project_box(theta, lo, hi) -> np.ndarray:
    """Clamp ``theta`` componentwise into ``[lo, hi]`` (broadcasting per node)."""
    theta = np.asarray(theta, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if theta.ndim == 2 and lo.ndim == 1:
        lo, hi = lo[:, None], hi[:, None]
    return np.minimum(np.maximum(theta, lo), hi)


def _two_loop(g, pairs):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    s, y, _ = pairs[-1]
    q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def lbfgs_box(fun: Callable, x0, lo, hi, max_iters: int = 50, tol: float = 1e-6,
              ftol: float = 0.0, memory: int = 10, c1: float = 1e-4,
              max_backtracks: int = 30, initial_step: float = 1.0,
              callback: Optional[Callable] = None) -> OptReport:
    """Projected L-BFGS with Armijo backtracking for ``min f(x), lo <= x <= hi``.

    ``fun(x)`` returns ``(f, grad)``. Bounds at which the gradient points
    outward are held fixed when forming the quasi-Newton direction, trial
    points are projected onto the box, and curvature pairs are kept only when
    ``s^T y > 0``. Stops when the projected gradient's infinity norm drops to
    ``tol``, when the relative decrease of an accepted step is at most
    ``ftol``, after ``max_iters`` iterations, or when the line search fails
    twice in a row (the second attempt uses a steepest-descent direction with
    the memory cleared).
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    shape = np.shape(x0)
    lo = np.broadcast_to(np.asarray(lo, dtype=float), shape).ravel()
    hi = np.broadcast_to(np.asarray(hi, dtype=float), shape).ravel()
    x = np.clip(np.asarray(x0, dtype=float).ravel(), lo, hi)
    if not np.all(np.isfinite(x)):
        raise ValueError("x0 must be finite")

    def evaluate(z):
        fz, gz = fun(z.reshape(shape))
        return float(fz), np.asarray(gz, dtype=float).ravel()

    f, g = evaluate(x)
    n_evals = 1
    pairs = deque(maxlen=memory)
    losses = [f]
    pg_norm = float(np.max(np.abs(x - np.clip(x - g, lo, hi)))) if x.size else 0.0
    gnorms = [pg_norm]
    steps = []
    reason = MAX_ITERS
    it = 0
    while True:
        if pg_norm <= tol:
            reason = CONVERGED
            break
        if it >= max_iters:
            reason = MAX_ITERS
            break
        blocked = ((x <= lo) & (g > 0)) | ((x >= hi) & (g < 0))
        g_free = np.where(blocked, 0.0, g)

        accepted = False
        for attempt in range(2):
            if pairs and attempt == 0:
                d = -_two_loop(g_free, list(pairs))
                d[blocked] = 0.0
                if not g_free @ d < 0:
                    d = -g_free
            else:
                pairs.clear()
                gmax = np.max(np.abs(g_free))
                d = -g_free * (initial_step / gmax) if gmax > 0 else -g_free
            t = 1.0
            for _ in range(max_backtracks + 1):
                x_new = np.clip(x + t * d, lo, hi)
                dec = g @ (x_new - x)
                if dec < 0:
                    f_new, g_new = evaluate(x_new)
                    n_evals += 1
                    if f_new <= f + c1 * dec and f_new < f:
                        accepted = True
                        break
                t *= 0.5
            if accepted:
                break
            log.debug("line search failed on attempt %d", attempt)
        if not accepted:
            reason = LINE_SEARCH_FAILED
            break

        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * float(np.sqrt((s @ s) * (y @ y))):
            pairs.append((s, y, 1.0 / sy))
        rel_dec = (f - f_new) / max(abs(f), 1e-300)
        x, f, g = x_new, f_new, g_new
        it += 1
        pg_norm = float(np.max(np.abs(x - np.clip(x - g, lo, hi))))
        losses.append(f)
        gnorms.append(pg_norm)
        steps.append(t)
        if callback is not None:
            callback(it, x.reshape(shape), f, pg_norm)
        log.info("iter %3d  loss %.10e  |pg| %.3e  step %.3g", it, f, pg_norm, t)
        if ftol > 0 and rel_dec <= ftol:
            reason = FTOL
            break

    return OptReport(theta=x.reshape(shape), loss_history=losses, grad_norms=gnorms,
                     iterations=it, reason=reason, n_evals=n_evals, step_sizes=steps)


def default_controls(net, spec: ObjectiveSpec, horizon: float, interval: float = HOUR) -> ControlSchedule:
    """Flat starting schedule.

    Mean demand is split across generator nodes in proportion to their
    efficiency, fixed offtakes sit at their (degenerate) bounds, and the
    first injection-capable node balances the total.
    """
    lo, hi = net.bounds()
    eta = net.efficiencies()
    mean_demand = float(np.mean(spec.demand_on(np.linspace(0.0, horizon, 241))))
    q = np.zeros(net.n_nodes)
    if eta.sum() > 0:
        withdraw = mean_demand * eta.sum() / float(eta @ eta)
        q = -withdraw * eta / eta.sum()
    q = np.clip(q, lo, hi)
    fixed = lo == hi
    q[fixed] = lo[fixed]
    suppliers = np.nonzero(hi > 0)[0]
    if suppliers.size:
        k = int(suppliers[0])
        q[k] = 0.0
        q[k] = float(np.clip(-q.sum(), lo[k], hi[k]))
    return ControlSchedule.constant(q, horizon, interval)


def _as_theta(theta0):
    if isinstance(theta0, ControlSchedule):
        return theta0.theta.copy()
    return np.array(theta0, dtype=float)


def _schedule_for(theta, cfg, interval):
    return ControlSchedule(theta, cfg.horizon, interval)


def optimize(net, sys, spec, bounds, theta0, max_iters: int = 50, tol: float = 1e-6,
             cfg: Optional[SimConfig] = None, ic=None, interval: float = HOUR,
             objective: Optional[Callable] = None, **lbfgs_kw) -> OptReport:
    """Minimize the time-integrated cost over the control matrix.

    ``objective`` replaces the PDE-based ``(loss, grad)`` evaluation, which
    is useful for testing the optimizer on closed-form problems.
    """
    cfg = cfg or SimConfig()
    if isinstance(theta0, ControlSchedule):
        interval = theta0.interval
    theta0 = _as_theta(theta0)
    if ic is None and objective is None:
        ic = initial_state(sys, net)

    if objective is None:
        def objective(theta):
            return adjoint_gradient(net, sys, _schedule_for(theta, cfg, interval), ic, cfg, spec)

    lo, hi = bounds
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if theta0.ndim == 2 and lo.ndim == 1:
        lo, hi = lo[:, None], hi[:, None]
    return lbfgs_box(objective, theta0, lo, hi, max_iters=max_iters, tol=tol, **lbfgs_kw)


@dataclass(frozen=True, eq=False)
class ScenarioSet:
    """Fixed sample of multiplicative consumption noise.

    ``eps[s, i, h]`` perturbs every withdrawal ``theta[i, h] < 0`` to
    ``theta[i, h] * (1 + eps[s, i, h])``; injections are left unchanged.
    If ``demand_eps`` is given, scenario demand samples are scaled by
    ``1 + demand_eps[s, k]``.
    """

    eps: np.ndarray
    sigma: float
    seed: int
    demand_eps: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return self.eps.shape[0]

    def factor(self, theta, s: int) -> np.ndarray:
        """``d q_realized / d theta`` for scenario ``s`` (withdrawal side at 0)."""
        return np.where(np.asarray(theta) <= 0.0, 1.0 + self.eps[s], 1.0)

    def realize(self, theta, s: int) -> np.ndarray:
        return np.asarray(theta, dtype=float) * self.factor(theta, s)

    def spec_for(self, spec: ObjectiveSpec, s: int) -> ObjectiveSpec:
        if self.demand_eps is None:
            return spec
        return spec.replace(demand_values=spec.demand_values * (1.0 + self.demand_eps[s]))


def sample_scenarios(n_nodes: int, n_hours: int, n_scenarios: int, sigma: float = 0.05,
                     seed: int = 0, n_demand_samples: Optional[int] = None) -> ScenarioSet:
    """Draw ``eps ~ Normal(0, sigma^2)`` per scenario, node and hour.

    ``sigma = 0`` gives exact zeros, so every scenario equals the base case.
    Pass ``n_demand_samples`` to also perturb the demand series.
    """
    if n_scenarios < 1:
        raise ValueError("need at least one scenario")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    rng = np.random.default_rng(seed)
    eps = sigma * rng.standard_normal((n_scenarios, n_nodes, n_hours))
    demand_eps = None
    if n_demand_samples is not None:
        demand_eps = sigma * rng.standard_normal((n_scenarios, n_demand_samples))
    for arr in (eps, demand_eps):
        if arr is not None:
            arr.setflags(write=False)
    return ScenarioSet(eps=eps, sigma=float(sigma), seed=int(seed), demand_eps=demand_eps)


def saa_value_and_grad(net, sys, spec, theta, scenarios: ScenarioSet, cfg, ic,
                       interval: float = HOUR, workers: int = 1, order=None):
    """Scenario-averaged objective and gradient w.r.t. the shared ``theta``.

    Per-scenario work may run on ``workers`` threads; results are always
    reduced in scenario-index order, independent of ``order`` (the
    submission order).
    """
    theta = np.asarray(theta, dtype=float)
    idx = list(range(scenarios.size)) if order is None else list(order)

    def one(s):
        ctl = _schedule_for(scenarios.realize(theta, s), cfg, interval)
        obj, grad = adjoint_gradient(net, sys, ctl, ic, cfg, scenarios.spec_for(spec, s))
        return s, obj, grad * scenarios.factor(theta, s)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, idx))
    else:
        results = [one(s) for s in idx]
    by_index = {s: (obj, grad) for s, obj, grad in results}
    total = 0.0
    gsum = np.zeros_like(theta)
    for s in range(scenarios.size):
        obj, grad = by_index[s]
        total += obj
        gsum += grad
    return total / scenarios.size, gsum / scenarios.size


def optimize_stochastic(net, sys, spec, bounds, theta0, scenarios: ScenarioSet,
                        max_iters: int = 50, tol: float = 1e-6, cfg: Optional[SimConfig] = None,
                        ic=None, interval: float = HOUR, workers: int = 1,
                        **lbfgs_kw) -> OptReport:
    """Sample-average optimization with one control shared by all scenarios."""
    cfg = cfg or SimConfig()
    if isinstance(theta0, ControlSchedule):
        interval = theta0.interval
    theta0 = _as_theta(theta0)
    if ic is None:
        ic = initial_state(sys, net)

    def objective(theta):
        return saa_value_and_grad(net, sys, spec, theta, scenarios, cfg, ic, interval, workers)

    return optimize(net, sys, spec, bounds, theta0, max_iters=max_iters, tol=tol, cfg=cfg,
                    ic=ic, interval=interval, objective=objective, **lbfgs_kw)


def n_hours(cfg: SimConfig, interval: float = HOUR) -> int:
    return n_intervals(cfg.horizon, interval)
