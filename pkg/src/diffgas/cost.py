"""Operational objective: demand mismatch, generation cost, pressure penalty."""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ValidationError
from .model import BAR, GasNetwork

DEFAULT_ALPHA = 1.0
DEFAULT_BETA = 1e-2
DEFAULT_GAMMA = 1e3


@dataclass(frozen=True, eq=False)
class ObjectiveSpec:
    """Weights and data of the per-time cost

    ``C = alpha (D(t) - sum G_i(q_i))^2 + beta sum E_i(q_i) + gamma sum_nodes V(p)``.
    """

    demand_times: np.ndarray
    demand_values: np.ndarray
    efficiency: np.ndarray
    unit_cost: np.ndarray
    p_min: np.ndarray
    p_max: np.ndarray
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    gamma: float = DEFAULT_GAMMA
    p_scale: float = BAR

    def __post_init__(self):
        t = np.asarray(self.demand_times, dtype=float)
        d = np.asarray(self.demand_values, dtype=float)
        if t.ndim != 1 or t.shape != d.shape or t.size < 1:
            raise ValidationError("demand times and values must be matching 1-D series")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValidationError("demand sample times must be strictly increasing")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValidationError("alpha, beta, gamma must be >= 0")
        if not self.p_scale > 0:
            raise ValidationError("p_scale must be positive")
        for name in ("demand_times", "demand_values", "efficiency", "unit_cost", "p_min", "p_max"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_network(cls, net: GasNetwork, demand_times, demand_mw, **kw) -> "ObjectiveSpec":
        return cls(
            demand_times=demand_times,
            demand_values=demand_mw,
            efficiency=net.efficiencies(),
            unit_cost=net.unit_costs(),
            p_min=np.array([n.p_min for n in net.nodes]),
            p_max=np.array([n.p_max for n in net.nodes]),
            **kw,
        )

    def replace(self, **changes) -> "ObjectiveSpec":
        return dataclasses.replace(self, **changes)

    @property
    def horizon_covered(self) -> tuple:
        return float(self.demand_times[0]), float(self.demand_times[-1])

    def covers(self, horizon: float) -> bool:
        t0, t1 = self.horizon_covered
        return t0 <= 0.0 and t1 >= horizon * (1 - 1e-12)

    def demand_on(self, times) -> np.ndarray:
        times = np.asarray(times, dtype=float)
        t0, t1 = self.horizon_covered
        tol = 1e-9 * max(1.0, abs(t1))
        if times.size and (times.min() < t0 - tol or times.max() > t1 + tol):
            raise ValidationError(f"demand requested outside its sample range [{t0}, {t1}]")
        return np.interp(times, self.demand_times, self.demand_values)

    def cost_args(self) -> tuple:
        """Arguments consumed by the compiled cost kernels."""
        return (float(self.alpha), float(self.beta), float(self.gamma), self.efficiency,
                self.unit_cost, self.p_min, self.p_max, float(self.p_scale))


def load_demand(path):
    """Read a ``time_s,demand_mw`` CSV into two arrays."""
    times, values = [], []
    with open(path, newline="") as fh:
        rows = csv.DictReader(fh)
        if rows.fieldnames is None or set(rows.fieldnames) != {"time_s", "demand_mw"}:
            raise ValidationError(f"{path}: expected header time_s,demand_mw")
        for row in rows:
            times.append(float(row["time_s"]))
            values.append(float(row["demand_mw"]))
    if not times:
        raise ValidationError(f"{path}: no demand samples")
    return np.array(times), np.array(values)


def demand_at(spec: ObjectiveSpec, t: float) -> float:
    """Linearly interpolated demand [MW]; exact at sample times."""
    return float(spec.demand_on(np.array([t]))[0])


def pressure_penalty(p, p_min, p_max, p_scale=BAR):
    """Quasi-quadratic window penalty, zero inside ``[p_min, p_max]``."""
    p = np.asarray(p, dtype=float)
    hi = np.maximum(0.0, p - p_max)
    lo = np.maximum(0.0, p_min - p)
    v = (hi * hi + lo * lo) / (p_scale * p_scale)
    return float(v) if v.ndim == 0 else v


def cost_instant(spec: ObjectiveSpec, net: GasNetwork, u, q, t: float) -> float:
    """Cost rate at time ``t``; pressures are read from the nodal densities.

    Relies on the state layout of ``grid.discretize``: node ``i``'s density
    is slot ``i``.
    """
    u = np.ascontiguousarray(u, dtype=float)
    q = np.ascontiguousarray(q, dtype=float)
    alpha, beta, gamma, eta, c, pmin, pmax, ps = spec.cost_args()
    return float(_kernels.step_cost(u, q, demand_at(spec, t), alpha, beta, gamma, eta, c,
                                    np.arange(net.n_nodes, dtype=np.int64), float(net.gas.a2),
                                    pmin, pmax, ps))


def cost_total(spec: ObjectiveSpec, net: GasNetwork, traj, controls=None) -> float:
    """Trapezoid-in-time integral of ``cost_instant`` over the trajectory.

    Replays the trajectory segment by segment and accumulates in the same
    order as the forward pass, so the result is bit-identical to the
    objective reported by ``adjoint_gradient``.
    """
    qsched = traj.q_schedule if controls is None else traj.schedule_matrix(controls)
    demand = spec.demand_on(traj.times)
    alpha, beta, gamma, eta, c, pmin, pmax, ps = spec.cost_args()
    obj = 0.0
    for s0, m, U, _, _ in traj.segments():
        obj = _kernels.segment_cost(U, qsched, traj.steps_per_interval, s0, m, traj.dt, demand,
                                    obj, alpha, beta, gamma, eta, c, traj.system.node_slot,
                                    traj.system.a2, pmin, pmax, ps)
    return float(obj)


def demand_mismatch(spec: ObjectiveSpec, net: GasNetwork, controls, times) -> np.ndarray:
    """``D(t) - sum_i G_i(q_i(t))`` [MW] evaluated at ``times``."""
    eta = spec.efficiency
    out = np.empty(len(times))
    for k, t in enumerate(times):
        q = controls.at(t)
        out[k] = demand_at(spec, t) - float(np.sum(eta * np.maximum(0.0, -q)))
    return out


def hourly_mismatch(spec: ObjectiveSpec, controls, n_sub: int = 64) -> np.ndarray:
    """Interval-averaged mismatch ``(1/I) int_I (D - sum G) dt`` per control interval.

    The integral is taken with the composite trapezoid rule on ``n_sub``
    sub-intervals, exact for piecewise-linear demand sampled on the control
    grid.
    """
    eta = spec.efficiency
    out = np.empty(controls.n_intervals)
    for h in range(controls.n_intervals):
        t0 = h * controls.interval
        t1 = min((h + 1) * controls.interval, controls.horizon)
        ts = np.linspace(t0, t1, n_sub + 1)
        d = spec.demand_on(ts)
        dbar = float(np.sum(0.5 * (d[1:] + d[:-1]) * np.diff(ts)) / (t1 - t0))
        gen = float(np.sum(eta * np.maximum(0.0, -controls.theta[:, h])))
        out[h] = dbar - gen
    return out
