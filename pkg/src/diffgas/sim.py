"""Fixed-step SSPRK3 time integration with checkpointed trajectories."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from . import _kernels
from .controls import HOUR, ControlSchedule
from .errors import StateValidityError, ValidationError
from .grid import DiscreteSystem
from .model import BAR, GasNetwork


@dataclass(frozen=True)
class SimConfig:
    horizon: float = 10 * HOUR
    cfl_safety: float = 0.4
    target_dx: float = 1000.0
    checkpoint_stride: Optional[int] = None  # None: about sqrt(n_steps)

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValidationError("horizon must be positive")
        if not 0 < self.cfl_safety <= 1:
            raise ValidationError("cfl_safety must lie in (0, 1]")
        if self.checkpoint_stride is not None and self.checkpoint_stride < 1:
            raise ValidationError("checkpoint_stride must be >= 1")


def cfl_limit(sys: DiscreteSystem, net: GasNetwork, nu: float) -> float:
    """Acoustic CFL step ``nu * min(dx) / a`` before breakpoint alignment."""
    return nu * sys.min_dx / net.gas.sound_speed


def _common_period(interval: float, horizon: Optional[float]) -> float:
    if horizon is None:
        return interval
    a = Fraction(interval).limit_denominator(10**6)
    b = Fraction(horizon).limit_denominator(10**6)
    # gcd of two rationals
    den = a.denominator * b.denominator // math.gcd(a.denominator, b.denominator)
    g = Fraction(math.gcd(int(a * den), int(b * den)), den)
    return float(g)


def cfl_dt(sys: DiscreteSystem, net: GasNetwork, nu: float, interval: float = HOUR,
           horizon: Optional[float] = None) -> float:
    """Largest step strictly below the CFL limit that tiles every breakpoint.

    With period ``P`` (the control interval, or the common divisor of the
    interval and horizon) the step is ``P / n`` for the smallest integer
    ``n`` with ``P / n < nu * min(dx) / a`` (this is ``ceil(P / dt_cfl)`` unless
    ``P / dt_cfl`` is an exact integer, in which case one more step is taken).
    """
    if not 0 < nu <= 1:
        raise ValidationError("cfl safety factor must lie in (0, 1]")
    dt0 = cfl_limit(sys, net, nu)
    period = _common_period(interval, horizon)
    n = math.floor(period / dt0) + 1
    return period / n


def step_ssprk3(f, u, q, dt):
    """One Shu-Osher SSPRK(3,3) step of ``du/dt = f(u, q)``."""
    u = np.asarray(u, dtype=float)
    u1 = u + dt * f(u, q)
    u2 = 0.75 * u + 0.25 * (u1 + dt * f(u1, q))
    return u / 3.0 + (2.0 / 3.0) * (u2 + dt * f(u2, q))


class Trajectory:
    """Checkpointed record of one forward integration.

    Only every ``stride``-th state (plus the final one) is stored; any other
    step is recovered by replaying from the preceding checkpoint with the
    same compiled step, which reproduces the forward pass bit for bit.
    """

    def __init__(self, system, network, q_schedule, steps_per_interval, nsteps, dt, horizon,
                 stride, checkpoint_steps, checkpoints, checkpoint_rates, interval):
        self.system = system
        self.network = network
        self.q_schedule = q_schedule
        self.steps_per_interval = steps_per_interval
        self.nsteps = nsteps
        self.dt = dt
        self.horizon = horizon
        self.stride = stride
        self.checkpoint_steps = checkpoint_steps
        self.checkpoints = checkpoints
        self.checkpoint_rates = checkpoint_rates
        self.interval = interval
        for arr in (q_schedule, checkpoint_steps, checkpoints, checkpoint_rates):
            arr.setflags(write=False)

    @property
    def times(self) -> np.ndarray:
        return self.horizon * np.arange(self.nsteps + 1) / self.nsteps

    def time_of_step(self, n: int) -> float:
        return self.horizon * n / self.nsteps

    @property
    def checkpoint_times(self) -> np.ndarray:
        return self.horizon * self.checkpoint_steps / self.nsteps

    @property
    def initial_state(self) -> np.ndarray:
        return self.checkpoints[0].copy()

    @property
    def final_state(self) -> np.ndarray:
        return self.checkpoints[-1].copy()

    def schedule_matrix(self, controls: ControlSchedule) -> np.ndarray:
        return np.ascontiguousarray(controls.theta.T)

    def _alloc(self):
        n = self.system.n_state
        m = self.stride
        return np.empty((m + 1, n)), np.empty((m, n)), np.empty((m, n))

    def _replay(self, k, bufs):
        U, U1, U2 = bufs
        s0 = int(self.checkpoint_steps[k])
        m = int(self.checkpoint_steps[k + 1]) - s0
        bad = _kernels.replay(self.checkpoints[k], self.q_schedule, self.steps_per_interval, s0, m,
                              self.dt, U, U1, U2, self.system.density_slots,
                              *self.system.kernel_args)
        if bad >= 0:  # pragma: no cover - the forward pass already succeeded
            raise StateValidityError(bad, self.system.describe_slot(bad), np.nan)
        return s0, m

    def segments(self, reverse: bool = False):
        """Yield ``(s0, m, U, U1, U2)`` for each checkpoint interval.

        ``U[j]`` is the state at step ``s0 + j`` (``j = 0..m``), ``U1[j]`` and
        ``U2[j]`` the stage states of step ``s0 + j``. Buffers are reused
        between iterations.
        """
        bufs = self._alloc()
        order = range(len(self.checkpoint_steps) - 1)
        if reverse:
            order = reversed(order)
        for k in order:
            s0, m = self._replay(k, bufs)
            yield s0, m, bufs[0], bufs[1], bufs[2]

    def state_at_step(self, n: int) -> np.ndarray:
        if not 0 <= n <= self.nsteps:
            raise ValidationError(f"step {n} outside [0, {self.nsteps}]")
        k = int(np.searchsorted(self.checkpoint_steps, n, side="right")) - 1
        if self.checkpoint_steps[k] == n:
            return self.checkpoints[k].copy()
        bufs = self._alloc()
        s0, _ = self._replay(k, bufs)
        return bufs[0][n - s0].copy()

    def query_state(self, t: float) -> np.ndarray:
        """State at time ``t``.

        On the step grid this is the exact forward-pass state (stored or
        replayed). Between steps, a cubic Hermite interpolant through the two
        bracketing states and their rates is returned.
        """
        if not (0.0 <= t <= self.horizon):
            raise ValidationError(f"t = {t} outside [0, {self.horizon}]")
        x = t / self.horizon * self.nsteps
        n = int(round(x))
        if abs(x - n) <= 1e-9:
            return self.state_at_step(n)
        n = int(math.floor(x))
        ua = self.state_at_step(n)
        ub = self.state_at_step(n + 1)
        q = self.q_schedule[n // self.steps_per_interval]
        fa = np.empty_like(ua)
        fb = np.empty_like(ub)
        _kernels.rhs_into(fa, ua, q, *self.system.kernel_args)
        _kernels.rhs_into(fb, ub, q, *self.system.kernel_args)
        s = x - n
        h = self.dt
        h00 = 2 * s**3 - 3 * s**2 + 1
        h10 = s**3 - 2 * s**2 + s
        h01 = -2 * s**3 + 3 * s**2
        h11 = s**3 - s**2
        return h00 * ua + h10 * h * fa + h01 * ub + h11 * h * fb

    def sample(self, every: int = 1):
        """Replay the whole run, returning ``(step_indices, states)``.

        Keeps every ``every``-th step plus the final step.
        """
        idx = sorted(set(range(0, self.nsteps + 1, every)) | {self.nsteps})
        wanted = set(idx)
        out = np.empty((len(idx), self.system.n_state))
        r = 0
        for s0, m, U, _, _ in self.segments():
            for j in range(m + (1 if s0 + m == self.nsteps else 0)):
                if s0 + j in wanted:
                    out[r] = U[j]
                    r += 1
        return np.array(idx), out

    def nodal_pressures(self, every: int = 1):
        """``(times, p)`` with nodal pressures in Pa, shape (n_times, n_nodes)."""
        idx, states = self.sample(every)
        return self.horizon * idx / self.nsteps, self.system.a2 * states[:, self.system.node_slot]

    def to_csv(self, path, every_s: float = 60.0):
        """Write nodal pressures [bar] and pipe-end fluxes [kg/(m^2 s)]."""
        every = max(1, int(round(every_s / self.dt)))
        idx, states = self.sample(every)
        net = self.network
        header = ["time_s"] + [f"p_{n.id}_bar" for n in net.nodes]
        for pid in self.system.pipe_ids:
            header += [f"phi_{pid}_from", f"phi_{pid}_to"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for n, u in zip(idx, states):
                p = self.system.a2 * u[self.system.node_slot] / BAR
                bf = self.system.boundary_fluxes(u).ravel()
                w.writerow([repr(self.time_of_step(int(n)))] + [repr(float(v)) for v in p]
                           + [repr(float(v)) for v in bf])


def default_stride(nsteps: int) -> int:
    return max(1, int(round(math.sqrt(nsteps))))


def run_forward(net: GasNetwork, sys: DiscreteSystem, controls: ControlSchedule, ic, cfg: SimConfig,
                spec=None):
    """Integrate and optionally accumulate the objective of ``spec``.

    Returns ``(trajectory, objective)``; the objective is ``None`` without a
    spec.
    """
    if controls.n_nodes != net.n_nodes:
        raise ValidationError("controls must have one row per node")
    if controls.horizon < cfg.horizon * (1 - 1e-12):
        raise ValidationError(
            f"controls cover {controls.horizon} s but the horizon is {cfg.horizon} s")
    u0 = np.ascontiguousarray(ic, dtype=float)
    sys.check_state(u0, time=0.0)

    dt = cfl_dt(sys, net, cfg.cfl_safety, controls.interval, cfg.horizon)
    nsteps = int(round(cfg.horizon / dt))
    spi = int(round(controls.interval / dt))
    stride = cfg.checkpoint_stride or default_stride(nsteps)
    stride = min(stride, nsteps)
    ck_steps = np.array(sorted(set(range(0, nsteps, stride)) | {nsteps}), dtype=np.int64)
    ck = np.empty((ck_steps.size, sys.n_state))
    ckrate = np.empty_like(ck)
    qsched = np.ascontiguousarray(controls.theta.T)

    times = cfg.horizon * np.arange(nsteps + 1) / nsteps
    if spec is not None:
        if not spec.covers(cfg.horizon):
            raise ValidationError("demand series does not cover [0, horizon]")
        demand = spec.demand_on(times)
        cargs = spec.cost_args()
    else:
        demand = np.zeros(nsteps + 1)
        cargs = (0.0, 0.0, 0.0, np.zeros(net.n_nodes), np.zeros(net.n_nodes),
                 np.zeros(net.n_nodes), np.zeros(net.n_nodes), 1.0)
    alpha, beta, gamma, eta, c, pmin, pmax, ps = cargs
    obj, fail_step, fail_slot = _kernels.integrate(
        u0, qsched, spi, nsteps, dt, stride, ck, ckrate, spec is not None, demand,
        alpha, beta, gamma, eta, c, pmin, pmax, ps, sys.density_slots, *sys.kernel_args)
    if fail_step >= 0:
        raise StateValidityError(fail_slot, sys.describe_slot(fail_slot), np.nan,
                                 time=float(times[fail_step]))
    traj = Trajectory(sys, net, qsched, spi, nsteps, dt, cfg.horizon, stride, ck_steps, ck,
                      ckrate, controls.interval)
    return traj, (float(obj) if spec is not None else None)


def simulate(net: GasNetwork, sys: DiscreteSystem, controls: ControlSchedule, ic,
             cfg: SimConfig) -> Trajectory:
    """Integrate the network from ``ic`` over ``[0, cfg.horizon]``."""
    return run_forward(net, sys, controls, ic, cfg)[0]


def injected_mass(controls: ControlSchedule, horizon: float) -> float:
    """Net injected mass ``sum_i int_0^T q_i dt`` for piecewise-constant controls."""
    total = 0.0
    for h in range(controls.n_intervals):
        t0 = h * controls.interval
        t1 = min((h + 1) * controls.interval, horizon)
        if t1 > t0:
            total += float(np.sum(controls.theta[:, h])) * (t1 - t0)
    return total


def query_state(traj: Trajectory, t: float) -> np.ndarray:
    """State of ``traj`` at time ``t`` (see ``Trajectory.query_state``)."""
    return traj.query_state(t)
