"""Discrete adjoint of the SSPRK3 forward pass.

The reverse sweep starts from a zero co-state at the final time and walks
the checkpoint segments backward. Each segment is replayed forward from its
checkpoint (stage states included), then traversed in reverse applying the
transposed stage Jacobians. The initial state does not depend on the
controls, so no initial-condition multiplier is needed.
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from .grid import DiscreteSystem, _q_array
from .model import GasNetwork
from .sim import run_forward


def vjp_rhs(sys: DiscreteSystem, net: GasNetwork, u, q, w):
    """Transpose-Jacobian products ``(w^T df/du, w^T df/dq)`` of ``grid.rhs``."""
    u = np.ascontiguousarray(u, dtype=float)
    sys.check_state(u)
    q = _q_array(sys, q)
    w = np.ascontiguousarray(w, dtype=float)
    gu = np.zeros(sys.n_state)
    gq = np.zeros(sys.n_nodes)
    _kernels.vjp_into(gu, gq, u, w, *sys.kernel_args)
    return gu, gq


def reverse_sweep(traj, spec) -> np.ndarray:
    """Gradient of the trapezoid objective w.r.t. ``traj.q_schedule``.

    Returns an array shaped like the controls' ``theta`` (node x interval).
    """
    sys = traj.system
    alpha, beta, gamma, eta, c, pmin, pmax, ps = spec.cost_args()
    demand = spec.demand_on(traj.times)
    lam = np.zeros(sys.n_state)
    _kernels.add_pressure_grad(lam, traj.checkpoints[-1], 0.5 * traj.dt, gamma, sys.node_slot,
                               sys.a2, pmin, pmax, ps)
    gq = np.zeros_like(traj.q_schedule)
    for s0, m, U, U1, U2 in traj.segments(reverse=True):
        _kernels.reverse_segment(U, U1, U2, traj.q_schedule, traj.steps_per_interval, s0, m,
                                 traj.dt, lam, gq, demand, alpha, beta, gamma, eta, c, pmin,
                                 pmax, ps, *sys.kernel_args)
    return gq.T.copy()


def value_and_gradient(net, sys, controls, ic, cfg, spec):
    """Like ``adjoint_gradient`` but also returns the forward trajectory."""
    traj, obj = run_forward(net, sys, controls, ic, cfg, spec)
    return obj, reverse_sweep(traj, spec), traj


def adjoint_gradient(net, sys, controls, ic, cfg, spec):
    """Objective and its exact gradient w.r.t. every control parameter.

    Returns ``(objective, gradient)`` with ``gradient[i, h] = dO/dtheta[i, h]``.
    """
    obj, grad, _ = value_and_gradient(net, sys, controls, ic, cfg, spec)
    return obj, grad
