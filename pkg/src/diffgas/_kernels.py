"""Compiled inner loops.

Every kernel takes the discretization as flat index/coefficient arrays (see
``DiscreteSystem.kernel_args``) so that the same code path serves the forward
integration, checkpoint replay and the reverse sweep. Replay relies on these
kernels being deterministic: no fastmath, no parallel reductions.
"""

import numpy as np
from numba import njit

_JIT = dict(cache=True, nogil=True)


@njit(**_JIT)
def rhs_into(du, u, q, a2, f_slot, f_left, f_right, f_inv_dx, f_fric,
             d_slot, d_fl, d_fr, d_inv_dx, node_slot, node_vol,
             st_node, st_flux, st_coef):
    for k in range(f_slot.size):
        rl = u[f_left[k]]
        rr = u[f_right[k]]
        phi = u[f_slot[k]]
        du[f_slot[k]] = -(a2 * (rr - rl) * f_inv_dx[k]
                          + f_fric[k] * phi * abs(phi) / (0.5 * (rl + rr)))
    for k in range(d_slot.size):
        du[d_slot[k]] = -(u[d_fr[k]] - u[d_fl[k]]) * d_inv_dx[k]
    for k in range(node_slot.size):
        du[node_slot[k]] = q[k]
    for k in range(st_node.size):
        du[node_slot[st_node[k]]] += st_coef[k] * u[st_flux[k]]
    for k in range(node_slot.size):
        du[node_slot[k]] = du[node_slot[k]] / node_vol[k]


@njit(**_JIT)
def vjp_into(gu, gq, u, w, a2, f_slot, f_left, f_right, f_inv_dx, f_fric,
             d_slot, d_fl, d_fr, d_inv_dx, node_slot, node_vol,
             st_node, st_flux, st_coef):
    """Accumulate ``gu += w^T df/du`` and ``gq += w^T df/dq``."""
    for k in range(f_slot.size):
        wk = w[f_slot[k]]
        if wk == 0.0:
            continue
        il = f_left[k]
        ir = f_right[k]
        ip = f_slot[k]
        phi = u[ip]
        rbar = 0.5 * (u[il] + u[ir])
        fr = f_fric[k]
        grad_rbar = 0.5 * fr * phi * abs(phi) / (rbar * rbar)
        pgrad = a2 * f_inv_dx[k]
        gu[ir] += wk * (grad_rbar - pgrad)
        gu[il] += wk * (grad_rbar + pgrad)
        gu[ip] += wk * (-2.0 * fr * abs(phi) / rbar)
    for k in range(d_slot.size):
        wk = w[d_slot[k]] * d_inv_dx[k]
        gu[d_fr[k]] -= wk
        gu[d_fl[k]] += wk
    for k in range(node_slot.size):
        gq[k] += w[node_slot[k]] / node_vol[k]
    for k in range(st_node.size):
        n = st_node[k]
        gu[st_flux[k]] += st_coef[k] * w[node_slot[n]] / node_vol[n]


@njit(**_JIT)
def ssprk3_step(u, q, dt, out, u1, u2, f, a2, f_slot, f_left, f_right, f_inv_dx,
                f_fric, d_slot, d_fl, d_fr, d_inv_dx, node_slot, node_vol,
                st_node, st_flux, st_coef):
    """Shu-Osher SSPRK(3,3); stage states are left in ``u1`` and ``u2``."""
    rhs_into(f, u, q, a2, f_slot, f_left, f_right, f_inv_dx, f_fric,
             d_slot, d_fl, d_fr, d_inv_dx, node_slot, node_vol, st_node, st_flux, st_coef)
    for i in range(u.size):
        u1[i] = u[i] + dt * f[i]
    rhs_into(f, u1, q, a2, f_slot, f_left, f_right, f_inv_dx, f_fric,
             d_slot, d_fl, d_fr, d_inv_dx, node_slot, node_vol, st_node, st_flux, st_coef)
    for i in range(u.size):
        u2[i] = 0.75 * u[i] + 0.25 * (u1[i] + dt * f[i])
    rhs_into(f, u2, q, a2, f_slot, f_left, f_right, f_inv_dx, f_fric,
             d_slot, d_fl, d_fr, d_inv_dx, node_slot, node_vol, st_node, st_flux, st_coef)
    for i in range(u.size):
        out[i] = u[i] / 3.0 + (2.0 / 3.0) * (u2[i] + dt * f[i])


@njit(**_JIT)
def first_invalid(u, rho_slots):
    for k in range(rho_slots.size):
        if not (u[rho_slots[k]] > 0.0) or not np.isfinite(u[rho_slots[k]]):
            return rho_slots[k]
    for i in range(u.size):
        if not np.isfinite(u[i]):
            return i
    return -1


@njit(**_JIT)
def relu(x):
    return x if x > 0.0 else 0.0


@njit(**_JIT)
def step_cost(u, q, demand, alpha, beta, gamma, eta, ucost, node_slot, a2,
              pmin, pmax, pscale):
    gen = 0.0
    spend = 0.0
    for i in range(q.size):
        if q[i] < 0.0:
            gen += eta[i] * (-q[i])
            spend += ucost[i] * (-q[i])
    pen = 0.0
    if gamma != 0.0:
        inv = 1.0 / (pscale * pscale)
        for i in range(node_slot.size):
            p = a2 * u[node_slot[i]]
            hi = relu(p - pmax[i])
            lo = relu(pmin[i] - p)
            pen += (hi * hi + lo * lo) * inv
    mis = demand - gen
    return alpha * mis * mis + beta * spend + gamma * pen


@njit(**_JIT)
def add_pressure_grad(g, u, weight, gamma, node_slot, a2, pmin, pmax, pscale):
    """``g += weight * d(gamma * sum V(p))/du`` at nodal densities."""
    if gamma == 0.0 or weight == 0.0:
        return
    scale = weight * gamma * 2.0 * a2 / (pscale * pscale)
    for i in range(node_slot.size):
        p = a2 * u[node_slot[i]]
        g[node_slot[i]] += scale * (relu(p - pmax[i]) - relu(pmin[i] - p))


@njit(**_JIT)
def add_control_grad(gq, q, demand, weight, alpha, beta, eta, ucost):
    """``gq += weight * dC/dq`` for the state-independent cost terms.

    At ``q == 0`` the withdrawal-side derivative is used.
    """
    gen = 0.0
    for i in range(q.size):
        if q[i] < 0.0:
            gen += eta[i] * (-q[i])
    mis = demand - gen
    for i in range(q.size):
        if q[i] <= 0.0:
            gq[i] += weight * (2.0 * alpha * mis * eta[i] - beta * ucost[i])


@njit(**_JIT)
def integrate(u0, qsched, spi, nsteps, dt, stride, ck, ckrate, want_cost, demand,
              alpha, beta, gamma, eta, ucost, pmin, pmax, pscale, rho_slots,
              a2, f_slot, f_left, f_right, f_inv_dx, f_fric, d_slot, d_fl, d_fr,
              d_inv_dx, node_slot, node_vol, st_node, st_flux, st_coef):
    """Forward SSPRK3 integration with checkpoint storage and cost quadrature.

    Returns ``(objective, fail_step, fail_slot)``; ``fail_step == -1`` on
    success.
    """
    n = u0.size
    u = u0.copy()
    out = np.empty(n)
    u1 = np.empty(n)
    u2 = np.empty(n)
    f = np.empty(n)
    half_dt = 0.5 * dt
    obj = 0.0
    ck[0, :] = u
    rhs_into(ckrate[0], u, qsched[0], a2, f_slot, f_left, f_right, f_inv_dx, f_fric,
             d_slot, d_fl, d_fr, d_inv_dx, node_slot, node_vol, st_node, st_flux, st_coef)
    kc = 1
    for s in range(nsteps):
        q = qsched[s // spi]
        if want_cost:
            cl = step_cost(u, q, demand[s], alpha, beta, gamma, eta, ucost, node_slot,
                           a2, pmin, pmax, pscale)
        ssprk3_step(u, q, dt, out, u1, u2, f, a2, f_slot, f_left, f_right, f_inv_dx,
                    f_fric, d_slot, d_fl, d_fr, d_inv_dx, node_slot, node_vol,
                    st_node, st_flux, st_coef)
        bad = first_invalid(out, rho_slots)
        if bad >= 0:
            return obj, s + 1, bad
        if want_cost:
            cr = step_cost(out, q, demand[s + 1], alpha, beta, gamma, eta, ucost,
                           node_slot, a2, pmin, pmax, pscale)
            obj += half_dt * (cl + cr)
        tmp = u
        u = out
        out = tmp
        if (s + 1) % stride == 0 or s + 1 == nsteps:
            ck[kc, :] = u
            qn = qsched[min(s + 1, nsteps - 1) // spi]
            rhs_into(ckrate[kc], u, qn, a2, f_slot, f_left, f_right, f_inv_dx, f_fric,
                     d_slot, d_fl, d_fr, d_inv_dx, node_slot, node_vol, st_node,
                     st_flux, st_coef)
            kc += 1
    return obj, -1, -1


@njit(**_JIT)
def replay(u_start, qsched, spi, s0, m, dt, U, U1, U2, rho_slots,
           a2, f_slot, f_left, f_right, f_inv_dx, f_fric, d_slot, d_fl, d_fr,
           d_inv_dx, node_slot, node_vol, st_node, st_flux, st_coef):
    """Re-integrate ``m`` steps from step index ``s0``.

    Fills ``U[0..m]`` with states and ``U1``/``U2`` with the stage states of
    each step. Returns the failing slot or -1.
    """
    n = u_start.size
    f = np.empty(n)
    U[0, :] = u_start
    for j in range(m):
        q = qsched[(s0 + j) // spi]
        ssprk3_step(U[j], q, dt, U[j + 1], U1[j], U2[j], f, a2, f_slot, f_left,
                    f_right, f_inv_dx, f_fric, d_slot, d_fl, d_fr, d_inv_dx,
                    node_slot, node_vol, st_node, st_flux, st_coef)
        bad = first_invalid(U[j + 1], rho_slots)
        if bad >= 0:
            return bad
    return -1


@njit(**_JIT)
def segment_cost(U, qsched, spi, s0, m, dt, demand, obj, alpha, beta, gamma, eta,
                 ucost, node_slot, a2, pmin, pmax, pscale):
    """Continue the trapezoid accumulation of ``integrate`` over one segment."""
    half_dt = 0.5 * dt
    for j in range(m):
        s = s0 + j
        q = qsched[s // spi]
        cl = step_cost(U[j], q, demand[s], alpha, beta, gamma, eta, ucost, node_slot,
                       a2, pmin, pmax, pscale)
        cr = step_cost(U[j + 1], q, demand[s + 1], alpha, beta, gamma, eta, ucost,
                       node_slot, a2, pmin, pmax, pscale)
        obj += half_dt * (cl + cr)
    return obj


@njit(**_JIT)
def reverse_segment(U, U1, U2, qsched, spi, s0, m, dt, lam, gq, demand, alpha, beta,
                    gamma, eta, ucost, pmin, pmax, pscale,
                    a2, f_slot, f_left, f_right, f_inv_dx, f_fric, d_slot, d_fl, d_fr,
                    d_inv_dx, node_slot, node_vol, st_node, st_flux, st_coef):
    """Discrete adjoint of ``m`` SSPRK3 steps, walking backward.

    On entry ``lam`` is dO/du at step ``s0 + m``; on exit it is dO/du at
    step ``s0``. Control sensitivities are added into ``gq[interval]``.
    """
    n = lam.size
    w = np.empty(n)
    lam1 = np.empty(n)
    lam2 = np.empty(n)
    lamu = np.empty(n)
    half_dt = 0.5 * dt
    c3 = (2.0 / 3.0) * dt
    c2 = 0.25 * dt
    for j in range(m - 1, -1, -1):
        s = s0 + j
        h = s // spi
        q = qsched[h]
        g = gq[h]
        # out = u/3 + 2/3 (u2 + dt f(u2))
        for i in range(n):
            w[i] = c3 * lam[i]
            lam2[i] = (2.0 / 3.0) * lam[i]
            lamu[i] = lam[i] / 3.0
        vjp_into(lam2, g, U2[j], w, a2, f_slot, f_left, f_right, f_inv_dx, f_fric,
                 d_slot, d_fl, d_fr, d_inv_dx, node_slot, node_vol, st_node, st_flux,
                 st_coef)
        # u2 = 3/4 u + 1/4 (u1 + dt f(u1))
        for i in range(n):
            w[i] = c2 * lam2[i]
            lam1[i] = 0.25 * lam2[i]
            lamu[i] += 0.75 * lam2[i]
        vjp_into(lam1, g, U1[j], w, a2, f_slot, f_left, f_right, f_inv_dx, f_fric,
                 d_slot, d_fl, d_fr, d_inv_dx, node_slot, node_vol, st_node, st_flux,
                 st_coef)
        # u1 = u + dt f(u)
        for i in range(n):
            w[i] = dt * lam1[i]
            lamu[i] += lam1[i]
        vjp_into(lamu, g, U[j], w, a2, f_slot, f_left, f_right, f_inv_dx, f_fric,
                 d_slot, d_fl, d_fr, d_inv_dx, node_slot, node_vol, st_node, st_flux,
                 st_coef)
        add_control_grad(g, q, demand[s], half_dt, alpha, beta, eta, ucost)
        add_control_grad(g, q, demand[s + 1], half_dt, alpha, beta, eta, ucost)
        weight = dt if s > 0 else half_dt
        add_pressure_grad(lamu, U[j], weight, gamma, node_slot, a2, pmin, pmax, pscale)
        for i in range(n):
            lam[i] = lamu[i]
