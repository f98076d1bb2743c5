"""Staggered spatial discretization of a pipe network.

Layout of one pipe with ``N`` cells of width ``dx``::

    rho:  x_0 ---- x_1 ---- x_2 ... x_{N-1} ---- x_N
    phi:      y_0      y_1  ...          y_{N-1}

with ``y_j = x_j + dx/2``. The endpoint densities ``x_0`` and ``x_N`` are the
nodal densities of the pipe's ``from`` and ``to`` nodes, shared by every pipe
incident to that node. The global state vector stores all nodal densities
first (slot ``i`` for node ``i``), then per pipe its ``N - 1`` interior
densities followed by its ``N`` fluxes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import DomainError, StateValidityError, ValidationError
from .model import BAR, GasNetwork, eos_density

#: Node flux at the half-cell face (conservative, default).
FACE = "face"
#: Second-order one-sided extrapolation of the flux to the node location.
EXTRAPOLATE = "extrapolate"

_BOUNDARY_COEFS = {FACE: (1.0, 0.0), EXTRAPOLATE: (1.5, -0.5)}


@dataclass(frozen=True)
class StencilEntry:
    pipe: str
    end: str
    sign: int
    area: float
    half_volume: float
    flux_slots: tuple  # (near, next)
    coefficients: tuple  # weights of (near, next) in the boundary flux


@dataclass(frozen=True, eq=False)
class DiscreteSystem:
    n_cells: np.ndarray
    dx: np.ndarray
    pipe_ids: tuple
    rho_slots: tuple  # per pipe, N+1 density slots incl. the two nodes
    phi_slots: tuple  # per pipe, N flux slots
    node_slot: np.ndarray
    node_vol: np.ndarray  # sum over incident pipes of (dx/2) * S
    stencils: tuple  # per node, tuple of StencilEntry
    n_state: int
    boundary_flux: str
    # flat kernel arrays
    a2: float
    f_slot: np.ndarray
    f_left: np.ndarray
    f_right: np.ndarray
    f_inv_dx: np.ndarray
    f_fric: np.ndarray
    d_slot: np.ndarray
    d_fl: np.ndarray
    d_fr: np.ndarray
    d_inv_dx: np.ndarray
    st_node: np.ndarray
    st_flux: np.ndarray
    st_coef: np.ndarray
    density_slots: np.ndarray
    mass_weights: np.ndarray

    @property
    def kernel_args(self) -> tuple:
        return (self.a2, self.f_slot, self.f_left, self.f_right, self.f_inv_dx,
                self.f_fric, self.d_slot, self.d_fl, self.d_fr, self.d_inv_dx,
                self.node_slot, self.node_vol, self.st_node, self.st_flux, self.st_coef)

    @property
    def n_nodes(self) -> int:
        return self.node_slot.size

    @property
    def min_dx(self) -> float:
        return float(self.dx.min())

    def describe_slot(self, slot: int) -> str:
        slot = int(slot)
        if slot < self.n_nodes:
            return f"nodal density of node #{slot}"
        for pid, rs, ps in zip(self.pipe_ids, self.rho_slots, self.phi_slots):
            hit = np.nonzero(rs[1:-1] == slot)[0]
            if hit.size:
                return f"pipe {pid} density {int(hit[0]) + 1}"
            hit = np.nonzero(ps == slot)[0]
            if hit.size:
                return f"pipe {pid} flux {int(hit[0])}"
        return "unknown slot"

    def check_state(self, u, time=None):
        """Raise ``StateValidityError`` if a density is non-positive or NaN."""
        u = np.asarray(u, dtype=float)
        if u.shape != (self.n_state,):
            raise ValidationError(f"state has shape {u.shape}, expected ({self.n_state},)")
        bad = _kernels.first_invalid(u, self.density_slots)
        if bad >= 0:
            raise StateValidityError(bad, self.describe_slot(bad), u[bad], time)

    def uniform_state(self, rho: float, phi: float = 0.0) -> np.ndarray:
        u = np.full(self.n_state, float(phi))
        u[self.density_slots] = rho
        return u

    def nodal_densities(self, u) -> np.ndarray:
        return np.asarray(u)[..., self.node_slot]

    def line_pack(self, u) -> float:
        """Total gas mass [kg]: interior cells ``dx*S``, nodes their half-cells."""
        return float(self.mass_weights @ np.asarray(u))

    def boundary_fluxes(self, u) -> np.ndarray:
        """Flux value used at every pipe end in the nodal balance.

        Returned as ``(n_pipes, 2)`` for the (from, to) ends, in the pipe's
        from->to direction.
        """
        u = np.asarray(u)
        out = np.empty((len(self.pipe_ids), 2))
        for k, ps in enumerate(self.phi_slots):
            c_near, c_next = _BOUNDARY_COEFS[self.boundary_flux]
            out[k, 0] = c_near * u[ps[0]] + c_next * u[ps[1]]
            out[k, 1] = c_near * u[ps[-1]] + c_next * u[ps[-2]]
        return out


def discretize(net: GasNetwork, target_dx: float, boundary_flux: str = FACE) -> DiscreteSystem:
    """Lay out the staggered grid for every pipe of ``net``.

    Each pipe gets ``N = max(2, ceil(L / target_dx))`` cells.
    ``boundary_flux`` selects how the pipe-end flux entering a nodal balance
    is taken: ``"face"`` uses the flux unknown at the half-cell face next to
    the node (exactly mass conserving), ``"extrapolate"`` the one-sided
    second-order extrapolation ``(3 phi_near - phi_next) / 2`` to the node.
    """
    if not (target_dx > 0) or not math.isfinite(target_dx):
        raise DomainError(f"target_dx must be positive, got {target_dx}")
    if boundary_flux not in _BOUNDARY_COEFS:
        raise ValueError(f"unknown boundary_flux {boundary_flux!r}")
    c_near, c_next = _BOUNDARY_COEFS[boundary_flux]

    nn = net.n_nodes
    pos = {n.id: i for i, n in enumerate(net.nodes)}
    n_cells = np.array([max(2, math.ceil(p.length / target_dx)) for p in net.pipes], dtype=np.int64)
    dx = np.array([p.length / n for p, n in zip(net.pipes, n_cells)])

    next_slot = nn
    rho_slots, phi_slots = [], []
    f_slot, f_left, f_right, f_inv_dx, f_fric = [], [], [], [], []
    d_slot, d_fl, d_fr, d_inv_dx = [], [], [], []
    node_vol = np.zeros(nn)
    mass_w = []
    per_node = [[] for _ in range(nn)]
    st_node, st_flux, st_coef = [], [], []

    for k, p in enumerate(net.pipes):
        n = int(n_cells[k])
        h = float(dx[k])
        area = p.area
        interior = np.arange(next_slot, next_slot + n - 1)
        next_slot += n - 1
        fluxes = np.arange(next_slot, next_slot + n)
        next_slot += n
        a, b = pos[p.from_node], pos[p.to_node]
        rs = np.concatenate(([a], interior, [b])).astype(np.int64)
        rho_slots.append(rs)
        phi_slots.append(fluxes.astype(np.int64))

        for j in range(n):
            f_slot.append(fluxes[j])
            f_left.append(rs[j])
            f_right.append(rs[j + 1])
            f_inv_dx.append(1.0 / h)
            f_fric.append(p.friction / (2.0 * p.diameter))
        for i in range(1, n):
            d_slot.append(rs[i])
            d_fl.append(fluxes[i - 1])
            d_fr.append(fluxes[i])
            d_inv_dx.append(1.0 / h)
            mass_w.append((rs[i], h * area))

        half = 0.5 * h * area
        ends = ((a, "from", -1, (fluxes[0], fluxes[1])),
                (b, "to", +1, (fluxes[-1], fluxes[-2])))
        for node, end, sign, (near, nxt) in ends:
            node_vol[node] += half
            per_node[node].append(StencilEntry(p.id, end, sign, area, half,
                                               (int(near), int(nxt)), (c_near, c_next)))
            for slot, c in ((near, c_near), (nxt, c_next)):
                if c != 0.0:
                    st_node.append(node)
                    st_flux.append(slot)
                    st_coef.append(sign * area * c)

    n_state = next_slot
    weights = np.zeros(n_state)
    weights[:nn] = node_vol
    for slot, wgt in mass_w:
        weights[slot] = wgt
    density_slots = np.concatenate([np.arange(nn)] + [rs[1:-1] for rs in rho_slots]).astype(np.int64)

    i64 = lambda x: np.asarray(x, dtype=np.int64)  # noqa: E731
    f64 = lambda x: np.asarray(x, dtype=float)  # noqa: E731
    return DiscreteSystem(
        n_cells=n_cells,
        dx=dx,
        pipe_ids=tuple(p.id for p in net.pipes),
        rho_slots=tuple(rho_slots),
        phi_slots=tuple(phi_slots),
        node_slot=np.arange(nn, dtype=np.int64),
        node_vol=node_vol,
        stencils=tuple(tuple(s) for s in per_node),
        n_state=n_state,
        boundary_flux=boundary_flux,
        a2=float(net.gas.a2),
        f_slot=i64(f_slot), f_left=i64(f_left), f_right=i64(f_right),
        f_inv_dx=f64(f_inv_dx), f_fric=f64(f_fric),
        d_slot=i64(d_slot), d_fl=i64(d_fl), d_fr=i64(d_fr), d_inv_dx=f64(d_inv_dx),
        st_node=i64(st_node), st_flux=i64(st_flux), st_coef=f64(st_coef),
        density_slots=density_slots,
        mass_weights=weights,
    )


def _q_array(net_or_sys, q) -> np.ndarray:
    q = np.ascontiguousarray(q, dtype=float)
    n = net_or_sys.n_nodes
    if q.shape != (n,):
        raise ValidationError(f"q must have one entry per node ({n}), got shape {q.shape}")
    return q


def rhs(sys: DiscreteSystem, net: GasNetwork, u, q) -> np.ndarray:
    """Semi-discrete time derivative ``du/dt`` of the network state.

    Interior densities follow the discrete continuity equation, fluxes the
    discrete momentum balance with the friction density taken as the mean
    of the two densities flanking the flux point, and nodal densities the
    nodal mass balance with injection ``q`` [kg/s].
    """
    u = np.ascontiguousarray(u, dtype=float)
    sys.check_state(u)
    q = _q_array(sys, q)
    du = np.empty_like(u)
    _kernels.rhs_into(du, u, q, *sys.kernel_args)
    return du


def initial_state(sys: DiscreteSystem, net: GasNetwork, p_bar: float = 70.0, phi: float = 0.0):
    """Uniform-pressure initial condition (default 70 bar at rest)."""
    return sys.uniform_state(eos_density(p_bar * BAR, net.gas), phi)


def load_initial_state(path, sys: DiscreteSystem) -> np.ndarray:
    """Read a full state vector saved with ``numpy.save``."""
    u = np.load(path)
    u = np.ascontiguousarray(u, dtype=float)
    if u.shape != (sys.n_state,):
        raise ValidationError(f"initial state has shape {u.shape}, expected ({sys.n_state},)")
    sys.check_state(u)
    return u
