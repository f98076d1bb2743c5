"""Gas network data model and network-file ingestion.

Sign convention used throughout the package: a nodal flow ``q > 0`` injects
gas into the network, ``q < 0`` withdraws it. All quantities are SI
internally; bar only appears in files and reports (``BAR = 1e5`` Pa).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    DisconnectedNetworkError,
    DomainError,
    NetworkParseError,
    ValidationError,
)

BAR = 1e5
DEFAULT_SOUND_SPEED = 350.0


@dataclass(frozen=True)
class GasProperties:
    sound_speed: float = DEFAULT_SOUND_SPEED

    def __post_init__(self):
        if not (self.sound_speed > 0 and math.isfinite(self.sound_speed)):
            raise ValidationError(f"gas: sound_speed must be positive, got {self.sound_speed}")

    @property
    def a2(self) -> float:
        return self.sound_speed * self.sound_speed


def eos_pressure(rho, gas: GasProperties):
    """Ideal-gas pressure ``p = a^2 rho`` [Pa] from density [kg/m^3]."""
    arr = np.asarray(rho, dtype=float)
    if np.any(arr < 0) or np.any(np.isnan(arr)):
        raise DomainError("density must be non-negative")
    p = gas.a2 * arr
    return float(p) if p.ndim == 0 else p


def eos_density(p, gas: GasProperties):
    arr = np.asarray(p, dtype=float)
    if np.any(arr < 0) or np.any(np.isnan(arr)):
        raise DomainError("pressure must be non-negative")
    rho = arr / gas.a2
    return float(rho) if rho.ndim == 0 else rho


@dataclass(frozen=True)
class GeneratorCurve:
    """Gas-fired generator at a node.

    ``efficiency`` maps withdrawn mass flow to electric power (MW per kg/s),
    ``unit_cost`` is the operating cost per kg of withdrawn gas. Injection
    (``q > 0``) neither produces power nor costs anything.
    """

    efficiency: float
    unit_cost: float

    def __post_init__(self):
        if self.efficiency < 0 or self.unit_cost < 0:
            raise ValidationError("generator efficiency and unit_cost must be >= 0")

    def power(self, q):
        return self.efficiency * np.maximum(0.0, -np.asarray(q, dtype=float))

    def cost(self, q):
        return self.unit_cost * np.maximum(0.0, -np.asarray(q, dtype=float))


@dataclass(frozen=True)
class Pipe:
    id: str
    from_node: str
    to_node: str
    length: float
    diameter: float
    friction: float

    @property
    def area(self) -> float:
        return math.pi * self.diameter * self.diameter / 4.0


@dataclass(frozen=True)
class Node:
    id: str
    p_min: float
    p_max: float
    q_lo: float
    q_hi: float
    generator: Optional[GeneratorCurve] = None


@dataclass(frozen=True)
class PipeEnd:
    pipe: str
    end: str  # "from" or "to"
    sign: int  # +1 at the pipe's to_node, -1 at its from_node


@dataclass(frozen=True)
class GasNetwork:
    nodes: tuple
    pipes: tuple
    gas: GasProperties = field(default_factory=GasProperties)
    incidence: tuple = ()

    @classmethod
    def build(cls, nodes, pipes, gas=None) -> "GasNetwork":
        """Validate the topology and derive incidence lists."""
        gas = gas or GasProperties()
        nodes = tuple(nodes)
        pipes = tuple(pipes)
        _validate(nodes, pipes)
        pos = {n.id: i for i, n in enumerate(nodes)}
        inc = [[] for _ in nodes]
        for p in pipes:
            inc[pos[p.from_node]].append(PipeEnd(p.id, "from", -1))
            inc[pos[p.to_node]].append(PipeEnd(p.id, "to", +1))
        return cls(nodes, pipes, gas, tuple(tuple(x) for x in inc))

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def node_ids(self) -> list:
        return [n.id for n in self.nodes]

    def node_index(self, node_id: str) -> int:
        for i, n in enumerate(self.nodes):
            if n.id == node_id:
                return i
        raise KeyError(node_id)

    def pipe(self, pipe_id: str) -> Pipe:
        for p in self.pipes:
            if p.id == pipe_id:
                return p
        raise KeyError(pipe_id)

    @property
    def total_length(self) -> float:
        return sum(p.length for p in self.pipes)

    def bounds(self):
        """Per-node control box as two arrays ``(lo, hi)`` in kg/s."""
        lo = np.array([n.q_lo for n in self.nodes], dtype=float)
        hi = np.array([n.q_hi for n in self.nodes], dtype=float)
        return lo, hi

    def efficiencies(self) -> np.ndarray:
        return np.array([n.generator.efficiency if n.generator else 0.0 for n in self.nodes])

    def unit_costs(self) -> np.ndarray:
        return np.array([n.generator.unit_cost if n.generator else 0.0 for n in self.nodes])

    def to_dict(self) -> dict:
        """Serialize back to the network-file schema."""
        return {
            "gas": {"sound_speed_m_s": self.gas.sound_speed},
            "nodes": [
                {
                    "id": n.id,
                    "p_min_bar": n.p_min / BAR,
                    "p_max_bar": n.p_max / BAR,
                    "q_lo_kg_s": n.q_lo,
                    "q_hi_kg_s": n.q_hi,
                    "generator": None
                    if n.generator is None
                    else {
                        "eta_mw_per_kg_s": n.generator.efficiency,
                        "cost_per_kg": n.generator.unit_cost,
                    },
                }
                for n in self.nodes
            ],
            "pipes": [
                {
                    "id": p.id,
                    "from": p.from_node,
                    "to": p.to_node,
                    "length_m": p.length,
                    "diameter_m": p.diameter,
                    "friction": p.friction,
                }
                for p in self.pipes
            ],
        }


def _validate(nodes, pipes):
    seen = set()
    for n in nodes:
        if n.id in seen:
            raise ValidationError(f"node {n.id!r}: duplicate id")
        seen.add(n.id)
        if not (0 < n.p_min < n.p_max):
            raise ValidationError(f"node {n.id!r}: requires 0 < p_min < p_max")
        if not (n.q_lo <= n.q_hi):
            raise ValidationError(f"node {n.id!r}: requires q_lo <= q_hi")
    if not nodes:
        raise ValidationError("network has no nodes")
    pseen = set()
    for p in pipes:
        if p.id in pseen:
            raise ValidationError(f"pipe {p.id!r}: duplicate id")
        pseen.add(p.id)
        for end in (p.from_node, p.to_node):
            if end not in seen:
                raise ValidationError(f"pipe {p.id!r}: unknown node {end!r}")
        if p.from_node == p.to_node:
            raise ValidationError(f"pipe {p.id!r}: from_node equals to_node")
        if not (p.length > 0):
            raise ValidationError(f"pipe {p.id!r}: length must be > 0")
        if not (p.diameter > 0):
            raise ValidationError(f"pipe {p.id!r}: diameter must be > 0")
        if not (p.friction >= 0):
            raise ValidationError(f"pipe {p.id!r}: friction must be >= 0")

    adj = {n.id: set() for n in nodes}
    for p in pipes:
        adj[p.from_node].add(p.to_node)
        adj[p.to_node].add(p.from_node)
    components, unvisited = [], [n.id for n in nodes]
    done = set()
    for start in unvisited:
        if start in done:
            continue
        comp, stack = set(), [start]
        while stack:
            v = stack.pop()
            if v in comp:
                continue
            comp.add(v)
            stack.extend(adj[v] - comp)
        done |= comp
        components.append(comp)
    if len(components) > 1:
        raise DisconnectedNetworkError(components)


_TOP_KEYS = {"gas", "nodes", "pipes"}
_GAS_KEYS = {"sound_speed_m_s"}
_NODE_KEYS = {"id", "p_min_bar", "p_max_bar", "q_lo_kg_s", "q_hi_kg_s", "generator"}
_GEN_KEYS = {"eta_mw_per_kg_s", "cost_per_kg"}
_PIPE_KEYS = {"id", "from", "to", "length_m", "diameter_m", "friction"}


def _check_keys(obj, allowed, required, where):
    if not isinstance(obj, dict):
        raise NetworkParseError(f"{where}: expected an object")
    unknown = set(obj) - allowed
    if unknown:
        raise NetworkParseError(f"{where}: unknown keys {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise NetworkParseError(f"{where}: missing keys {sorted(missing)}")


def _num(obj, key, where):
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise NetworkParseError(f"{where}: {key!r} must be a number")
    return float(v)


def network_from_dict(data) -> GasNetwork:
    _check_keys(data, _TOP_KEYS, {"nodes", "pipes"}, "network")
    gas_cfg = data.get("gas") or {}
    _check_keys(gas_cfg, _GAS_KEYS, set(), "gas")
    gas = GasProperties(
        _num(gas_cfg, "sound_speed_m_s", "gas") if "sound_speed_m_s" in gas_cfg else DEFAULT_SOUND_SPEED
    )
    if not isinstance(data["nodes"], list) or not isinstance(data["pipes"], list):
        raise NetworkParseError("network: 'nodes' and 'pipes' must be lists")

    nodes = []
    for k, nd in enumerate(data["nodes"]):
        where = f"nodes[{k}]"
        _check_keys(nd, _NODE_KEYS, _NODE_KEYS - {"generator"}, where)
        gen = nd.get("generator")
        curve = None
        if gen is not None:
            _check_keys(gen, _GEN_KEYS, _GEN_KEYS, where + ".generator")
            curve = GeneratorCurve(
                _num(gen, "eta_mw_per_kg_s", where), _num(gen, "cost_per_kg", where)
            )
        nodes.append(
            Node(
                id=str(nd["id"]),
                p_min=_num(nd, "p_min_bar", where) * BAR,
                p_max=_num(nd, "p_max_bar", where) * BAR,
                q_lo=_num(nd, "q_lo_kg_s", where),
                q_hi=_num(nd, "q_hi_kg_s", where),
                generator=curve,
            )
        )
    pipes = []
    for k, pd in enumerate(data["pipes"]):
        where = f"pipes[{k}]"
        _check_keys(pd, _PIPE_KEYS, _PIPE_KEYS, where)
        pipes.append(
            Pipe(
                id=str(pd["id"]),
                from_node=str(pd["from"]),
                to_node=str(pd["to"]),
                length=_num(pd, "length_m", where),
                diameter=_num(pd, "diameter_m", where),
                friction=_num(pd, "friction", where),
            )
        )
    return GasNetwork.build(nodes, pipes, gas)


def load_network(path) -> GasNetwork:
    """Read and validate a network JSON file.

    Raises
    ------
    FileNotFoundError
        If the file does not exist.
    NetworkParseError
        Malformed JSON or schema violations (unknown/missing keys).
    ValidationError
        A model invariant is violated; the message names the element.
    """
    path = Path(path)
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise NetworkParseError(f"{path}: {exc}") from exc
    return network_from_dict(data)


def bundled_path(name: str) -> Path:
    """Path to a file shipped in ``diffgas/data`` (e.g. ``"ogf11.json"``)."""
    return Path(__file__).parent / "data" / name
