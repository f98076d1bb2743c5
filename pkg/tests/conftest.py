import json

import numpy as np
import pytest

from diffgas.model import GasNetwork, GasProperties, GeneratorCurve, Node, Pipe

BAR = 1e5


def make_node(nid, lo=-50.0, hi=50.0, gen=None, pmin=60.0, pmax=80.0):
    return Node(nid, pmin * BAR, pmax * BAR, lo, hi, gen)


@pytest.fixture
def two_node():
    nodes = [make_node("A"), make_node("B")]
    pipes = [Pipe("P1", "A", "B", 10_000.0, 0.5, 0.01)]
    return GasNetwork.build(nodes, pipes, GasProperties(350.0))


@pytest.fixture
def star():
    """Three pipes meeting at a centre node C."""
    nodes = [make_node("C"), make_node("X"), make_node("Y"), make_node("Z")]
    pipes = [
        Pipe("P1", "X", "C", 8_000.0, 0.5, 0.01),
        Pipe("P2", "C", "Y", 6_000.0, 0.4, 0.012),
        Pipe("P3", "C", "Z", 9_000.0, 0.6, 0.008),
    ]
    return GasNetwork.build(nodes, pipes)


@pytest.fixture
def three_node():
    return build_three_node()


def build_three_node():
    """Supply A feeding two generators B and C."""
    nodes = [
        make_node("A", 0.0, 80.0),
        make_node("B", -30.0, 0.0, GeneratorCurve(20.0, 0.3)),
        make_node("C", -30.0, 0.0, GeneratorCurve(15.0, 0.4), pmin=69.0, pmax=70.5),
    ]
    pipes = [
        Pipe("P1", "A", "B", 20_000.0, 0.5, 0.01),
        Pipe("P2", "B", "C", 15_000.0, 0.4, 0.01),
    ]
    return GasNetwork.build(nodes, pipes)


@pytest.fixture
def write_json(tmp_path):
    def _write(obj, name="net.json"):
        path = tmp_path / name
        path.write_text(json.dumps(obj))
        return path

    return _write


def minimal_network_dict():
    return {
        "gas": {"sound_speed_m_s": 350.0},
        "nodes": [
            {"id": "A", "p_min_bar": 60, "p_max_bar": 80, "q_lo_kg_s": 0, "q_hi_kg_s": 10,
             "generator": None},
            {"id": "B", "p_min_bar": 60, "p_max_bar": 80, "q_lo_kg_s": -10, "q_hi_kg_s": 0,
             "generator": {"eta_mw_per_kg_s": 20, "cost_per_kg": 0.3}},
        ],
        "pipes": [{"id": "P1", "from": "A", "to": "B", "length_m": 10000, "diameter_m": 0.5,
                   "friction": 0.01}],
    }


def random_state(sys, rng, rho=(40.0, 70.0), phi=(-200.0, 200.0)):
    u = rng.uniform(*phi, size=sys.n_state)
    u[sys.density_slots] = rng.uniform(*rho, size=sys.density_slots.size)
    return u


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
