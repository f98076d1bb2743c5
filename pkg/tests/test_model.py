import copy
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffgas.errors import (
    DisconnectedNetworkError,
    DomainError,
    NetworkParseError,
    ValidationError,
)
from diffgas.model import (
    GasProperties,
    GeneratorCurve,
    bundled_path,
    eos_density,
    eos_pressure,
    load_network,
)

from conftest import minimal_network_dict


def test_minimal_two_node(write_json):
    net = load_network(write_json(minimal_network_dict()))
    assert net.n_nodes == 2 and len(net.pipes) == 1
    (end_a,), (end_b,) = net.incidence
    assert (end_a.pipe, end_a.end, end_a.sign) == ("P1", "from", -1)
    assert (end_b.pipe, end_b.end, end_b.sign) == ("P1", "to", +1)
    assert net.nodes[0].p_min == 60e5
    assert net.nodes[1].generator == GeneratorCurve(20.0, 0.3)


def test_area_and_default_sound_speed(write_json):
    data = minimal_network_dict()
    del data["gas"]
    net = load_network(write_json(data))
    assert net.gas.sound_speed == 350.0
    assert net.pipes[0].area == math.pi * 0.25 / 4


def test_bundled_ogf11():
    net = load_network(bundled_path("ogf11.json"))
    assert net.n_nodes == 11
    assert len(net.pipes) == 11
    assert abs(net.total_length - 550e3) <= 0.01 * 550e3


def test_pmin_ge_pmax_names_node(write_json):
    data = minimal_network_dict()
    data["nodes"][1]["p_min_bar"] = 80
    with pytest.raises(ValidationError, match="'B'"):
        load_network(write_json(data))


@pytest.mark.parametrize(
    "mutate, exc, match",
    [
        (lambda d: d["nodes"][0].update(q_lo_kg_s=20), ValidationError, "'A'"),
        (lambda d: d["pipes"][0].update(length_m=0), ValidationError, "'P1'"),
        (lambda d: d["pipes"][0].update(diameter_m=-1), ValidationError, "'P1'"),
        (lambda d: d["pipes"][0].update(friction=-0.1), ValidationError, "'P1'"),
        (lambda d: d["pipes"][0].update(to="A"), ValidationError, "'P1'"),
        (lambda d: d["pipes"][0].update(to="Q"), ValidationError, "unknown node"),
        (lambda d: d["nodes"][0].update(extra=1), NetworkParseError, "unknown keys"),
        (lambda d: d.update(comment="x"), NetworkParseError, "unknown keys"),
        (lambda d: d["nodes"][0].pop("p_max_bar"), NetworkParseError, "missing"),
        (lambda d: d["nodes"][0].update(p_min_bar="60"), NetworkParseError, "number"),
        (lambda d: d["gas"].update(sound_speed_m_s=0), ValidationError, "sound_speed"),
    ],
)
def test_validation_errors(write_json, mutate, exc, match):
    data = minimal_network_dict()
    mutate(data)
    with pytest.raises(exc, match=match):
        load_network(write_json(data))


def test_disconnected_lists_components(write_json):
    data = minimal_network_dict()
    for nid in ("C", "D"):
        data["nodes"].append({"id": nid, "p_min_bar": 60, "p_max_bar": 80, "q_lo_kg_s": 0,
                              "q_hi_kg_s": 0, "generator": None})
    data["pipes"].append({"id": "P2", "from": "C", "to": "D", "length_m": 1000,
                          "diameter_m": 0.3, "friction": 0.01})
    with pytest.raises(DisconnectedNetworkError) as err:
        load_network(write_json(data))
    assert err.value.components == [["A", "B"], ["C", "D"]]


def test_malformed_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{nodes: ")
    with pytest.raises(NetworkParseError):
        load_network(path)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_network(tmp_path / "nope.json")


def test_load_is_deterministic():
    a = load_network(bundled_path("ogf11.json"))
    b = load_network(bundled_path("ogf11.json"))
    assert json.dumps(a.to_dict(), sort_keys=True) == json.dumps(b.to_dict(), sort_keys=True)
    assert a == b


def test_round_trip_serialization(write_json):
    net = load_network(bundled_path("ogf11.json"))
    again = load_network(write_json(net.to_dict()))
    assert again == net


def test_incidence_signs_opposite_and_complete():
    net = load_network(bundled_path("ogf11.json"))
    ends = {}
    for node, inc in zip(net.nodes, net.incidence):
        for e in inc:
            assert (e.pipe, e.end) not in ends
            ends[(e.pipe, e.end)] = (node.id, e.sign)
    for p in net.pipes:
        assert ends[(p.id, "from")] == (p.from_node, -1)
        assert ends[(p.id, "to")] == (p.to_node, +1)
    assert len(ends) == 2 * len(net.pipes)


def test_eos_examples():
    gas = GasProperties(350.0)
    assert eos_pressure(0.0, gas) == 0.0
    assert eos_pressure(1.0, gas) == 122_500.0
    assert eos_density(eos_pressure(55.0, gas), gas) == 55.0


def test_eos_negative_is_domain_error():
    gas = GasProperties()
    with pytest.raises(DomainError):
        eos_pressure(-1.0, gas)
    with pytest.raises(DomainError):
        eos_density(np.array([1.0, -2.0]), gas)


@settings(max_examples=200)
@given(rho=st.floats(0.0, 200.0), a=st.floats(200.0, 500.0))
def test_eos_inverse_property(rho, a):
    gas = GasProperties(a)
    back = eos_density(eos_pressure(rho, gas), gas)
    assert abs(back - rho) <= 1e-14 * max(rho, 1e-300)


def test_generator_curve_clamps_injection():
    g = GeneratorCurve(20.0, 0.5)
    assert g.power(-3.0) == 60.0 and g.cost(-3.0) == 1.5
    assert g.power(4.0) == 0.0 and g.cost(4.0) == 0.0
