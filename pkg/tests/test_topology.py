import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import brute_nakamoto, chain, topo
from hoproute.errors import IntegrityError, SchemaError
from hoproute.topology import (
    Validator,
    ValidatorSet,
    dump_topology,
    edge,
    load_topology,
    nakamoto_coefficient,
    remove_top_k,
    removal_order,
    upgrade_topology,
)


def _doc(chains, connections=(), channels=()):
    return {
        "chains": [{"id": c, "validators": [{"address": f"{c}1", "power": 10}]} for c in chains],
        "connections": [{"a": a, "b": b} for a, b in connections],
        "channels": [{"id": i, "a": a, "b": b, "version": v} for i, a, b, v in channels],
    }


def test_load_line():
    t = load_topology(_doc("ABC", [("A", "B"), ("B", "C")]))
    assert len(t) == 3 and len(t.connections) == 2
    assert t.neighbors("B") == ("A", "C")


def test_channel_to_unknown_chain():
    with pytest.raises(IntegrityError):
        load_topology(_doc("AB", [("A", "B")], [("ch0", "A", "X", "ics20-1")]))


def test_channel_without_connection():
    with pytest.raises(IntegrityError):
        load_topology(_doc("ABC", [("A", "B")], [("ch0", "A", "C", "ics20-1")]))


def test_zero_power_set():
    doc = _doc("A")
    doc["chains"][0]["validators"][0]["power"] = 0
    with pytest.raises(IntegrityError):
        load_topology(doc)


def test_duplicate_chain_and_unknown_key():
    doc = _doc("AA")
    with pytest.raises(IntegrityError):
        load_topology(doc)
    doc = _doc("A")
    doc["extra"] = 1
    with pytest.raises(SchemaError):
        load_topology(doc)


def test_self_loop_rejected():
    with pytest.raises(IntegrityError):
        load_topology(_doc("A", [("A", "A")]))


def test_duplicate_validator_address():
    with pytest.raises(IntegrityError):
        ValidatorSet((Validator(b"x", 1), Validator(b"x", 2)))


def test_round_trip(tmp_path):
    doc = _doc("ABC", [("A", "B"), ("B", "C")], [("ch0", "A", "B", "ics20-1/nakamoto:2")])
    t = load_topology(doc)
    path = tmp_path / "t.json"
    path.write_text(json.dumps(dump_topology(t)))
    assert load_topology(path) == t
    assert dump_topology(load_topology(dump_topology(t))) == dump_topology(t)


@pytest.mark.parametrize(
    "powers,expected",
    [([30, 25, 20, 15, 10], 2), ([25, 25, 25, 25], 2), ([7], 1), ([1, 1, 1], 2), ([34, 33, 33], 1)],
)
def test_nakamoto_examples(powers, expected):
    assert nakamoto_coefficient(ValidatorSet.from_powers(powers)) == expected


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(0, 50), min_size=1, max_size=10).filter(lambda p: sum(p) > 0))
def test_nakamoto_matches_brute_force(powers):
    assert nakamoto_coefficient(ValidatorSet.from_powers(powers)) == brute_nakamoto(powers)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 50), min_size=1, max_size=10), st.integers(1, 7))
def test_nakamoto_scale_invariant(powers, factor):
    a = nakamoto_coefficient(ValidatorSet.from_powers(powers))
    assert a == nakamoto_coefficient(ValidatorSet.from_powers([p * factor for p in powers]))


def test_remove_top_k_examples():
    star = topo([("H", f"L{i}") for i in range(1, 5)])
    assert remove_top_k(star, 0) == star
    s1 = remove_top_k(star, 1)
    assert sorted(s1.chains) == ["L1", "L2", "L3", "L4"] and not s1.connections
    line = topo([("A", "B"), ("B", "C")])
    l1 = remove_top_k(line, 1)
    assert sorted(l1.chains) == ["A", "C"] and not l1.connections


def test_remove_top_k_tie_break():
    t = topo([("A", "B"), ("C", "D")])
    assert removal_order(t) == ["A", "B", "C", "D"]
    assert sorted(remove_top_k(t, 1).chains) == ["B", "C", "D"]


@settings(max_examples=60, deadline=None)
@given(
    st.sets(st.tuples(st.integers(0, 8), st.integers(0, 8)).filter(lambda e: e[0] != e[1]), max_size=20),
    st.integers(0, 9),
)
def test_remove_top_k_properties(edges, k):
    t = topo([(f"n{a}", f"n{b}") for a, b in edges], {f"n{i}": 1 for i in range(9)})
    out = remove_top_k(t, k)
    assert len(out) == len(t) - k
    removed = set(t.chains) - set(out.chains)
    for r in removed:
        for kept in out.chains:
            assert (-t.degree(r), r) < (-t.degree(kept), kept)
    for a, b in out.connections:
        assert a in out.chains and b in out.chains


def test_upgrade_examples():
    full = topo([("A", "B"), ("A", "C"), ("B", "C")], {"A": 8, "B": 8, "C": 8})
    assert upgrade_topology(full, 1) == full
    weak = topo([("A", "B")], {"A": 2, "B": 2, "C": 2})
    assert upgrade_topology(weak, 1) == weak


@settings(max_examples=40, deadline=None)
@given(
    st.sets(st.tuples(st.integers(0, 9), st.integers(0, 9)).filter(lambda e: e[0] != e[1]), max_size=15),
    st.lists(st.integers(1, 9), min_size=10, max_size=10),
    st.integers(0, 1000),
)
def test_upgrade_properties(edges, ncs, seed):
    t = topo([(f"n{a}", f"n{b}") for a, b in edges], {f"n{i}": ncs[i] for i in range(10)})
    up = upgrade_topology(t, seed)
    assert up == upgrade_topology(t, seed)
    assert t.connections <= up.connections
    added = up.connections - t.connections
    assert len(added) <= len(t)
    for a, b in added:
        assert t.chains[a].nakamoto >= 6 or t.chains[b].nakamoto >= 6


def test_chain_invariants():
    with pytest.raises(IntegrityError):
        chain("A", block_time_ms=0)
    with pytest.raises(IntegrityError):
        chain("A", capacity=0)
    assert edge("b", "a") == ("a", "b")
