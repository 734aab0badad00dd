import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import bfs_shortest_compliant, grid_split_oracle, random_topology
from hoproute.experiments import (
    UNIFIED,
    ConnectivityMode,
    Pool,
    connectivity,
    connectivity_csv,
    connectivity_sweep,
    cost_model,
    cost_table,
    decentralization_curve,
    line_topology,
    manual_cost,
    scale_free_topology,
    split_output,
    split_trade,
    stableswap_curve,
    star_topology,
    swap_out,
    synthetic_pools,
)
from hoproute.policy import MinNakamoto, PolicySet
from hoproute.topology import nakamoto_coefficient


# -- connectivity --------------------------------------------------------------


def test_line_connectivity():
    t = line_topology(["A", "B", "C"], [1, 3, 1])
    assert connectivity(t, "direct").connected_fraction == pytest.approx(4 / 6)
    assert connectivity(t, "multihop", nc_threshold=3, max_hops=2).connected_fraction == 1.0
    assert connectivity(t, "multihop", nc_threshold=4, max_hops=2).connected_fraction == pytest.approx(4 / 6)
    assert connectivity(t, "multihop", nc_threshold=1, max_hops=1).connected_fraction == pytest.approx(4 / 6)


def test_star_hub_connectivity():
    t = star_topology(5, hub_nc=4)
    assert connectivity(t, ConnectivityMode.HUB, 4, hub="H").connected_fraction == 1.0
    assert connectivity(t, ConnectivityMode.HUB, 5, hub="H").connected_fraction == 0.0
    with pytest.raises(ValueError):
        connectivity(t, "hub", 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_multihop_matches_bfs_and_is_monotone(seed):
    rng = random.Random(seed)
    t = random_topology(rng, rng.randint(3, 9), rng.uniform(0.15, 0.6), 5)
    n = len(t)
    for nc in range(1, 6):
        ps = PolicySet(security=(MinNakamoto(nc),))
        for h in (1, 2, 3):
            count = sum(
                1
                for s in t.chain_ids
                for d in t.chain_ids
                if s != d and bfs_shortest_compliant(t, s, d, ps, h) is not None
            )
            assert connectivity(t, "multihop", nc, h).connected_pairs == count
            assert count / (n * (n - 1)) == connectivity(t, "multihop", nc, h).connected_fraction
    for h in (1, 2, 3):
        fr = [connectivity(t, "multihop", nc, h).connected_fraction for nc in range(1, 7)]
        assert fr == sorted(fr, reverse=True)
    for nc in (1, 3):
        fr = [connectivity(t, "multihop", nc, h).connected_fraction for h in range(1, 5)]
        assert fr == sorted(fr)


def test_sweep_and_csv():
    t = line_topology(["A", "B", "C"], [1, 3, 1])
    rows = connectivity_sweep(t, [1, 2], max_hops=2)
    assert [r.mode.value for r in rows] == ["direct", "hub", "multihop"] * 2
    text = connectivity_csv(rows, meta="test")
    assert text.splitlines()[0] == "# meta: test"
    assert "multihop(2)" in text


# -- decentralization ----------------------------------------------------------


def test_decentralization_identity_and_star():
    t = line_topology(["A", "B", "C", "D"], [9, 9, 9, 9])
    curve = decentralization_curve(t, hops=3, k_max=1)
    assert curve[0] == (0, connectivity(t, "multihop", 8, 3).connected_fraction)
    star = star_topology(6, hub_nc=10, leaf_nc=10)
    assert decentralization_curve(star, 2, 1)[1] == (1, 0.0)
    with pytest.raises(ValueError):
        decentralization_curve(star, 2, 7)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6))
def test_decentralization_monotone(seed):
    rng = random.Random(seed)
    t = random_topology(rng, rng.randint(4, 10), rng.uniform(0.2, 0.7), 12)
    k_max = len(t) - 1
    for upgraded in (False, True):
        fr = [f for _, f in decentralization_curve(t, 3, k_max, upgraded=upgraded, seed=seed)]
        assert fr == sorted(fr, reverse=True)


def test_upgrade_helps_on_scale_free():
    t = scale_free_topology(60, seed=3)
    base = decentralization_curve(t, 3, 5)
    up = decentralization_curve(t, 3, 5, upgraded=True)
    assert all(u >= b for (_, u), (_, b) in zip(up, base))


# -- costs ---------------------------------------------------------------------


def test_cost_policy_term():
    assert cost_model(3, 54).policy_gas == 15459 * 3 * 54 == 2504358
    assert cost_model(3, 0).policy_gas == 0
    one = cost_model(2, 10, 1, True)
    ten = cost_model(2, 10, 10, True)
    assert ten.setup_gas * 10 == one.setup_gas and isinstance(ten.setup_gas, Fraction)
    assert cost_model(2, 10).setup_gas == 0
    for bad in ((0, 1), (1, -1)):
        with pytest.raises(ValueError):
            cost_model(*bad)
    with pytest.raises(ValueError):
        cost_model(1, 1, 0)


@given(st.integers(1, 20), st.integers(0, 200), st.integers(1, 10**6), st.booleans())
def test_cost_linearity(h, v, base, setup):
    f = lambda h_, v_, b_: cost_model(h_, v_, 3, setup, base_gas=b_).gas  # noqa: E731
    assert f(h + 1, v, base) - f(h, v, base) == f(h + 2, v, base) - f(h + 1, v, base)
    assert f(h, v + 1, base) - f(h, v, base) == f(h, v + 2, base) - f(h, v + 1, base)
    assert f(h, v, base + 1) - f(h, v, base) == f(h, v, base + 2) - f(h, v, base + 1)


def test_cost_table_and_usd():
    rows = cost_table(3, 54)
    assert [(h, label) for h, label, _ in rows[:4]] == [
        (1, "manual"),
        (1, "multihop"),
        (1, "multihop+setup/1"),
        (1, "multihop+setup/10"),
    ]
    c = manual_cost(2, base_gas=100, gas_price=2.0, usd_per_token=3.0)
    assert c.gas == 600 and c.usd == pytest.approx(600 * 2.0 / 1e6 * 3.0)


# -- swaps -----------------------------------------------------------------------


def test_swap_out_examples():
    p = Pool("A", 1000.0, 1000.0)
    assert swap_out(p, 100) == pytest.approx(1000 * 100 / 1100)
    assert swap_out(p, 0) == 0
    assert swap_out(p, 1e15) < 1000.0
    with pytest.raises(ValueError):
        swap_out(p, -1)


@given(st.floats(1, 1e12), st.floats(1, 1e12), st.floats(0, 1e13))
def test_product_invariant(x, y, dx):
    out = swap_out(Pool("A", x, y), dx)
    # error budget is relative to the output, since y - out cancels when out ~ y
    assert abs((x + dx) * (y - out) - x * y) <= 1e-9 * (x + dx) * y
    assert 0 <= out < y


def test_split_examples():
    two = [Pool("A", 1000.0, 1000.0), Pool("B", 1000.0, 1000.0)]
    alloc = split_trade(two, 100)
    assert alloc == pytest.approx([50, 50])
    assert split_output(two, alloc) == pytest.approx(95.238, abs=1e-3)
    assert split_trade([two[0]], 100) == [100]
    big_small = [Pool("A", 1000.0, 1000.0), Pool("B", 10.0, 10.0)]
    a = split_trade(big_small, 5)
    assert a[0] > 0.9 * 5
    assert split_trade(two, 0) == [0, 0]
    with pytest.raises(ValueError):
        split_trade([], 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 4))
def test_split_matches_grid_oracle(seed, n):
    rng = random.Random(seed)
    pools = [Pool(f"P{i}", rng.uniform(100, 10_000), rng.uniform(100, 10_000)) for i in range(n)]
    total = rng.uniform(1, 20_000)
    alloc = split_trade(pools, total)
    assert sum(alloc) == pytest.approx(total, rel=1e-12)
    assert min(alloc) >= 0
    got = split_output(pools, alloc)
    grid = grid_split_oracle(pools, total)
    assert got >= grid * (1 - 1e-9)
    assert got <= grid * 1.001
    assert got >= max(swap_out(p, total) for p in pools) * (1 - 1e-12)


def test_stableswap_saturation_and_ordering():
    t = line_topology(["L", "M", "N", "O"])
    x = 1e6
    pools = [Pool("L", x, x), Pool("M", x, x), Pool("N", 3 * x, 3 * x), Pool("O", x, x)]
    rows = stableswap_curve(t, pools, "L", [0, 1, 2, 3, UNIFIED], [2 * x, 5 * x])
    out = {(h, dx): o for h, dx, o in rows}
    assert out[(0, 2 * x)] == pytest.approx(2 * x / 3)
    for dx in (2 * x, 5 * x):
        series = [out[(h, dx)] for h in (0, 1, 2, 3)]
        assert series == sorted(series)
        assert out[(UNIFIED, dx)] >= max(series)
        assert out[(3, dx)] == pytest.approx(out[(UNIFIED, dx)])


def test_synthetic_pools():
    t = scale_free_topology(30, seed=1)
    pools = synthetic_pools(t, "chain-000", total_liquidity=1e9, local_share=0.25, seed=2)
    assert sum(p.reserve_x + p.reserve_y for p in pools) == pytest.approx(1e9)
    assert pools[0].chain_id == "chain-000" and pools[0].reserve_x == pytest.approx(1.25e8)
    assert synthetic_pools(t, "chain-000", seed=2) == synthetic_pools(t, "chain-000", seed=2)


def test_scale_free_shape():
    t = scale_free_topology(100, seed=0)
    assert len(t) == 100 and len(t.connections) == 197
    ranked = sorted(t.chain_ids, key=lambda c: -t.degree(c))
    assert nakamoto_coefficient(t.chains[ranked[0]].validator_set) == 12
    assert min(nakamoto_coefficient(c.validator_set) for c in t.chains.values()) == 1
    assert scale_free_topology(100, seed=0) == t
    with pytest.raises(ValueError):
        scale_free_topology(10, gamma=2.0)
