"""Desk-scale evaluations: connectivity, decentralization, scalability, costs, swaps.

Every function is a pure function of its arguments (topology, parameters,
seed). CSV writers return text; the CLI decides where it goes.
"""

from __future__ import annotations

import csv
import enum
import io
import math
import random
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

from .policy import MinNakamoto, PolicySet, chain_satisfies
from .routing import DEFAULT_DELIVERY_GAS, POLICY_GAS_PER_VALIDATOR, reachable
from .simkernel import SimConfig, SimMode, latency_stats, run
from .topology import (
    DEFAULT_GAS_PRICE,
    DEFAULT_USD_PER_GAS_TOKEN,
    Chain,
    Topology,
    ValidatorSet,
    edge,
    remove_top_k,
    removal_order,
    upgrade_topology,
)

SETUP_MESSAGES_PER_HOP = 4
MANUAL_MESSAGES_PER_HOP = 3  # transfer out, receive, acknowledge
MICRO_PER_TOKEN = 1_000_000


class ConnectivityMode(str, enum.Enum):
    DIRECT = "direct"
    HUB = "hub"
    MULTIHOP = "multihop"


@dataclass(frozen=True)
class ConnectivityResult:
    mode: ConnectivityMode
    nc_threshold: int
    connected_fraction: float
    max_hops: int | None = None
    connected_pairs: int = 0
    total_pairs: int = 0


def _pair_fraction(n_connected: int, n: int) -> tuple[float, int]:
    total = n * (n - 1)
    return (n_connected / total if total else 0.0), total


def connectivity(
    t: Topology,
    mode: ConnectivityMode | str,
    nc_threshold: int = 1,
    max_hops: int = 3,
    hub: str | None = None,
) -> ConnectivityResult:
    """Fraction of ordered distinct pairs with a route under ``MinNakamoto(nc_threshold)``.

    Hub mode counts a pair when both ends connect to the hub and the hub meets
    the threshold; the hub itself reaches its own neighbours directly.
    """
    mode = ConnectivityMode(mode)
    ps = PolicySet(security=(MinNakamoto(nc_threshold),))
    n = len(t)
    if mode is ConnectivityMode.DIRECT:
        count = 2 * len(t.connections)
    elif mode is ConnectivityMode.HUB:
        if hub is None or hub not in t.chains:
            raise ValueError("hub mode needs a hub chain present in the topology")
        d = t.degree(hub)
        count = d * (d - 1) + 2 * d if chain_satisfies(ps, t.chains[hub]) else 0
    else:
        count = sum(len(reachable(t, s, ps, max_hops)) for s in t.chain_ids)
    frac, total = _pair_fraction(count, n)
    return ConnectivityResult(mode, nc_threshold, frac, max_hops if mode is ConnectivityMode.MULTIHOP else None,
                              count, total)


def connectivity_sweep(
    t: Topology, thresholds: Iterable[int], max_hops: int = 3, hub: str | None = None
) -> list[ConnectivityResult]:
    hub = hub if hub is not None else removal_order(t)[0]
    out = []
    for nc in thresholds:
        out.append(connectivity(t, ConnectivityMode.DIRECT, nc))
        out.append(connectivity(t, ConnectivityMode.HUB, nc, hub=hub))
        out.append(connectivity(t, ConnectivityMode.MULTIHOP, nc, max_hops))
    return out


def decentralization_curve(
    t: Topology,
    hops: int,
    k_max: int,
    upgraded: bool = False,
    seed: int = 0,
    nc_threshold: int = 8,
    upgrade_min_nc: int = 6,
) -> list[tuple[int, float]]:
    """Multi-hop connectivity after removing the ``k`` best-connected chains, k = 0..k_max.

    The denominator stays the original chain count, so removed chains count as
    unreachable and the curve measures loss against the intact network.
    """
    if not 0 <= k_max < len(t):
        raise ValueError(f"k_max must be in [0, {len(t) - 1}]")
    base = upgrade_topology(t, seed, upgrade_min_nc) if upgraded else t
    ps = PolicySet(security=(MinNakamoto(nc_threshold),))
    n = len(t)
    curve = []
    for k in range(k_max + 1):
        tk = remove_top_k(base, k)
        count = sum(len(reachable(tk, s, ps, hops)) for s in tk.chain_ids)
        curve.append((k, _pair_fraction(count, n)[0]))
    return curve


# -- costs --------------------------------------------------------------------


@dataclass(frozen=True)
class CostBreakdown:
    delivery_gas: int
    policy_gas: int
    setup_gas: Fraction
    gas_price: float
    usd_per_token: float

    @property
    def gas(self) -> Fraction:
        return self.delivery_gas + self.policy_gas + self.setup_gas

    @property
    def usd(self) -> float:
        return float(self.gas) * self.gas_price / MICRO_PER_TOKEN * self.usd_per_token


def cost_model(
    hops: int,
    validators_per_hop: int,
    amortize_over: int = 1,
    include_setup: bool = False,
    base_gas: int = DEFAULT_DELIVERY_GAS,
    setup_gas_per_hop: int | None = None,
    gas_price: float = DEFAULT_GAS_PRICE,
    usd_per_token: float = DEFAULT_USD_PER_GAS_TOKEN,
) -> CostBreakdown:
    """Gas for one multi-hop message; ``gas_price`` is in micro-tokens per gas unit."""
    if hops < 1:
        raise ValueError("hops must be >= 1")
    if amortize_over < 1:
        raise ValueError("amortize_over must be >= 1")
    if validators_per_hop < 0:
        raise ValueError("validators_per_hop must be >= 0")
    per_hop_setup = SETUP_MESSAGES_PER_HOP * base_gas if setup_gas_per_hop is None else setup_gas_per_hop
    setup = Fraction(per_hop_setup * hops, amortize_over) if include_setup else Fraction(0)
    return CostBreakdown(
        base_gas * hops, POLICY_GAS_PER_VALIDATOR * hops * validators_per_hop, setup, gas_price, usd_per_token
    )


def manual_cost(hops: int, base_gas: int = DEFAULT_DELIVERY_GAS, gas_price: float = DEFAULT_GAS_PRICE,
                usd_per_token: float = DEFAULT_USD_PER_GAS_TOKEN) -> CostBreakdown:
    """The same transfer done as one ordinary transfer per hop."""
    return CostBreakdown(MANUAL_MESSAGES_PER_HOP * base_gas * hops, 0, Fraction(0), gas_price, usd_per_token)


def cost_table(
    max_hops: int, validators_per_hop: int = 0, amortize: Sequence[int] = (1, 10), **kw: float
) -> list[tuple[int, str, CostBreakdown]]:
    rows = []
    for h in range(1, max_hops + 1):
        rows.append((h, "manual", manual_cost(h, **kw)))  # type: ignore[arg-type]
        rows.append((h, "multihop", cost_model(h, validators_per_hop, **kw)))  # type: ignore[arg-type]
        for a in amortize:
            rows.append((h, f"multihop+setup/{a}", cost_model(h, validators_per_hop, a, True, **kw)))  # type: ignore[arg-type]
    return rows


# -- swaps --------------------------------------------------------------------


@dataclass
class Pool:
    chain_id: str
    reserve_x: float
    reserve_y: float

    def __post_init__(self) -> None:
        if self.reserve_x <= 0 or self.reserve_y <= 0:
            raise ValueError(f"pool on {self.chain_id}: reserves must be positive")

    @property
    def k(self) -> float:
        return self.reserve_x * self.reserve_y

    def apply(self, dx: float) -> float:
        """Execute a swap of ``dx`` and update reserves; returns the output."""
        out = swap_out(self, dx)
        self.reserve_x += dx
        self.reserve_y -= out
        return out


def swap_out(pool: Pool, dx: float) -> float:
    if dx < 0:
        raise ValueError("dx must be non-negative")
    return pool.reserve_y * dx / (pool.reserve_x + dx)


def split_trade(pools: Sequence[Pool], total_dx: float) -> list[float]:
    """Allocation of ``total_dx`` across pools that maximizes total output.

    Each pool's output is concave with marginal ``y x / (x + d)^2``. At the
    optimum every funded pool shares one marginal ``lam`` and no unfunded pool
    has a starting marginal ``y / x`` above it, so ``d_i = sqrt(x_i y_i / lam) - x_i``.
    Pools are added in order of starting marginal until the active set is
    consistent.
    """
    if not pools:
        raise ValueError("need at least one pool")
    if total_dx < 0:
        raise ValueError("total_dx must be non-negative")
    if total_dx == 0:
        return [0.0] * len(pools)
    order = sorted(range(len(pools)), key=lambda i: (-pools[i].reserve_y / pools[i].reserve_x, i))
    alloc = [0.0] * len(pools)
    active: list[int] = []
    for pos, i in enumerate(order):
        active.append(i)
        sum_root = math.fsum(math.sqrt(pools[j].k) for j in active)
        sum_x = math.fsum(pools[j].reserve_x for j in active)
        root_lam_inv = (total_dx + sum_x) / sum_root  # 1 / sqrt(lam)
        lam = 1.0 / root_lam_inv**2
        nxt = order[pos + 1] if pos + 1 < len(order) else None
        if nxt is None or pools[nxt].reserve_y / pools[nxt].reserve_x <= lam:
            break
    for j in active:
        alloc[j] = max(0.0, math.sqrt(pools[j].k) * root_lam_inv - pools[j].reserve_x)
    # rounding can leave the sum a hair off; the largest leg absorbs it
    drift = total_dx - math.fsum(alloc)
    big = max(active, key=lambda j: alloc[j])
    alloc[big] = max(0.0, alloc[big] + drift)
    return alloc


def split_output(pools: Sequence[Pool], alloc: Sequence[float]) -> float:
    return math.fsum(swap_out(p, a) for p, a in zip(pools, alloc))


UNIFIED = -1  # hop limit sentinel for "all pools"


def stableswap_curve(
    t: Topology,
    pools: Sequence[Pool],
    local: str,
    hop_limits: Sequence[int],
    trade_sizes: Sequence[float],
    ps: PolicySet | None = None,
) -> list[tuple[int, float, float]]:
    """Rows of (hop_limit, trade, output); hop limit ``UNIFIED`` uses every pool."""
    for p in pools:
        if p.chain_id not in t.chains:
            raise ValueError(f"pool on unknown chain {p.chain_id!r}")
    rows = []
    for h in hop_limits:
        if h == UNIFIED:
            usable = list(pools)
        else:
            near = {local} | (reachable(t, local, ps, h) if h > 0 else set())
            usable = [p for p in pools if p.chain_id in near]
        for dx in trade_sizes:
            out = split_output(usable, split_trade(usable, dx)) if usable else 0.0
            rows.append((h, dx, out))
    return rows


# -- scalability --------------------------------------------------------------


@dataclass(frozen=True)
class ScalePoint:
    mode: SimMode
    rate: float
    mean_latency: float | None
    p95: float | None
    delivered_fraction: float
    packets: int
    max_backlog: int
    final_backlog: int
    # hub mode: (time, mempool + parked work) on the hub after every block
    hub_demand: tuple[tuple[float, int], ...] = ()


def scalability_world(
    n_endpoints: int = 41,
    n_intermediates: int = 8,
    capacity: int = 200,
    block_time_ms: float = 1000.0,
    endpoint_capacity_factor: int = 10,
    nc: int = 10,
) -> tuple[Topology, str, dict[str, dict[str, int]]]:
    """Hub plus intermediates, each connected to every endpoint.

    Returns the topology, the hub id and per-chain capacity overrides giving
    endpoints ``endpoint_capacity_factor`` times the shared capacity, which
    stands in for spreading source load over a much larger chain population.
    """
    vs = ValidatorSet.from_powers([1] * (3 * nc - 1))
    hub = "hub"
    mids = [f"mid-{i:02d}" for i in range(1, n_intermediates + 1)]
    ends = [f"end-{i:03d}" for i in range(1, n_endpoints + 1)]
    chains = {c: Chain(c, vs, block_time_ms=block_time_ms, capacity=capacity) for c in [hub, *mids, *ends]}
    conns = {edge(e, h) for e in ends for h in [hub, *mids]}
    overrides = {e: {"capacity": capacity * endpoint_capacity_factor} for e in ends}
    return Topology(chains, frozenset(conns)), hub, overrides


def scalability_point(
    t: Topology,
    mode: SimMode | str,
    rate: float,
    duration_ms: float,
    hub: str,
    seed: int = 0,
    overrides: dict[str, dict[str, int]] | None = None,
    n_routes: int = 8,
    max_packets: int | None = None,
) -> ScalePoint:
    mode = SimMode(mode)
    cfg = SimConfig(
        seed=seed,
        duration_ms=duration_ms,
        workload_rate=rate,
        mode=mode,
        hub=hub,
        max_hops=2,
        n_routes=n_routes,
        chain_overrides=dict(overrides or {}),
        record_events=False,
        max_packets=max_packets,
    )
    res = run(cfg, t)
    st = latency_stats(res.traces)
    backlog = [b for _, _, _, b in res.chains[hub].blocks] if mode is SimMode.HUB else [
        b for p in res.chains.values() for _, _, _, b in p.blocks
    ]
    final = max((p.blocks[-1][3] for p in res.chains.values() if p.blocks), default=0)
    demand = tuple(res.demand(hub)) if mode is SimMode.HUB else ()
    return ScalePoint(mode, rate, st.mean, st.p95, st.delivered_fraction, len(res.traces),
                      max(backlog, default=0), final, demand)


# -- synthetic topologies -----------------------------------------------------


def _chain_with_nc(cid: str, nc: int) -> Chain:
    # 3k - 1 equal-power validators give a Nakamoto coefficient of exactly k
    return Chain(cid, ValidatorSet.from_powers([1] * (3 * nc - 1), prefix=f"{cid}-val"))


def star_topology(n_leaves: int, hub_nc: int = 10, leaf_nc: int = 1, hub: str = "H") -> Topology:
    leaves = [f"L{i}" for i in range(1, n_leaves + 1)]
    chains = {hub: _chain_with_nc(hub, hub_nc), **{c: _chain_with_nc(c, leaf_nc) for c in leaves}}
    return Topology(chains, frozenset(edge(hub, c) for c in leaves))


def line_topology(ids: Sequence[str], ncs: Sequence[int] | None = None) -> Topology:
    ncs = ncs if ncs is not None else [1] * len(ids)
    chains = {c: _chain_with_nc(c, k) for c, k in zip(ids, ncs)}
    return Topology(chains, frozenset(edge(a, b) for a, b in zip(ids, ids[1:])))


def scale_free_topology(
    n: int = 100, m: int = 2, gamma: float = 3.0, seed: int = 0, nc_max: int = 12
) -> Topology:
    """Preferential-attachment graph with degree exponent ``gamma`` (> 2).

    New chains attach to ``m`` existing ones with probability proportional to
    ``degree + A``, where ``A = (gamma - 3) * m`` sets the exponent. Nakamoto
    coefficients fall linearly with degree rank from ``nc_max`` to 1, so the
    best-connected chains are also the most decentralized.
    """
    if gamma <= 2:
        raise ValueError("gamma must exceed 2")
    if not 1 <= m < n:
        raise ValueError("need 1 <= m < n")
    rng = random.Random(seed)
    offset = (gamma - 3.0) * m
    ids = [f"chain-{i:03d}" for i in range(n)]
    degree = [0] * n
    conns: set[tuple[int, int]] = set()
    for a in range(m + 1):
        for b in range(a + 1, m + 1):
            conns.add((a, b))
            degree[a] += 1
            degree[b] += 1
    for v in range(m + 1, n):
        weights = [max(degree[u] + offset, 1e-9) for u in range(v)]
        targets: set[int] = set()
        while len(targets) < m:
            targets.add(rng.choices(range(v), weights=weights)[0])
        for u in sorted(targets):
            conns.add((u, v))
            degree[u] += 1
            degree[v] += 1
    rank = sorted(range(n), key=lambda i: (-degree[i], ids[i]))
    nc = {}
    for r, i in enumerate(rank):
        nc[ids[i]] = max(1, nc_max - (r * nc_max) // n)
    chains = {c: _chain_with_nc(c, nc[c]) for c in ids}
    return Topology(chains, frozenset(edge(ids[a], ids[b]) for a, b in conns))


def synthetic_pools(
    t: Topology, local: str, total_liquidity: float = 10_000_000_000.0, local_share: float = 0.25, seed: int = 0
) -> list[Pool]:
    """Balanced pools: ``local_share`` of liquidity on ``local``, the rest spread at random."""
    rng = random.Random(seed)
    others = [c for c in t.chain_ids if c != local]
    weights = [rng.random() for _ in others]
    total_w = math.fsum(weights)
    rest = total_liquidity * (1 - local_share)
    pools = [Pool(local, total_liquidity * local_share / 2, total_liquidity * local_share / 2)]
    for c, w in zip(others, weights):
        side = rest * w / total_w / 2
        if side > 0:
            pools.append(Pool(c, side, side))
    return pools


# -- CSV ----------------------------------------------------------------------


def _num(x: float | Fraction | None) -> str:
    if x is None:
        return ""
    if isinstance(x, Fraction):
        return str(x.numerator) if x.denominator == 1 else f"{float(x):.6f}"
    if isinstance(x, int):
        return str(x)
    return f"{x:.6f}"


def to_csv(header: Sequence[str], rows: Iterable[Sequence[object]], meta: str | None = None) -> str:
    buf = io.StringIO()
    if meta is not None:
        buf.write(f"# meta: {meta}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_num(v) if isinstance(v, (float, Fraction)) or v is None else v for v in row])
    return buf.getvalue()


def connectivity_csv(results: Iterable[ConnectivityResult], meta: str | None = None) -> str:
    return to_csv(
        ["nc_threshold", "mode", "connectivity"],
        ((r.nc_threshold, r.mode.value if r.max_hops is None else f"{r.mode.value}({r.max_hops})",
          r.connected_fraction) for r in results),
        meta,
    )


def decentralization_csv(rows: Iterable[tuple[int, int, bool, float]], meta: str | None = None) -> str:
    return to_csv(["k_removed", "hops", "upgraded", "connectivity"],
                  ((k, h, str(u).lower(), c) for k, h, u, c in rows), meta)


def scalability_csv(points: Iterable[ScalePoint], meta: str | None = None) -> str:
    return to_csv(
        ["rate", "mode", "mean_latency", "p95", "delivered_fraction", "packets", "final_backlog"],
        ((p.rate, p.mode.value, p.mean_latency, p.p95, p.delivered_fraction, p.packets, p.final_backlog)
         for p in points),
        meta,
    )


def costs_csv(rows: Iterable[tuple[int, str, CostBreakdown]], meta: str | None = None) -> str:
    return to_csv(
        ["hops", "variant", "gas", "usd", "delivery_gas", "policy_gas", "setup_gas"],
        ((h, v, c.gas, c.usd, c.delivery_gas, c.policy_gas, c.setup_gas) for h, v, c in rows),
        meta,
    )


def swap_csv(rows: Iterable[tuple[int, float, float]], meta: str | None = None) -> str:
    return to_csv(["hops", "trade_size", "output"],
                  (("unified" if h == UNIFIED else h, dx, out) for h, dx, out in rows), meta)

