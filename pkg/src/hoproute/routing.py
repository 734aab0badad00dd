"""Policy-constrained route computation over a :class:`Topology`.

Costs are additive per non-source hop, so a uniform-cost search over simple
paths with a hop limit is exact. Every objective breaks ties by fewer hops and
then by the lexicographically smallest hop sequence, which makes results
fully deterministic.
"""

from __future__ import annotations

import enum
import heapq
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import InsufficientDisjointPaths, NoRoute, UnknownChain
from .policy import PolicySet, chain_satisfies, parse_channel_version
from .topology import Topology

# verification gas per validator of each intermediate hop
POLICY_GAS_PER_VALIDATOR = 15459
DEFAULT_DELIVERY_GAS = 150_000
# fall back to exhaustive disjoint search only on small instances
EXHAUSTIVE_DISJOINT_LIMIT = 12


class RoutingObjective(str, enum.Enum):
    MIN_HOPS = "min-hops"
    MIN_FEE = "min-fee"
    MIN_LATENCY = "min-latency"


@dataclass(frozen=True)
class Route:
    hops: tuple[str, ...]
    channels: tuple[str | None, ...]
    fee_estimate: float
    latency_estimate: float
    approved: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "hops", tuple(self.hops))
        object.__setattr__(self, "channels", tuple(self.channels))
        if len(self.hops) < 2:
            raise ValueError("a route needs at least two chains")
        if len(set(self.hops)) != len(self.hops):
            raise ValueError(f"route {self.hops} repeats a chain")
        if len(self.channels) != len(self.hops) - 1:
            raise ValueError("need one channel slot per edge")

    @property
    def n_edges(self) -> int:
        return len(self.hops) - 1

    @property
    def source(self) -> str:
        return self.hops[0]

    @property
    def destination(self) -> str:
        return self.hops[-1]

    @property
    def intermediates(self) -> tuple[str, ...]:
        return self.hops[1:-1]


@dataclass(frozen=True)
class GasBreakdown:
    delivery_gas: int
    policy_gas: int

    @property
    def total(self) -> int:
        return self.delivery_gas + self.policy_gas


def _hop_fee(t: Topology, hop: str, dst: str, with_policy: bool, delivery_gas: int) -> float:
    fee = delivery_gas * t.chains[hop].gas_price
    if with_policy and hop != dst:
        # the destination pays to verify this intermediate's validator evidence
        fee += POLICY_GAS_PER_VALIDATOR * t.chains[hop].n_validators * t.chains[dst].gas_price
    return fee


def _hop_cost(
    t: Topology, hop: str, dst: str, obj: RoutingObjective, with_policy: bool, delivery_gas: int
) -> float:
    if obj is RoutingObjective.MIN_HOPS:
        return 1
    if obj is RoutingObjective.MIN_FEE:
        return _hop_fee(t, hop, dst, with_policy, delivery_gas)
    return t.chains[hop].block_time_ms


def route_gas(
    hops: Sequence[str], t: Topology, ps: PolicySet | None = None, delivery_gas: int = DEFAULT_DELIVERY_GAS
) -> GasBreakdown:
    """Raw gas for delivering along ``hops``, split into delivery and policy terms."""
    hops = getattr(hops, "hops", hops)
    with_policy = ps is not None and ps.has_security
    policy = 0
    if with_policy:
        policy = sum(POLICY_GAS_PER_VALIDATOR * t.chains[c].n_validators for c in hops[1:-1])
    return GasBreakdown(delivery_gas * (len(hops) - 1), policy)


def route_fee(
    r: Route | Sequence[str],
    t: Topology,
    ps: PolicySet | None = None,
    delivery_gas: int = DEFAULT_DELIVERY_GAS,
) -> float:
    """Fee in gas-token units: each non-source hop pays its delivery gas at its own
    gas price; the destination additionally pays the per-validator verification
    gas for every intermediate when security policies are in force."""
    hops = getattr(r, "hops", r)
    with_policy = ps is not None and ps.has_security
    total = 0.0
    for hop in hops[1:]:
        total += _hop_fee(t, hop, hops[-1], with_policy, delivery_gas)
    return total


def route_latency(r: Route | Sequence[str], t: Topology) -> float:
    hops = getattr(r, "hops", r)
    total = 0.0
    for hop in hops[1:]:
        total += t.chains[hop].block_time_ms
    return total


def _objective_value(
    hops: Sequence[str], t: Topology, obj: RoutingObjective, ps: PolicySet | None, delivery_gas: int
) -> float:
    if obj is RoutingObjective.MIN_HOPS:
        return len(hops) - 1
    if obj is RoutingObjective.MIN_FEE:
        return route_fee(hops, t, ps, delivery_gas)
    return route_latency(hops, t)


def select_channel(t: Topology, a: str, b: str, ps: PolicySet | None) -> str | None:
    """Lowest channel id on ``a``-``b`` whose version requirements ``ps`` implies."""
    for ch in t.channels_between(a, b):
        required = parse_channel_version(ch.version)
        if ps is None:
            if not required.has_security:
                return ch.channel_id
        elif ps.implies(required):
            return ch.channel_id
    return None


def make_route(
    hops: Sequence[str], t: Topology, ps: PolicySet | None = None, delivery_gas: int = DEFAULT_DELIVERY_GAS
) -> Route:
    hops = tuple(hops)
    for a, b in zip(hops, hops[1:]):
        if not t.connected(a, b):
            raise ValueError(f"{a} and {b} are not connected")
    return Route(
        hops=hops,
        channels=tuple(select_channel(t, a, b, ps) for a, b in zip(hops, hops[1:])),
        fee_estimate=route_fee(hops, t, ps, delivery_gas),
        latency_estimate=route_latency(hops, t),
    )


def _check_endpoints(t: Topology, src: str, dst: str, max_hops: int) -> None:
    if src == dst:
        raise ValueError("source and destination must differ")
    for c in (src, dst):
        if c not in t.chains:
            raise UnknownChain(f"unknown chain {c!r}")
    if max_hops < 1:
        raise ValueError("max_hops must be >= 1")


def _search(
    t: Topology,
    src: str,
    dst: str,
    ps: PolicySet,
    obj: RoutingObjective,
    max_hops: int,
    banned: frozenset[str] = frozenset(),
    banned_edges: frozenset[tuple[str, str]] = frozenset(),
    delivery_gas: int = DEFAULT_DELIVERY_GAS,
) -> tuple[str, ...] | None:
    with_policy = ps.has_security
    # (cost, hops, path) is a total order, so the first pop of dst is optimal
    heap: list[tuple[float, int, tuple[str, ...]]] = [(0.0, 0, (src,))]
    labels: dict[str, list[tuple[float, int]]] = {}
    ok: dict[str, bool] = {}
    while heap:
        cost, n, path = heapq.heappop(heap)
        node = path[-1]
        if node == dst:
            return path
        # Pareto pruning: an earlier pop with no more cost and no more hops wins
        seen = labels.setdefault(node, [])
        if any(c <= cost and k <= n for c, k in seen):
            continue
        seen.append((cost, n))
        if n == max_hops:
            continue
        for nb in t.neighbors(node):
            if nb in path or nb in banned:
                continue
            if (node, nb) in banned_edges or (nb, node) in banned_edges:
                continue
            if nb != dst:
                if n + 1 == max_hops:
                    continue
                if nb not in ok:
                    ok[nb] = chain_satisfies(ps, t.chains[nb])
                if not ok[nb]:
                    continue
            step = _hop_cost(t, nb, dst, obj, with_policy, delivery_gas)
            heapq.heappush(heap, (cost + step, n + 1, path + (nb,)))
    return None


def compute_route(
    t: Topology,
    src: str,
    dst: str,
    ps: PolicySet | None = None,
    obj: RoutingObjective = RoutingObjective.MIN_HOPS,
    max_hops: int = 4,
    delivery_gas: int = DEFAULT_DELIVERY_GAS,
) -> Route:
    """Objective-optimal policy-compliant route with at most ``max_hops`` edges."""
    ps = ps or PolicySet()
    obj = RoutingObjective(obj)
    _check_endpoints(t, src, dst, max_hops)
    path = _search(t, src, dst, ps, obj, max_hops, delivery_gas=delivery_gas)
    if path is None:
        raise NoRoute(f"no route {src} -> {dst} within {max_hops} hops under {ps.security}")
    return make_route(path, t, ps, delivery_gas)


def enumerate_routes(
    t: Topology,
    src: str,
    dst: str,
    ps: PolicySet | None = None,
    max_hops: int = 4,
    delivery_gas: int = DEFAULT_DELIVERY_GAS,
) -> list[Route]:
    """All simple compliant paths, sorted by (edge count, hop sequence)."""
    ps = ps or PolicySet()
    _check_endpoints(t, src, dst, max_hops)
    ok = {c: chain_satisfies(ps, t.chains[c]) for c in t.chains}
    found: list[tuple[str, ...]] = []

    def dfs(path: list[str]) -> None:
        node = path[-1]
        for nb in t.neighbors(node):
            if nb in path:
                continue
            if nb == dst:
                found.append(tuple(path) + (dst,))
            elif ok[nb] and len(path) < max_hops:
                path.append(nb)
                dfs(path)
                path.pop()

    dfs([src])
    found.sort(key=lambda p: (len(p), p))
    return [make_route(p, t, ps, delivery_gas) for p in found]


def reachable(t: Topology, src: str, ps: PolicySet | None = None, max_hops: int = 4) -> set[str]:
    """Chains reachable from ``src`` over compliant intermediates within ``max_hops`` edges."""
    ps = ps or PolicySet()
    dist = {src: 0}
    out: set[str] = set()
    queue = deque([src])
    while queue:
        node = queue.popleft()
        d = dist[node]
        if d == max_hops:
            continue
        if node != src and not chain_satisfies(ps, t.chains[node]):
            continue
        for nb in t.neighbors(node):
            if nb not in dist:
                dist[nb] = d + 1
                out.add(nb)
                queue.append(nb)
    return out


def _disjoint(routes: Iterable[Sequence[str]]) -> bool:
    seen: set[str] = set()
    direct = 0
    for hops in routes:
        mids = set(hops[1:-1])
        if not mids:
            direct += 1
        if mids & seen:
            return False
        seen |= mids
    return direct <= 1


def disjoint_routes(
    t: Topology,
    src: str,
    dst: str,
    ps: PolicySet | None = None,
    n: int = 2,
    max_hops: int = 4,
    obj: RoutingObjective = RoutingObjective.MIN_HOPS,
    delivery_gas: int = DEFAULT_DELIVERY_GAS,
) -> list[Route]:
    """``n`` routes that share no intermediate chain.

    Greedy: take the objective-best route, ban its intermediates, repeat. When
    greedy comes up short on a small instance, an exhaustive search over all
    compliant routes decides.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    ps = ps or PolicySet()
    obj = RoutingObjective(obj)
    _check_endpoints(t, src, dst, max_hops)
    chosen: list[tuple[str, ...]] = []
    banned: set[str] = set()
    banned_edges: set[tuple[str, str]] = set()
    while len(chosen) < n:
        path = _search(
            t, src, dst, ps, obj, max_hops, frozenset(banned), frozenset(banned_edges), delivery_gas
        )
        if path is None:
            break
        chosen.append(path)
        banned |= set(path[1:-1])
        if len(path) == 2:
            banned_edges.add((src, dst))
    if len(chosen) < n:
        chosen = _exhaustive_disjoint(t, src, dst, ps, n, max_hops, obj, delivery_gas) or chosen
    if len(chosen) < n:
        raise InsufficientDisjointPaths(found=len(chosen), wanted=n)
    return [make_route(p, t, ps, delivery_gas) for p in chosen]


def _exhaustive_disjoint(
    t: Topology,
    src: str,
    dst: str,
    ps: PolicySet,
    n: int,
    max_hops: int,
    obj: RoutingObjective,
    delivery_gas: int,
) -> list[tuple[str, ...]] | None:
    candidates = {c for c in t.chains if c not in (src, dst) and chain_satisfies(ps, t.chains[c])}
    if len(candidates) > EXHAUSTIVE_DISJOINT_LIMIT:
        return None
    routes = [r.hops for r in enumerate_routes(t, src, dst, ps, max_hops, delivery_gas)]
    routes.sort(key=lambda h: (_objective_value(h, t, obj, ps, delivery_gas), len(h), h))
    best: list[tuple[str, ...]] = []

    # depth-first packing in objective order: the first complete packing found
    # is the lexicographically best one under that order
    def pack(start: int, picked: list[tuple[str, ...]], used: set[str]) -> bool:
        nonlocal best
        if len(picked) > len(best):
            best = list(picked)
        if len(picked) == n:
            return True
        spare = len(candidates - used) + (0 if any(len(p) == 2 for p in picked) else 1)
        if len(picked) + spare <= len(best) and len(best) < n:
            return False
        for i in range(start, len(routes)):
            mids = set(routes[i][1:-1])
            if mids & used or (not mids and any(len(p) == 2 for p in picked)):
                continue
            picked.append(routes[i])
            if pack(i + 1, picked, used | mids):
                return True
            picked.pop()
        return False

    pack(0, [], set())
    return best if len(best) == n else (best or None)


def pairwise_intermediate_disjoint(routes: Iterable[Route | Sequence[str]]) -> bool:
    return _disjoint(getattr(r, "hops", r) for r in routes)


__all__ = [
    "Route",
    "RoutingObjective",
    "GasBreakdown",
    "POLICY_GAS_PER_VALIDATOR",
    "DEFAULT_DELIVERY_GAS",
    "compute_route",
    "enumerate_routes",
    "disjoint_routes",
    "route_fee",
    "route_gas",
    "route_latency",
    "reachable",
    "make_route",
    "select_channel",
    "pairwise_intermediate_disjoint",
]
