"""Small builders and independent oracles shared by the test modules."""

from __future__ import annotations

import itertools
import math
import random
from collections import deque
from dataclasses import replace as _replace
from fractions import Fraction

from hoproute.errors import EscrowClosed, InvalidEvidence, NoCoveringRelayer, NoRoute
from hoproute.experiments import split_output
from hoproute.lightclient import Packet, ProofChain, World, build_proof_chain
from hoproute.multipath import MultipathConfig, ReceiptCounter
from hoproute.policy import MinNakamoto, PolicySet, chain_satisfies, route_satisfies
from hoproute.relaynet import EscrowState, RelayerNetworkState
from hoproute.routing import RoutingObjective, compute_route, route_fee
from hoproute.topology import Chain, Topology, Validator, ValidatorSet, edge


# (criterion number, line) pairs, printed at the end of the session
ACCEPTANCE_LINES: list[tuple[int, str]] = []


def report(number: int, title: str, ok: bool, detail: str) -> bool:
    ACCEPTANCE_LINES.append((number, f"{'PASS' if ok else 'FAIL'} {number:>2}. {title}: {detail}"))
    return ok


def chain(cid: str, nc: int = 1, **kw) -> Chain:
    """Chain with ``3*nc - 1`` equal validators, hence Nakamoto coefficient ``nc``."""
    return Chain(cid, ValidatorSet.from_powers([1] * (3 * nc - 1), prefix=f"{cid}-v"), **kw)


def topo(edges, ncs=None, **chain_kw) -> Topology:
    ncs = ncs or {}
    ids = sorted({c for e in edges for c in e} | set(ncs))
    chains = {c: chain(c, ncs.get(c, 1), **chain_kw.get(c, {})) for c in ids}
    return Topology(chains, frozenset(edge(a, b) for a, b in edges))


def brute_nakamoto(powers: list[int]) -> int:
    total = sum(powers)
    for k in range(1, len(powers) + 1):
        for combo in itertools.combinations(powers, k):
            if 3 * sum(combo) > total:
                return k
    raise AssertionError("no subset exceeds a third")


def bfs_shortest_compliant(t: Topology, src: str, dst: str, ps: PolicySet, max_hops: int) -> int | None:
    """Edge count of the shortest path whose intermediates all satisfy ``ps``."""
    ok = {c for c in t.chains if chain_satisfies(ps, t.chains[c])}
    dist = {src: 0}
    q = deque([src])
    while q:
        u = q.popleft()
        for v in t.neighbors(u):
            if v == dst:
                return dist[u] + 1 if dist[u] + 1 <= max_hops else None
            if v not in dist and v in ok:
                dist[v] = dist[u] + 1
                q.append(v)
    return None


def all_simple_paths(t: Topology, src: str, dst: str, max_hops: int) -> list[tuple[str, ...]]:
    out = []

    def walk(path):
        if len(path) - 1 > max_hops:
            return
        if path[-1] == dst:
            out.append(tuple(path))
            return
        for v in t.neighbors(path[-1]):
            if v not in path:
                walk(path + [v])

    walk([src])
    return out


def random_topology(rng: random.Random, n: int, p: float, nc_max: int = 10, gas: bool = True) -> Topology:
    ids = [f"c{i:02d}" for i in range(n)]
    edges = [(a, b) for a, b in itertools.combinations(ids, 2) if rng.random() < p]
    chains = {}
    for c in ids:
        kw = {"gas_price": rng.choice([0.01, 0.025, 0.1, 0.5, 1.0])} if gas else {}
        chains[c] = chain(c, rng.randint(1, nc_max), block_time_ms=rng.choice([1000.0, 5000.0, 6000.0]), **kw)
    return Topology(chains, frozenset(edge(a, b) for a, b in edges))


# -- proof-chain fuzzing ---------------------------------------------------------



TAMPER_KINDS = ("payload", "evidence_power", "commitment_digest", "link_order")


def random_proof_case(rng: random.Random, case_id: int = 0):
    """A committed, fully relayed packet on a random route of 1 to 4 edges."""
    n_edges = rng.randint(1, 4)
    ids = [f"k{i}" for i in range(n_edges + 1)]
    chains = []
    for c in ids:
        powers = [rng.randint(1, 20) for _ in range(rng.randint(3, 9))]
        chains.append(Chain(c, ValidatorSet.from_powers(powers, prefix=f"{c}-v")))
    world = World(chains)
    # unrelated traffic so trees have several leaves
    for c in ids:
        for j in range(rng.randint(0, 5)):
            world[c].store.set(f"commitments/noise{j}/{c}", rng.randbytes(8))
    payload = rng.randbytes(rng.randint(1, 32))
    pkt = world.commit_packet(Packet(f"p{case_id}", ids[0], ids[-1], tuple(ids), "ics20-1", payload))
    world.relay_path(ids)
    min_nc = min((ch.nakamoto for ch in chains[1:-1]), default=1)
    ps = PolicySet(security=(MinNakamoto(min_nc),)) if n_edges > 1 else PolicySet()
    return world, pkt, build_proof_chain(world, pkt), ps


def _flip(b: bytes, rng: random.Random) -> bytes:
    i = rng.randrange(len(b))
    return b[:i] + bytes([b[i] ^ (1 << rng.randrange(8))]) + b[i + 1:]


def tamper(rng: random.Random, pkt: Packet, pc: ProofChain, kind: str | None = None):
    """Mutate exactly one field; returns (kind, packet, proof chain)."""
    links = list(pc.links)
    kinds = list(TAMPER_KINDS)
    if len(links) < 2:
        kinds = [k for k in kinds if k not in ("evidence_power", "link_order")]
    kind = kind if kind in kinds else rng.choice(kinds)
    if kind == "payload":
        return kind, _replace(pkt, payload=_flip(pkt.payload, rng)), pc
    if kind == "evidence_power":
        i = rng.randrange(1, len(links))
        vs = links[i].validator_evidence
        j = rng.randrange(len(vs.validators))
        vals = list(vs.validators)
        vals[j] = Validator(vals[j].address, vals[j].power + rng.choice([1, 2, 5]))
        links[i] = _replace(links[i], validator_evidence=ValidatorSet(tuple(vals)))
        return kind, pkt, ProofChain(tuple(links))
    if kind == "commitment_digest":
        i = rng.randrange(len(links))
        path = list(links[i].commitment_proof.path)
        if path and rng.random() < 0.7:
            j = rng.randrange(len(path))
            left, d = path[j]
            path[j] = (left, _flip(d, rng))
            links[i] = _replace(links[i], commitment_proof=links[i].commitment_proof.with_path(path))
        else:
            cs = links[i].consensus_state
            links[i] = _replace(links[i], consensus_state=_replace(cs, commitments_root=_flip(cs.commitments_root, rng)))
        return kind, pkt, ProofChain(tuple(links))
    i = rng.randrange(len(links) - 1)
    links[i], links[i + 1] = links[i + 1], links[i]
    return kind, pkt, ProofChain(tuple(links))


# -- multipath adversary --------------------------------------------------------



def multipath_exhaustive(n: int, m: int | None = None) -> tuple[int, int]:
    """Every corruption subset of size <= N - M, every arrival order, colluding or
    distinct forgeries, with and without a replay and a dropped honest receipt.

    Returns (cases checked, deliveries carrying a forged payload).
    """
    cfg = MultipathConfig(n, m) if m is not None else MultipathConfig.majority(n)
    original = b"original-payload"
    routes = [("S", f"I{i}", "D") for i in range(n)]
    cases = bad = 0
    for size in range(0, n - cfg.threshold + 1):
        for corrupt in itertools.combinations(range(n), size):
            for collude in (False, True):
                payloads = [
                    (b"forged" if collude else b"forged-%d" % i) if i in corrupt else original
                    for i in range(n)
                ]
                for order in itertools.permutations(range(n)):
                    for drop in (None, *[i for i in range(n) if i not in corrupt]):
                        for replay in (False, True):
                            rc = ReceiptCounter("p", cfg.threshold)
                            seq = [i for i in order if i != drop]
                            if replay and seq:
                                seq = seq + [seq[0]]
                            delivered = 0
                            for i in seq:
                                ev = rc.record(routes[i], payloads[i])
                                if ev is not None:
                                    delivered += 1
                                    bad += ev.payload != original
                            bad += delivered > 1
                            cases += 1
    return cases, bad


# -- swap oracle ------------------------------------------------------------------


def grid_split_oracle(pools, total: float, points: int = 1000, rounds: int = 8) -> float:
    """Best split found by a coarse-to-fine grid over the first N-1 allocations.

    Each round lays about ``points`` grid points on the current box, then
    shrinks the box to two grid steps around the best point.
    """
    n = len(pools)
    if n == 1:
        return split_output(pools, [total])
    per_axis = max(2, round(points ** (1 / (n - 1))))
    lo = [0.0] * (n - 1)
    hi = [total] * (n - 1)
    best, best_x = -1.0, None
    for _ in range(rounds):
        axes = [[lo[i] + (hi[i] - lo[i]) * k / per_axis for k in range(per_axis + 1)] for i in range(n - 1)]
        for xs in itertools.product(*axes):
            last = total - sum(xs)
            if last < -1e-9 * total:
                continue
            out = split_output(pools, [*xs, max(last, 0.0)])
            if out > best:
                best, best_x = out, xs
        step = [(hi[i] - lo[i]) / per_axis for i in range(n - 1)]
        lo = [max(0.0, best_x[i] - 2 * step[i]) for i in range(n - 1)]
        hi = [min(total, best_x[i] + 2 * step[i]) for i in range(n - 1)]
    return best


def routing_mismatches(t: Topology, ps: PolicySet, max_hops: int = 4) -> int:
    """Pairs where min-hops disagrees with BFS or min-fee with full enumeration."""
    mismatches = 0
    for s, d in itertools.permutations(t.chain_ids, 2):
        want = bfs_shortest_compliant(t, s, d, ps, max_hops)
        try:
            got = compute_route(t, s, d, ps, max_hops=max_hops)
        except NoRoute:
            got = None
        if (got.n_edges if got else None) != want:
            mismatches += 1
        paths = [p for p in all_simple_paths(t, s, d, max_hops) if route_satisfies(ps, p, t)]
        if not paths:
            mismatches += got is not None
            continue
        shortest = min(len(p) for p in paths)
        if got is None or got.hops != min(p for p in paths if len(p) == shortest):
            mismatches += 1
        best = min(route_fee(p, t, ps) for p in paths)
        fee_route = compute_route(t, s, d, ps, RoutingObjective.MIN_FEE, max_hops)
        if not math.isclose(fee_route.fee_estimate, best, rel_tol=1e-12):
            mismatches += 1
        if not route_satisfies(ps, fee_route, t):
            mismatches += 1
    return mismatches


# -- escrow economics ----------------------------------------------------------------

ESCROW_EVENTS = ("valid", "invalid", "deadline", "settle")


def escrow_world() -> Topology:
    # A-B-D costs more than A-C-D; A-E-D costs the same as A-B-D
    return topo(
        [("A", "B"), ("B", "D"), ("A", "C"), ("C", "D"), ("A", "E"), ("E", "D")],
        B={"gas_price": 5.0},
        E={"gas_price": 5.0},
    )


def escrow_network(t: Topology | None = None, **kw) -> RelayerNetworkState:
    t = t or escrow_world()
    net = RelayerNetworkState(t, **kw)
    for i, c in enumerate(sorted(t.chains)):
        net.join(f"r{i}", 100, [c])
    return net


def escrow_packet(pid: str = "p", route=("A", "B", "D")) -> Packet:
    return Packet(pid, route[0], route[-1], route, payload=b"x", source_height=5)


def escrow_interleaving(order) -> list[str]:
    """Drive one escrow through ``order``; returns transition-table violations."""
    net = escrow_network()
    p = escrow_packet()
    esc = net.open_escrow(p, 900, now=0, route=p.route, submitter="r1")
    for t in net.decompose_packet(p, p.route):
        net.complete_task(t.task_id)
    problems = []
    now = 0.0
    for ev in order:
        before = esc.state
        open_now = before is EscrowState.OPEN and now < esc.challenge_deadline
        if ev == "deadline":
            now = esc.challenge_deadline
        elif ev == "settle":
            net.settle_escrow(now)
            want = EscrowState.PAID if before is EscrowState.OPEN and now >= esc.challenge_deadline else before
            if esc.state is not want:
                problems.append(f"settle: {before} -> {esc.state}")
        else:
            evidence = ("A", "C", "D") if ev == "valid" else ("A", "E", "D")
            expected = (None if ev == "valid" else InvalidEvidence) if open_now else EscrowClosed
            try:
                net.challenge("p", evidence, "r2", now)
                raised = None
            except (InvalidEvidence, EscrowClosed) as exc:
                raised = type(exc)
            if raised is not expected:
                problems.append(f"{ev}: raised {raised}, wanted {expected}")
            want = EscrowState.CLAIMED if (ev == "valid" and open_now) else before
            if esc.state is not want:
                problems.append(f"{ev}: {before} -> {esc.state}")
    if order.index("valid") < order.index("deadline"):
        final = EscrowState.CLAIMED
    elif order.index("settle") > order.index("deadline"):
        final = EscrowState.PAID
    else:
        final = EscrowState.OPEN
    if esc.state is not final:
        problems.append(f"final {esc.state}, wanted {final}")
    paid = sum(r.rewards for r in net.relayers.values())
    if paid != (0 if final is EscrowState.OPEN else 900):
        problems.append(f"paid {paid}")
    return problems


def conservation_schedule(seed: int, packets: int = 8) -> list[str]:
    """Random escrows, partial work, challenges and slashes; returns broken invariants."""
    rng = random.Random(seed)
    net = escrow_network(min_stake=60, slash_fraction=Fraction(rng.randint(1, 9), 10))
    stake0 = net.total_stake()
    escrowed = 0
    now = 0.0
    for i in range(packets):
        route = rng.choice([("A", "B", "D"), ("A", "C", "D"), ("A", "E", "D"), ("A", "B")])
        p = escrow_packet(f"p{i}", route)
        amt = rng.randint(0, 5000)
        net.open_escrow(p, amt, now, route=route, submitter=rng.choice(sorted(net.relayers)))
        escrowed += amt
        try:
            tasks = net.decompose_packet(p, route)
        except NoCoveringRelayer:
            tasks = []  # slashing can leave a chain uncovered; the escrow is refunded
        for t in tasks:
            if rng.random() < 0.8:
                net.complete_task(t.task_id, gas=rng.randint(1, 10**6))
        if rng.random() < 0.3:
            try:
                net.challenge(p.packet_id, ("A", "C", "D"), "r0", now)
            except (InvalidEvidence, EscrowClosed):
                pass
        if rng.random() < 0.2:
            net.slash(rng.choice(sorted(net.relayers)), "Stale", now)
        now += rng.uniform(0, 50_000)
        net.settle_escrow(now)
    net.settle_escrow(now + 10**9)
    broken = []
    if any(e.state is EscrowState.OPEN for e in net.escrows.values()):
        broken.append("escrow left open")
    paid = sum(r.rewards for r in net.relayers.values())
    if paid + net.refunded != escrowed:
        broken.append(f"paid {paid} + refunded {net.refunded} != escrowed {escrowed}")
    if net.total_stake() + net.burned != stake0:
        broken.append("stake not conserved")
    for r in net.relayers.values():
        if r.stake < 0 or (r.active and r.stake < net.min_stake):
            broken.append(f"bad stake on {r.relayer_id}")
    return broken
