"""Deterministic discrete-event simulation of packet relaying.

Chains produce blocks on a fixed cadence and include at most ``capacity``
transactions per block from a FIFO mempool. A transaction is only eligible
for blocks strictly after its submission time. Relayer actions are
instantaneous once their transaction lands, so all delay comes from block
intervals and queueing.

Packet life cycle, multi-hop mode (route ``r0 .. rn``)::

    commit on r0 -> update r1's client of r0 -> ... -> update rn's client of
    r(n-1) -> deliver on rn (proof built at submission, verified on inclusion)
    -> ack on r0

Hub mode sends every packet ``src -> hub -> dst`` as two ordinary one-hop
transfers, which costs two transactions on the hub (receive, then forward).

Client updates are coalesced: at most one update transaction per
(observer, observed) pair is in flight, and when it lands it brings the client
up to the observed chain's current height, satisfying every waiting packet.
"""

from __future__ import annotations

import bisect
import csv
import enum
import heapq
import io
import itertools
import math
import random
import statistics
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Sequence

from .errors import ConfigError, HopRouteError, MissingClientState
from .lightclient import (
    Packet,
    ProofChain,
    World,
    build_proof_chain,
    commitment_key,
    packet_commitment,
    verify_proof_chain,
)
from .policy import PolicySet, PreferenceKind, PreferencePolicy, parse_channel_version
from .relaynet import RelayerNetworkState, Task, TaskKind
from .routing import Route, disjoint_routes
from .topology import Topology

DEFAULT_TIMEOUT_MS = 1_000_000.0


class SimMode(str, enum.Enum):
    HUB = "hub"
    MULTIHOP = "multihop"

    @classmethod
    def _missing_(cls, value: object) -> "SimMode | None":
        if value == "xroute":
            return cls.MULTIHOP
        return None


@dataclass
class SimConfig:
    seed: int = 0
    duration_ms: float = 60_000.0
    workload_rate: float = 10.0  # packets per second
    zipf_exponent: float = 1.0
    path_population: list[tuple[str, str]] | None = None
    mode: SimMode = SimMode.MULTIHOP
    hub: str | None = None
    channel_version: str = "ics20-1"
    max_hops: int = 2
    n_routes: int = 1
    timeout_ms: float = DEFAULT_TIMEOUT_MS
    chain_overrides: dict[str, dict[str, Any]] = field(default_factory=dict)
    retain_heights: int = 512
    verify_proofs: bool = True
    max_packets: int | None = None
    record_events: bool = True
    escrow_amount: int = 0
    # per-packet preference policies, e.g. {"timeout": 5000.0}
    preferences: dict[str, float | None] = field(default_factory=dict)

    def __post_init__(self) -> None:
        try:
            self.mode = SimMode(self.mode)
        except ValueError:
            raise ConfigError(f"unknown mode {self.mode!r}") from None
        if self.duration_ms <= 0:
            raise ConfigError("duration must be positive")
        if self.workload_rate < 0:
            raise ConfigError("workload_rate must be non-negative")
        if self.zipf_exponent <= 0:
            raise ConfigError("zipf_exponent must be positive")
        if self.max_hops < 1 or self.n_routes < 1:
            raise ConfigError("max_hops and n_routes must be >= 1")
        if self.timeout_ms <= 0:
            raise ConfigError("timeout must be positive")
        self.policy  # validates the channel version and preferences
        if self.path_population is not None:
            self.path_population = [tuple(p) for p in self.path_population]  # type: ignore[misc]

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "SimConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        return cls(**doc)

    @property
    def policy(self) -> PolicySet:
        ps = parse_channel_version(self.channel_version)
        try:
            prefs = tuple(PreferencePolicy(PreferenceKind(k), v) for k, v in sorted(self.preferences.items()))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return replace(ps, preference=prefs)


class ZipfSampler:
    """Draws 0-based path indices; index ``i`` has weight ``1 / (i + 1) ** s``."""

    def __init__(self, n_paths: int, s: float = 1.0, seed: int | str = 0) -> None:
        if n_paths < 1:
            raise ValueError("need at least one path")
        weights = [1.0 / (i**s) for i in range(1, n_paths + 1)]
        total = math.fsum(weights)
        self.probabilities = [w / total for w in weights]
        self._cum = list(itertools.accumulate(self.probabilities))
        self._cum[-1] = 1.0
        self._rng = random.Random(seed)
        self.n_paths = n_paths

    def sample(self) -> int:
        return bisect.bisect_right(self._cum, self._rng.random())


def zipf_path_sampler(paths: int, s: float = 1.0, seed: int | str = 0) -> ZipfSampler:
    return ZipfSampler(paths, s, seed)


@dataclass
class PacketTrace:
    packet_id: str
    source: str
    destination: str
    hops: tuple[str, ...]
    arrived_at: float
    committed_at: float | None = None
    delivered_at: float | None = None
    acked_at: float | None = None
    outcome: str = "in_flight"  # delivered | timed_out | failed | in_flight
    reason: str = ""

    @property
    def latency(self) -> float | None:
        if self.delivered_at is None or self.committed_at is None:
            return None
        return self.delivered_at - self.committed_at


@dataclass(frozen=True)
class LatencyStats:
    count: int
    delivered_fraction: float
    mean: float | None
    median: float | None
    p95: float | None


def nearest_rank(sorted_values: Sequence[float], pct: float) -> float:
    rank = max(1, math.ceil(pct / 100.0 * len(sorted_values)))
    return sorted_values[rank - 1]


def latency_stats(traces: Iterable[PacketTrace]) -> LatencyStats:
    traces = list(traces)
    lat = sorted(t.latency for t in traces if t.latency is not None)
    if not traces:
        return LatencyStats(0, 0.0, None, None, None)
    frac = len(lat) / len(traces)
    if not lat:
        return LatencyStats(len(traces), frac, None, None, None)
    return LatencyStats(len(traces), frac, math.fsum(lat) / len(lat), statistics.median(lat), nearest_rank(lat, 95))


# -- internals ----------------------------------------------------------------


class _Tx:
    __slots__ = ("kind", "submit_time", "pstate", "observed", "task", "proof", "leg")

    def __init__(self, kind: str, submit_time: float, pstate: "_PacketState | None" = None,
                 observed: str | None = None, task: Task | None = None, leg: int = 0) -> None:
        self.kind = kind
        self.submit_time = submit_time
        self.pstate = pstate
        self.observed = observed
        self.task = task
        self.proof: ProofChain | None = None
        self.leg = leg


class _PacketState:
    __slots__ = ("trace", "legs", "packets", "deadline", "tasks", "done")

    def __init__(self, trace: PacketTrace, legs: list[tuple[str, ...]], packets: list[Packet], deadline: float) -> None:
        self.trace = trace
        self.legs = legs
        self.packets = packets
        self.deadline = deadline
        self.tasks: dict[tuple[str, str | None, int], Task] = {}
        self.done = False


@dataclass
class ChainProcess:
    chain_id: str
    block_time_ms: float
    capacity: int
    offset_ms: float
    mempool: deque = field(default_factory=deque)
    blocks: list[tuple[float, int, int, int]] = field(default_factory=list)  # time, height, included, backlog
    # per block: hops parked behind an in-flight client update on this chain
    blocked: list[int] = field(default_factory=list)


@dataclass
class SimResult:
    traces: list[PacketTrace]
    events: list[tuple[float, str, str, str, str]]
    chains: dict[str, ChainProcess]
    arrivals: int
    relaynet: RelayerNetworkState
    config: SimConfig

    def stats(self) -> LatencyStats:
        return latency_stats(self.traces)

    def counts(self) -> dict[str, int]:
        out = {"delivered": 0, "timed_out": 0, "failed": 0, "in_flight": 0}
        for t in self.traces:
            out[t.outcome] += 1
        return out

    def backlog(self, chain: str) -> list[tuple[float, int]]:
        return [(t, b) for t, _, _, b in self.chains[chain].blocks]

    def demand(self, chain: str) -> list[tuple[float, int]]:
        """Mempool backlog plus packets parked until a client update lands there."""
        p = self.chains[chain]
        return [(t, b + w) for (t, _, _, b), w in zip(p.blocks, p.blocked)]

    def traces_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["packet_id", "source", "destination", "hops", "arrived_at", "committed_at",
                    "delivered_at", "acked_at", "outcome"])
        for t in self.traces:
            w.writerow([t.packet_id, t.source, t.destination, ">".join(t.hops), _fmt(t.arrived_at),
                        _fmt(t.committed_at), _fmt(t.delivered_at), _fmt(t.acked_at), t.outcome])
        return buf.getvalue()

    def events_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", "kind", "chain", "packet_id", "detail"])
        for time, kind, chain, pid, detail in self.events:
            w.writerow([_fmt(time), kind, chain, pid, detail])
        return buf.getvalue()


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.6f}"


def default_relaynet(t: Topology, stake: int = 100) -> RelayerNetworkState:
    """One relayer per chain, each staking the minimum and covering only its chain."""
    state = RelayerNetworkState(topology=t, min_stake=stake)
    for c in t.chain_ids:
        state.join(f"relayer/{c}", stake, [c])
    return state


def effective_topology(t: Topology, overrides: Mapping[str, Mapping[str, Any]]) -> Topology:
    chains = dict(t.chains)
    for cid, ov in overrides.items():
        if cid not in chains:
            raise ConfigError(f"override for unknown chain {cid!r}")
        bad = set(ov) - {"capacity", "block_time_ms", "gas_price"}
        if bad:
            raise ConfigError(f"unsupported override keys {sorted(bad)}")
        chains[cid] = replace(chains[cid], **ov)
    return t.with_changes(chains=chains)


class Simulation:
    def __init__(self, config: SimConfig, topology: Topology, relaynet: RelayerNetworkState | None = None) -> None:
        self.cfg = config
        self.topology = effective_topology(topology, config.chain_overrides)
        self.policy = config.policy
        self.relaynet = relaynet if relaynet is not None else default_relaynet(self.topology)
        if config.mode is SimMode.HUB:
            if config.hub is None or config.hub not in self.topology.chains:
                raise ConfigError("hub mode needs a designated hub chain present in the topology")
        self.world = World(self.topology, retain_heights=config.retain_heights)
        rng = random.Random(f"{config.seed}:offsets")
        self.procs: dict[str, ChainProcess] = {}
        for cid in self.topology.chain_ids:
            ch = self.topology.chains[cid]
            self.procs[cid] = ChainProcess(cid, ch.block_time_ms, ch.capacity, rng.uniform(0, ch.block_time_ms))
        self.paths = self._population()
        self.events: list[tuple[float, str, str, str, str]] = []
        self.traces: list[PacketTrace] = []
        self._heap: list[tuple[float, int, int, str]] = []
        self._seq = itertools.count()
        self._pending_update: set[tuple[str, str]] = set()
        self._waiters: dict[tuple[str, str], list[tuple[int, int, _PacketState, int, int]]] = {}
        self._routes: dict[tuple[str, str], list[Route]] = {}
        self._pkt_seq = itertools.count()
        self._timeouts: dict[str, float] = {}
        self._parked: dict[str, int] = dict.fromkeys(self.procs, 0)

    # -- setup ---------------------------------------------------------------

    def _population(self) -> list[tuple[str, str]]:
        cfg, t = self.cfg, self.topology
        if cfg.path_population is not None:
            paths = list(cfg.path_population)
            for s, d in paths:
                if s not in t.chains or d not in t.chains or s == d:
                    raise ConfigError(f"bad path {s}->{d}")
                if cfg.mode is SimMode.HUB and not (t.connected(s, cfg.hub) and t.connected(cfg.hub, d)):
                    raise ConfigError(f"path {s}->{d} is not served by hub {cfg.hub}")
            return paths
        ids = [c for c in t.chain_ids if c != cfg.hub]
        if cfg.mode is SimMode.HUB:
            paths = [(s, d) for s in ids for d in ids if s != d and t.connected(s, cfg.hub) and t.connected(cfg.hub, d)]
        else:
            from .routing import reachable

            paths = [(s, d) for s in ids for d in sorted(reachable(t, s, self.policy, cfg.max_hops)) if d != cfg.hub]
        # Zipf ranks land on a seeded permutation of the population
        random.Random(f"{cfg.seed}:population").shuffle(paths)
        return paths

    def _routes_for(self, s: str, d: str) -> list[Route]:
        routes = self._routes.get((s, d))
        if routes is None:
            try:
                routes = disjoint_routes(self.topology, s, d, self.policy, self.cfg.n_routes, self.cfg.max_hops)
            except HopRouteError as exc:
                found = getattr(exc, "found", 0)
                if not found:
                    raise ConfigError(f"no compliant route {s}->{d}") from exc
                routes = disjoint_routes(self.topology, s, d, self.policy, found, self.cfg.max_hops)
            self._routes[(s, d)] = routes
        return routes

    def _pick_route(self, s: str, d: str) -> tuple[str, ...]:
        best = None
        for r in self._routes_for(s, d):
            load = max(len(self.procs[c].mempool) for c in r.hops[1:])
            if best is None or load < best[0]:
                best = (load, r.hops)
        assert best is not None
        return best[1]

    # -- event plumbing -------------------------------------------------------

    def _push(self, time: float, kind: int, arg: str) -> None:
        heapq.heappush(self._heap, (time, next(self._seq), kind, arg))

    def _log(self, time: float, kind: str, chain: str, pid: str = "", detail: str = "") -> None:
        if self.cfg.record_events:
            self.events.append((time, kind, chain, pid, detail))

    def _submit(self, chain: str, tx: _Tx) -> None:
        self.procs[chain].mempool.append(tx)

    # -- run ------------------------------------------------------------------

    def run(self) -> SimResult:
        cfg = self.cfg
        for cid, p in self.procs.items():
            if p.offset_ms <= cfg.duration_ms:
                self._push(p.offset_ms, 0, cid)
        arrival_rng = random.Random(f"{cfg.seed}:arrivals")
        sampler = ZipfSampler(len(self.paths), cfg.zipf_exponent, f"{cfg.seed}:zipf") if self.paths else None
        if cfg.workload_rate > 0 and sampler is not None:
            self._push(arrival_rng.expovariate(cfg.workload_rate / 1000.0), 1, "")
        arrivals = 0
        while self._heap:
            time, _, kind, arg = heapq.heappop(self._heap)
            if time > cfg.duration_ms:
                break
            if kind == 0:
                self._block(arg, time)
                nxt = time + self.procs[arg].block_time_ms
                if nxt <= cfg.duration_ms:
                    self._push(nxt, 0, arg)
            else:
                s, d = self.paths[sampler.sample()]
                self._arrive(s, d, time)
                arrivals += 1
                if cfg.max_packets is None or arrivals < cfg.max_packets:
                    self._push(time + arrival_rng.expovariate(cfg.workload_rate / 1000.0), 1, "")
        self._finish(cfg.duration_ms)
        return SimResult(self.traces, self.events, self.procs, arrivals, self.relaynet, cfg)

    def _finish(self, horizon: float) -> None:
        for tr in self.traces:
            if tr.outcome == "in_flight" and tr.committed_at is not None:
                if horizon > tr.committed_at + self._timeout_for(tr):
                    tr.outcome = "timed_out"

    def _timeout_for(self, tr: PacketTrace) -> float:
        return self._timeouts.get(tr.packet_id, self.cfg.timeout_ms)

    # -- packet flow ---------------------------------------------------------

    def _arrive(self, s: str, d: str, now: float) -> None:
        cfg = self.cfg
        pid = f"p{next(self._pkt_seq):07d}"
        if cfg.mode is SimMode.HUB:
            hops = (s, cfg.hub, d)
            legs = [(s, cfg.hub), (cfg.hub, d)]
        else:
            hops = self._pick_route(s, d)
            legs = [hops]
        payload = pid.encode()
        pref = self.policy.preference
        pkt = Packet(pid, s, legs[0][-1], legs[0], cfg.channel_version, payload, None, pref)
        trace = PacketTrace(pid, s, d, hops, now)
        timeout = self.policy.preference_value(PreferenceKind.TIMEOUT)
        ps = _PacketState(trace, legs, [pkt], math.inf)
        if timeout is not None:
            self._timeouts[pid] = timeout
        self.traces.append(trace)
        self._assign_tasks(ps, 0, now)
        self._log(now, "arrival", s, pid, ">".join(hops))
        self._submit(s, _Tx("commit", now, ps))

    def _assign_tasks(self, ps: _PacketState, leg: int, now: float) -> None:
        route = ps.legs[leg]
        pkt = ps.packets[leg]
        if len(ps.legs) == 1:
            tasks = self.relaynet.decompose_packet(pkt, route, self.policy, now)
        else:
            # hub legs: updates and delivery per leg, one ack back to the origin
            rn = self.relaynet
            tasks = [
                rn.assign(rn._new_task(TaskKind.CLIENT_UPDATE, route[1], observed=route[0],
                                       packet_id=pkt.packet_id, created_at=now)),
                rn.assign(rn._new_task(TaskKind.PACKET_DELIVER, route[1], packet_id=pkt.packet_id, created_at=now)),
            ]
            if leg == len(ps.legs) - 1:
                tasks.append(rn.assign(rn._new_task(TaskKind.ACK_RELAY, ps.legs[0][0],
                                                    packet_id=pkt.packet_id, created_at=now)))
        for t in tasks:
            ps.tasks[(t.kind.value, t.observed, leg)] = t

    def _block(self, cid: str, now: float) -> None:
        proc = self.procs[cid]
        led = self.world[cid]
        h = led.begin_block()
        n = 0
        pool = proc.mempool
        while pool and n < proc.capacity and pool[0].submit_time < now:
            tx = pool.popleft()
            n += 1
            self._execute(cid, h, tx, now)
        proc.blocks.append((now, h, n, len(pool)))
        proc.blocked.append(self._parked[cid])
        self._log(now, "block", cid, "", f"height={h} txs={n} backlog={len(pool)}")

    def _execute(self, cid: str, h: int, tx: _Tx, now: float) -> None:
        kind = tx.kind
        if kind == "update":
            self._exec_update(cid, tx.observed, now)
        elif kind == "commit":
            self._exec_commit(cid, h, tx.pstate, tx.leg, now)
        elif kind == "deliver":
            self._exec_deliver(cid, tx, now)
        elif kind == "ack":
            ps = tx.pstate
            ps.trace.acked_at = now
            for pkt in ps.packets:
                self.world[pkt.source].store.delete(commitment_key(pkt))
            self._complete(ps, ("AckRelay", None, len(ps.legs) - 1))
            self._log(now, "ack", cid, ps.trace.packet_id)

    def _exec_commit(self, cid: str, h: int, ps: _PacketState, leg: int, now: float) -> None:
        pkt = replace(ps.packets[leg], source_height=h)
        ps.packets[leg] = pkt
        self.world[cid].store.set(commitment_key(pkt), packet_commitment(pkt))
        if leg == 0:
            ps.trace.committed_at = now
            ps.deadline = now + self._timeout_for(ps.trace)
            if self.cfg.escrow_amount:
                self.relaynet.open_escrow(pkt, self.cfg.escrow_amount, now, ps.trace.hops, self.policy,
                                          self.cfg.max_hops)
        self._log(now, "commit", cid, pkt.packet_id, f"leg={leg} height={h}")
        self._need(ps, leg, 1, h, now)

    def _need(self, ps: _PacketState, leg: int, i: int, height: int, now: float) -> None:
        """Packet needs ``route[i]``'s client of ``route[i-1]`` at ``height`` or later."""
        route = ps.legs[leg]
        observer, observed = route[i], route[i - 1]
        latest = self.world[observer].clients.latest_height(observed)
        if latest is not None and latest >= height:
            self._advance(ps, leg, i, now)
            return
        key = (observer, observed)
        heapq.heappush(self._waiters.setdefault(key, []), (height, next(self._seq), ps, leg, i))
        self._parked[observer] += 1
        if key not in self._pending_update:
            self._pending_update.add(key)
            self._submit(observer, _Tx("update", now, observed=observed))

    def _exec_update(self, cid: str, observed: str, now: float) -> None:
        key = (cid, observed)
        self._pending_update.discard(key)
        led = self.world[cid]
        cs = self.world[observed].consensus_state()
        latest = led.clients.latest_height(observed)
        if latest is None or cs.height > latest:
            led.record_client(cs)
        self._log(now, "update", cid, "", f"observed={observed} height={cs.height}")
        waiters = self._waiters.get(key)
        if not waiters:
            return
        reached = led.clients.latest_height(observed)
        while waiters and waiters[0][0] <= reached:
            _, _, ps, leg, i = heapq.heappop(waiters)
            self._parked[cid] -= 1
            self._advance(ps, leg, i, now)
        if waiters and key not in self._pending_update:
            self._pending_update.add(key)
            self._submit(cid, _Tx("update", now, observed=observed))

    def _advance(self, ps: _PacketState, leg: int, i: int, now: float) -> None:
        route = ps.legs[leg]
        self._complete(ps, ("ClientUpdate", route[i - 1], leg))
        if i < len(route) - 1:
            # next hop must observe this one at its current height, which
            # already records the client state just installed
            self._need(ps, leg, i + 1, self.world[route[i]].height, now)
            return
        pkt = ps.packets[leg]
        tx = _Tx("deliver", now, ps, leg=leg)
        if self.cfg.verify_proofs:
            try:
                tx.proof = build_proof_chain(self.world, pkt)
            except MissingClientState as exc:
                self._fail(ps, f"MissingClientState: {exc}", now)
                return
        self._submit(route[-1], tx)

    def _exec_deliver(self, cid: str, tx: _Tx, now: float) -> None:
        ps, leg = tx.pstate, tx.leg
        if ps.done:
            return
        pkt = ps.packets[leg]
        if self.cfg.verify_proofs:
            verdict = verify_proof_chain(self.world[cid].clients, pkt, tx.proof, self.policy)
            if not verdict.accepted:
                self._fail(ps, f"{verdict.reason.value}: {verdict.detail}", now)
                return
        self._complete(ps, ("PacketDeliver", None, leg))
        if leg < len(ps.legs) - 1:
            # hub forwards: a second transaction on the hub commits the next leg
            route = ps.legs[leg + 1]
            nxt = Packet(pkt.packet_id, route[0], route[-1], route, pkt.channel_version, pkt.payload,
                         None, pkt.preference)
            ps.packets.append(nxt)
            self._assign_tasks(ps, leg + 1, now)
            self._log(now, "receive", cid, pkt.packet_id, f"leg={leg}")
            self._submit(cid, _Tx("commit", now, ps, leg=leg + 1))
            return
        if now > ps.deadline:
            ps.done = True
            ps.trace.outcome = "timed_out"
            self._log(now, "timeout", cid, pkt.packet_id)
            return
        ps.done = True
        ps.trace.delivered_at = now
        ps.trace.outcome = "delivered"
        self._log(now, "deliver", cid, pkt.packet_id, f"latency={now - ps.trace.committed_at:.3f}")
        self._submit(ps.legs[0][0], _Tx("ack", now, ps))

    def _complete(self, ps: _PacketState, key: tuple[str, str | None, int]) -> None:
        t = ps.tasks.get(key)
        if t is not None:
            self.relaynet.complete_task(t.task_id)

    def _fail(self, ps: _PacketState, reason: str, now: float) -> None:
        ps.done = True
        ps.trace.outcome = "failed"
        ps.trace.reason = reason
        for t in ps.tasks.values():
            self.relaynet.fail_task(t.task_id)
        self._log(now, "reject", ps.legs[-1][-1], ps.trace.packet_id, reason)


def run(
    config: SimConfig,
    topology: Topology,
    relaynet: RelayerNetworkState | None = None,
    mode: SimMode | str | None = None,
) -> SimResult:
    if mode is not None:
        config = replace(config, mode=SimMode(mode))
    return Simulation(config, topology, relaynet).run()
