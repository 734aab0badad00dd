"""Relayer network economics and coordination.

The coordination chain is modelled as a single replicated state object
(:class:`RelayerNetworkState`) mutated by one logical writer. Amounts are
integer token units; fractions (quorum, slash fraction) are exact
:class:`~fractions.Fraction` values.
"""

from __future__ import annotations

import bisect
import copy
import csv
import enum
import graphlib
import io
import itertools
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Sequence

from .errors import (
    AlreadyCommitted,
    CyclicDependency,
    DuplicateId,
    DuplicateVote,
    EscrowClosed,
    InactiveRelayer,
    InsufficientStake,
    InvalidEvidence,
    NoCoveringRelayer,
    UnknownProposal,
    UnknownRelayer,
)
from .lightclient import Packet
from .policy import PolicySet, route_satisfies
from .routing import DEFAULT_DELIVERY_GAS, Route, route_fee, route_gas
from .topology import DEFAULT_BLOCK_TIME_MS, Topology

DEFAULT_MIN_STAKE = 100
DEFAULT_QUORUM = Fraction(2, 3)
DEFAULT_SLASH_FRACTION = Fraction(1, 2)
DEFAULT_CHALLENGE_WINDOW_BLOCKS = 100
DEFAULT_UNAVAILABILITY_BLOCKS = 20


def as_fraction(x: Fraction | float | int | str) -> Fraction:
    if isinstance(x, float):
        return Fraction(x).limit_denominator(10**9)
    return Fraction(x)


class TaskKind(str, enum.Enum):
    CHANNEL_CREATE = "ChannelCreate"
    CLIENT_UPDATE = "ClientUpdate"
    PACKET_DELIVER = "PacketDeliver"
    ACK_RELAY = "AckRelay"


class TaskStatus(str, enum.Enum):
    PENDING = "pending"
    DONE = "done"
    FAILED = "failed"


@dataclass
class Task:
    task_id: str
    kind: TaskKind
    chain: str  # chain the task's transaction executes on
    observed: str | None = None
    target_height: int | None = None
    packet_id: str | None = None
    assigned_to: str | None = None
    status: TaskStatus = TaskStatus.PENDING
    gas: int = DEFAULT_DELIVERY_GAS
    created_at: float = 0.0

    @property
    def pair(self) -> tuple[str, str | None]:
        return (self.chain, self.observed)


@dataclass
class Relayer:
    relayer_id: str
    stake: int
    chains_of_interest: frozenset[str]
    gas_balances: dict[str, int] = field(default_factory=dict)
    alive: bool = True
    active: bool = True
    rewards: int = 0

    def covers(self, chain: str) -> bool:
        return chain in self.chains_of_interest


class EscrowState(str, enum.Enum):
    OPEN = "open"
    PAID = "paid"
    CLAIMED = "claimed_by_challenger"


@dataclass
class Escrow:
    packet_id: str
    amount: int
    source_chain: str
    opened_at: float
    challenge_deadline: float
    state: EscrowState = EscrowState.OPEN
    route: tuple[str, ...] = ()
    policy: PolicySet = field(default_factory=PolicySet)
    max_hops: int = 4
    submitter: str | None = None


@dataclass
class MappingProposal:
    proposal_id: str
    chain_identifier: str
    ibc_identifiers: dict[str, object]
    votes: set[str] = field(default_factory=set)
    committed: bool = False


@dataclass(frozen=True)
class SlashRecord:
    relayer_id: str
    reason: str
    amount: int
    time: float


@dataclass(frozen=True)
class LedgerEntry:
    packet_id: str
    event: str
    amount: int
    time: float
    relayer_id: str


class RelayerNetworkState:
    def __init__(
        self,
        topology: Topology | None = None,
        min_stake: int = DEFAULT_MIN_STAKE,
        quorum: Fraction | float = DEFAULT_QUORUM,
        challenge_window_blocks: int = DEFAULT_CHALLENGE_WINDOW_BLOCKS,
        slash_fraction: Fraction | float = DEFAULT_SLASH_FRACTION,
        unavailability_blocks: int = DEFAULT_UNAVAILABILITY_BLOCKS,
        delivery_gas: int = DEFAULT_DELIVERY_GAS,
    ) -> None:
        self.topology = topology
        self.min_stake = min_stake
        self.quorum = as_fraction(quorum)
        self.challenge_window_blocks = challenge_window_blocks
        self.slash_fraction = as_fraction(slash_fraction)
        self.unavailability_blocks = unavailability_blocks
        self.delivery_gas = delivery_gas
        self.relayers: dict[str, Relayer] = {}
        self.tasks: dict[str, Task] = {}
        self.escrows: dict[str, Escrow] = {}
        self.mappings: dict[str, MappingProposal] = {}
        self.slash_log: list[SlashRecord] = []
        self.ledger: list[LedgerEntry] = []
        self.burned = 0
        self.refunded = 0
        self._pending: dict[str, int] = {}
        self._by_chain: dict[str, list[str]] = {}
        self._by_packet: dict[str, list[str]] = {}
        self._task_seq = itertools.count()

    # -- membership ---------------------------------------------------------

    def join(self, relayer_id: str, stake: int, chains: Iterable[str]) -> Relayer:
        if relayer_id in self.relayers:
            raise DuplicateId(f"relayer id {relayer_id!r} already used")
        if stake < self.min_stake:
            raise InsufficientStake(f"stake {stake} below minimum {self.min_stake}")
        chains = frozenset(chains)
        r = Relayer(relayer_id, stake, chains, {c: 0 for c in sorted(chains)})
        self.relayers[relayer_id] = r
        self._pending[relayer_id] = 0
        for c in chains:
            bisect.insort(self._by_chain.setdefault(c, []), relayer_id)
        return r

    def leave(self, relayer_id: str) -> None:
        self._relayer(relayer_id).active = False

    def _relayer(self, relayer_id: str) -> Relayer:
        try:
            return self.relayers[relayer_id]
        except KeyError:
            raise UnknownRelayer(f"unknown relayer {relayer_id!r}") from None

    def active_relayers(self) -> list[Relayer]:
        return [r for rid, r in sorted(self.relayers.items()) if r.active]

    def total_active_stake(self) -> int:
        return sum(r.stake for r in self.relayers.values() if r.active)

    def total_stake(self) -> int:
        return sum(r.stake for r in self.relayers.values())

    def pending_count(self, relayer_id: str) -> int:
        return self._pending.get(relayer_id, 0)

    def snapshot(self) -> "RelayerNetworkState":
        """Deep copy for read-only analysis."""
        return copy.deepcopy(self)

    # -- tasks --------------------------------------------------------------

    def _pick(self, chain: str, exclude: frozenset[str] = frozenset()) -> str:
        best: tuple[int, str] | None = None
        for rid in self._by_chain.get(chain, ()):
            if self.relayers[rid].active and rid not in exclude:
                key = (self._pending[rid], rid)
                if best is None or key < best:
                    best = key
        if best is None:
            raise NoCoveringRelayer(chain)
        return best[1]

    def _new_task(self, kind: TaskKind, chain: str, **kw: object) -> Task:
        return Task(f"t{next(self._task_seq)}", kind, chain, **kw)  # type: ignore[arg-type]

    def assign(self, task: Task, exclude: frozenset[str] = frozenset()) -> Task:
        rid = self._pick(task.chain, exclude)
        task.assigned_to = rid
        self._pending[rid] += 1
        self.tasks[task.task_id] = task
        if task.packet_id is not None:
            self._by_packet.setdefault(task.packet_id, []).append(task.task_id)
        return task

    def decompose_packet(
        self,
        pkt: Packet,
        route: Route | Sequence[str],
        ps: PolicySet | None = None,
        now: float = 0.0,
    ) -> list[Task]:
        """Split delivery along ``route`` into tasks, in execution order.

        One client update per hop boundary (each hop learns the previous one),
        then the delivery on the destination and the acknowledgement relay back
        on the source. Each task goes to the covering relayer with the fewest
        pending tasks, ties by relayer id.
        """
        hops = tuple(getattr(route, "hops", route))
        for chain in hops:
            if not any(self.relayers[rid].active for rid in self._by_chain.get(chain, ())):
                raise NoCoveringRelayer(chain)
        base = self.delivery_gas
        policy_gas = (
            route_gas(hops, self.topology, ps, base).policy_gas
            if (self.topology is not None and ps is not None)
            else 0
        )
        tasks = []
        for i in range(1, len(hops)):
            tasks.append(
                self._new_task(
                    TaskKind.CLIENT_UPDATE,
                    hops[i],
                    observed=hops[i - 1],
                    target_height=pkt.source_height if i == 1 else None,
                    packet_id=pkt.packet_id,
                    gas=base,
                    created_at=now,
                )
            )
        tasks.append(
            self._new_task(
                TaskKind.PACKET_DELIVER, hops[-1], packet_id=pkt.packet_id, gas=base + policy_gas, created_at=now
            )
        )
        tasks.append(self._new_task(TaskKind.ACK_RELAY, hops[0], packet_id=pkt.packet_id, gas=base, created_at=now))
        for t in tasks:
            self.assign(t)
        return tasks

    def complete_task(self, task_id: str, gas: int | None = None) -> Task:
        t = self.tasks[task_id]
        if t.status is TaskStatus.PENDING:
            t.status = TaskStatus.DONE
            if gas is not None:
                t.gas = gas
            if t.assigned_to is not None:
                self._pending[t.assigned_to] -= 1
        return t

    def fail_task(self, task_id: str) -> Task:
        t = self.tasks[task_id]
        if t.status is TaskStatus.PENDING:
            t.status = TaskStatus.FAILED
            if t.assigned_to is not None:
                self._pending[t.assigned_to] -= 1
        return t

    def block_time(self, chain: str) -> float:
        if self.topology is not None and chain in self.topology.chains:
            return self.topology.chains[chain].block_time_ms
        return DEFAULT_BLOCK_TIME_MS

    def check_unavailable(self, now: float) -> list[Task]:
        """Fail overdue tasks, slash their relayer, and reassign them."""
        reassigned = []
        for t in list(self.tasks.values()):
            if t.status is not TaskStatus.PENDING or t.assigned_to is None:
                continue
            if now - t.created_at <= self.unavailability_blocks * self.block_time(t.chain):
                continue
            culprit = t.assigned_to
            self.fail_task(t.task_id)
            self.slash(culprit, "Unavailable", now)
            fresh = replace(t, task_id=f"t{next(self._task_seq)}", status=TaskStatus.PENDING, created_at=now)
            try:
                reassigned.append(self.assign(fresh, exclude=frozenset({culprit})))
            except NoCoveringRelayer:
                pass
        return reassigned

    # -- escrow -------------------------------------------------------------

    def _log(self, packet_id: str, event: str, amount: int, time: float, relayer_id: str = "") -> None:
        self.ledger.append(LedgerEntry(packet_id, event, amount, time, relayer_id))

    def open_escrow(
        self,
        pkt: Packet,
        amount: int,
        now: float,
        route: Route | Sequence[str] | None = None,
        ps: PolicySet | None = None,
        max_hops: int = 4,
        submitter: str | None = None,
    ) -> Escrow:
        if pkt.packet_id in self.escrows:
            raise DuplicateId(f"escrow for {pkt.packet_id} already open")
        if amount < 0:
            raise ValueError("escrow amount must be non-negative")
        hops = tuple(getattr(route, "hops", route)) if route is not None else pkt.route
        deadline = now + self.challenge_window_blocks * self.block_time(pkt.source)
        esc = Escrow(
            pkt.packet_id, amount, pkt.source, now, deadline, EscrowState.OPEN, hops,
            ps or PolicySet(), max_hops, submitter,
        )
        self.escrows[pkt.packet_id] = esc
        self._log(pkt.packet_id, "escrow_open", amount, now)
        return esc

    def contributions(self, packet_id: str) -> dict[str, int]:
        out: dict[str, int] = {}
        for tid in self._by_packet.get(packet_id, ()):
            t = self.tasks[tid]
            if t.status is TaskStatus.DONE and t.assigned_to:
                out[t.assigned_to] = out.get(t.assigned_to, 0) + t.gas
        return out

    def settle_escrow(self, now: float) -> list[Escrow]:
        """Pay out every open escrow whose challenge window has closed."""
        settled = []
        for esc in self.escrows.values():
            if esc.state is not EscrowState.OPEN or now < esc.challenge_deadline:
                continue
            shares = split_proportionally(esc.amount, self.contributions(esc.packet_id))
            for rid, amt in shares.items():
                self.relayers[rid].rewards += amt
                self._log(esc.packet_id, "payout", amt, now, rid)
            if not shares:
                self.refunded += esc.amount
                self._log(esc.packet_id, "refund", esc.amount, now)
            esc.state = EscrowState.PAID
            settled.append(esc)
        return settled

    def challenge(self, packet_id: str, evidence: Route | Sequence[str], challenger: str, now: float) -> Escrow:
        """Claim the escrow by showing a strictly cheaper compliant route."""
        esc = self.escrows.get(packet_id)
        if esc is None or esc.state is not EscrowState.OPEN or now >= esc.challenge_deadline:
            raise EscrowClosed(f"escrow for {packet_id} is not open for challenges")
        self._relayer(challenger)
        if self.topology is None:
            raise InvalidEvidence("no topology to evaluate evidence against")
        hops = tuple(getattr(evidence, "hops", evidence))
        t = self.topology
        valid = (
            len(hops) >= 2
            and hops[0] == esc.route[0]
            and hops[-1] == esc.route[-1]
            and len(set(hops)) == len(hops)
            and len(hops) - 1 <= esc.max_hops
            and all(c in t.chains for c in hops)
            and all(t.connected(a, b) for a, b in zip(hops, hops[1:]))
            and route_satisfies(esc.policy, hops, t)
        )
        if not valid:
            raise InvalidEvidence(f"route {hops} is not a compliant alternative")
        if not route_fee(hops, t, esc.policy, self.delivery_gas) < route_fee(esc.route, t, esc.policy, self.delivery_gas):
            raise InvalidEvidence(f"route {hops} is not strictly cheaper")
        esc.state = EscrowState.CLAIMED
        self.relayers[challenger].rewards += esc.amount
        self._log(packet_id, "challenge_claim", esc.amount, now, challenger)
        if esc.submitter is not None and esc.submitter in self.relayers:
            self.slash(esc.submitter, "SuboptimalRoute", now)
        return esc

    # -- slashing -----------------------------------------------------------

    def slash(self, relayer_id: str, reason: str, now: float = 0.0) -> SlashRecord:
        r = self._relayer(relayer_id)
        amount = math.floor(r.stake * self.slash_fraction)
        r.stake -= amount
        self.burned += amount
        if r.stake < self.min_stake:
            r.active = False
        rec = SlashRecord(relayer_id, reason, amount, now)
        self.slash_log.append(rec)
        self._log("", f"slash:{reason}", amount, now, relayer_id)
        return rec

    # -- governance ---------------------------------------------------------

    def propose_mapping(
        self, proposal_id: str, chain_identifier: str, ibc_identifiers: dict[str, object]
    ) -> MappingProposal:
        if proposal_id in self.mappings:
            raise DuplicateId(f"proposal {proposal_id!r} exists")
        p = MappingProposal(proposal_id, chain_identifier, dict(ibc_identifiers))
        self.mappings[proposal_id] = p
        return p

    def vote_mapping(self, proposal_id: str, relayer_id: str) -> MappingProposal:
        p = self.mappings.get(proposal_id)
        if p is None:
            raise UnknownProposal(f"unknown proposal {proposal_id!r}")
        if p.committed:
            raise AlreadyCommitted(f"proposal {proposal_id!r} already committed")
        r = self._relayer(relayer_id)
        if not r.active:
            raise InactiveRelayer(f"relayer {relayer_id!r} is not active")
        if relayer_id in p.votes:
            raise DuplicateVote(f"{relayer_id!r} already voted on {proposal_id!r}")
        p.votes.add(relayer_id)
        if self.supporting_stake(p) >= self.quorum * self.total_active_stake():
            p.committed = True
        return p

    def supporting_stake(self, p: MappingProposal) -> int:
        return sum(self.relayers[v].stake for v in p.votes if self.relayers[v].active)

    def committed_mapping(self, chain_identifier: str) -> MappingProposal | None:
        for p in self.mappings.values():
            if p.committed and p.chain_identifier == chain_identifier:
                return p
        return None

    # -- management contract -----------------------------------------------

    def approve_route(self, route: Route, computed_by: str) -> Route:
        """Tag ``route`` as approved iff its computing relayer is an active member."""
        r = self.relayers.get(computed_by)
        return replace(route, approved=bool(r and r.active))

    # -- export -------------------------------------------------------------

    def ledger_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["packet_id", "event", "amount", "sim_time", "relayer_id"])
        for e in self.ledger:
            w.writerow([e.packet_id, e.event, e.amount, f"{e.time:.3f}", e.relayer_id])
        return buf.getvalue()


def destination_accepts(route: Route) -> bool:
    """Destinations only act on routing decisions signed off by the network."""
    return bool(route.approved)


def split_proportionally(amount: int, weights: dict[str, int]) -> dict[str, int]:
    """Integer split of ``amount`` by weight (largest remainder, ties by id)."""
    weights = {k: w for k, w in weights.items() if w > 0}
    total = sum(weights.values())
    if not weights:
        return {}
    base = {k: amount * w // total for k, w in weights.items()}
    left = amount - sum(base.values())
    order = sorted(weights, key=lambda k: (-((amount * weights[k]) % total), k))
    for k in order[:left]:
        base[k] += 1
    return base


def schedule_updates(pending: Sequence[Task]) -> list[Task]:
    """Coalesce client updates and order them so prerequisites run first.

    Keeps one update per (chain, observed) pair at the highest requested
    height. An update of ``Z``'s client of ``X`` depends on every batched update
    that ``X`` itself performs, since the proof for ``X`` must include them.
    """
    groups: dict[tuple[str, str], Task] = {}
    for t in pending:
        if t.kind is not TaskKind.CLIENT_UPDATE or t.observed is None:
            raise ValueError(f"task {t.task_id} is not a client update")
        key = (t.chain, t.observed)
        cur = groups.get(key)
        if cur is None:
            groups[key] = t
        elif (t.target_height or 0) > (cur.target_height or 0):
            groups[key] = replace(cur, target_height=t.target_height)
    by_observer: dict[str, list[tuple[str, str]]] = {}
    for chain, observed in groups:
        by_observer.setdefault(chain, []).append((chain, observed))
    ts: graphlib.TopologicalSorter = graphlib.TopologicalSorter()
    for key in sorted(groups):
        _, observed = key
        ts.add(key, *sorted(by_observer.get(observed, [])))
    try:
        ts.prepare()
    except graphlib.CycleError as exc:
        raise CyclicDependency(f"client updates depend on each other cyclically: {exc.args[1]}") from None
    out: list[Task] = []
    while ts.is_active():
        ready = sorted(ts.get_ready())
        for key in ready:
            out.append(groups[key])
            ts.done(key)
    return out
