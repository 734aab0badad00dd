"""Simulated light clients and chained multi-hop proofs.

Each simulated chain keeps a key/value commitment store. Packet commitments
live under ``commitments/<packet>/<route>`` and the latest consensus state a
chain holds for each counterparty lives under ``clients/<chain>``. The store
root is a binary Merkle tree over the entries sorted by key, so a single
inclusion proof authenticates one entry against one root.

A proof chain for route ``r0 -> r1 -> ... -> rn`` has one link per
non-destination hop. Link ``i`` carries the consensus state of ``r_i`` held by
``r_{i+1}`` and an inclusion proof into that state's root: link 0 proves the
packet commitment, every later link proves that ``r_i`` recorded the previous
link's consensus state. The destination anchors the last link in its own
client store and walks the chain back to the source.
"""

from __future__ import annotations

import enum
import hashlib
import struct
from collections import OrderedDict
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

from .errors import MissingClientState, MissingCommitment, NonMonotonicHeight
from .policy import PolicySet, PreferencePolicy, validators_satisfy
from .topology import Chain, Topology, ValidatorSet

DIGEST_SIZE = 32


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def canonical_validator_bytes(vs: ValidatorSet) -> bytes:
    """``[u16 addr len][addr][u64 power]`` per validator, sorted by address bytes."""
    out = bytearray()
    for v in sorted(vs.validators, key=lambda v: v.address):
        out += struct.pack(">H", len(v.address))
        out += v.address
        out += struct.pack(">Q", v.power)
    return bytes(out)


def canonical_validator_hash(vs: ValidatorSet) -> bytes:
    return digest(canonical_validator_bytes(vs))


def _lp(b: bytes) -> bytes:
    return struct.pack(">I", len(b)) + b


@dataclass(frozen=True)
class ConsensusState:
    chain_id: str
    height: int
    next_validators_hash: bytes
    commitments_root: bytes

    def __post_init__(self) -> None:
        if len(self.next_validators_hash) != DIGEST_SIZE or len(self.commitments_root) != DIGEST_SIZE:
            raise ValueError("consensus state digests must be 32 bytes")

    def to_bytes(self) -> bytes:
        return (
            _lp(self.chain_id.encode())
            + struct.pack(">Q", self.height)
            + self.next_validators_hash
            + self.commitments_root
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "ConsensusState":
        (n,) = struct.unpack_from(">I", data, 0)
        chain_id = data[4 : 4 + n].decode()
        off = 4 + n
        (height,) = struct.unpack_from(">Q", data, off)
        off += 8
        return cls(chain_id, height, data[off : off + 32], data[off + 32 : off + 64])


class ClientStore:
    """Consensus states one chain holds for its counterparties, by height."""

    def __init__(self, owner_chain: str) -> None:
        self.owner_chain = owner_chain
        self.clients: dict[str, dict[int, ConsensusState]] = {}
        self._latest: dict[str, int] = {}

    def latest_height(self, observed: str) -> int | None:
        return self._latest.get(observed)

    def latest(self, observed: str) -> ConsensusState | None:
        h = self._latest.get(observed)
        return None if h is None else self.clients[observed][h]

    def get(self, observed: str, height: int) -> ConsensusState:
        try:
            return self.clients[observed][height]
        except KeyError:
            raise MissingClientState(
                f"{self.owner_chain} holds no consensus state for {observed} at height {height}"
            ) from None

    def heights(self, observed: str) -> list[int]:
        return list(self.clients.get(observed, {}))

    def _record(self, cs: ConsensusState) -> None:
        latest = self._latest.get(cs.chain_id)
        if latest is not None and cs.height <= latest:
            raise NonMonotonicHeight(
                f"{self.owner_chain}: client of {cs.chain_id} at {latest}, refusing height {cs.height}"
            )
        self.clients.setdefault(cs.chain_id, {})[cs.height] = cs
        self._latest[cs.chain_id] = cs.height


def update_client(
    store: ClientStore,
    observed: Chain | str,
    height: int,
    next_validators: ValidatorSet,
    commitments_root: bytes,
) -> ClientStore:
    chain_id = observed if isinstance(observed, str) else observed.chain_id
    store._record(
        ConsensusState(chain_id, height, canonical_validator_hash(next_validators), commitments_root)
    )
    return store


# -- Merkle commitment store ------------------------------------------------

_EMPTY_ROOT = digest(b"")


def leaf_hash(key: str, value: bytes) -> bytes:
    return digest(b"\x00" + _lp(key.encode()) + digest(value))


def _node_hash(left: bytes, right: bytes) -> bytes:
    return digest(b"\x01" + left + right)


@dataclass(frozen=True)
class MerkleProof:
    # (sibling_on_left, sibling_digest) from leaf level upwards
    path: tuple[tuple[bool, bytes], ...]

    def with_path(self, path: Iterable[tuple[bool, bytes]]) -> "MerkleProof":
        return MerkleProof(tuple(path))


def verify_membership(root: bytes, key: str, value: bytes, proof: MerkleProof) -> bool:
    h = leaf_hash(key, value)
    for sibling_left, sibling in proof.path:
        h = _node_hash(sibling, h) if sibling_left else _node_hash(h, sibling)
    return h == root


class StoreSnapshot:
    """Immutable view of a commitment store at one height, with its Merkle tree."""

    __slots__ = ("height", "entries", "_index", "_levels")

    def __init__(self, height: int, entries: Mapping[str, bytes], leaves: Mapping[str, bytes]) -> None:
        self.height = height
        self.entries = dict(entries)
        keys = sorted(self.entries)
        self._index = {k: i for i, k in enumerate(keys)}
        level = [leaves[k] for k in keys]
        levels = [level]
        while len(level) > 1:
            nxt = [_node_hash(level[i], level[i + 1]) for i in range(0, len(level) - 1, 2)]
            if len(level) % 2:
                nxt.append(level[-1])
            levels.append(nxt)
            level = nxt
        self._levels = levels

    @property
    def root(self) -> bytes:
        top = self._levels[-1]
        return top[0] if top else _EMPTY_ROOT

    def __contains__(self, key: str) -> bool:
        return key in self.entries

    def get(self, key: str) -> bytes | None:
        return self.entries.get(key)

    def prove(self, key: str) -> MerkleProof:
        idx = self._index[key]
        path = []
        for level in self._levels[:-1]:
            sib = idx ^ 1
            if sib < len(level):
                path.append((sib < idx, level[sib]))
            idx //= 2
        return MerkleProof(tuple(path))


class CommitmentStore:
    def __init__(self) -> None:
        self.entries: dict[str, bytes] = {}
        self._leaves: dict[str, bytes] = {}

    def set(self, key: str, value: bytes) -> None:
        self.entries[key] = value
        self._leaves[key] = leaf_hash(key, value)

    def delete(self, key: str) -> None:
        self.entries.pop(key, None)
        self._leaves.pop(key, None)

    def get(self, key: str) -> bytes | None:
        return self.entries.get(key)

    def __contains__(self, key: str) -> bool:
        return key in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def snapshot(self, height: int) -> StoreSnapshot:
        return StoreSnapshot(height, self.entries, self._leaves)


def client_key(observed: str) -> str:
    return f"clients/{observed}"


# -- packets and proofs -----------------------------------------------------


@dataclass(frozen=True)
class Packet:
    packet_id: str
    source: str
    destination: str
    route: tuple[str, ...]
    channel_version: str = "ics20-1"
    payload: bytes = b""
    source_height: int | None = None
    preference: tuple[PreferencePolicy, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "route", tuple(self.route))
        if len(self.route) < 2 or self.route[0] != self.source or self.route[-1] != self.destination:
            raise ValueError(f"route {self.route} does not run {self.source} -> {self.destination}")
        if len(set(self.route)) != len(self.route):
            raise ValueError(f"route {self.route} repeats a chain")

    def with_route(self, route: Sequence[str]) -> "Packet":
        return replace(self, route=tuple(route))


def commitment_key(pkt: Packet) -> str:
    return f"commitments/{pkt.packet_id}/{'>'.join(pkt.route)}"


def packet_commitment(pkt: Packet) -> bytes:
    h = pkt.source_height if pkt.source_height is not None else 0
    parts = [pkt.packet_id, pkt.source, pkt.destination, pkt.channel_version]
    body = b"".join(_lp(p.encode()) for p in parts)
    body += _lp(b"\x1f".join(c.encode() for c in pkt.route))
    body += _lp(pkt.payload) + struct.pack(">Q", h)
    return digest(body)


def payload_digest(payload: bytes) -> bytes:
    return digest(payload)


@dataclass(frozen=True)
class ProofLink:
    observed_chain: str
    consensus_state: ConsensusState
    validator_evidence: ValidatorSet | None
    commitment_proof: MerkleProof


@dataclass(frozen=True)
class ProofChain:
    links: tuple[ProofLink, ...]

    def __len__(self) -> int:
        return len(self.links)


class RejectReason(str, enum.Enum):
    ROUTE_MISMATCH = "RouteMismatch"
    UNKNOWN_CONSENSUS_STATE = "UnknownConsensusState"
    INVALID_PROOF = "InvalidCommitmentProof"
    EVIDENCE_MISSING = "EvidenceMissing"
    EVIDENCE_HASH_MISMATCH = "EvidenceHashMismatch"
    POLICY_VIOLATION = "PolicyViolation"


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: RejectReason | None = None
    detail: str = ""

    def __bool__(self) -> bool:
        return self.accepted


ACCEPT = Verdict(True)


def _reject(reason: RejectReason, detail: str) -> Verdict:
    return Verdict(False, reason, detail)


def verify_proof_chain(dest_store: ClientStore, pkt: Packet, pc: ProofChain, ps: PolicySet) -> Verdict:
    """Destination-side acceptance check.

    Checks, in order: the proofs chain back to the packet commitment on the
    source; each intermediate's validator evidence matches the committed
    next-validators hash; the evidence satisfies the security policies.
    """
    route = pkt.route
    links = pc.links
    if dest_store.owner_chain != pkt.destination or len(links) != len(route) - 1:
        return _reject(RejectReason.ROUTE_MISMATCH, "proof does not match packet route")
    for i, link in enumerate(links):
        if link.observed_chain != route[i] or link.consensus_state.chain_id != route[i]:
            return _reject(RejectReason.ROUTE_MISMATCH, f"link {i} observes {link.observed_chain}")

    # (1) commitment proofs, anchored at the destination's own client store
    last = links[-1].consensus_state
    held = dest_store.clients.get(last.chain_id, {}).get(last.height)
    if held is None or held != last:
        return _reject(
            RejectReason.UNKNOWN_CONSENSUS_STATE,
            f"no matching consensus state for {last.chain_id} at {last.height}",
        )
    for i in range(len(links) - 1, 0, -1):
        cs = links[i].consensus_state
        prev = links[i - 1].consensus_state
        if not verify_membership(
            cs.commitments_root, client_key(route[i - 1]), prev.to_bytes(), links[i].commitment_proof
        ):
            return _reject(RejectReason.INVALID_PROOF, f"link {i} does not record {route[i - 1]}")
    if not verify_membership(
        links[0].consensus_state.commitments_root,
        commitment_key(pkt),
        packet_commitment(pkt),
        links[0].commitment_proof,
    ):
        return _reject(RejectReason.INVALID_PROOF, "packet commitment not proven on source")

    # (2) evidence authenticity, (3) policy
    evidence = [links[i].validator_evidence for i in range(1, len(links))]
    for i, ev in enumerate(evidence, start=1):
        if ev is None:
            if ps.has_security:
                return _reject(RejectReason.EVIDENCE_MISSING, f"no validator evidence for {route[i]}")
            continue
        if canonical_validator_hash(ev) != links[i].consensus_state.next_validators_hash:
            return _reject(RejectReason.EVIDENCE_HASH_MISMATCH, f"evidence for {route[i]} is not authentic")
    for i, ev in enumerate(evidence, start=1):
        if ev is not None and not validators_satisfy(ps, ev):
            return _reject(RejectReason.POLICY_VIOLATION, f"{route[i]} fails {ps.security}")
    return ACCEPT


# -- simulated chain ledgers ------------------------------------------------


class ChainLedger:
    """Per-chain light-client state: height, commitment store, client store."""

    def __init__(self, chain: Chain, retain_heights: int | None = None) -> None:
        self.chain_id = chain.chain_id
        self.height = 0
        self.store = CommitmentStore()
        self.clients = ClientStore(chain.chain_id)
        self.retain_heights = retain_heights
        self._snapshots: OrderedDict[int, StoreSnapshot] = OrderedDict()
        self._validator_sets: dict[bytes, ValidatorSet] = {}
        self.set_validators(chain.validator_set)

    def set_validators(self, vs: ValidatorSet) -> None:
        self.validator_set = vs
        self.validators_hash = canonical_validator_hash(vs)
        self._validator_sets[self.validators_hash] = vs

    def validators_for(self, vhash: bytes) -> ValidatorSet:
        return self._validator_sets[vhash]

    def begin_block(self) -> int:
        self.height += 1
        return self.height

    def snapshot(self) -> StoreSnapshot:
        """Snapshot at the current (sealed) height; cached."""
        snap = self._snapshots.get(self.height)
        if snap is None:
            snap = self.store.snapshot(self.height)
            self._snapshots[self.height] = snap
            if self.retain_heights is not None:
                floor = self.height - self.retain_heights
                while self._snapshots and next(iter(self._snapshots)) < floor:
                    self._snapshots.popitem(last=False)
        return snap

    def snapshot_at(self, height: int) -> StoreSnapshot:
        snap = self._snapshots.get(height)
        if snap is None:
            if height == self.height:
                return self.snapshot()
            raise MissingClientState(f"{self.chain_id} has no retained state at height {height}")
        return snap

    def consensus_state(self) -> ConsensusState:
        return ConsensusState(self.chain_id, self.height, self.validators_hash, self.snapshot().root)

    def record_client(self, cs: ConsensusState) -> None:
        """Install ``cs`` in the client store and expose it in the commitment store."""
        self.clients._record(cs)
        self.store.set(client_key(cs.chain_id), cs.to_bytes())


class World:
    """A set of chain ledgers; every helper action produces one block on the actor."""

    def __init__(self, chains: Iterable[Chain] | Topology, retain_heights: int | None = None) -> None:
        if isinstance(chains, Topology):
            chains = chains.chains.values()
        self.ledgers: dict[str, ChainLedger] = {
            c.chain_id: ChainLedger(c, retain_heights) for c in chains
        }

    def __getitem__(self, chain_id: str) -> ChainLedger:
        return self.ledgers[chain_id]

    def client_store(self, chain_id: str) -> ClientStore:
        return self.ledgers[chain_id].clients

    def commit_packet(self, pkt: Packet) -> Packet:
        led = self.ledgers[pkt.source]
        h = led.begin_block()
        pkt = replace(pkt, source_height=h)
        led.store.set(commitment_key(pkt), packet_commitment(pkt))
        return pkt

    def update_client(self, observer: str, observed: str) -> ConsensusState:
        cs = self.ledgers[observed].consensus_state()
        led = self.ledgers[observer]
        latest = led.clients.latest_height(observed)
        if latest is not None and cs.height <= latest:
            raise NonMonotonicHeight(f"{observer}: client of {observed} already at {latest}")
        led.begin_block()
        led.record_client(cs)
        return cs

    def relay_path(self, route: Sequence[str]) -> None:
        """Update each hop's client of the previous hop, in path order."""
        for prev, nxt in zip(route, route[1:]):
            self.update_client(nxt, prev)

    def advance(self, chain_id: str, blocks: int = 1) -> None:
        led = self.ledgers[chain_id]
        for _ in range(blocks):
            led.begin_block()


def build_proof_chain(world: World, pkt: Packet) -> ProofChain:
    route = pkt.route
    src = world.ledgers[pkt.source]
    key = commitment_key(pkt)
    if src.store.get(key) != packet_commitment(pkt):
        raise MissingCommitment(f"packet {pkt.packet_id} is not committed on {pkt.source}")

    dest = world.ledgers[pkt.destination]
    cs = dest.clients.latest(route[-2])
    if cs is None:
        raise MissingClientState(f"{pkt.destination} has no client of {route[-2]}")
    links: list[ProofLink] = []
    for i in range(len(route) - 2, -1, -1):
        observed = route[i]
        led = world.ledgers[observed]
        snap = led.snapshot_at(cs.height)
        evidence = led.validators_for(cs.next_validators_hash) if i > 0 else None
        if i == 0:
            if key not in snap:
                raise MissingClientState(
                    f"client of {observed} at height {cs.height} predates packet {pkt.packet_id}"
                )
            links.append(ProofLink(observed, cs, evidence, snap.prove(key)))
        else:
            ck = client_key(route[i - 1])
            if ck not in snap:
                raise MissingClientState(f"{observed} at height {cs.height} has no client of {route[i - 1]}")
            links.append(ProofLink(observed, cs, evidence, snap.prove(ck)))
            cs = ConsensusState.from_bytes(snap.get(ck))
    links.reverse()
    return ProofChain(tuple(links))
