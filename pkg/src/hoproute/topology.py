"""Chain/connection graph: ingestion, validation, security metrics and surgery.

A :class:`Topology` is immutable once built. The surgery helpers
(:func:`remove_top_k`, :func:`upgrade_topology`) return new values.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from types import MappingProxyType
from typing import Any, Iterable, Mapping

import jsonschema

from .errors import IntegrityError, SchemaError

DEFAULT_BLOCK_TIME_MS = 6000.0
DEFAULT_CAPACITY = 4000
DEFAULT_GAS_PRICE = 0.025
DEFAULT_USD_PER_GAS_TOKEN = 1.0

TOPOLOGY_SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "required": ["chains"],
    "properties": {
        "chains": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["id", "validators"],
                "properties": {
                    "id": {"type": "string", "minLength": 1},
                    "validators": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "additionalProperties": False,
                            "required": ["address", "power"],
                            "properties": {
                                "address": {"type": "string", "minLength": 1},
                                "power": {"type": "integer", "minimum": 0},
                            },
                        },
                    },
                    "block_time_ms": {"type": "number", "exclusiveMinimum": 0},
                    "gas_price": {"type": "number", "minimum": 0},
                    "usd_per_gas_token": {"type": "number", "minimum": 0},
                    "capacity_tx_per_block": {"type": "integer", "minimum": 1},
                },
            },
        },
        "connections": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["a", "b"],
                "properties": {"a": {"type": "string"}, "b": {"type": "string"}},
            },
        },
        "channels": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["id", "a", "b", "version"],
                "properties": {
                    "id": {"type": "string", "minLength": 1},
                    "a": {"type": "string"},
                    "b": {"type": "string"},
                    "version": {"type": "string"},
                },
            },
        },
    },
}


@dataclass(frozen=True)
class Validator:
    address: bytes
    power: int

    def __post_init__(self) -> None:
        if isinstance(self.address, str):
            object.__setattr__(self, "address", self.address.encode())
        if self.power < 0:
            raise IntegrityError(f"validator {self.address!r} has negative power")


@dataclass(frozen=True)
class ValidatorSet:
    validators: tuple[Validator, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "validators", tuple(self.validators))
        seen = set()
        for v in self.validators:
            if v.address in seen:
                raise IntegrityError(f"duplicate validator address {v.address!r}")
            seen.add(v.address)
        if self.total_power <= 0:
            raise IntegrityError("validator set has no voting power")

    @classmethod
    def from_powers(cls, powers: Iterable[int], prefix: str = "val") -> "ValidatorSet":
        return cls(tuple(Validator(f"{prefix}{i}".encode(), p) for i, p in enumerate(powers)))

    @cached_property
    def total_power(self) -> int:
        return sum(v.power for v in self.validators)

    @property
    def powers(self) -> list[int]:
        return [v.power for v in self.validators]

    def __len__(self) -> int:
        return len(self.validators)


def nakamoto_coefficient(vs: ValidatorSet) -> int:
    """Smallest number of validators whose combined power can halt the chain.

    Halting needs strictly more than a third of the total power, compared as
    ``3 * subset_power > total_power`` so no fractions are involved.
    """
    total = vs.total_power
    acc = 0
    for k, power in enumerate(sorted(vs.powers, reverse=True), start=1):
        acc += power
        if 3 * acc > total:
            return k
    raise AssertionError("unreachable for a set with positive total power")


@dataclass(frozen=True)
class Chain:
    chain_id: str
    validator_set: ValidatorSet
    block_time_ms: float = DEFAULT_BLOCK_TIME_MS
    gas_price: float = DEFAULT_GAS_PRICE
    usd_per_gas_token: float = DEFAULT_USD_PER_GAS_TOKEN
    capacity: int = DEFAULT_CAPACITY

    def __post_init__(self) -> None:
        if self.block_time_ms <= 0:
            raise IntegrityError(f"chain {self.chain_id}: block_time must be positive")
        if self.capacity <= 0:
            raise IntegrityError(f"chain {self.chain_id}: capacity must be positive")

    @cached_property
    def nakamoto(self) -> int:
        return nakamoto_coefficient(self.validator_set)

    @property
    def n_validators(self) -> int:
        return len(self.validator_set)


@dataclass(frozen=True)
class Channel:
    channel_id: str
    version: str
    endpoints: tuple[str, str]


def edge(a: str, b: str) -> tuple[str, str]:
    """Canonical key for the unordered pair ``{a, b}``."""
    return (a, b) if a <= b else (b, a)


@dataclass(frozen=True, eq=False)
class Topology:
    chains: Mapping[str, Chain]
    connections: frozenset[tuple[str, str]]
    channels: Mapping[str, Channel] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "chains", MappingProxyType(dict(self.chains)))
        object.__setattr__(self, "channels", MappingProxyType(dict(self.channels)))
        conns = set()
        for a, b in self.connections:
            if a == b:
                raise IntegrityError(f"self-loop connection on {a!r}")
            for c in (a, b):
                if c not in self.chains:
                    raise IntegrityError(f"connection references unknown chain {c!r}")
            conns.add(edge(a, b))
        object.__setattr__(self, "connections", frozenset(conns))
        for ch in self.channels.values():
            a, b = ch.endpoints
            if a == b:
                raise IntegrityError(f"channel {ch.channel_id} loops on {a!r}")
            for c in (a, b):
                if c not in self.chains:
                    raise IntegrityError(f"channel {ch.channel_id} references unknown chain {c!r}")
            if edge(a, b) not in conns:
                raise IntegrityError(f"channel {ch.channel_id} has no underlying connection {a}-{b}")
        adj: dict[str, set[str]] = {c: set() for c in self.chains}
        for a, b in conns:
            adj[a].add(b)
            adj[b].add(a)
        object.__setattr__(
            self, "_adjacency", {c: tuple(sorted(ns)) for c, ns in adj.items()}
        )

    def neighbors(self, chain_id: str) -> tuple[str, ...]:
        return self._adjacency[chain_id]

    def degree(self, chain_id: str) -> int:
        return len(self._adjacency[chain_id])

    def connected(self, a: str, b: str) -> bool:
        return edge(a, b) in self.connections

    def channels_between(self, a: str, b: str) -> list[Channel]:
        key = edge(a, b)
        return sorted(
            (ch for ch in self.channels.values() if edge(*ch.endpoints) == key),
            key=lambda ch: ch.channel_id,
        )

    @property
    def chain_ids(self) -> list[str]:
        return sorted(self.chains)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Topology):
            return NotImplemented
        return (
            dict(self.chains) == dict(other.chains)
            and self.connections == other.connections
            and dict(self.channels) == dict(other.channels)
        )

    def __hash__(self) -> int:
        return hash((frozenset(self.chains), self.connections))

    def __len__(self) -> int:
        return len(self.chains)

    def with_changes(
        self,
        chains: Mapping[str, Chain] | None = None,
        connections: Iterable[tuple[str, str]] | None = None,
        channels: Mapping[str, Channel] | None = None,
    ) -> "Topology":
        return Topology(
            chains=self.chains if chains is None else chains,
            connections=frozenset(self.connections if connections is None else connections),
            channels=self.channels if channels is None else channels,
        )


def load_topology(source: Mapping[str, Any] | str | Path) -> Topology:
    """Build a validated :class:`Topology` from a topology document.

    ``source`` is either an already-parsed document or a path to a JSON file.
    """
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{source}: not valid JSON ({exc})") from exc
    else:
        doc = source
    try:
        jsonschema.validate(doc, TOPOLOGY_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaError(f"{where}: {exc.message}") from None

    chains: dict[str, Chain] = {}
    for entry in doc["chains"]:
        cid = entry["id"]
        if cid in chains:
            raise IntegrityError(f"duplicate chain id {cid!r}")
        validators = tuple(Validator(v["address"].encode(), v["power"]) for v in entry["validators"])
        try:
            vset = ValidatorSet(validators)
        except IntegrityError as exc:
            raise IntegrityError(f"chain {cid!r}: {exc}") from None
        chains[cid] = Chain(
            chain_id=cid,
            validator_set=vset,
            block_time_ms=float(entry.get("block_time_ms", DEFAULT_BLOCK_TIME_MS)),
            gas_price=float(entry.get("gas_price", DEFAULT_GAS_PRICE)),
            usd_per_gas_token=float(entry.get("usd_per_gas_token", DEFAULT_USD_PER_GAS_TOKEN)),
            capacity=int(entry.get("capacity_tx_per_block", DEFAULT_CAPACITY)),
        )

    connections = [(c["a"], c["b"]) for c in doc.get("connections", [])]
    channels: dict[str, Channel] = {}
    for c in doc.get("channels", []):
        if c["id"] in channels:
            raise IntegrityError(f"duplicate channel id {c['id']!r}")
        # local import: policy depends on topology
        from .policy import parse_channel_version

        parse_channel_version(c["version"])
        channels[c["id"]] = Channel(c["id"], c["version"], (c["a"], c["b"]))
    return Topology(chains=chains, connections=frozenset(connections), channels=channels)


def dump_topology(t: Topology) -> dict[str, Any]:
    """Serialize to the document format accepted by :func:`load_topology`."""
    return {
        "chains": [
            {
                "id": c.chain_id,
                "validators": [
                    {"address": v.address.decode(), "power": v.power}
                    for v in c.validator_set.validators
                ],
                "block_time_ms": c.block_time_ms,
                "gas_price": c.gas_price,
                "usd_per_gas_token": c.usd_per_gas_token,
                "capacity_tx_per_block": c.capacity,
            }
            for c in (t.chains[cid] for cid in t.chain_ids)
        ],
        "connections": [{"a": a, "b": b} for a, b in sorted(t.connections)],
        "channels": [
            {"id": ch.channel_id, "a": ch.endpoints[0], "b": ch.endpoints[1], "version": ch.version}
            for ch in sorted(t.channels.values(), key=lambda ch: ch.channel_id)
        ],
    }


def removal_order(t: Topology) -> list[str]:
    """Chains sorted by descending degree, ties by chain id."""
    return sorted(t.chains, key=lambda c: (-t.degree(c), c))


def remove_top_k(t: Topology, k: int) -> Topology:
    if not 0 <= k <= len(t):
        raise ValueError(f"k={k} outside [0, {len(t)}]")
    if k == 0:
        return t
    gone = set(removal_order(t)[:k])
    return Topology(
        chains={c: ch for c, ch in t.chains.items() if c not in gone},
        connections=frozenset(e for e in t.connections if not (set(e) & gone)),
        channels={
            cid: ch for cid, ch in t.channels.items() if not (set(ch.endpoints) & gone)
        },
    )


def upgrade_topology(t: Topology, seed: int, min_nc: int = 6) -> Topology:
    """Give every chain one extra connection to a random well-decentralized chain.

    Chains are visited in id order. Each picks uniformly among chains it is not
    yet connected to whose Nakamoto coefficient is at least ``min_nc``; chains
    without such a partner are skipped.
    """
    if min_nc < 1:
        raise ValueError("min_nc must be >= 1")
    rng = random.Random(seed)
    eligible = [c for c in t.chain_ids if t.chains[c].nakamoto >= min_nc]
    conns = set(t.connections)
    for c in t.chain_ids:
        candidates = [p for p in eligible if p != c and edge(c, p) not in conns]
        if candidates:
            conns.add(edge(c, rng.choice(candidates)))
    return t.with_changes(connections=conns)
