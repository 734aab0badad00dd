"""N-path fan-out with M-of-N receipt agreement at the destination."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .errors import ContractError
from .lightclient import Packet, payload_digest
from .routing import Route, pairwise_intermediate_disjoint


@dataclass(frozen=True)
class MultipathConfig:
    n_paths: int
    threshold: int

    def __post_init__(self) -> None:
        if not 1 <= self.threshold <= self.n_paths:
            raise ValueError(f"need 1 <= M <= N, got M={self.threshold}, N={self.n_paths}")

    @classmethod
    def majority(cls, n_paths: int) -> "MultipathConfig":
        return cls(n_paths, n_paths // 2 + 1)

    @property
    def tolerates(self) -> int:
        """Corrupted routes tolerated while every delivery stays correct (needs M > N/2)."""
        return self.n_paths - self.threshold if 2 * self.threshold > self.n_paths else 0


@dataclass(frozen=True)
class DeliveryEvent:
    packet_id: str
    payload: bytes
    payload_digest: bytes
    receipt_count: int
    time: float | None = None


@dataclass
class ReceiptCounter:
    packet_id: str
    threshold: int
    counts: dict[bytes, int] = field(default_factory=dict)
    delivered: bool = False
    delivered_digest: bytes | None = None
    seen_routes: set[tuple[str, ...]] = field(default_factory=set)
    late: list[tuple[tuple[str, ...], bytes]] = field(default_factory=list)

    def record(
        self, route: Sequence[str], verified_payload: bytes, time: float | None = None
    ) -> DeliveryEvent | None:
        """Count one verified receipt; return the delivery when the threshold is first met."""
        key = tuple(route)
        if key in self.seen_routes:
            return None
        self.seen_routes.add(key)
        d = payload_digest(verified_payload)
        if self.delivered:
            self.late.append((key, d))
            return None
        self.counts[d] = self.counts.get(d, 0) + 1
        if self.counts[d] >= self.threshold:
            self.delivered = True
            self.delivered_digest = d
            return DeliveryEvent(self.packet_id, verified_payload, d, self.counts[d], time)
        return None

    @property
    def receipts(self) -> int:
        return len(self.seen_routes)


def record_receipt(
    rc: ReceiptCounter, route: Sequence[str], verified_payload: bytes, time: float | None = None
) -> tuple[ReceiptCounter, DeliveryEvent | None]:
    return rc, rc.record(route, verified_payload, time)


def fan_out(pkt: Packet, routes: Sequence[Route | Sequence[str]]) -> list[Packet]:
    """One packet copy per route; same id and payload, different route binding."""
    hops = [tuple(getattr(r, "hops", r)) for r in routes]
    if not hops:
        raise ContractError("fan-out needs at least one route")
    for h in hops:
        if h[0] != pkt.source or h[-1] != pkt.destination:
            raise ContractError(f"route {h} does not connect {pkt.source} -> {pkt.destination}")
    if not pairwise_intermediate_disjoint(hops):
        raise ContractError("fan-out routes must not share intermediate chains")
    if len(hops) == 1 and hops[0] == pkt.route:
        return [pkt]
    return [pkt.with_route(h) for h in hops]
