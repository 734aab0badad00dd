"""Policy vocabulary, channel-version encoding and pure policy evaluation.

Channel version grammar (no whitespace anywhere)::

    version     := base | base "/" constraints
    constraints := constraint ("," constraint)*
    constraint  := ("nakamoto" | "validators") ":" decimal-integer

Only security policies live in the channel version. Preference policies
travel with each packet.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Sequence

from .errors import GrammarError
from .topology import Chain, Topology, ValidatorSet, nakamoto_coefficient

if TYPE_CHECKING:
    from .routing import Route


class SecurityKind(str, enum.Enum):
    MIN_NAKAMOTO = "nakamoto"
    MIN_VALIDATORS = "validators"


# canonical encoding order
_KEY_ORDER = {SecurityKind.MIN_NAKAMOTO: 0, SecurityKind.MIN_VALIDATORS: 1}


class PreferenceKind(str, enum.Enum):
    MAX_FEE = "max_fee"
    MINIMIZE_FEE = "minimize_fee"
    TIMEOUT = "timeout"
    MINIMIZE_TIME = "minimize_time"


@dataclass(frozen=True)
class SecurityPolicy:
    kind: SecurityKind
    threshold: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", SecurityKind(self.kind))
        if isinstance(self.threshold, bool) or not isinstance(self.threshold, int):
            raise GrammarError(f"threshold must be an integer, got {self.threshold!r}")
        if self.threshold < 1:
            raise GrammarError(f"threshold must be >= 1, got {self.threshold}")

    def __str__(self) -> str:
        return f"{self.kind.value}:{self.threshold}"


def MinNakamoto(k: int) -> SecurityPolicy:  # noqa: N802 - constructor-style helper
    return SecurityPolicy(SecurityKind.MIN_NAKAMOTO, k)


def MinValidators(k: int) -> SecurityPolicy:  # noqa: N802
    return SecurityPolicy(SecurityKind.MIN_VALIDATORS, k)


@dataclass(frozen=True)
class PreferencePolicy:
    kind: PreferenceKind
    # MaxFee limit in gas-token units, Timeout deadline in milliseconds
    value: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", PreferenceKind(self.kind))
        if self.kind in (PreferenceKind.MAX_FEE, PreferenceKind.TIMEOUT):
            if self.value is None or self.value <= 0:
                raise ValueError(f"{self.kind.value} needs a positive value")


@dataclass(frozen=True)
class PolicySet:
    base_version: str = "ics20-1"
    security: tuple[SecurityPolicy, ...] = ()
    preference: tuple[PreferencePolicy, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        sec = tuple(self.security)
        kinds = [p.kind for p in sec]
        if len(set(kinds)) != len(kinds):
            raise GrammarError("at most one security policy of each kind")
        pkinds = [p.kind for p in self.preference]
        if len(set(pkinds)) != len(pkinds):
            raise ValueError("at most one preference policy of each kind")
        object.__setattr__(self, "security", tuple(sorted(sec, key=lambda p: _KEY_ORDER[p.kind])))
        object.__setattr__(self, "preference", tuple(self.preference))

    def threshold(self, kind: SecurityKind) -> int | None:
        for p in self.security:
            if p.kind is kind:
                return p.threshold
        return None

    def preference_value(self, kind: PreferenceKind) -> float | None:
        for p in self.preference:
            if p.kind is kind:
                return p.value if p.value is not None else 0.0
        return None

    @property
    def has_security(self) -> bool:
        return bool(self.security)

    def implies(self, other: "PolicySet") -> bool:
        """True when satisfying ``self`` guarantees ``other``'s security policies."""
        for p in other.security:
            mine = self.threshold(p.kind)
            if mine is None or mine < p.threshold:
                return False
        return True


_CONSTRAINT = re.compile(r"(nakamoto|validators):([0-9]+)")
_WHITESPACE = re.compile(r"\s")


def parse_constraints(text: str) -> tuple[SecurityPolicy, ...]:
    """Parse the part after the '/' (also used for CLI ``--policy`` flags)."""
    if text == "":
        raise GrammarError("empty constraint list")
    out: list[SecurityPolicy] = []
    seen: set[str] = set()
    for part in text.split(","):
        m = _CONSTRAINT.fullmatch(part)
        if m is None:
            raise GrammarError(f"malformed constraint {part!r}")
        key, num = m.groups()
        if key in seen:
            raise GrammarError(f"duplicate constraint key {key!r}")
        seen.add(key)
        value = int(num)
        if value < 1:
            raise GrammarError(f"threshold for {key!r} must be >= 1")
        out.append(SecurityPolicy(SecurityKind(key), value))
    return tuple(out)


def parse_channel_version(version: str) -> PolicySet:
    if _WHITESPACE.search(version):
        raise GrammarError(f"whitespace in channel version {version!r}")
    base, sep, rest = version.partition("/")
    if not base:
        raise GrammarError(f"empty base version in {version!r}")
    if not sep:
        return PolicySet(base_version=base)
    return PolicySet(base_version=base, security=parse_constraints(rest))


def encode_channel_version(ps: PolicySet) -> str:
    if not ps.security:
        return ps.base_version
    return ps.base_version + "/" + ",".join(str(p) for p in ps.security)


def validators_satisfy(ps: PolicySet, vs: ValidatorSet) -> bool:
    for p in ps.security:
        if p.kind is SecurityKind.MIN_VALIDATORS:
            if len(vs) < p.threshold:
                return False
        elif nakamoto_coefficient(vs) < p.threshold:
            return False
    return True


def chain_satisfies(ps: PolicySet, c: Chain) -> bool:
    for p in ps.security:
        if p.kind is SecurityKind.MIN_VALIDATORS:
            if c.n_validators < p.threshold:
                return False
        elif c.nakamoto < p.threshold:
            return False
    return True


def intermediates(hops: Sequence[str]) -> Sequence[str]:
    return hops[1:-1]


def route_satisfies(ps: PolicySet, r: "Route | Sequence[str]", t: Topology) -> bool:
    """Every intermediate chain of ``r`` satisfies ``ps``; endpoints are exempt."""
    hops = r if isinstance(r, (list, tuple)) else r.hops
    return all(chain_satisfies(ps, t.chains[c]) for c in intermediates(hops))


def compliant_chains(ps: PolicySet, t: Topology, among: Iterable[str] | None = None) -> set[str]:
    ids = t.chains if among is None else among
    return {c for c in ids if chain_satisfies(ps, t.chains[c])}
