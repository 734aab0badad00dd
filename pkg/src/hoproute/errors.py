"""Exception hierarchy.

Every error carries a stable ``code`` (the class name) which the CLI prints
as ``code: message`` on standard error.
"""

from __future__ import annotations


class HopRouteError(Exception):
    """Base class for all domain errors raised by this package."""

    @property
    def code(self) -> str:
        return type(self).__name__


# topology
class SchemaError(HopRouteError, ValueError):
    pass


class IntegrityError(HopRouteError, ValueError):
    pass


# policy
class GrammarError(HopRouteError, ValueError):
    pass


# lightclient
class NonMonotonicHeight(HopRouteError, ValueError):
    pass


class MissingClientState(HopRouteError, LookupError):
    pass


class MissingCommitment(HopRouteError, LookupError):
    pass


# routing
class UnknownChain(HopRouteError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class NoRoute(HopRouteError):
    pass


class InsufficientDisjointPaths(HopRouteError):
    def __init__(self, found: int, wanted: int) -> None:
        super().__init__(f"found {found} disjoint routes, wanted {wanted}")
        self.found = found
        self.wanted = wanted


# shared precondition failure (e.g. fan-out over overlapping routes)
class ContractError(HopRouteError, ValueError):
    pass


# relaynet
class InsufficientStake(HopRouteError, ValueError):
    pass


class DuplicateId(HopRouteError, ValueError):
    pass


class UnknownRelayer(HopRouteError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return str(self.args[0]) if self.args else ""


class InactiveRelayer(HopRouteError):
    pass


class NoCoveringRelayer(HopRouteError):
    def __init__(self, chain: str) -> None:
        super().__init__(f"no active relayer covers chain {chain!r}")
        self.chain = chain


class CyclicDependency(HopRouteError):
    pass


class EscrowClosed(HopRouteError):
    pass


class InvalidEvidence(HopRouteError, ValueError):
    pass


class DuplicateVote(HopRouteError):
    pass


class AlreadyCommitted(HopRouteError):
    pass


class UnknownProposal(HopRouteError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


# simkernel
class ConfigError(HopRouteError, ValueError):
    pass
