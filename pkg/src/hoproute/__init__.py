"""Policy-constrained multi-hop packet routing between chains that verify each other via light clients."""

__version__ = "0.1.0"
