"""Virtual-services marketplace backed by a replicated tamper-evident ledger."""

__version__ = "0.1.0"
