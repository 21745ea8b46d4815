"""Marketplace API: orchestration, HTTP surface, and process wiring."""

from .http import STATUS_BY_CODE, create_app
from .runtime import LocalStack, MarketplaceNode, free_port, wait_healthy
from .service import MarketplaceService

__all__ = [
    "STATUS_BY_CODE",
    "LocalStack",
    "MarketplaceNode",
    "MarketplaceService",
    "create_app",
    "free_port",
    "wait_healthy",
]
