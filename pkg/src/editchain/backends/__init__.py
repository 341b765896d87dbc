"""Backend contracts, the deterministic mock suite, and the HTTP layer."""

from .client import BackendEndpoint, HttpBackendSuite, http_call
from .mock import MockBackendSuite
from .server import create_app, serve

__all__ = [
    "BackendEndpoint",
    "HttpBackendSuite",
    "MockBackendSuite",
    "create_app",
    "http_call",
    "serve",
]
