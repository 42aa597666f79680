"""Reference external policy server for the causal-probe wire protocol."""

__version__ = "0.1.0"

from .server import ServerConfig, serve

__all__ = ["ServerConfig", "serve"]
