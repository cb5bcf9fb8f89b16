"""HTTP service wrapping the sampler and metrics."""

from .app import create_app, serve

__all__ = ["create_app", "serve"]
