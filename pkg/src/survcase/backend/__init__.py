"""Model-call gateway: HTTP and deterministic mock backends."""

from .base import (
    Backend,
    BackendConfig,
    BackendError,
    BackendTimeout,
    EmptyText,
    FixtureMiss,
    PromptRequest,
    TemplateNotFound,
    TraceWriter,
    UnboundPlaceholder,
    UnreadableImage,
    UpstreamError,
    load_trace,
)
from .http import HttpBackend
from .mock import MockBackend, hash_embed
from .templates import TemplateStore

__all__ = [
    "Backend",
    "BackendConfig",
    "BackendError",
    "BackendTimeout",
    "EmptyText",
    "FixtureMiss",
    "HttpBackend",
    "MockBackend",
    "PromptRequest",
    "TemplateNotFound",
    "TemplateStore",
    "TraceWriter",
    "UnboundPlaceholder",
    "UnreadableImage",
    "UpstreamError",
    "hash_embed",
    "load_trace",
]


def make_backend(
    config: BackendConfig,
    templates: TemplateStore | None = None,
    trace: TraceWriter | None = None,
    **mock_kwargs,
) -> Backend:
    """Build the backend named by config.kind."""
    store = templates if templates is not None else TemplateStore()
    if config.kind == "http":
        return HttpBackend(config, store, trace)
    return MockBackend(config, store, trace, **mock_kwargs)
