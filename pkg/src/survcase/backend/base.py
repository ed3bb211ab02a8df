"""Gateway core: request/config types, trace logging, and the backend ABC.

Every model call in the pipeline (chat completion, image description,
text embedding) goes through a Backend instance, which enforces the
in-flight bound and appends exactly one trace entry per response.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

from ..types import PipelineError
from .templates import TemplateStore


class BackendError(PipelineError):
    pass


class UnboundPlaceholder(BackendError):
    """A template placeholder has no bound variable."""


class TemplateNotFound(BackendError):
    pass


class UpstreamError(BackendError):
    """The remote endpoint answered with a terminal error status."""

    def __init__(self, status: int, detail: str = ""):
        super().__init__(f"upstream status {status}: {detail}" if detail else f"upstream status {status}")
        self.status = status


class BackendTimeout(BackendError):
    """All attempts timed out or kept failing with retryable errors."""


class UnreadableImage(BackendError):
    pass


class EmptyText(BackendError):
    pass


class FixtureMiss(BackendError):
    """Fixture-mode mock has no response for the requested key."""


@dataclass(frozen=True)
class PromptRequest:
    """One templated model call.

    ``variables`` must bind every placeholder of the template.
    ``tag`` labels the trace entry for auditing.
    """

    template_id: str
    variables: Mapping[str, str] = field(default_factory=dict)
    max_tokens: int = 1024
    temperature: float = 0.0
    tag: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "variables", dict(self.variables))

    def vars_hash(self) -> str:
        canon = json.dumps(self.variables, sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class BackendConfig:
    """Transport settings shared by all backend kinds."""

    kind: str = "mock"  # "mock" or "http"
    endpoint: str = ""
    model: str = ""
    api_key_env: str = "SURVCASE_API_KEY"
    timeout_s: float = 60.0
    retries: int = 3
    max_in_flight: int = 4
    embed_dim: int = 64

    def __post_init__(self) -> None:
        if self.kind not in ("mock", "http"):
            raise BackendError(f"unknown backend kind {self.kind!r}")
        if self.timeout_s <= 0:
            raise BackendError("timeout must be > 0")
        if self.retries < 0:
            raise BackendError("retries must be >= 0")
        if self.max_in_flight < 1:
            raise BackendError("max_in_flight must be >= 1")
        if self.embed_dim < 2:
            raise BackendError("embed_dim must be >= 2")


class TraceWriter:
    """Serialized JSONL trace of every backend response.

    Rows carry {ts, tag, template_id, vars_hash, response_sha256,
    in_flight}; ``prompt`` is added when capture_prompts is on. With
    logical_clock=True the ts field is a deterministic counter so reruns
    are byte-identical.
    """

    def __init__(
        self,
        path: Optional[str | Path] = None,
        *,
        logical_clock: bool = False,
        capture_prompts: bool = False,
    ):
        self.path = None if path is None else Path(path)
        self.logical_clock = logical_clock
        self.capture_prompts = capture_prompts
        self.entries: list[dict[str, Any]] = []
        self._lock = threading.Lock()
        self._counter = 0
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("", encoding="utf-8")

    def record(
        self,
        *,
        tag: str,
        template_id: str,
        vars_hash: str,
        response_sha256: str,
        in_flight: int,
        prompt: Optional[str] = None,
    ) -> None:
        with self._lock:
            self._counter += 1
            ts: float | int = self._counter if self.logical_clock else time.time()
            entry: dict[str, Any] = {
                "ts": ts,
                "tag": tag,
                "template_id": template_id,
                "vars_hash": vars_hash,
                "response_sha256": response_sha256,
                "in_flight": in_flight,
            }
            if self.capture_prompts and prompt is not None:
                entry["prompt"] = prompt
            self.entries.append(entry)
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry, ensure_ascii=False) + "\n")


def load_trace(path: str | Path) -> list[dict[str, Any]]:
    """Read a JSONL trace file back into a list of entries."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def _sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class Backend(ABC):
    """Gateway for chat, image description and embedding calls.

    Subclasses implement the three ``_impl`` hooks; this class handles
    template rendering, precondition checks, the in-flight bound, and
    trace accounting.
    """

    def __init__(
        self,
        config: BackendConfig,
        templates: TemplateStore,
        trace: Optional[TraceWriter] = None,
    ):
        self.config = config
        self.templates = templates
        self.trace = trace if trace is not None else TraceWriter()
        self._slots = threading.BoundedSemaphore(config.max_in_flight)
        self._inflight_lock = threading.Lock()
        self._in_flight = 0

    # -- public API ---------------------------------------------------

    def chat_complete(self, req: PromptRequest) -> str:
        prompt = self.templates.render(req.template_id, req.variables)
        with self._slot() as in_flight:
            text = self._chat_impl(req, prompt)
        if not text.strip():
            raise BackendError(f"empty completion for {req.template_id}")
        self.trace.record(
            tag=req.tag or req.template_id,
            template_id=req.template_id,
            vars_hash=req.vars_hash(),
            response_sha256=_sha256_text(text),
            in_flight=in_flight,
            prompt=prompt,
        )
        return text

    def describe_image(self, image_ref: str | Path, req: PromptRequest) -> str:
        self._check_image(image_ref)
        prompt = self.templates.render(req.template_id, req.variables)
        with self._slot() as in_flight:
            text = self._describe_impl(str(image_ref), req, prompt)
        if not text.strip():
            raise BackendError(f"empty description for {image_ref}")
        self.trace.record(
            tag=req.tag or req.template_id,
            template_id=req.template_id,
            vars_hash=req.vars_hash(),
            response_sha256=_sha256_text(text),
            in_flight=in_flight,
            prompt=prompt,
        )
        return text

    def embed_text(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise EmptyText("cannot embed empty text")
        with self._slot() as in_flight:
            vec = self._embed_impl(text)
        vec = np.asarray(vec, dtype=np.float64)
        norm = float(np.linalg.norm(vec))
        if norm == 0:
            raise BackendError("embedding has zero norm")
        vec = vec / norm
        self.trace.record(
            tag="embed",
            template_id="embed",
            vars_hash=_sha256_text(text),
            response_sha256=hashlib.sha256(vec.tobytes()).hexdigest(),
            in_flight=in_flight,
        )
        return vec

    # -- hooks ----------------------------------------------------------

    @abstractmethod
    def _chat_impl(self, req: PromptRequest, prompt: str) -> str: ...

    @abstractmethod
    def _describe_impl(self, image_ref: str, req: PromptRequest, prompt: str) -> str: ...

    @abstractmethod
    def _embed_impl(self, text: str) -> np.ndarray: ...

    # -- internals ------------------------------------------------------

    def _slot(self) -> "_SlotGuard":
        return _SlotGuard(self)

    @staticmethod
    def _check_image(image_ref: str | Path) -> None:
        p = Path(image_ref)
        if not p.is_file():
            raise UnreadableImage(f"no such image: {p}")
        try:
            with Image.open(p) as img:
                img.verify()
        except (UnidentifiedImageError, OSError) as exc:
            raise UnreadableImage(f"{p}: {exc}") from exc


class _SlotGuard:
    """Context manager around the in-flight semaphore; yields the gauge
    value observed right after acquiring (for trace auditing)."""

    def __init__(self, backend: Backend):
        self._b = backend
        self.value = 0

    def __enter__(self) -> int:
        self._b._slots.acquire()
        with self._b._inflight_lock:
            self._b._in_flight += 1
            self.value = self._b._in_flight
        return self.value

    def __exit__(self, *exc) -> None:
        with self._b._inflight_lock:
            self._b._in_flight -= 1
        self._b._slots.release()
