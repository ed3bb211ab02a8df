"""HTTP backend for OpenAI-compatible endpoints.

POSTs to ``{endpoint}/chat/completions`` and ``{endpoint}/embeddings``
with bearer authentication from a named environment variable. Retryable
failures (HTTP 429/5xx, connection errors, timeouts) are retried with
exponential backoff starting at 0.5 s, doubling each attempt, jittered
by up to 20 percent either way.
"""

from __future__ import annotations

import base64
import logging
import os
import random
import time
from pathlib import Path
from typing import Any

import numpy as np
import requests

from .base import (
    Backend,
    BackendError,
    BackendTimeout,
    PromptRequest,
    UpstreamError,
)

logger = logging.getLogger(__name__)

RETRYABLE_STATUSES = {429, 500, 502, 503, 504}
BACKOFF_BASE_S = 0.5
BACKOFF_JITTER = 0.2


class HttpBackend(Backend):
    def _headers(self) -> dict[str, str]:
        key = os.environ.get(self.config.api_key_env, "")
        if not key:
            raise BackendError(
                f"API key environment variable {self.config.api_key_env!r} is not set"
            )
        return {"Authorization": f"Bearer {key}", "Content-Type": "application/json"}

    def _post_with_retries(self, url: str, payload: dict[str, Any]) -> dict[str, Any]:
        attempts = self.config.retries + 1
        last_error: Exception | None = None
        for attempt in range(attempts):
            if attempt:
                delay = BACKOFF_BASE_S * (2 ** (attempt - 1))
                delay *= 1.0 + random.uniform(-BACKOFF_JITTER, BACKOFF_JITTER)
                time.sleep(delay)
            try:
                resp = requests.post(
                    url,
                    json=payload,
                    headers=self._headers(),
                    timeout=self.config.timeout_s,
                )
            except (requests.Timeout, requests.ConnectionError) as exc:
                last_error = exc
                logger.warning("attempt %d/%d failed: %s", attempt + 1, attempts, exc)
                continue
            if resp.status_code == 200:
                return resp.json()
            if resp.status_code in RETRYABLE_STATUSES:
                last_error = UpstreamError(resp.status_code, resp.text[:200])
                logger.warning(
                    "attempt %d/%d: retryable status %d",
                    attempt + 1,
                    attempts,
                    resp.status_code,
                )
                continue
            raise UpstreamError(resp.status_code, resp.text[:200])
        if isinstance(last_error, UpstreamError):
            raise last_error
        raise BackendTimeout(f"gave up after {attempts} attempts: {last_error}")

    def _chat_url(self) -> str:
        return self.config.endpoint.rstrip("/") + "/chat/completions"

    def _embed_url(self) -> str:
        return self.config.endpoint.rstrip("/") + "/embeddings"

    def _chat_impl(self, req: PromptRequest, prompt: str) -> str:
        payload = {
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "max_tokens": req.max_tokens,
            "temperature": req.temperature,
        }
        data = self._post_with_retries(self._chat_url(), payload)
        return _first_message_content(data)

    def _describe_impl(self, image_ref: str, req: PromptRequest, prompt: str) -> str:
        raw = Path(image_ref).read_bytes()
        suffix = Path(image_ref).suffix.lower().lstrip(".") or "png"
        mime = "image/jpeg" if suffix in ("jpg", "jpeg") else "image/png"
        data_url = f"data:{mime};base64,{base64.b64encode(raw).decode('ascii')}"
        payload = {
            "model": self.config.model,
            "messages": [
                {
                    "role": "user",
                    "content": [
                        {"type": "text", "text": prompt},
                        {"type": "image_url", "image_url": {"url": data_url}},
                    ],
                }
            ],
            "max_tokens": req.max_tokens,
            "temperature": req.temperature,
        }
        data = self._post_with_retries(self._chat_url(), payload)
        return _first_message_content(data)

    def _embed_impl(self, text: str) -> np.ndarray:
        payload = {"model": self.config.model, "input": text}
        data = self._post_with_retries(self._embed_url(), payload)
        try:
            vec = data["data"][0]["embedding"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed embeddings response: {exc}") from exc
        return np.asarray(vec, dtype=np.float64)


def _first_message_content(data: dict[str, Any]) -> str:
    try:
        return str(data["choices"][0]["message"]["content"])
    except (KeyError, IndexError, TypeError) as exc:
        raise BackendError(f"malformed chat response: {exc}") from exc
