"""Deterministic mock backend.

Two modes:

* fixture mode — responses come from an exact lookup table keyed by
  (op, template_id, hash of variables); a missing key is an error. Used
  by unit tests that pin specific model answers.
* synthetic-oracle mode — responses are generated by fixed rules from
  the prompt variables and the tile metadata stored next to synthetic
  slides (see ``oracle.py``). Used by end-to-end tests, where a real
  model cannot run.

Embeddings are the same in both modes: a seeded hash of the text's
tokens expanded to the configured dimension and normalized. The mock is
a pure function of its inputs, so two identical runs produce
byte-identical traces.
"""

from __future__ import annotations

import hashlib
import json
import re
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .base import Backend, BackendError, FixtureMiss, PromptRequest
from .oracle import OracleResponder

_EMBED_SALT = "survcase-embed-v1"


def hash_embed(text: str, dim: int, cache: Optional[dict[str, np.ndarray]] = None) -> np.ndarray:
    """Deterministic token-hash embedding.

    Each lowercase alphanumeric token maps to a seeded gaussian vector;
    the text embeds as the normalized token sum, so texts sharing tokens
    land near each other while distinct texts stay apart.
    """
    tokens = re.findall(r"[a-z0-9]+", text.lower()) or ["<empty>"]
    acc = np.zeros(dim, dtype=np.float64)
    for tok in tokens:
        vec = None if cache is None else cache.get(tok)
        if vec is None:
            digest = hashlib.blake2b(
                f"{_EMBED_SALT}:{tok}".encode("utf-8"), digest_size=8
            ).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "big"))
            vec = rng.standard_normal(dim)
            if cache is not None:
                cache[tok] = vec
        acc += vec
    norm = float(np.linalg.norm(acc))
    if norm == 0.0:
        # Token vectors cancelling exactly is not expected; fall back to
        # hashing the whole text so the contract still holds.
        digest = hashlib.blake2b(f"{_EMBED_SALT}:{text}".encode("utf-8"), digest_size=8).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "big"))
        acc = rng.standard_normal(dim)
        norm = float(np.linalg.norm(acc))
    return acc / norm


class MockBackend(Backend):
    """See module docstring. Construct via mode='fixture' or 'oracle'."""

    def __init__(
        self,
        config,
        templates,
        trace=None,
        *,
        mode: str = "fixture",
        fixtures: Optional[str | Path | dict | list] = None,
        cohort_root: Optional[str | Path] = None,
    ):
        super().__init__(config, templates, trace)
        if mode not in ("fixture", "oracle"):
            raise BackendError(f"unknown mock mode {mode!r}")
        self.mode = mode
        self._fixtures: dict[tuple[str, str, str], str] = {}
        self._embed_cache: dict[str, np.ndarray] = {}
        self._oracle: Optional[OracleResponder] = None
        if mode == "fixture":
            if fixtures is not None:
                self._load_fixtures(fixtures)
        else:
            self._oracle = OracleResponder(cohort_root)

    # -- fixtures -------------------------------------------------------

    def _load_fixtures(self, fixtures: str | Path | dict | list) -> None:
        if isinstance(fixtures, (str, Path)):
            data = json.loads(Path(fixtures).read_text(encoding="utf-8"))
        else:
            data = fixtures
        rows = data["responses"] if isinstance(data, dict) else data
        for row in rows:
            self.add_fixture(
                op=row.get("op", "chat"),
                template_id=row["template_id"],
                variables=row.get("variables", {}),
                response=row["response"],
            )

    def add_fixture(
        self, *, template_id: str, variables: dict[str, Any], response: str, op: str = "chat"
    ) -> None:
        req = PromptRequest(template_id=template_id, variables={k: str(v) for k, v in variables.items()})
        self._fixtures[(op, template_id, req.vars_hash())] = response

    def _lookup(self, op: str, req: PromptRequest) -> str:
        key = (op, req.template_id, req.vars_hash())
        if key not in self._fixtures:
            raise FixtureMiss(
                f"no fixture for op={op} template={req.template_id} vars={sorted(req.variables)}"
            )
        return self._fixtures[key]

    # -- Backend hooks ----------------------------------------------------

    def _chat_impl(self, req: PromptRequest, prompt: str) -> str:
        if self.mode == "fixture":
            return self._lookup("chat", req)
        assert self._oracle is not None
        return self._oracle.chat(req)

    def _describe_impl(self, image_ref: str, req: PromptRequest, prompt: str) -> str:
        if self.mode == "fixture":
            return self._lookup("describe", req)
        assert self._oracle is not None
        return self._oracle.describe(image_ref, req)

    def _embed_impl(self, text: str) -> np.ndarray:
        return hash_embed(text, self.config.embed_dim, self._embed_cache)
