"""Shared builders for tests: tiny images, slide manifests, mock backends."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from survcase.backend import BackendConfig, MockBackend, TemplateStore, TraceWriter
from survcase.backend.base import PromptRequest
from survcase.sidecar import write_sidecar


def tiny_png(path: Path, color=(200, 180, 190), size=(8, 8)) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.new("RGB", size, color).save(path)
    return path


def unit_vector(dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def fixture_backend(
    fixtures=None, *, trace: TraceWriter | None = None, embed_dim: int = 64
) -> MockBackend:
    return MockBackend(
        BackendConfig(kind="mock", embed_dim=embed_dim),
        TemplateStore(),
        trace,
        mode="fixture",
        fixtures=fixtures,
    )


def oracle_backend(
    cohort_root=None, *, trace: TraceWriter | None = None, embed_dim: int = 64
) -> MockBackend:
    return MockBackend(
        BackendConfig(kind="mock", embed_dim=embed_dim),
        TemplateStore(),
        trace,
        mode="oracle",
        cohort_root=cohort_root,
    )


class QueueBackend(MockBackend):
    """Mock whose chat/describe answers pop from explicit per-op queues.

    Lets a test script a concrete answer sequence (including re-prompt
    paths, which keyed fixtures cannot express). Embeddings stay the
    deterministic hash kind. Requests are recorded for assertions.
    """

    def __init__(self, chat=None, describe=None, *, embed_dim: int = 64, trace=None):
        super().__init__(
            BackendConfig(kind="mock", embed_dim=embed_dim),
            TemplateStore(),
            trace,
            mode="fixture",
        )
        self.chat_queue: list[str] = list(chat or [])
        self.describe_queue: list[str] = list(describe or [])
        self.chat_requests: list[PromptRequest] = []
        self.describe_requests: list[PromptRequest] = []

    def _chat_impl(self, req, prompt):
        self.chat_requests.append(req)
        if not self.chat_queue:
            raise AssertionError(f"chat queue exhausted at {req.template_id}")
        return self.chat_queue.pop(0)

    def _describe_impl(self, image_ref, req, prompt):
        self.describe_requests.append(req)
        if not self.describe_queue:
            raise AssertionError(f"describe queue exhausted at {req.template_id}")
        return self.describe_queue.pop(0)


class SlideBuilder:
    """Assemble a slide directory (manifest + images + sidecars) for tests.

    Tiles are declared per level; images and embedding sidecars are
    written on build(). Coordinates follow the pyramid convention used by
    the loader: per-level pixels, level-1 = 2x level-2.
    """

    def __init__(self, root: Path, slide_id: str):
        self.root = Path(root) / slide_id
        self.slide_id = slide_id
        self._levels: dict[int, list[dict]] = {}
        self._embeddings: dict[int, list[tuple[str, np.ndarray]]] = {}

    def add_tile(
        self,
        level: int,
        patch_id: str,
        x: int,
        y: int,
        w: int,
        h: int,
        *,
        image: bool = True,
        embedding: np.ndarray | None = None,
        attention: float | None = None,
        meta: dict | None = None,
    ) -> None:
        tile: dict = {"patch_id": patch_id, "x": x, "y": y, "w": w, "h": h}
        if image:
            rel = f"tiles/{patch_id}.png"
            tiny_png(self.root / rel)
            tile["image"] = rel
        if embedding is not None:
            tile["embedding_file"] = f"emb_level{level}.bin"
            self._embeddings.setdefault(level, []).append((patch_id, embedding))
        if attention is not None:
            tile["attention"] = attention
        if meta:
            tile["meta"] = meta
        self._levels.setdefault(level, []).append(tile)

    def build(self) -> Path:
        mags = {1: 20.0, 2: 10.0, 3: 2.5}
        for level, rows in self._embeddings.items():
            ids = [pid for pid, _ in rows]
            mat = np.stack([vec for _, vec in rows])
            write_sidecar(self.root / f"emb_level{level}.bin", mat, ids=ids, with_sha=True)
        manifest = {
            "slide_id": self.slide_id,
            "levels": [
                {"level": lvl, "magnification": mags[lvl], "tiles": tiles}
                for lvl, tiles in sorted(self._levels.items())
            ],
        }
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.root / "slide.json"
        path.write_text(json.dumps(manifest, indent=1), encoding="utf-8")
        return path
