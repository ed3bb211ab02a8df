"""Slide manifest loading and pyramid geometry.

A manifest is a JSON file describing one slide's tile pyramid:
``{slide_id, levels: [{level, magnification, tiles: [...]}]}`` where each
tile carries ``patch_id, x, y, w, h`` and optionally ``image``,
``embedding_file`` and ``attention``. Paths are relative to the manifest
file. Embeddings live in binary sidecars whose headers map rows to patch
ids.

Pixel coordinates are per-level; level 1 coordinates are exactly twice
level 2 coordinates, and the level 3 overview is the level 2 mosaic
downsampled by four.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from . import sidecar
from .types import (
    MAGNIFICATION_TO_LEVEL,
    PatchRecord,
    PipelineError,
    ValidationError,
)

# Scale factor from a level's pixel units to level-2 pixel units.
LEVEL_TO_L2_SCALE = {1: 0.5, 2: 1.0, 3: 4.0}

SUBTILE_WINDOW = 512
SUBTILE_MIN_KEEP = 256


class ManifestError(PipelineError):
    pass


class MissingLevelImage(ManifestError):
    """No usable image exists for the requested pyramid level."""


@dataclass(frozen=True)
class SlideManifest:
    slide_id: str
    levels: dict[int, tuple[PatchRecord, ...]]
    path: str

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "levels", {k: tuple(v) for k, v in self.levels.items()}
        )

    def tiles(self, level: int) -> tuple[PatchRecord, ...]:
        return self.levels.get(level, ())

    @property
    def root(self) -> Path:
        return Path(self.path).parent


def load_manifest(path: str | Path) -> SlideManifest:
    """Load and validate a slide manifest.

    Checks the magnification-to-level mapping, patch id uniqueness, and
    embedding norms (via PatchRecord construction); resolves image and
    sidecar paths against the manifest directory.
    """
    p = Path(path)
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{p}: unreadable manifest: {exc}") from exc
    if "slide_id" not in data or "levels" not in data:
        raise ValidationError(f"{p}: manifest missing slide_id or levels")

    root = p.parent
    sidecars: dict[str, tuple[np.ndarray, dict]] = {}
    levels: dict[int, list[PatchRecord]] = {}
    seen_ids: set[str] = set()

    for level_block in data["levels"]:
        level = int(level_block["level"])
        mag = float(level_block["magnification"])
        if MAGNIFICATION_TO_LEVEL.get(mag) != level:
            raise ValidationError(
                f"LevelMappingViolation: magnification {mag} declared at level {level}"
            )
        records = []
        for tile in level_block.get("tiles", []):
            patch_id = str(tile["patch_id"])
            if patch_id in seen_ids:
                raise ValidationError(f"duplicate patch_id {patch_id} in {p}")
            seen_ids.add(patch_id)
            image = tile.get("image")
            embedding = None
            emb_file = tile.get("embedding_file")
            if emb_file:
                key = str(root / emb_file)
                if key not in sidecars:
                    sidecars[key] = sidecar.read_sidecar(key)
                matrix, header = sidecars[key]
                ids = header.get("ids")
                if ids is None:
                    raise ValidationError(
                        f"{key}: sidecar referenced by tiles must carry row ids"
                    )
                try:
                    row = ids.index(patch_id)
                except ValueError:
                    raise ValidationError(
                        f"{key}: no embedding row for patch {patch_id}"
                    ) from None
                embedding = np.asarray(matrix[row], dtype=np.float64)
            records.append(
                PatchRecord(
                    patch_id=patch_id,
                    level=level,
                    x=int(tile["x"]),
                    y=int(tile["y"]),
                    w=int(tile["w"]),
                    h=int(tile["h"]),
                    image_ref=None if image is None else str(root / image),
                    embedding=embedding,
                    attention=None if tile.get("attention") is None else float(tile["attention"]),
                    meta=dict(tile.get("meta", {})),
                )
            )
        levels[level] = records
    return SlideManifest(slide_id=str(data["slide_id"]), levels=levels, path=str(p))


def subtile_windows(
    width: int,
    height: int,
    window: int = SUBTILE_WINDOW,
    min_keep: int = SUBTILE_MIN_KEEP,
) -> list[tuple[int, int, int, int]]:
    """Non-overlapping window grid over a (width, height) area.

    Full windows are ``window`` square; the trailing remainder strip in
    either axis is kept only when at least ``min_keep`` pixels wide.
    """
    def spans(total: int) -> list[tuple[int, int]]:
        out = []
        pos = 0
        while pos + window <= total:
            out.append((pos, window))
            pos += window
        rest = total - pos
        if rest >= min_keep:
            out.append((pos, rest))
        return out

    return [
        (x, y, w, h)
        for y, h in spans(height)
        for x, w in spans(width)
    ]


def subtiles_for(manifest: SlideManifest, parent: PatchRecord) -> list[PatchRecord]:
    """Level-1 image tiles lying inside a level-2 parent tile's footprint.

    The parent footprint scales by two from level 2 to level 1; a
    sub-tile belongs to the parent when its center falls inside that
    footprint. Attention-only rows (no image) are never sub-tiles.
    """
    if parent.level != 2:
        raise ManifestError(f"sub-tile lookup needs a level-2 parent, got level {parent.level}")
    x0, y0 = parent.x * 2, parent.y * 2
    x1, y1 = x0 + parent.w * 2, y0 + parent.h * 2
    out = []
    for tile in manifest.tiles(1):
        if tile.image_ref is None:
            continue
        cx, cy = tile.center()
        if x0 <= cx < x1 and y0 <= cy < y1:
            out.append(tile)
    return out


def global_image(manifest: SlideManifest, workdir: Optional[str | Path] = None) -> tuple[str, bool]:
    """Path to the level-3 overview image, synthesizing one if absent.

    Returns (path, synthesized). When the manifest has no level-3 image,
    the level-2 tile mosaic is assembled and downsampled by four into
    ``workdir`` (or alongside the manifest). Raises MissingLevelImage when
    neither a level-3 image nor level-2 tiles exist.
    """
    for tile in manifest.tiles(3):
        if tile.image_ref is not None:
            return tile.image_ref, False
    level2 = [t for t in manifest.tiles(2) if t.image_ref is not None]
    if not level2:
        raise MissingLevelImage(
            f"slide {manifest.slide_id}: no level-3 image and no level-2 tiles to compose one"
        )
    x1 = max(t.x + t.w for t in level2)
    y1 = max(t.y + t.h for t in level2)
    mosaic = Image.new("RGB", (x1, y1))
    for t in level2:
        with Image.open(t.image_ref) as img:
            mosaic.paste(img.convert("RGB").resize((t.w, t.h)), (t.x, t.y))
    composite = mosaic.resize((max(1, x1 // 4), max(1, y1 // 4)))
    out_dir = Path(workdir) if workdir is not None else manifest.root
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / f"{manifest.slide_id}_level3_synthetic.png"
    composite.save(out_path)
    return str(out_path), True
