"""Binary embedding sidecar files.

Layout: one UTF-8 JSON header line terminated by a newline, then
row-major little-endian float32 data. The header always carries ``dim``
and ``count``; writers may add ``ids`` (row ownership) and ``sha256``
(checksum of the raw float bytes) for integrity checking.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from .types import PipelineError


class SidecarError(PipelineError):
    pass


class CorruptSidecar(SidecarError):
    """Header does not match the payload (size or checksum)."""


def write_sidecar(
    path: str | Path,
    matrix: np.ndarray,
    *,
    ids: Optional[Sequence[str]] = None,
    with_sha: bool = False,
) -> None:
    """Write a 2-D float matrix with its JSON header line.

    Args:
        path: destination file.
        matrix: shape (count, dim); converted to little-endian float32.
        ids: optional row identifiers, recorded in the header.
        with_sha: record a sha256 of the raw float bytes.
    """
    arr = np.asarray(matrix, dtype="<f4")
    if arr.ndim != 2:
        raise SidecarError(f"matrix must be 2-D, got shape {arr.shape}")
    count, dim = arr.shape
    if ids is not None and len(ids) != count:
        raise SidecarError(f"{len(ids)} ids for {count} rows")
    payload = arr.tobytes(order="C")
    header: dict[str, Any] = {"dim": dim, "count": count}
    if ids is not None:
        header["ids"] = list(ids)
    if with_sha:
        header["sha256"] = hashlib.sha256(payload).hexdigest()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        fh.write(payload)


def read_sidecar(path: str | Path) -> tuple[np.ndarray, dict[str, Any]]:
    """Read a sidecar file back as (float32 matrix, header dict).

    Raises CorruptSidecar when the payload size disagrees with the header
    or a recorded checksum does not match.
    """
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptSidecar(f"{path}: unreadable header: {exc}") from exc
    for key in ("dim", "count"):
        if key not in header:
            raise CorruptSidecar(f"{path}: header missing {key!r}")
    dim, count = int(header["dim"]), int(header["count"])
    expected_bytes = dim * count * 4
    if len(payload) != expected_bytes:
        raise CorruptSidecar(
            f"{path}: payload has {len(payload)} bytes, header implies {expected_bytes}"
        )
    if "sha256" in header:
        digest = hashlib.sha256(payload).hexdigest()
        if digest != header["sha256"]:
            raise CorruptSidecar(f"{path}: checksum mismatch")
    if "ids" in header and len(header["ids"]) != count:
        raise CorruptSidecar(f"{path}: {len(header['ids'])} ids for {count} rows")
    matrix = np.frombuffer(payload, dtype="<f4").reshape(count, dim)
    return matrix.astype(np.float32), header


def append_row(path: str | Path, row: np.ndarray, row_id: Optional[str] = None) -> None:
    """Append one row to an existing sidecar, rewriting the header.

    The file is rewritten in place via a temporary sibling so a crash
    leaves either the old or the new state, never a torn file.
    """
    p = Path(path)
    row = np.asarray(row, dtype="<f4").reshape(1, -1)
    if p.exists():
        matrix, header = read_sidecar(p)
        if matrix.shape[0] and matrix.shape[1] != row.shape[1]:
            raise SidecarError(
                f"row dim {row.shape[1]} != sidecar dim {matrix.shape[1]}"
            )
        matrix = np.vstack([matrix, row]) if matrix.size else row
        ids = header.get("ids")
        if ids is not None:
            if row_id is None:
                raise SidecarError("sidecar tracks ids; row_id required")
            ids = list(ids) + [row_id]
        with_sha = "sha256" in header
    else:
        matrix = row
        ids = [row_id] if row_id is not None else None
        with_sha = True
    tmp = p.with_suffix(p.suffix + ".tmp")
    write_sidecar(tmp, matrix, ids=ids, with_sha=with_sha)
    tmp.replace(p)
