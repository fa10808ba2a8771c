"""RAIF: a small binary container for per-patch feature grids.

Layout (all little-endian):

    bytes 0..3    magic "RAIF"
    bytes 4..5    version, u16 (currently 1)
    bytes 6..7    grid rows, u16
    bytes 8..9    grid cols, u16
    bytes 10..13  vector dim, u32
    bytes 14..    rows*cols*dim float32 values, patch-major (row-major
                  over the grid), dim values per patch

The container itself is agnostic about vector semantics; normalization
contracts (unit L2 for content descriptors, unit L1 for histograms) are
enforced by the callers in ``features``.

A file ``<name>.raif`` may carry an optional JSON sidecar named
``<name>.raif.json`` with fields ``image_id``, ``provider``, ``patch_size``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import BadMagicError, CorruptPayloadError, SchemaError, VersionMismatchError

MAGIC = b"RAIF"
VERSION = 1
_HEADER = struct.Struct("<4sHHHI")


@dataclass
class RaifBlob:
    """Decoded contents of one RAIF file."""

    rows: int
    cols: int
    vectors: np.ndarray  # (rows*cols, dim) float32

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def count(self) -> int:
        return self.rows * self.cols


@dataclass
class RaifSidecar:
    image_id: str
    provider: str
    patch_size: int


def write_raif(path: str | Path, vectors: np.ndarray, rows: int, cols: int) -> Path:
    """Write a (rows*cols, dim) float32 array as a RAIF file."""
    path = Path(path)
    vectors = np.ascontiguousarray(vectors, dtype=np.float32)
    if vectors.ndim != 2:
        raise ValueError(f"expected a 2-d vector array, got shape {vectors.shape}")
    if rows <= 0 or cols <= 0 or rows * cols != vectors.shape[0]:
        raise ValueError(
            f"grid {rows}x{cols} does not match {vectors.shape[0]} vectors"
        )
    if rows > 0xFFFF or cols > 0xFFFF or vectors.shape[1] > 0xFFFFFFFF:
        raise ValueError("grid or dim exceeds header field range")
    header = _HEADER.pack(MAGIC, VERSION, rows, cols, vectors.shape[1])
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(vectors.tobytes(order="C"))
    return path


def read_raif(path: str | Path) -> RaifBlob:
    """Read a RAIF file, validating magic, version, and payload length."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a RAIF file")
    if len(raw) < _HEADER.size:
        raise CorruptPayloadError(f"{path}: truncated header")
    _, version, rows, cols, dim = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {VERSION}")
    if rows == 0 or cols == 0 or dim == 0:
        raise CorruptPayloadError(f"{path}: degenerate grid {rows}x{cols}x{dim}")
    expected = rows * cols * dim * 4
    payload = raw[_HEADER.size :]
    if len(payload) != expected:
        raise CorruptPayloadError(
            f"{path}: payload holds {len(payload)} bytes, expected {expected}"
        )
    vectors = np.frombuffer(payload, dtype="<f4").reshape(rows * cols, dim)
    if not np.isfinite(vectors).all():
        raise CorruptPayloadError(f"{path}: non-finite values in payload")
    return RaifBlob(rows=rows, cols=cols, vectors=vectors.astype(np.float32))


def sidecar_path(raif_file: str | Path) -> Path:
    return Path(str(raif_file) + ".json")


def write_sidecar(raif_file: str | Path, sidecar: RaifSidecar) -> Path:
    path = sidecar_path(raif_file)
    doc = {
        "image_id": sidecar.image_id,
        "provider": sidecar.provider,
        "patch_size": sidecar.patch_size,
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def read_sidecar(raif_file: str | Path) -> Optional[RaifSidecar]:
    """Read the sidecar next to a RAIF file; None when absent."""
    path = sidecar_path(raif_file)
    if not path.is_file():
        return None
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: sidecar must be a JSON object")
    for key, kind in (("image_id", str), ("provider", str), ("patch_size", int)):
        if key not in doc or not isinstance(doc[key], kind):
            raise SchemaError(f"{path}: bad or missing field {key!r}")
    return RaifSidecar(
        image_id=doc["image_id"],
        provider=doc["provider"],
        patch_size=doc["patch_size"],
    )
