"""Feature export: decode, grid, describe, and write RAIF files.

Output files use the RAIF interchange layout (little-endian):
magic "RAIF", version u16, grid rows u16, grid cols u16, vector dim
u32, then rows*cols*dim float32 values in grid row-major order. A JSON
sidecar `<name>.raif.json` records image_id, provider, and patch_size.
Both files are written through a temp-then-rename step so a crashed or
interrupted export never leaves a half-written file behind.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PilImage, UnidentifiedImageError

from .errors import ImageLoadError, WriteError
from .models import load_model

RAIF_MAGIC = b"RAIF"
RAIF_VERSION = 1
_HEADER = struct.Struct("<4sHHHI")


@dataclass
class ExportJob:
    image_paths: list[Path]
    out_dir: Path
    model_name: str
    patch_size: int = 16
    resize: int = 256

    def __post_init__(self) -> None:
        self.image_paths = [Path(p) for p in self.image_paths]
        self.out_dir = Path(self.out_dir)
        if self.patch_size < 1:
            raise ValueError("patch_size must be positive")
        if self.resize < self.patch_size:
            raise ValueError("resize must be at least one patch")
        if self.resize % self.patch_size != 0:
            raise ValueError("resize must be a multiple of patch_size")

    @property
    def grid_side(self) -> int:
        return self.resize // self.patch_size


def load_rgb(path: str | Path, size: int) -> np.ndarray:
    """Decode an image to a (size, size, 3) float32 array in [0, 1]."""
    try:
        with PilImage.open(path) as img:
            rgb = img.convert("RGB")
            # skip resampling at native size so pixels survive bit-exact
            if rgb.size != (size, size):
                rgb = rgb.resize((size, size), PilImage.BILINEAR)
            data = np.asarray(rgb, dtype=np.float32)
    except (FileNotFoundError, UnidentifiedImageError, OSError, ValueError) as exc:
        raise ImageLoadError(f"cannot load image {path}: {exc}") from exc
    return data / 255.0


def _patch_blocks(data: np.ndarray, patch_size: int) -> np.ndarray:
    side = data.shape[0] // patch_size
    trimmed = data[: side * patch_size, : side * patch_size]
    blocks = trimmed.reshape(side, patch_size, side, patch_size, 3)
    return blocks.transpose(0, 2, 1, 3, 4).reshape(-1, patch_size, patch_size, 3)


def unit_rows(vectors: np.ndarray) -> np.ndarray:
    """L2-normalize rows; an all-zero descriptor becomes the first basis
    vector so every exported row has unit norm."""
    out = np.asarray(vectors, dtype=np.float64).copy()
    norms = np.linalg.norm(out, axis=1)
    zero = norms <= 1e-12
    out[zero] = 0.0
    out[zero, 0] = 1.0
    norms[zero] = 1.0
    return out / norms[:, None]


def encode_raif(vectors: np.ndarray, rows: int, cols: int) -> bytes:
    vectors = np.ascontiguousarray(vectors, dtype=np.float32)
    if vectors.ndim != 2 or vectors.shape[0] != rows * cols:
        raise ValueError(
            f"grid {rows}x{cols} does not match {vectors.shape} vectors"
        )
    header = _HEADER.pack(RAIF_MAGIC, RAIF_VERSION, rows, cols, vectors.shape[1])
    return header + vectors.tobytes(order="C")


def atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + f".tmp-{os.getpid()}")
    try:
        tmp.write_bytes(payload)
        os.replace(tmp, path)
    except OSError as exc:
        try:
            tmp.unlink()
        except OSError:
            pass
        raise WriteError(f"cannot write {path}: {exc}") from exc


@dataclass
class ExportResult:
    raif_paths: list[Path] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.raif_paths)


def export_features(job: ExportJob) -> ExportResult:
    """Export one RAIF grid plus sidecar per input image.

    Descriptors are computed per patch, L2-normalized, and stored as
    float32. The output is a deterministic function of the input bytes
    and the job settings, so re-export reproduces files byte for byte.
    """
    model = load_model(job.model_name)
    try:
        job.out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise WriteError(f"cannot create output directory {job.out_dir}: {exc}") from exc

    result = ExportResult()
    side = job.grid_side
    for path in job.image_paths:
        data = load_rgb(path, job.resize)
        feats = model(_patch_blocks(data, job.patch_size))
        vectors = unit_rows(feats).astype(np.float32)
        raif_path = job.out_dir / f"{path.stem}.raif"
        atomic_write(raif_path, encode_raif(vectors, side, side))
        sidecar = {
            "image_id": path.stem,
            "patch_size": job.patch_size,
            "provider": job.model_name,
        }
        payload = (json.dumps(sidecar, indent=2, sort_keys=True) + "\n").encode()
        atomic_write(raif_path.with_name(raif_path.name + ".json"), payload)
        result.raif_paths.append(raif_path)
    return result
