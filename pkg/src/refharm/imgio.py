"""Image, mask, and dataset manifest I/O.

Canonical in-memory representation: RGB images are float32 arrays of shape
(height, width, 3) with values in [0, 1]; masks are uint8 arrays of shape
(height, width) with values in {0, 1}. Arrays are locked read-only after
construction so samples can be shared freely between threads.

Supported file formats: 8-bit RGB PNG and binary PPM (P6, maxval 255) for
images, 8-bit grayscale PNG for masks. Dataset manifests are JSON files,
see ``load_manifest``.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image as PilImage
from PIL import UnidentifiedImageError

from .errors import (
    BackgroundMismatchWarning,
    CorruptHeaderError,
    MissingFileError,
    SchemaError,
    ShapeMismatchError,
    UnsupportedFormatError,
)

WORKING_SIZE = 256


def _lock(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass
class Image:
    """RGB image with float values in [0, 1], shape (height, width, 3)."""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or data.shape[2] != 3:
            raise ShapeMismatchError(f"expected (h, w, 3) array, got {data.shape}")
        if data.size and (float(data.min()) < 0.0 or float(data.max()) > 1.0):
            raise ValueError("image values must lie in [0, 1]")
        self.data = _lock(data.copy() if data is self.data else data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def resized(self, height: int, width: int) -> "Image":
        return Image(resize_bilinear(self.data, height, width))


@dataclass
class ForegroundMask:
    """Binary foreground mask, shape (height, width), values in {0, 1}."""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ShapeMismatchError(f"expected (h, w) array, got {data.shape}")
        if data.dtype != np.uint8:
            data = (np.asarray(data, dtype=np.float64) > 0.5).astype(np.uint8)
        else:
            if data.size and not np.isin(data, (0, 1)).all():
                raise ValueError("mask values must be 0 or 1")
            data = data.copy()
        self.data = _lock(np.ascontiguousarray(data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def foreground_count(self) -> int:
        return int(self.data.sum())

    def resized(self, height: int, width: int) -> "ForegroundMask":
        soft = resize_bilinear(self.data.astype(np.float32), height, width)
        return ForegroundMask((soft >= 0.5).astype(np.uint8))


@dataclass
class CompositeSample:
    """A composite image, its foreground mask, and an optional target."""

    id: str
    composite: Image
    mask: ForegroundMask
    target: Optional[Image] = None

    def __post_init__(self) -> None:
        shape = (self.composite.height, self.composite.width)
        if (self.mask.height, self.mask.width) != shape:
            raise ShapeMismatchError("mask dimensions disagree with composite")
        if self.target is not None and (self.target.height, self.target.width) != shape:
            raise ShapeMismatchError("target dimensions disagree with composite")
        if self.mask.foreground_count == 0:
            raise ValueError(f"sample {self.id!r} has an empty foreground mask")
        if self.target is not None:
            bg = self.mask.data == 0
            if bg.any():
                diff = np.abs(self.composite.data[bg] - self.target.data[bg]).max()
                # Quantization through 8-bit files can introduce up to 1/255.
                if diff > 1.0 / 255.0 + 1e-6:
                    warnings.warn(
                        f"sample {self.id!r}: composite and target differ on "
                        f"background pixels by up to {diff:.4f}",
                        BackgroundMismatchWarning,
                        stacklevel=2,
                    )

    def resized(self, size: int) -> "CompositeSample":
        return CompositeSample(
            id=self.id,
            composite=self.composite.resized(size, size),
            mask=self.mask.resized(size, size),
            target=None if self.target is None else self.target.resized(size, size),
        )


@dataclass
class ManifestEntry:
    id: str
    composite_path: Path
    mask_path: Path
    target_path: Optional[Path] = None


@dataclass
class GalleryEntry:
    id: str
    image_path: Path


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry] = field(default_factory=list)
    gallery: list[GalleryEntry] = field(default_factory=list)


def resize_bilinear(data: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel-aligned sample centers."""
    in_h, in_w = data.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return data.copy()
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (in_w / out_w) - 0.5
    ys = np.clip(ys, 0.0, in_h - 1.0)
    xs = np.clip(xs, 0.0, in_w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    if data.ndim == 3:
        wy = wy[..., None]
        wx = wx[..., None]
    plane = data.astype(np.float64)
    top = plane[y0][:, x0] * (1 - wx) + plane[y0][:, x1] * wx
    bot = plane[y1][:, x0] * (1 - wx) + plane[y1][:, x1] * wx
    out = top * (1 - wy) + bot * wy
    return out.astype(np.float32)


def _read_ppm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if not raw.startswith(b"P6"):
        raise UnsupportedFormatError(f"{path}: not a binary PPM (P6) file")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CorruptHeaderError(f"{path}: truncated PPM header")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace byte terminating the header
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise CorruptHeaderError(f"{path}: non-numeric PPM header field") from exc
    if maxval != 255:
        raise UnsupportedFormatError(f"{path}: PPM maxval {maxval}, only 255 supported")
    if width <= 0 or height <= 0:
        raise CorruptHeaderError(f"{path}: bad PPM dimensions {width}x{height}")
    payload = raw[pos : pos + width * height * 3]
    if len(payload) < width * height * 3:
        raise CorruptHeaderError(f"{path}: PPM payload truncated")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)


def _open_png(path: Path) -> PilImage.Image:
    try:
        img = PilImage.open(path)
        img.load()
    except UnidentifiedImageError as exc:
        raise CorruptHeaderError(f"{path}: unrecognized image header") from exc
    except OSError as exc:
        raise CorruptHeaderError(f"{path}: {exc}") from exc
    return img


def load_image(path: str | Path) -> Image:
    """Load an 8-bit RGB image (PNG or PPM P6) as floats in [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    if path.suffix.lower() in (".ppm", ".pnm"):
        arr = _read_ppm(path)
    else:
        img = _open_png(path)
        if img.mode != "RGB":
            raise UnsupportedFormatError(
                f"{path}: mode {img.mode}, expected 8-bit RGB"
            )
        arr = np.asarray(img, dtype=np.uint8)
    return Image(arr.astype(np.float32) / 255.0)


def load_mask(path: str | Path) -> ForegroundMask:
    """Load an 8-bit grayscale mask, binarized at 0.5."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    img = _open_png(path)
    if img.mode not in ("L", "1"):
        raise UnsupportedFormatError(f"{path}: mode {img.mode}, expected 8-bit gray")
    arr = np.asarray(img.convert("L"), dtype=np.uint8)
    return ForegroundMask((arr >= 128).astype(np.uint8))


def quantize(data: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to bytes by half-up rounding, clamped to [0, 255]."""
    scaled = np.floor(data.astype(np.float64) * 255.0 + 0.5)
    return np.clip(scaled, 0, 255).astype(np.uint8)


def save_image(img: Image, path: str | Path) -> None:
    """Write an image as 8-bit RGB PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PilImage.fromarray(quantize(img.data), mode="RGB").save(path, format="PNG")


def save_mask(mask: ForegroundMask, path: str | Path) -> None:
    """Write a mask as 8-bit grayscale PNG (0 or 255)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PilImage.fromarray(mask.data * np.uint8(255), mode="L").save(path, format="PNG")


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise SchemaError(msg)


def load_manifest(path: str | Path) -> DatasetManifest:
    """Load and validate a dataset manifest.

    Schema::

        {
          "root": str,
          "entries": [{"id": str, "composite": str, "mask": str,
                       "target": str | null}],
          "gallery": [{"id": str, "image": str}]
        }

    Relative paths are resolved against ``root``, which itself is resolved
    against the manifest file's directory. Every referenced file must exist.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
    _require(isinstance(doc, dict), f"{path}: top level must be an object")
    for key in ("root", "entries", "gallery"):
        _require(key in doc, f"{path}: missing field {key!r}")
    root = Path(doc["root"])
    if not root.is_absolute():
        # Anchor to an absolute path so the manifest object stays valid
        # when re-serialized from a different working directory.
        root = (path.parent / root).resolve()
    _require(isinstance(doc["entries"], list), f"{path}: entries must be a list")
    _require(isinstance(doc["gallery"], list), f"{path}: gallery must be a list")

    def resolve(rel: str) -> Path:
        p = Path(rel)
        full = p if p.is_absolute() else root / p
        if not full.is_file():
            raise MissingFileError(str(full))
        return full

    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for row in doc["entries"]:
        _require(isinstance(row, dict), f"{path}: entry rows must be objects")
        for key in ("id", "composite", "mask"):
            _require(key in row, f"{path}: entry missing field {key!r}")
        sid = row["id"]
        _require(isinstance(sid, str) and sid, f"{path}: entry id must be a string")
        _require(sid not in seen, f"{path}: duplicate entry id {sid!r}")
        seen.add(sid)
        target = row.get("target")
        entries.append(
            ManifestEntry(
                id=sid,
                composite_path=resolve(row["composite"]),
                mask_path=resolve(row["mask"]),
                target_path=None if target is None else resolve(target),
            )
        )

    gallery: list[GalleryEntry] = []
    seen_gallery: set[str] = set()
    for row in doc["gallery"]:
        _require(isinstance(row, dict), f"{path}: gallery rows must be objects")
        for key in ("id", "image"):
            _require(key in row, f"{path}: gallery entry missing field {key!r}")
        gid = row["id"]
        _require(isinstance(gid, str) and gid, f"{path}: gallery id must be a string")
        _require(gid not in seen_gallery, f"{path}: duplicate gallery id {gid!r}")
        seen_gallery.add(gid)
        gallery.append(GalleryEntry(id=gid, image_path=resolve(row["image"])))

    return DatasetManifest(root=root, entries=entries, gallery=gallery)


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write a manifest as JSON with paths relative to its root."""
    path = Path(path)

    def rel(p: Optional[Path]) -> Optional[str]:
        if p is None:
            return None
        try:
            return os.path.relpath(p, manifest.root)
        except ValueError:
            return str(p)

    doc = {
        "root": str(manifest.root),
        "entries": [
            {
                "id": e.id,
                "composite": rel(e.composite_path),
                "mask": rel(e.mask_path),
                "target": rel(e.target_path),
            }
            for e in manifest.entries
        ],
        "gallery": [{"id": g.id, "image": rel(g.image_path)} for g in manifest.gallery],
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_sample(entry: ManifestEntry) -> CompositeSample:
    """Load the images referenced by a manifest entry into a sample."""
    return CompositeSample(
        id=entry.id,
        composite=load_image(entry.composite_path),
        mask=load_mask(entry.mask_path),
        target=None if entry.target_path is None else load_image(entry.target_path),
    )
