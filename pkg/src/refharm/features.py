"""Per-patch feature maps used by retrieval and attention guidance.

Two feature families are produced on a fixed patch grid (16 px patches on a
256 px working image give a 16x16 grid):

- content descriptors: what is depicted in a patch. Either the builtin
  48-dim gradient/color descriptor, or externally computed vectors loaded
  from RAIF files. Always unit L2 norm.
- appearance histograms: how a patch is lit and colored. A joint HSV
  histogram with 12 hue x 4 saturation x 4 value bins, unit L1 norm.

Patch ids are row-major over the grid: id = row * cols + col.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Protocol, runtime_checkable

import numpy as np

from .errors import (
    MissingFileError,
    NormalizationError,
    ProviderMismatchError,
    ShapeMismatchError,
    ZeroVectorError,
)
from .imgio import Image
from .raif import RaifSidecar, read_raif, read_sidecar, write_raif, write_sidecar

DEFAULT_PATCH_SIZE = 16
CONTENT_DIM = 48
APPEARANCE_BINS = (12, 4, 4)
APPEARANCE_DIM = 192
BUILTIN_TAG = "builtin-grad48-v1"


@dataclass(frozen=True)
class PatchGrid:
    """Non-overlapping square patch tiling of an image.

    Trailing pixels beyond the last full patch are ignored; at 256x256
    with 16 px patches there are none.
    """

    image_width: int
    image_height: int
    patch_size: int = DEFAULT_PATCH_SIZE

    def __post_init__(self) -> None:
        if self.patch_size <= 0:
            raise ValueError("patch_size must be positive")
        if self.rows * self.cols < 1:
            raise ValueError(
                f"image {self.image_width}x{self.image_height} holds no full "
                f"{self.patch_size} px patch"
            )

    @property
    def rows(self) -> int:
        return self.image_height // self.patch_size

    @property
    def cols(self) -> int:
        return self.image_width // self.patch_size

    @property
    def count(self) -> int:
        return self.rows * self.cols

    @classmethod
    def for_image(cls, img: Image, patch_size: int = DEFAULT_PATCH_SIZE) -> "PatchGrid":
        return cls(image_width=img.width, image_height=img.height, patch_size=patch_size)


def patchify(arr: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Group pixels by patch: (h, w[, c]) -> (count, patch_size**2[, c])."""
    ps = grid.patch_size
    h, w = grid.rows * ps, grid.cols * ps
    a = arr[:h, :w]
    if a.ndim == 2:
        return (
            a.reshape(grid.rows, ps, grid.cols, ps)
            .transpose(0, 2, 1, 3)
            .reshape(grid.count, ps * ps)
        )
    c = a.shape[2]
    return (
        a.reshape(grid.rows, ps, grid.cols, ps, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(grid.count, ps * ps, c)
    )


@dataclass
class HsvImage:
    """HSV pixels: H in [0, 360), S and V in [0, 1]; shape (h, w, 3)."""

    data: np.ndarray

    @property
    def hue(self) -> np.ndarray:
        return self.data[..., 0]

    @property
    def sat(self) -> np.ndarray:
        return self.data[..., 1]

    @property
    def val(self) -> np.ndarray:
        return self.data[..., 2]


def rgb_to_hsv(img: Image) -> HsvImage:
    """Hexcone RGB -> HSV; achromatic pixels get hue 0."""
    rgb = img.data.astype(np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    delta = v - rgb.min(axis=-1)
    chromatic = delta > 0
    safe_v = np.where(v > 0, v, 1.0)
    s = np.where(v > 0, delta / safe_v, 0.0)
    d = np.where(chromatic, delta, 1.0)
    h = np.select(
        [~chromatic, v == r, v == g],
        [np.zeros_like(v), (g - b) / d, (b - r) / d + 2.0],
        default=(r - g) / d + 4.0,
    )
    h = np.mod(h * 60.0, 360.0)
    return HsvImage(np.stack([h, s, v], axis=-1))


def hsv_to_rgb(hsv: HsvImage) -> Image:
    """Inverse hexcone conversion back to RGB in [0, 1]."""
    h, s, v = hsv.hue, hsv.sat, np.clip(hsv.val, 0.0, 1.0)
    hp = np.mod(h, 360.0) / 60.0
    c = v * np.clip(s, 0.0, 1.0)
    x = c * (1.0 - np.abs(np.mod(hp, 2.0) - 1.0))
    z = np.zeros_like(c)
    k = np.floor(hp).astype(np.intp) % 6
    sel = [k == 0, k == 1, k == 2, k == 3, k == 4]
    r = np.select(sel, [c, x, z, z, x], default=c)
    g = np.select(sel, [x, c, c, x, z], default=z)
    b = np.select(sel, [z, z, x, c, c], default=x)
    m = v - c
    return Image(np.clip(np.stack([r + m, g + m, b + m], axis=-1), 0.0, 1.0))


@dataclass
class ContentFeatureMap:
    """Unit-L2 content descriptor per patch, (count, dim) float32."""

    grid: PatchGrid
    vectors: np.ndarray
    provider_tag: str

    def __post_init__(self) -> None:
        vec = np.asarray(self.vectors, dtype=np.float32)
        if vec.ndim != 2 or vec.shape[0] != self.grid.count:
            raise ShapeMismatchError(
                f"expected ({self.grid.count}, dim) vectors, got {vec.shape}"
            )
        if not np.isfinite(vec).all():
            raise ValueError("content vectors must be finite")
        norms = np.linalg.norm(vec.astype(np.float64), axis=1)
        off = np.abs(norms - 1.0)
        if off.size and float(off.max()) > 1e-5:
            worst = int(off.argmax())
            raise NormalizationError(
                f"content vector {worst} has norm {norms[worst]:.6f}"
            )
        self.vectors = vec

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class AppearanceFeatureMap:
    """Unit-L1 joint HSV histogram per patch, (count, 192) float32."""

    grid: PatchGrid
    vectors: np.ndarray

    def __post_init__(self) -> None:
        vec = np.asarray(self.vectors, dtype=np.float32)
        if vec.ndim != 2 or vec.shape != (self.grid.count, APPEARANCE_DIM):
            raise ShapeMismatchError(
                f"expected ({self.grid.count}, {APPEARANCE_DIM}) histograms, "
                f"got {vec.shape}"
            )
        if vec.size and float(vec.min()) < 0.0:
            raise ValueError("histogram entries must be non-negative")
        sums = vec.astype(np.float64).sum(axis=1)
        off = np.abs(sums - 1.0)
        if off.size and float(off.max()) > 1e-6:
            worst = int(off.argmax())
            raise NormalizationError(
                f"histogram {worst} sums to {sums[worst]:.8f}"
            )
        self.vectors = vec


def appearance_bin_index(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Flat joint-bin index for HSV values; shape-preserving."""
    hb = np.minimum(np.floor(h / 30.0), APPEARANCE_BINS[0] - 1).astype(np.intp)
    sb = np.minimum(np.floor(s * 4.0), APPEARANCE_BINS[1] - 1).astype(np.intp)
    vb = np.minimum(np.floor(v * 4.0), APPEARANCE_BINS[2] - 1).astype(np.intp)
    return (hb * APPEARANCE_BINS[1] + sb) * APPEARANCE_BINS[2] + vb


def compute_appearance(img: Image, grid: PatchGrid) -> AppearanceFeatureMap:
    """Joint HSV histogram per patch, normalized by the patch pixel count."""
    _check_grid(img, grid)
    hsv = rgb_to_hsv(img)
    bins = appearance_bin_index(hsv.hue, hsv.sat, hsv.val)
    per_patch = patchify(bins, grid)
    flat = (np.arange(grid.count, dtype=np.intp)[:, None] * APPEARANCE_DIM + per_patch).ravel()
    counts = np.bincount(flat, minlength=grid.count * APPEARANCE_DIM)
    vectors = counts.reshape(grid.count, APPEARANCE_DIM).astype(np.float64)
    vectors /= grid.patch_size**2
    return AppearanceFeatureMap(grid=grid, vectors=vectors.astype(np.float32))


def _check_grid(img: Image, grid: PatchGrid) -> None:
    if (grid.image_height, grid.image_width) != (img.height, img.width):
        raise ShapeMismatchError(
            f"grid is for {grid.image_width}x{grid.image_height}, image is "
            f"{img.width}x{img.height}"
        )


def luminance(rgb: np.ndarray) -> np.ndarray:
    return 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]


def canonical_unit(dim: int) -> np.ndarray:
    e0 = np.zeros(dim, dtype=np.float64)
    e0[0] = 1.0
    return e0


def compute_builtin_content(img: Image, grid: PatchGrid) -> ContentFeatureMap:
    """Deterministic 48-dim content descriptor per patch.

    Layout per vector:
      [0:32]  2x2 subcells x 8 gradient-orientation bins. Central-difference
              luminance gradients; orientations folded to [0, pi); bins
              weighted by gradient magnitude and divided by the patch area.
      [32:40] 8-bin luminance histogram weighted by luminance mass (a flat
              black patch therefore contributes nothing), divided by area.
      [40:46] per-channel RGB mean and population standard deviation.
      [46:48] zero padding.

    Vectors are L2-normalized; an all-zero vector (perfectly flat black
    patch) becomes the canonical unit vector e_0.
    """
    _check_grid(img, grid)
    ps = grid.patch_size
    if ps % 2 != 0:
        raise ValueError("builtin descriptor needs an even patch size")
    hs = ps // 2
    rgb = img.data.astype(np.float64)
    lum = luminance(rgb)
    gy, gx = np.gradient(lum)
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), np.pi)
    obin = np.minimum(np.floor(theta / (np.pi / 8.0)), 7).astype(np.intp)

    h, w = grid.rows * ps, grid.cols * ps
    rr = np.arange(h, dtype=np.intp)[:, None]
    cc = np.arange(w, dtype=np.intp)[None, :]
    pid = (rr // ps) * grid.cols + cc // ps
    sub = ((rr % ps) // hs) * 2 + (cc % ps) // hs
    area = float(ps * ps)

    slot = (pid * 4 + sub) * 8 + obin[:h, :w]
    ohist = np.bincount(
        slot.ravel(), weights=mag[:h, :w].ravel(), minlength=grid.count * 32
    ).reshape(grid.count, 32) / area

    lum_c = lum[:h, :w]
    lbin = np.minimum(np.floor(lum_c * 8.0), 7).astype(np.intp)
    lslot = pid * 8 + lbin
    lhist = np.bincount(
        lslot.ravel(), weights=lum_c.ravel(), minlength=grid.count * 8
    ).reshape(grid.count, 8) / area

    px = patchify(rgb, grid)
    means = px.mean(axis=1)
    stds = px.std(axis=1)

    vec = np.concatenate(
        [ohist, lhist, means, stds, np.zeros((grid.count, 2))], axis=1
    )
    norms = np.linalg.norm(vec, axis=1)
    flat = norms < 1e-12
    safe = np.where(flat, 1.0, norms)
    vec = vec / safe[:, None]
    if flat.any():
        vec[flat] = canonical_unit(CONTENT_DIM)
    return ContentFeatureMap(
        grid=grid, vectors=vec.astype(np.float32), provider_tag=BUILTIN_TAG
    )


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity of two vectors, clamped to [-1, 1]."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ShapeMismatchError(f"vector dims differ: {u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise ZeroVectorError("cosine of a zero vector is undefined")
    return float(np.clip(np.dot(u / nu, v / nv), -1.0, 1.0))


def unit_rows(vectors: np.ndarray) -> np.ndarray:
    """Rows renormalized to unit L2 in float64; zero rows rejected."""
    v = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(v, axis=1)
    if v.shape[0] and float(norms.min()) == 0.0:
        raise ZeroVectorError("cannot renormalize a zero row")
    return v / norms[:, None]


def store_content_features(
    fmap: ContentFeatureMap, path: str | Path, image_id: Optional[str] = None
) -> Path:
    """Write a content map as RAIF (plus a sidecar when image_id is given)."""
    out = write_raif(path, fmap.vectors, fmap.grid.rows, fmap.grid.cols)
    if image_id is not None:
        write_sidecar(
            out,
            RaifSidecar(
                image_id=image_id,
                provider=fmap.provider_tag,
                patch_size=fmap.grid.patch_size,
            ),
        )
    return out


def load_content_features(
    path: str | Path, patch_size: Optional[int] = None
) -> ContentFeatureMap:
    """Load a RAIF content map, re-normalizing to unit L2.

    Norm drift up to 1e-3 is absorbed silently; rows already unit within
    1e-6 are left untouched so a store/load round trip is bit-identical.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(str(path))
    blob = read_raif(path)
    side = read_sidecar(path)
    ps = patch_size if patch_size is not None else (side.patch_size if side else DEFAULT_PATCH_SIZE)
    vec = blob.vectors.copy()
    norms = np.linalg.norm(vec.astype(np.float64), axis=1)
    off = np.abs(norms - 1.0)
    if off.size and float(off.max()) > 1e-3:
        worst = int(off.argmax())
        raise NormalizationError(
            f"{path}: vector {worst} has norm {norms[worst]:.6f}, "
            "beyond the 1e-3 tolerance"
        )
    drifted = off > 1e-6
    if drifted.any():
        fixed = vec[drifted].astype(np.float64) / norms[drifted, None]
        vec[drifted] = fixed.astype(np.float32)
    grid = PatchGrid(
        image_width=blob.cols * ps, image_height=blob.rows * ps, patch_size=ps
    )
    provider = side.provider if side else "file"
    return ContentFeatureMap(grid=grid, vectors=vec, provider_tag=provider)


def store_appearance_features(fmap: AppearanceFeatureMap, path: str | Path) -> Path:
    return write_raif(path, fmap.vectors, fmap.grid.rows, fmap.grid.cols)


def load_appearance_features(
    path: str | Path, patch_size: int = DEFAULT_PATCH_SIZE
) -> AppearanceFeatureMap:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(str(path))
    blob = read_raif(path)
    grid = PatchGrid(
        image_width=blob.cols * patch_size,
        image_height=blob.rows * patch_size,
        patch_size=patch_size,
    )
    return AppearanceFeatureMap(grid=grid, vectors=blob.vectors)


@runtime_checkable
class ContentProvider(Protocol):
    """Source of content descriptors; tag names the feature space."""

    @property
    def tag(self) -> str: ...

    def content(self, img: Image, grid: PatchGrid, image_id: str) -> ContentFeatureMap: ...


class BuiltinContentProvider:
    """The self-contained gradient/color descriptor; needs no model files."""

    @property
    def tag(self) -> str:
        return BUILTIN_TAG

    def content(self, img: Image, grid: PatchGrid, image_id: str) -> ContentFeatureMap:
        return compute_builtin_content(img, grid)


class FileContentProvider:
    """Serves per-image RAIF files named ``<image_id>.raif`` from a directory.

    The provider tag is adopted from the first sidecar seen (or can be fixed
    up front); files from a different provider are rejected.
    """

    def __init__(self, feature_dir: str | Path, tag: Optional[str] = None):
        self.feature_dir = Path(feature_dir)
        self._tag = tag

    @property
    def tag(self) -> str:
        return self._tag if self._tag is not None else "file"

    def content(self, img: Image, grid: PatchGrid, image_id: str) -> ContentFeatureMap:
        path = self.feature_dir / f"{image_id}.raif"
        fmap = load_content_features(path, patch_size=grid.patch_size)
        if (fmap.grid.rows, fmap.grid.cols) != (grid.rows, grid.cols):
            raise ShapeMismatchError(
                f"{path}: grid {fmap.grid.rows}x{fmap.grid.cols} does not match "
                f"the query grid {grid.rows}x{grid.cols}"
            )
        file_tag = fmap.provider_tag
        if self._tag is None:
            self._tag = file_tag
        elif file_tag not in (self._tag, "file"):
            raise ProviderMismatchError(
                f"{path}: provider {file_tag!r}, expected {self._tag!r}"
            )
        return replace(fmap, provider_tag=self.tag)
