"""Deterministic reference augmentation and training-mix assembly.

Augmented references are crops of a sample's target image that always
contain the foreground bounding box, optionally mirrored, then resized to
the working resolution. All randomness is counter-based: a draw is fully
determined by (config seed, image content, draw index), so augmentation
can run in parallel or out of order and still reproduce bit-identically.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import EmptyForegroundError, SchemaError, ShapeMismatchError
from .imgio import (
    DatasetManifest,
    ForegroundMask,
    Image,
    load_sample,
    resize_bilinear,
)
from .retrieval import (
    ContentProvider,
    GalleryIndex,
    RetrievalConfig,
    SimilarityCache,
    retrieve,
)
from .util import key_digest, seeded_generator

MODES = ("non_reference", "retrieved", "augmented")


@dataclass
class AugmentConfig:
    seed: int = 0
    flip_prob: float = 0.5
    min_crop_frac: float = 0.6
    out_size: int = 256

    def __post_init__(self) -> None:
        if not (0.0 < self.min_crop_frac <= 1.0):
            raise ValueError("min_crop_frac must lie in (0, 1]")
        if not (0.0 <= self.flip_prob <= 1.0):
            raise ValueError("flip_prob must lie in [0, 1]")
        if self.out_size < 1:
            raise ValueError("out_size must be positive")


@dataclass
class AugmentResult:
    image: Image
    window: tuple[int, int, int, int]  # x0, y0, width, height of the crop
    flipped: bool
    degenerate: bool  # True when no square window could contain the bbox


def foreground_bbox(mask: ForegroundMask) -> tuple[int, int, int, int]:
    """Inclusive (row0, row1, col0, col1) bounds of the foreground."""
    rows = np.flatnonzero(mask.data.any(axis=1))
    cols = np.flatnonzero(mask.data.any(axis=0))
    if rows.size == 0:
        raise EmptyForegroundError("mask has no foreground pixel")
    return int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])


def _window_distribution(
    width: int, height: int, bbox: tuple[int, int, int, int], min_side: int
) -> tuple[list[tuple[int, int, int]], int]:
    """Valid square windows grouped by side length.

    Returns ([(side, nx, ny), ...], total_count) where nx and ny count the
    admissible x0 and y0 positions for that side.
    """
    r0, r1, c0, c1 = bbox
    smax = min(width, height)
    groups: list[tuple[int, int, int]] = []
    total = 0
    for side in range(min_side, smax + 1):
        x_lo, x_hi = max(0, c1 - side + 1), min(c0, width - side)
        y_lo, y_hi = max(0, r1 - side + 1), min(r0, height - side)
        nx, ny = x_hi - x_lo + 1, y_hi - y_lo + 1
        if nx <= 0 or ny <= 0:
            continue
        groups.append((side, nx, ny))
        total += nx * ny
    return groups, total


def source_digest(target: Image, mask: ForegroundMask) -> bytes:
    """Digest identifying one (target, mask) pair in the draw keying.

    Callers looping over many draw indices can compute this once and hand
    it to draw_window to avoid re-hashing the pixels every draw.
    """
    return key_digest(
        "augment-src", target.data.shape, target.data.tobytes(), mask.data.tobytes()
    )


def draw_window(
    target: Image,
    mask: ForegroundMask,
    cfg: AugmentConfig,
    draw_index: int,
    src_digest: Optional[bytes] = None,
) -> tuple[tuple[int, int, int, int], bool, bool]:
    """Draw only the (window, flipped, degenerate) triple for one index.

    The crop window is exactly uniform over all integer squares that
    contain the foreground bounding box and respect the minimum side. When
    the bounding box is too elongated for any such square, the full image
    is used instead and the draw is flagged degenerate.
    """
    if (target.height, target.width) != (mask.height, mask.width):
        raise ShapeMismatchError("target and mask dimensions disagree")
    bbox = foreground_bbox(mask)
    r0, r1, c0, c1 = bbox
    w, h = target.width, target.height
    min_side = max(
        int(np.ceil(cfg.min_crop_frac * min(w, h))), r1 - r0 + 1, c1 - c0 + 1
    )
    if src_digest is None:
        src_digest = source_digest(target, mask)
    rng = seeded_generator("augment", cfg.seed, src_digest, draw_index)
    degenerate = min_side > min(w, h)
    if degenerate:
        window = (0, 0, w, h)
    else:
        groups, total = _window_distribution(w, h, bbox, min_side)
        pick = int(rng.integers(total))
        for side, nx, ny in groups:
            block = nx * ny
            if pick < block:
                iy, ix = divmod(pick, nx)
                x0 = max(0, c1 - side + 1) + ix
                y0 = max(0, r1 - side + 1) + iy
                window = (x0, y0, side, side)
                break
            pick -= block
    flipped = bool(rng.random() < cfg.flip_prob)
    return window, flipped, degenerate


def augment_reference(
    target: Image, mask: ForegroundMask, cfg: AugmentConfig, draw_index: int
) -> AugmentResult:
    """One deterministic crop/flip/resize draw from a target image."""
    window, flipped, degenerate = draw_window(target, mask, cfg, draw_index)
    x0, y0, ww, wh = window
    crop = target.data[y0 : y0 + wh, x0 : x0 + ww]
    if flipped:
        crop = crop[:, ::-1]
    out = resize_bilinear(np.ascontiguousarray(crop), cfg.out_size, cfg.out_size)
    return AugmentResult(
        image=Image(out), window=window, flipped=flipped, degenerate=degenerate
    )


@dataclass
class TrainingEntry:
    sample_id: str
    mode: str
    reference: Optional[str]  # gallery id or source image path, None for non_reference
    fallback: bool = False


@dataclass
class TrainingManifest:
    mix_seed: int
    entries: list[TrainingEntry] = field(default_factory=list)

    def mode_counts(self) -> dict[str, int]:
        counts = {mode: 0 for mode in MODES}
        for entry in self.entries:
            counts[entry.mode] += 1
        return counts

    def to_json(self) -> str:
        doc = {
            "mix_seed": self.mix_seed,
            "entries": [
                {
                    "sample": e.sample_id,
                    "mode": e.mode,
                    "reference": e.reference,
                    "fallback": e.fallback,
                }
                for e in self.entries
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "TrainingManifest":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
        entries = []
        for row in doc.get("entries", []):
            if row.get("mode") not in MODES:
                raise SchemaError(f"{path}: unknown mode {row.get('mode')!r}")
            entries.append(
                TrainingEntry(
                    sample_id=row["sample"],
                    mode=row["mode"],
                    reference=row.get("reference"),
                    fallback=bool(row.get("fallback", False)),
                )
            )
        return cls(mix_seed=int(doc.get("mix_seed", 0)), entries=entries)


def build_training_manifest(
    dataset: DatasetManifest,
    index: GalleryIndex,
    retrieval_cfg: Optional[RetrievalConfig] = None,
    aug_cfg: Optional[AugmentConfig] = None,
    p_nonref: float = 0.5,
    p_retrieved_given_ref: float = 0.5,
    provider: Optional[ContentProvider] = None,
    cache: Optional[SimilarityCache] = None,
) -> TrainingManifest:
    """Assign each sample a training mode and, when referenced, a reference.

    Modes are drawn per sample: non_reference with probability p_nonref,
    otherwise retrieved with probability p_retrieved_given_ref, else
    augmented. A sample drawn `retrieved` whose retrieval comes back empty
    falls back to `augmented` (flagged); one without a target image falls
    back to `non_reference`. Deterministic given (dataset, index, seeds).
    """
    retrieval_cfg = retrieval_cfg or RetrievalConfig()
    aug_cfg = aug_cfg or AugmentConfig()
    if not (0.0 <= p_nonref <= 1.0 and 0.0 <= p_retrieved_given_ref <= 1.0):
        raise ValueError("mode probabilities must lie in [0, 1]")
    cache = cache or SimilarityCache()
    entries: list[TrainingEntry] = []
    for row in dataset.entries:
        rng = seeded_generator("trainmix", aug_cfg.seed, row.id)
        if rng.random() < p_nonref:
            entries.append(TrainingEntry(row.id, "non_reference", None))
            continue
        want_retrieved = rng.random() < p_retrieved_given_ref
        if want_retrieved:
            sample = load_sample(row)
            results = retrieve(sample, index, retrieval_cfg, provider, cache)
            if results:
                pick = results[int(rng.integers(len(results)))]
                entries.append(TrainingEntry(row.id, "retrieved", pick.reference_id))
                continue
            # Empty retrieval: fall through to augmentation, flagged.
        if row.target_path is None:
            entries.append(
                TrainingEntry(row.id, "non_reference", None, fallback=True)
            )
        else:
            entries.append(
                TrainingEntry(
                    row.id,
                    "augmented",
                    str(row.target_path),
                    fallback=want_retrieved,
                )
            )
    return TrainingManifest(mix_seed=aug_cfg.seed, entries=entries)
