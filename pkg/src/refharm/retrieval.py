"""Two-stage reference retrieval over a persisted gallery index.

Stage one keeps gallery images that share content with the query's
foreground: some (foreground patch, gallery patch) pair must reach the
content cosine threshold. Stage two keeps, among those, images lit like the
query's background: some (background patch, gallery patch) pair must clear
the content threshold and the appearance-histogram threshold at once.
Survivors are ranked by how much background support they have.

All similarities are cosines computed in float64 on renormalized rows.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import (
    DimMismatchError,
    EmptyForegroundError,
    ProviderMismatchError,
    SchemaError,
    ShapeMismatchError,
    VersionMismatchError,
)
from .features import (
    AppearanceFeatureMap,
    BuiltinContentProvider,
    ContentFeatureMap,
    ContentProvider,
    PatchGrid,
    compute_appearance,
    load_appearance_features,
    load_content_features,
    patchify,
    store_appearance_features,
    store_content_features,
)
from .imgio import CompositeSample, DatasetManifest, ForegroundMask, WORKING_SIZE, load_image
from .util import key_digest

INDEX_VERSION = 1


@dataclass
class RetrievalConfig:
    eps_c: float = 0.7
    eps_a: float = 0.9
    tau_f: float = 0.5
    k_min_content: int = 1
    k_min_illum: int = 1
    max_results: int = 10
    use_prefilter: bool = False

    def __post_init__(self) -> None:
        if not (0.0 < self.eps_c <= 1.0 and 0.0 < self.eps_a <= 1.0):
            raise ValueError("eps_c and eps_a must lie in (0, 1]")
        if not (0.0 < self.tau_f <= 1.0):
            raise ValueError("tau_f must lie in (0, 1]")
        if self.k_min_content < 1 or self.k_min_illum < 1 or self.max_results < 1:
            raise ValueError("pair counts and max_results must be positive")


@dataclass
class IndexEntry:
    id: str
    content: ContentFeatureMap
    appearance: AppearanceFeatureMap
    image_path: Path


@dataclass
class GalleryIndex:
    provider_tag: str
    patch_size: int
    entries: list[IndexEntry] = field(default_factory=list)

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for entry in self.entries:
            if entry.id in seen:
                raise SchemaError(f"duplicate gallery id {entry.id!r}")
            seen.add(entry.id)
            if entry.content.dim != self.dim:
                raise DimMismatchError(
                    f"entry {entry.id!r} has dim {entry.content.dim}, "
                    f"index dim is {self.dim}"
                )
            if entry.content.grid.count != self.entries[0].content.grid.count:
                raise ShapeMismatchError(
                    f"entry {entry.id!r} grid disagrees with the index grid"
                )

    @property
    def dim(self) -> int:
        return self.entries[0].content.dim if self.entries else 0

    def entry_by_id(self, entry_id: str) -> IndexEntry:
        for entry in self.entries:
            if entry.id == entry_id:
                return entry
        raise KeyError(entry_id)


@dataclass
class CandidateMatch:
    """Content-stage survivor: pairs is (n, 3) [query patch, ref patch, sim]."""

    entry_id: str
    pairs: np.ndarray
    score: float

    @property
    def pair_count(self) -> int:
        return self.pairs.shape[0]


@dataclass
class IllumMatch:
    """Illumination-stage survivor: pairs is (n, 4)
    [bg patch, ref patch, content sim, appearance sim]."""

    entry_id: str
    pairs: np.ndarray
    score: float

    @property
    def pair_count(self) -> int:
        return self.pairs.shape[0]


@dataclass
class RetrievalResult:
    reference_id: str
    score_content: float
    score_illum: float
    matched_pairs_content: np.ndarray
    matched_pairs_illum: np.ndarray

    @property
    def illum_pair_count(self) -> int:
        return self.matched_pairs_illum.shape[0]


@dataclass
class RetrievalOutcome:
    """Both stage outputs plus the final ranking, for auditing."""

    g_sc: dict[str, CandidateMatch]
    g_sc_ci: dict[str, IllumMatch]
    ranked: list[RetrievalResult]


@dataclass
class QueryFeatures:
    sample_id: str
    digest: bytes
    grid: PatchGrid
    content: ContentFeatureMap
    appearance: AppearanceFeatureMap
    coverage: np.ndarray  # per-patch foreground pixel fraction

    def foreground_ids(self, tau_f: float) -> np.ndarray:
        ids = np.flatnonzero(self.coverage >= tau_f)
        if ids.size == 0:
            raise EmptyForegroundError(
                f"sample {self.sample_id!r}: no patch reaches foreground "
                f"coverage {tau_f}"
            )
        return ids

    def background_ids(self, tau_f: float) -> np.ndarray:
        return np.flatnonzero(self.coverage < tau_f)


def foreground_patches(mask: ForegroundMask, grid: PatchGrid, tau_f: float) -> frozenset[int]:
    """Patches whose foreground pixel fraction reaches tau_f."""
    if (grid.image_height, grid.image_width) != (mask.height, mask.width):
        raise ShapeMismatchError("mask dimensions disagree with the patch grid")
    cov = patch_coverage(mask, grid)
    ids = np.flatnonzero(cov >= tau_f)
    if ids.size == 0:
        raise EmptyForegroundError("no patch reaches the foreground coverage threshold")
    return frozenset(int(i) for i in ids)


def patch_coverage(mask: ForegroundMask, grid: PatchGrid) -> np.ndarray:
    per_patch = patchify(mask.data.astype(np.float64), grid)
    return per_patch.mean(axis=1)


def sample_digest(sample: CompositeSample) -> bytes:
    parts: list[object] = [
        "sample",
        sample.composite.data.shape,
        sample.composite.data.tobytes(),
        sample.mask.data.tobytes(),
    ]
    return key_digest(*parts)


def _unit_rows64(vectors: np.ndarray) -> np.ndarray:
    v = vectors.astype(np.float64)
    norms = np.linalg.norm(v, axis=1)
    return v / norms[:, None]


def similarity_matrix(query_map: np.ndarray, entry_map: np.ndarray) -> np.ndarray:
    """All-pairs cosine matrix between two row sets, clamped to [-1, 1]."""
    return np.clip(_unit_rows64(query_map) @ _unit_rows64(entry_map).T, -1.0, 1.0)


class SimilarityCache:
    """Memoizes per-(sample, gallery entry) similarity matrices and query
    feature maps. Similarities do not depend on thresholds, so one cache
    serves any number of RetrievalConfig settings. Thread-safe.

    Matrices are computed over the distinct rows of each map and expanded
    back, which collapses the work dramatically for images with repeated
    patches; the expanded values are the same cosines either way.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._queries: dict = {}
        self._sims: dict = {}
        self._distinct: dict = {}

    def query_features(
        self,
        sample: CompositeSample,
        patch_size: int,
        provider: ContentProvider,
    ) -> QueryFeatures:
        digest = sample_digest(sample)
        key = (digest, patch_size, provider.tag)
        with self._lock:
            cached = self._queries.get(key)
        if cached is not None:
            return cached
        query = _compute_query(sample, patch_size, provider, digest)
        with self._lock:
            self._queries.setdefault(key, query)
        return query

    def _distinct_rows(self, key, vectors: np.ndarray):
        with self._lock:
            cached = self._distinct.get(key)
        if cached is not None:
            return cached
        values, inverse = np.unique(vectors, axis=0, return_inverse=True)
        with self._lock:
            return self._distinct.setdefault(key, (values, inverse.ravel()))

    def sim_pair(
        self, query: QueryFeatures, entry: IndexEntry
    ) -> tuple[np.ndarray, np.ndarray]:
        key = (query.digest, entry.id, id(entry))
        with self._lock:
            cached = self._sims.get(key)
        if cached is not None:
            return cached
        qc, qc_inv = self._distinct_rows((query.digest, "c"), query.content.vectors)
        qa, qa_inv = self._distinct_rows((query.digest, "a"), query.appearance.vectors)
        ec, ec_inv = self._distinct_rows((entry.id, id(entry), "c"), entry.content.vectors)
        ea, ea_inv = self._distinct_rows((entry.id, id(entry), "a"), entry.appearance.vectors)
        sims = (
            similarity_matrix(qc, ec)[np.ix_(qc_inv, ec_inv)],
            similarity_matrix(qa, ea)[np.ix_(qa_inv, ea_inv)],
        )
        with self._lock:
            return self._sims.setdefault(key, sims)


def _compute_query(
    sample: CompositeSample,
    patch_size: int,
    provider: ContentProvider,
    digest: Optional[bytes] = None,
) -> QueryFeatures:
    working = sample
    if (sample.composite.height, sample.composite.width) != (WORKING_SIZE, WORKING_SIZE):
        working = sample.resized(WORKING_SIZE)
    grid = PatchGrid.for_image(working.composite, patch_size)
    content = provider.content(working.composite, grid, sample.id)
    appearance = compute_appearance(working.composite, grid)
    return QueryFeatures(
        sample_id=sample.id,
        digest=digest if digest is not None else sample_digest(sample),
        grid=grid,
        content=content,
        appearance=appearance,
        coverage=patch_coverage(working.mask, grid),
    )


def prepare_query(
    sample: CompositeSample,
    patch_size: int = 16,
    provider: Optional[ContentProvider] = None,
) -> QueryFeatures:
    return _compute_query(sample, patch_size, provider or BuiltinContentProvider())


def _pairs_from_mask(
    passing: np.ndarray, sims: Sequence[np.ndarray], row_ids: np.ndarray
) -> np.ndarray:
    """Collect (row id, col, sim...) rows for every True cell of `passing`."""
    where = np.argwhere(passing)
    cols = [row_ids[where[:, 0]], where[:, 1]]
    cols.extend(s[passing] for s in sims)
    return np.stack([c.astype(np.float64) for c in cols], axis=1)


def content_filter(
    query_content: np.ndarray,
    index: GalleryIndex,
    cfg: RetrievalConfig,
    patch_ids: Optional[np.ndarray] = None,
) -> dict[str, CandidateMatch]:
    """Stage one: gallery entries sharing foreground content with the query.

    `query_content` holds the foreground patch descriptors, one per row;
    `patch_ids` labels the rows (defaults to 0..n-1).
    """
    query_content = np.asarray(query_content)
    if index.entries and query_content.shape[1] != index.dim:
        raise ProviderMismatchError(
            f"query dim {query_content.shape[1]} does not match index dim {index.dim}"
        )
    ids = (
        np.arange(query_content.shape[0])
        if patch_ids is None
        else np.asarray(patch_ids)
    )
    survivors: dict[str, CandidateMatch] = {}
    for entry in index.entries:
        sims = similarity_matrix(query_content, entry.content.vectors)
        match = _content_match(entry.id, sims, ids, cfg)
        if match is not None:
            survivors[entry.id] = match
    return survivors


def _content_match(
    entry_id: str, sims: np.ndarray, row_ids: np.ndarray, cfg: RetrievalConfig
) -> Optional[CandidateMatch]:
    passing = sims >= cfg.eps_c
    count = int(passing.sum())
    if count < cfg.k_min_content:
        return None
    pairs = _pairs_from_mask(passing, [sims], row_ids)
    return CandidateMatch(entry_id=entry_id, pairs=pairs, score=float(sims.max()))


def illumination_filter(
    query_bg_content: np.ndarray,
    query_bg_appearance: np.ndarray,
    candidates: Iterable[str],
    index: GalleryIndex,
    cfg: RetrievalConfig,
    patch_ids: Optional[np.ndarray] = None,
) -> dict[str, IllumMatch]:
    """Stage two: keep candidates with a background patch pair that agrees
    in content and in appearance at the same time."""
    query_bg_content = np.asarray(query_bg_content)
    query_bg_appearance = np.asarray(query_bg_appearance)
    ids = (
        np.arange(query_bg_content.shape[0])
        if patch_ids is None
        else np.asarray(patch_ids)
    )
    survivors: dict[str, IllumMatch] = {}
    for entry_id in candidates:
        entry = index.entry_by_id(entry_id)
        if query_bg_content.shape[0] == 0:
            continue
        sims_c = similarity_matrix(query_bg_content, entry.content.vectors)
        sims_a = similarity_matrix(query_bg_appearance, entry.appearance.vectors)
        match = _illum_match(entry_id, sims_c, sims_a, ids, cfg)
        if match is not None:
            survivors[entry_id] = match
    return survivors


def _illum_match(
    entry_id: str,
    sims_c: np.ndarray,
    sims_a: np.ndarray,
    row_ids: np.ndarray,
    cfg: RetrievalConfig,
) -> Optional[IllumMatch]:
    passing = (sims_c >= cfg.eps_c) & (sims_a >= cfg.eps_a)
    count = int(passing.sum())
    if count < cfg.k_min_illum:
        return None
    pairs = _pairs_from_mask(passing, [sims_c, sims_a], row_ids)
    return IllumMatch(
        entry_id=entry_id, pairs=pairs, score=float(sims_a[passing].max())
    )


def _prefilter_skips(
    fg_vectors: np.ndarray, index: GalleryIndex, cfg: RetrievalConfig
) -> set[str]:
    """Entries provably unable to reach eps_c on any pair.

    Uses a center-plus-radius bound: for unit vectors, cos(u, r_j) is at
    most u.c + max_j |r_j - c| for any unit center c, so an entry whose
    best such bound stays below eps_c cannot produce a passing pair.
    """
    skips: set[str] = set()
    q = _unit_rows64(fg_vectors)
    for entry in index.entries:
        r = _unit_rows64(entry.content.vectors)
        center = r.mean(axis=0)
        norm = float(np.linalg.norm(center))
        if norm == 0.0:
            continue
        center /= norm
        radius = float(np.linalg.norm(r - center, axis=1).max())
        bound = float((q @ center).max()) + radius
        if bound < cfg.eps_c:
            skips.add(entry.id)
    return skips


def retrieve_full(
    sample: CompositeSample,
    index: GalleryIndex,
    cfg: Optional[RetrievalConfig] = None,
    provider: Optional[ContentProvider] = None,
    cache: Optional[SimilarityCache] = None,
    threads: int = 1,
) -> RetrievalOutcome:
    """Run both stages and the ranking; returns all intermediate sets."""
    cfg = cfg or RetrievalConfig()
    provider = provider or BuiltinContentProvider()
    if cache is None:
        cache = SimilarityCache()
    query = cache.query_features(sample, index.patch_size, provider)
    if index.entries and query.content.provider_tag != index.provider_tag:
        raise ProviderMismatchError(
            f"query features from provider {query.content.provider_tag!r}, "
            f"index built with {index.provider_tag!r}"
        )
    fg_ids = query.foreground_ids(cfg.tau_f)
    bg_ids = query.background_ids(cfg.tau_f)

    entries = [e for e in index.entries if e.id != sample.id]
    skips: set[str] = set()
    if cfg.use_prefilter and entries:
        sub = GalleryIndex(
            provider_tag=index.provider_tag,
            patch_size=index.patch_size,
            entries=entries,
        )
        skips = _prefilter_skips(query.content.vectors[fg_ids], sub, cfg)

    def score_entry(entry: IndexEntry):
        sims_c, sims_a = cache.sim_pair(query, entry)
        content = _content_match(entry.id, sims_c[fg_ids], fg_ids, cfg)
        if content is None:
            return entry.id, None, None
        if bg_ids.size == 0:
            return entry.id, content, None
        illum = _illum_match(
            entry.id, sims_c[bg_ids], sims_a[bg_ids], bg_ids, cfg
        )
        return entry.id, content, illum

    todo = [e for e in entries if e.id not in skips]
    if threads > 1 and len(todo) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            scored = list(pool.map(score_entry, todo))
    else:
        scored = [score_entry(e) for e in todo]

    g_sc: dict[str, CandidateMatch] = {}
    g_sc_ci: dict[str, IllumMatch] = {}
    for entry_id, content, illum in scored:
        if content is None:
            continue
        g_sc[entry_id] = content
        if illum is not None:
            g_sc_ci[entry_id] = illum

    results = [
        RetrievalResult(
            reference_id=entry_id,
            score_content=g_sc[entry_id].score,
            score_illum=illum.score,
            matched_pairs_content=g_sc[entry_id].pairs,
            matched_pairs_illum=illum.pairs,
        )
        for entry_id, illum in g_sc_ci.items()
    ]
    results.sort(key=lambda r: (-r.illum_pair_count, -r.score_content, r.reference_id))
    return RetrievalOutcome(
        g_sc=g_sc, g_sc_ci=g_sc_ci, ranked=results[: cfg.max_results]
    )


def retrieve(
    sample: CompositeSample,
    index: GalleryIndex,
    cfg: Optional[RetrievalConfig] = None,
    provider: Optional[ContentProvider] = None,
    cache: Optional[SimilarityCache] = None,
    threads: int = 1,
) -> list[RetrievalResult]:
    """Ranked references for a composite sample (at most cfg.max_results)."""
    return retrieve_full(sample, index, cfg, provider, cache, threads).ranked


def build_index(
    manifest: DatasetManifest,
    provider: Optional[ContentProvider] = None,
    patch_size: int = 16,
    out_dir: Optional[str | Path] = None,
) -> GalleryIndex:
    """Compute both feature maps for every gallery image; optionally persist."""
    provider = provider or BuiltinContentProvider()
    entries: list[IndexEntry] = []
    tag: Optional[str] = None
    for row in manifest.gallery:
        img = load_image(row.image_path)
        if (img.height, img.width) != (WORKING_SIZE, WORKING_SIZE):
            img = img.resized(WORKING_SIZE, WORKING_SIZE)
        grid = PatchGrid.for_image(img, patch_size)
        content = provider.content(img, grid, row.id)
        if tag is None:
            tag = content.provider_tag
        elif content.provider_tag != tag:
            raise ProviderMismatchError(
                f"gallery entry {row.id!r} came from provider "
                f"{content.provider_tag!r}, index uses {tag!r}"
            )
        entries.append(
            IndexEntry(
                id=row.id,
                content=content,
                appearance=compute_appearance(img, grid),
                image_path=row.image_path,
            )
        )
    index = GalleryIndex(
        provider_tag=tag if tag is not None else (provider.tag or "builtin"),
        patch_size=patch_size,
        entries=entries,
    )
    if out_dir is not None:
        save_index(index, out_dir)
    return index


def save_index(index: GalleryIndex, out_dir: str | Path) -> Path:
    """Persist an index directory: index.json plus per-entry RAIF files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for entry in index.entries:
        content_name = f"{entry.id}.content.raif"
        appearance_name = f"{entry.id}.appearance.raif"
        store_content_features(entry.content, out_dir / content_name, image_id=entry.id)
        store_appearance_features(entry.appearance, out_dir / appearance_name)
        try:
            image_ref = os.path.relpath(entry.image_path, out_dir)
        except ValueError:
            image_ref = str(entry.image_path)
        rows.append(
            {
                "id": entry.id,
                "image": image_ref,
                "content": content_name,
                "appearance": appearance_name,
            }
        )
    doc = {
        "version": INDEX_VERSION,
        "provider": index.provider_tag,
        "patch_size": index.patch_size,
        "dim": index.dim,
        "entries": rows,
    }
    path = out_dir / "index.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def load_index(index_dir: str | Path) -> GalleryIndex:
    """Load a persisted index, validating version and feature shapes."""
    index_dir = Path(index_dir)
    path = index_dir / "index.json"
    if not path.is_file():
        raise FileNotFoundError(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
    for key in ("version", "provider", "patch_size", "dim", "entries"):
        if key not in doc:
            raise SchemaError(f"{path}: missing field {key!r}")
    if doc["version"] != INDEX_VERSION:
        raise VersionMismatchError(
            f"{path}: index version {doc['version']}, expected {INDEX_VERSION}"
        )
    patch_size = int(doc["patch_size"])
    entries: list[IndexEntry] = []
    for row in doc["entries"]:
        content = load_content_features(index_dir / row["content"], patch_size=patch_size)
        if content.dim != doc["dim"]:
            raise DimMismatchError(
                f"{row['id']}: content dim {content.dim}, index records {doc['dim']}"
            )
        appearance = load_appearance_features(
            index_dir / row["appearance"], patch_size=patch_size
        )
        image_path = Path(row["image"])
        if not image_path.is_absolute():
            image_path = index_dir / image_path
        entries.append(
            IndexEntry(
                id=row["id"],
                content=ContentFeatureMap(
                    grid=content.grid,
                    vectors=content.vectors,
                    provider_tag=doc["provider"],
                ),
                appearance=appearance,
                image_path=image_path,
            )
        )
    return GalleryIndex(
        provider_tag=doc["provider"], patch_size=patch_size, entries=entries
    )
