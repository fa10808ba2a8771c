"""Dataset-level orchestration: benchmark construction and fixture corpus.

``build_benchmark`` reproduces the retrieval-augmented benchmark recipe:
take a dataset of composites with targets, treat every target as a gallery
image, retrieve for each sample (its own target excluded by id), and keep
exactly the samples with at least one retrievable reference.

``make_fixtures`` writes the synthetic corpus the test suite runs on: flat
scenes, textured scenes with controlled value-channel gains, and scenes
whose only usable illumination guidance lives in a purpose-built reference
image. The corpus is fully pinned: every pixel is a deterministic function
of the fixture id, so repeated generation is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import SchemaError
from .features import HsvImage, hsv_to_rgb, rgb_to_hsv
from .imgio import (
    DatasetManifest,
    ForegroundMask,
    GalleryEntry,
    Image,
    load_manifest,
    load_sample,
    save_image,
    save_mask,
)
from .retrieval import (
    ContentProvider,
    BuiltinContentProvider,
    GalleryIndex,
    RetrievalConfig,
    SimilarityCache,
    build_index,
    load_index,
    retrieve,
)

SIZE = 256
TEX_RECT = (80, 80, 96, 96)  # y0, x0, h, w; aligned to the 16 px grid
FLAT_RECT = (96, 96, 64, 64)
GAIN_VARIANTS = {"g050": 0.5, "g075": 0.75, "g133": 1.33, "g200": 2.0}


@dataclass
class BenchmarkSpec:
    source_manifest: Path
    output_dir: Path
    gallery_policy: str = "targets_as_gallery"
    retrieval_cfg: RetrievalConfig = field(default_factory=RetrievalConfig)

    def __post_init__(self) -> None:
        if self.gallery_policy != "targets_as_gallery":
            raise ValueError(f"unknown gallery policy {self.gallery_policy!r}")
        self.source_manifest = Path(self.source_manifest)
        self.output_dir = Path(self.output_dir)


def build_benchmark(
    spec: BenchmarkSpec,
    provider: Optional[ContentProvider] = None,
    cache: Optional[SimilarityCache] = None,
) -> DatasetManifest:
    """Retain the samples whose retrieval against all other targets is
    non-empty; write the reduced manifest plus the per-sample id lists."""
    src = load_manifest(spec.source_manifest)
    with_targets = [e for e in src.entries if e.target_path is not None]
    gallery = [GalleryEntry(id=e.id, image_path=e.target_path) for e in with_targets]
    gallery_manifest = DatasetManifest(root=src.root, entries=[], gallery=gallery)
    index = build_index(gallery_manifest, provider)
    cache = cache or SimilarityCache()

    retained = []
    retrieved_ids: dict[str, list[str]] = {}
    for entry in with_targets:
        sample = load_sample(entry)
        results = retrieve(sample, index, spec.retrieval_cfg, provider, cache)
        if results:
            retained.append(entry)
            retrieved_ids[entry.id] = [r.reference_id for r in results]

    out = DatasetManifest(root=src.root, entries=retained, gallery=gallery)
    spec.output_dir.mkdir(parents=True, exist_ok=True)
    from .imgio import write_manifest

    write_manifest(out, spec.output_dir / "manifest.json")
    (spec.output_dir / "retrievals.json").write_text(
        json.dumps({"retrieved": retrieved_ids}, indent=2, sort_keys=True) + "\n"
    )
    return out


def ensure_index(
    manifest: DatasetManifest,
    index_dir: str | Path,
    provider: Optional[ContentProvider] = None,
    patch_size: int = 16,
) -> GalleryIndex:
    """Load a persisted index when compatible, else rebuild it in place."""
    provider = provider or BuiltinContentProvider()
    index_dir = Path(index_dir)
    try:
        index = load_index(index_dir)
    except Exception:
        index = None
    if index is not None and index.patch_size == patch_size:
        return index
    return build_index(manifest, provider, patch_size, out_dir=index_dir)


# --- synthetic fixture corpus ------------------------------------------------


def _color(hue_bin: int, s: float, v: float) -> np.ndarray:
    """RGB triple for the center of an HSV histogram hue bin."""
    hsv = np.array([[[15.0 + 30.0 * (hue_bin % 12), s, v]]], dtype=np.float64)
    return hsv_to_rgb(HsvImage(hsv)).data[0, 0].astype(np.float64)


def _flat(rgb: np.ndarray) -> np.ndarray:
    return np.broadcast_to(rgb, (SIZE, SIZE, 3)).copy()


def _stripes(c1: np.ndarray, c2: np.ndarray, horizontal: bool) -> np.ndarray:
    # Period-4 stripes: two rows (or columns) of each color.
    axis = np.arange(SIZE) // 2 % 2
    sel = axis[:, None] if horizontal else axis[None, :]
    sel = np.broadcast_to(sel[..., None], (SIZE, SIZE, 1))
    return np.where(sel == 0, c1, c2)


def _checks(c1: np.ndarray, c2: np.ndarray, cell: int = 8) -> np.ndarray:
    yy = np.arange(SIZE)[:, None] // cell
    xx = np.arange(SIZE)[None, :] // cell
    sel = ((yy + xx) % 2)[..., None]
    return np.where(sel == 0, c1, c2)


def _vgain(arr: np.ndarray, gain: float) -> np.ndarray:
    hsv = rgb_to_hsv(Image(np.clip(arr, 0.0, 1.0).astype(np.float32)))
    scaled = np.stack(
        [hsv.hue, hsv.sat, np.clip(hsv.val * gain, 0.0, 1.0)], axis=-1
    )
    return hsv_to_rgb(HsvImage(scaled)).data.astype(np.float64)


def _paste(base: np.ndarray, patch: np.ndarray, rect: tuple[int, int, int, int]) -> np.ndarray:
    y0, x0, h, w = rect
    out = base.copy()
    out[y0 : y0 + h, x0 : x0 + w] = patch[y0 : y0 + h, x0 : x0 + w]
    return out


def _rect_mask(rect: tuple[int, int, int, int]) -> np.ndarray:
    y0, x0, h, w = rect
    mask = np.zeros((SIZE, SIZE), dtype=np.uint8)
    mask[y0 : y0 + h, x0 : x0 + w] = 1
    return mask


@dataclass
class _Scene:
    composite: np.ndarray
    mask: np.ndarray
    target: np.ndarray


def _flat_scene(k: int) -> _Scene:
    bg = _flat(_color(5 * k, 0.5, 0.40))
    obj_ok = _flat(_color(5 * k + 6, 0.7, 0.60))
    obj_bad = _flat(_color(5 * k + 6, 0.7, 0.42))
    return _Scene(
        composite=_paste(bg, obj_bad, FLAT_RECT),
        mask=_rect_mask(FLAT_RECT),
        target=_paste(bg, obj_ok, FLAT_RECT),
    )


def _anchored(obj: np.ndarray, hue_bin: int, v: float) -> np.ndarray:
    # One near-black patch inside the object. Its luminance stays in the
    # lowest histogram bin under every value gain in play, so its content
    # descriptor survives relighting essentially unchanged and keeps the
    # relit gallery variants reachable by the content filter.
    out = obj.copy()
    out[112:128, 112:128] = _color(hue_bin, 0.8, v)
    return out


def _tex_scene(k: int) -> _Scene:
    hb = (7 * k) % 12
    ob = (hb + 5) % 12
    bg = _stripes(_color(hb, 0.6, 0.35), _color(hb, 0.6, 0.48), horizontal=k % 2 == 0)
    obj = _anchored(_checks(_color(ob, 0.8, 0.52), _color(ob, 0.8, 0.64)), ob, 0.03)
    scene = _paste(bg, obj, TEX_RECT)
    # Query equals target: these samples exercise retrieval, not transfer.
    return _Scene(composite=scene, mask=_rect_mask(TEX_RECT), target=scene)


def _harm_scene(k: int) -> tuple[_Scene, np.ndarray]:
    hb = (5 * k + 2) % 12
    ob = (hb + 4) % 12
    # Saturation band 1 and value band 0: no other family's gallery image
    # puts pixels there, so the joint histogram isolates these backgrounds
    # and only the paired reference can pass the illumination stage.
    bg = _stripes(_color(hb, 0.35, 0.20), _color(hb, 0.35, 0.24), horizontal=k % 2 == 0)
    obj = _anchored(_checks(_color(ob, 0.8, 0.55), _color(ob, 0.8, 0.70)), ob, 0.05)
    obj_bad = _vgain(obj, 0.55)
    target = _paste(bg, obj, TEX_RECT)
    composite = _paste(bg, obj_bad, TEX_RECT)
    # Reference: mostly the object texture at the correct illumination,
    # with a strip of the query's own background texture so the
    # illumination stage has exact matches to latch onto.
    ref = obj.copy()
    ref[:, 176:] = bg[:, 176:]
    return _Scene(composite=composite, mask=_rect_mask(TEX_RECT), target=target), ref


def _pair_scene(k: int) -> _Scene:
    hb = (7 * k + 3) % 12
    ob = (hb + 5) % 12
    if k % 2 == 0:
        bg = _flat(_color(hb, 0.5, 0.44))
        obj = _anchored(_checks(_color(ob, 0.75, 0.56), _color(ob, 0.75, 0.68)), ob, 0.03)
        obj_bad = _vgain(obj, 0.8)
    else:
        bg = _checks(_color(hb, 0.6, 0.36), _color(hb, 0.6, 0.47))
        obj = _anchored(_flat(_color(ob, 0.85, 0.62)), ob, 0.03)
        obj_bad = _vgain(obj, 0.75)
    return _Scene(
        composite=_paste(bg, obj_bad, TEX_RECT),
        mask=_rect_mask(TEX_RECT),
        target=_paste(bg, obj, TEX_RECT),
    )


def make_fixtures(out_dir: str | Path, seed: int = 0) -> DatasetManifest:
    """Generate the synthetic corpus: 50 samples and a 49-image gallery.

    Families are flat_00..09 (flat scenes), tex_00..09 (textured scenes
    whose gallery holds exact duplicates and value-gain variants),
    harm_00..09 (transfer cases whose usable guidance exists only in a
    dedicated reference image), and pair_00..19 (mixed filler scenes, the
    first ten with duplicate gallery partners).

    The corpus content is pinned; `seed` is recorded in checksums.json for
    provenance but does not alter any pixel.
    """
    out_dir = Path(out_dir)
    images = out_dir / "images"
    gallery_dir = images / "g"
    images.mkdir(parents=True, exist_ok=True)
    gallery_dir.mkdir(parents=True, exist_ok=True)

    entries: list[dict] = []
    gallery: list[dict] = []

    def add_sample(name: str, scene: _Scene) -> Path:
        comp = images / f"{name}_comp.png"
        mask = images / f"{name}_mask.png"
        target = images / f"{name}_target.png"
        save_image(Image(np.clip(scene.composite, 0.0, 1.0).astype(np.float32)), comp)
        save_mask(ForegroundMask(scene.mask), mask)
        save_image(Image(np.clip(scene.target, 0.0, 1.0).astype(np.float32)), target)
        entries.append(
            {
                "id": name,
                "composite": comp.relative_to(out_dir).as_posix(),
                "mask": mask.relative_to(out_dir).as_posix(),
                "target": target.relative_to(out_dir).as_posix(),
            }
        )
        return target

    def add_gallery_image(gid: str, arr: np.ndarray) -> None:
        path = gallery_dir / f"{gid}.png"
        save_image(Image(np.clip(arr, 0.0, 1.0).astype(np.float32)), path)
        gallery.append({"id": gid, "image": path.relative_to(out_dir).as_posix()})

    def add_gallery_copy(gid: str, source: Path) -> None:
        path = gallery_dir / f"{gid}.png"
        shutil.copyfile(source, path)
        gallery.append({"id": gid, "image": path.relative_to(out_dir).as_posix()})

    flat_targets = {}
    for k in range(10):
        flat_targets[k] = add_sample(f"flat_{k:02d}", _flat_scene(k))
    tex_targets = {}
    tex_scenes = {}
    for k in range(10):
        scene = _tex_scene(k)
        tex_scenes[k] = scene
        tex_targets[k] = add_sample(f"tex_{k:02d}", scene)
    harm_refs = {}
    for k in range(10):
        scene, ref = _harm_scene(k)
        add_sample(f"harm_{k:02d}", scene)
        harm_refs[k] = ref
    pair_targets = {}
    for k in range(20):
        pair_targets[k] = add_sample(f"pair_{k:02d}", _pair_scene(k))

    for k in range(5):
        add_gallery_copy(f"flat_{k:02d}_dup", flat_targets[k])
    for k in range(5):
        add_gallery_copy(f"tex_{k:02d}_dup", tex_targets[k])
    for k in range(10):
        add_gallery_image(f"tex_{k:02d}_g200", _vgain(tex_scenes[k].target, 2.0))
    for k in range(3):
        for tag, gain in (("g050", 0.5), ("g075", 0.75), ("g133", 1.33)):
            add_gallery_image(f"tex_{k:02d}_{tag}", _vgain(tex_scenes[k].target, gain))
    for k in range(10):
        add_gallery_image(f"harm_{k:02d}_ref", harm_refs[k])
    for k in range(10):
        add_gallery_copy(f"pair_{k:02d}_dup", pair_targets[k])

    manifest_doc = {"root": ".", "entries": entries, "gallery": gallery}
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest_doc, indent=2) + "\n")

    mini_ids = [f"flat_{k:02d}" for k in range(5)] + [f"tex_{k:02d}" for k in range(5)]
    mini_gallery_ids = [f"flat_{k:02d}_dup" for k in range(5)]
    for k in range(3):
        mini_gallery_ids.append(f"tex_{k:02d}_dup")
        mini_gallery_ids.extend(
            f"tex_{k:02d}_{tag}" for tag in ("g050", "g075", "g133", "g200")
        )
    mini_doc = {
        "root": ".",
        "entries": [e for e in entries if e["id"] in mini_ids],
        "gallery": [g for g in gallery if g["id"] in mini_gallery_ids],
    }
    mini_path = out_dir / "mini_manifest.json"
    mini_path.write_text(json.dumps(mini_doc, indent=2) + "\n")

    mini_manifest = load_manifest(mini_path)
    build_index(mini_manifest, BuiltinContentProvider(), out_dir=out_dir / "mini_index")

    checksums = {}
    for path in sorted(out_dir.rglob("*")):
        if path.is_file() and path.name != "checksums.json":
            checksums[path.relative_to(out_dir).as_posix()] = hashlib.sha256(
                path.read_bytes()
            ).hexdigest()
    (out_dir / "checksums.json").write_text(
        json.dumps({"seed": seed, "files": checksums}, indent=2, sort_keys=True) + "\n"
    )
    return load_manifest(manifest_path)
