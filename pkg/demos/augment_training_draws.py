"""
Deterministic augmentation and training-mode mixing
===================================================

Shows the two training-data utilities: bbox-preserving crop/flip draws
from a target image, and the per-sample assignment of training modes
(no reference, retrieved reference, augmented reference).
"""

import tempfile
from pathlib import Path

from refharm.augment import AugmentConfig, augment_reference, build_training_manifest
from refharm.features import BuiltinContentProvider
from refharm.imgio import load_manifest, load_sample, save_image
from refharm.pipeline import make_fixtures
from refharm.retrieval import load_index

work = Path(tempfile.mkdtemp(prefix="refharm-demo-"))
make_fixtures(work / "corpus", seed=0)

# the mini manifest is a 20-gallery subset with a prebuilt index next to it
mini = load_manifest(work / "corpus" / "mini_manifest.json")
index = load_index(work / "corpus" / "mini_index")

entry = next(row for row in mini.entries if row.target_path is not None)
sample = load_sample(entry)

# each draw index is an independent, repeatable crop/flip; the window
# always contains the whole foreground bbox
cfg = AugmentConfig(seed=42, out_size=256)
print(f"augmentation draws from {sample.id}:")
for i in range(4):
    res = augment_reference(sample.target, sample.mask, cfg, draw_index=i)
    x0, y0, w, h = res.window
    print(f"  draw {i}: window ({x0:3d},{y0:3d}) {w}x{h}  flipped={res.flipped}")
    save_image(res.image, work / f"aug_{sample.id}_{i}.png")

again = augment_reference(sample.target, sample.mask, cfg, draw_index=2)
print(f"  draw 2 again: window {again.window}  (identical by construction)")

# assign one training mode per sample; retrieval backs the `retrieved` mode
manifest = build_training_manifest(
    mini,
    index,
    aug_cfg=AugmentConfig(seed=3),
    p_nonref=0.5,
    p_retrieved_given_ref=0.5,
    provider=BuiltinContentProvider(),
)
print(f"\ntraining modes over {len(manifest.entries)} samples: {manifest.mode_counts()}")
for row in manifest.entries[:5]:
    ref = row.reference if row.reference else "-"
    flag = "  (fallback)" if row.fallback else ""
    print(f"  {row.sample_id:>12}  {row.mode:<13} {ref}{flag}")

out = manifest.write(work / "training_manifest.json")
print(f"\nsaved {out}")
