"""Reference-retrieval image harmonization toolkit.

The package splits into small layers:

- ``imgio``: image/mask/manifest loading and the canonical float formats
- ``raif``: binary container for per-patch feature grids
- ``features``: patch grids, content descriptors, HSV appearance histograms
- ``retrieval``: two-stage gallery search (content, then illumination)
- ``sgf``: semantic-guided attention kernel over patch token sets
- ``harmonize``: attention-weighted color transfer backends
- ``augment``: deterministic crop/flip augmentation
- ``metrics``: foreground-weighted losses, MSE/PSNR, evaluation harness
- ``pipeline``: index building, benchmark assembly, end-to-end runs
- ``cli``: the ``refharm`` command
"""

__version__ = "0.1.0"

from .augment import AugmentConfig, augment_reference, build_training_manifest
from .errors import RefharmError
from .features import (
    AppearanceFeatureMap,
    BuiltinContentProvider,
    ContentFeatureMap,
    FileContentProvider,
    PatchGrid,
    compute_appearance,
    compute_builtin_content,
    cosine,
)
from .harmonize import HarmonizeConfig, harmonize, harmonize_with_trace
from .imgio import (
    CompositeSample,
    DatasetManifest,
    ForegroundMask,
    Image,
    load_image,
    load_manifest,
    load_mask,
    load_sample,
)
from .metrics import EvalReport, evaluate, foreground_mse_loss, mse_255, psnr
from .pipeline import BenchmarkSpec, build_benchmark, ensure_index, make_fixtures
from .raif import RaifBlob, read_raif, write_raif
from .retrieval import (
    GalleryIndex,
    RetrievalConfig,
    RetrievalResult,
    SimilarityCache,
    build_index,
    load_index,
    retrieve,
    retrieve_full,
)
from .sgf import ProjectionWeights, SgfDims, init_weights, run_sgf

__all__ = [
    "AppearanceFeatureMap",
    "AugmentConfig",
    "BenchmarkSpec",
    "BuiltinContentProvider",
    "CompositeSample",
    "ContentFeatureMap",
    "DatasetManifest",
    "EvalReport",
    "FileContentProvider",
    "ForegroundMask",
    "GalleryIndex",
    "HarmonizeConfig",
    "Image",
    "PatchGrid",
    "ProjectionWeights",
    "RaifBlob",
    "RefharmError",
    "RetrievalConfig",
    "RetrievalResult",
    "SgfDims",
    "SimilarityCache",
    "__version__",
    "augment_reference",
    "build_benchmark",
    "build_index",
    "build_training_manifest",
    "compute_appearance",
    "compute_builtin_content",
    "cosine",
    "ensure_index",
    "evaluate",
    "foreground_mse_loss",
    "harmonize",
    "harmonize_with_trace",
    "load_image",
    "load_index",
    "load_manifest",
    "load_mask",
    "load_sample",
    "make_fixtures",
    "mse_255",
    "psnr",
    "read_raif",
    "retrieve",
    "retrieve_full",
    "run_sgf",
    "write_raif",
]
