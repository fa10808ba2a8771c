"""Command line entry: export patch features for a directory of images."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional

from .errors import ExporterError
from .export import ExportJob, export_features
from .models import MODELS

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".tif", ".tiff"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="export-features",
        description="Export per-patch image descriptors as RAIF feature grids.",
    )
    parser.add_argument("--model", required=True, help=f"one of: {', '.join(sorted(MODELS))}")
    parser.add_argument("--images", required=True, help="directory of input images")
    parser.add_argument("--out", required=True, help="directory for RAIF output")
    parser.add_argument("--patch-size", type=int, default=16)
    parser.add_argument("--resize", type=int, default=256)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    images_dir = Path(args.images)
    if not images_dir.is_dir():
        print(f"error: {images_dir} is not a directory", file=sys.stderr)
        return 3
    paths = sorted(
        p for p in images_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
    )
    if not paths:
        print(f"error: no images found in {images_dir}", file=sys.stderr)
        return 3
    try:
        job = ExportJob(
            image_paths=paths,
            out_dir=Path(args.out),
            model_name=args.model,
            patch_size=args.patch_size,
            resize=args.resize,
        )
    except ValueError as exc:
        parser.error(str(exc))
    try:
        result = export_features(job)
    except ExporterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    print(f"exported {result.count} feature grids to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
