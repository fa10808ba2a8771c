"""Command line front end.

Exit codes: 0 success, 2 usage error, 3 data error (anything raised as a
RefharmError), 4 failed invariant check.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from .augment import AugmentConfig, augment_reference
from .errors import RefharmError
from .features import BuiltinContentProvider, FileContentProvider
from .harmonize import HarmonizeConfig, harmonize_with_trace
from .imgio import Image, load_image, load_manifest, load_mask, load_sample, save_image
from .metrics import evaluate
from .pipeline import BenchmarkSpec, build_benchmark, make_fixtures
from .raif import write_raif
from .retrieval import (
    RetrievalConfig,
    SimilarityCache,
    build_index,
    load_index,
    retrieve,
)
from .sgf import GOLDEN_DIGEST, golden_bundle, invariant_report

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_INVARIANT = 4


def _usage_error(message: str) -> None:
    print(f"usage error: {message}", file=sys.stderr)
    raise SystemExit(EXIT_USAGE)


def _load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        _usage_error(f"cannot read config {path}: {exc}")
    if not isinstance(doc, dict):
        _usage_error(f"config {path} must hold a JSON object")
    return doc


def _build_dataclass(cls, section: dict, overrides: dict):
    field_names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - field_names
    if unknown:
        _usage_error(f"unknown {cls.__name__} keys in config: {sorted(unknown)}")
    merged = dict(section)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**merged)
    except (TypeError, ValueError) as exc:
        _usage_error(f"bad {cls.__name__} settings: {exc}")


def _provider(args) -> BuiltinContentProvider | FileContentProvider:
    if getattr(args, "features_dir", None):
        return FileContentProvider(args.features_dir)
    return BuiltinContentProvider()


def _require_seed(args, parser: argparse.ArgumentParser) -> int:
    seed = args.seed
    if seed is None:
        parser.error("this subcommand draws random numbers; pass --seed")
    return seed


def _cmd_index_gallery(args, config) -> int:
    manifest = load_manifest(args.manifest)
    build_index(manifest, _provider(args), args.patch_size, out_dir=Path(args.out))
    print(f"indexed {len(manifest.gallery)} gallery images into {args.out}")
    return EXIT_OK


def _cmd_retrieve(args, config) -> int:
    cfg = _build_dataclass(
        RetrievalConfig,
        config.get("retrieval", {}),
        {
            "eps_c": args.eps_c,
            "eps_a": args.eps_a,
            "max_results": args.max_results,
        },
    )
    manifest = load_manifest(args.manifest)
    entry = next((e for e in manifest.entries if e.id == args.sample_id), None)
    if entry is None:
        raise RefharmError(f"sample id {args.sample_id!r} not in manifest")
    index = load_index(Path(args.index))
    sample = load_sample(entry)
    results = retrieve(sample, index, cfg, threads=args.threads)
    rows = [
        {
            "reference_id": r.reference_id,
            "illum_pair_count": int(r.illum_pair_count),
            "score_content": float(r.score_content),
            "score_illum": float(r.score_illum),
        }
        for r in results
    ]
    if args.out:
        Path(args.out).write_text(json.dumps({"results": rows}, indent=2) + "\n")
    for rank, row in enumerate(rows, start=1):
        print(
            f"{rank:2d}. {row['reference_id']}"
            f"  illum_pairs={row['illum_pair_count']}"
            f"  content={row['score_content']:.4f}"
        )
    if not rows:
        print("no references passed both filters")
    return EXIT_OK


def _cmd_harmonize(args, config) -> int:
    if args.reference and args.no_reference:
        _usage_error("--reference and --no-reference are mutually exclusive")
    cfg = _build_dataclass(
        HarmonizeConfig,
        config.get("harmonize", {}),
        {
            "color_space": args.color_space,
            "seed": args.seed,
            "use_reference": False if args.no_reference else None,
        },
    )
    from .imgio import CompositeSample

    sample = CompositeSample(
        id=Path(args.composite).stem,
        composite=load_image(args.composite),
        mask=load_mask(args.mask),
    )
    reference = load_image(args.reference) if args.reference else None
    out_img, trace = harmonize_with_trace(sample, reference, cfg)
    save_image(out_img, args.out)
    print(f"wrote {args.out}")
    if args.dump_attention:
        dump_dir = Path(args.dump_attention)
        dump_dir.mkdir(parents=True, exist_ok=True)
        if trace.attention_weights is None:
            print("no attention to dump (identity path)")
        else:
            weights = np.asarray(trace.attention_weights, dtype=np.float32)
            write_raif(dump_dir / "attention.raif", weights, weights.shape[0], 1)
            meta = {
                "foreground_patches": [int(i) for i in trace.fg_patch_ids],
                "background_patches": [int(i) for i in trace.bg_patch_ids],
                "grid": [trace.grid.rows, trace.grid.cols],
                "weights_shape": list(weights.shape),
            }
            (dump_dir / "attention.json").write_text(
                json.dumps(meta, indent=2) + "\n"
            )
            print(f"dumped attention to {dump_dir}")
    return EXIT_OK


def _cmd_augment(args, config) -> int:
    seed = _require_seed(args, args._parser)
    cfg = _build_dataclass(
        AugmentConfig,
        config.get("augment", {}),
        {
            "seed": seed,
            "flip_prob": args.flip_prob,
            "min_crop_frac": args.min_crop_frac,
        },
    )
    target = load_image(args.target)
    mask = load_mask(args.mask)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for draw in range(args.draws):
        result = augment_reference(target, mask, cfg, draw)
        save_image(result.image, out_dir / f"aug_{draw:04d}.png")
    print(f"wrote {args.draws} augmented references to {out_dir}")
    return EXIT_OK


def _cmd_build_benchmark(args, config) -> int:
    cfg = _build_dataclass(RetrievalConfig, config.get("retrieval", {}), {})
    spec = BenchmarkSpec(
        source_manifest=Path(args.manifest),
        output_dir=Path(args.out),
        retrieval_cfg=cfg,
    )
    manifest = build_benchmark(spec)
    print(f"retained {len(manifest.entries)} samples into {args.out}")
    return EXIT_OK


def _cmd_evaluate(args, config) -> int:
    seed = _require_seed(args, args._parser)
    backend: str | HarmonizeConfig
    if args.identity:
        backend = "identity"
    else:
        backend = _build_dataclass(
            HarmonizeConfig,
            config.get("harmonize", {}),
            {"use_reference": False if args.non_reference else None},
        )
    manifest = load_manifest(args.manifest)
    index = load_index(Path(args.index))
    report = evaluate(manifest, index, backend, runs=args.runs, seed=seed)
    print(report.table())
    if args.out:
        report.write(args.out)
        print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_sgf_check(args, config) -> int:
    report = invariant_report(seed=args.seed if args.seed is not None else 0)
    for check in report["checks"]:
        status = "ok" if check["passed"] else f"FAIL ({check['failures']} draws)"
        print(f"{check['name']:28s} {status}")
    if GOLDEN_DIGEST is None:
        print(f"pinned digest unset; current digest {report['digest']}")
    if args.dump:
        dump_dir = Path(args.dump)
        dump_dir.mkdir(parents=True, exist_ok=True)
        bundle = golden_bundle()
        shapes = {}
        for name in ("scores", "weights", "weighted", "modulated"):
            arr = np.asarray(getattr(bundle, name), dtype=np.float32)
            write_raif(dump_dir / f"{name}.raif", arr, arr.shape[0], 1)
            shapes[name] = list(arr.shape)
        (dump_dir / "shapes.json").write_text(json.dumps(shapes, indent=2) + "\n")
        print(f"dumped golden bundle to {dump_dir}")
    return EXIT_OK if report["passed"] else EXIT_INVARIANT


def _cmd_make_fixtures(args, config) -> int:
    manifest = make_fixtures(Path(args.out), seed=args.seed if args.seed is not None else 0)
    print(
        f"wrote {len(manifest.entries)} samples and "
        f"{len(manifest.gallery)} gallery images to {args.out}"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="refharm",
        description="Reference-guided image harmonization toolkit.",
    )
    parser.add_argument("--config", help="JSON file with retrieval/augment/harmonize sections")
    parser.add_argument("--threads", type=int, default=1, help="worker threads for retrieval")
    parser.add_argument("--seed", type=int, default=None, help="seed for randomized subcommands")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index-gallery", help="compute and persist gallery features")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch-size", type=int, default=16)
    p.add_argument("--features-dir", help="serve content features from RAIF files here")
    p.set_defaults(func=_cmd_index_gallery)

    p = sub.add_parser("retrieve", help="rank gallery references for one sample")
    p.add_argument("--manifest", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--sample-id", required=True)
    p.add_argument("--eps-c", type=float, default=None)
    p.add_argument("--eps-a", type=float, default=None)
    p.add_argument("--max-results", type=int, default=None)
    p.add_argument("--out", help="write results as JSON here")
    p.set_defaults(func=_cmd_retrieve)

    p = sub.add_parser("harmonize", help="harmonize a composite against its background or a reference")
    p.add_argument("--composite", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--reference")
    p.add_argument("--no-reference", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--dump-attention", help="directory for attention blobs")
    p.add_argument("--color-space", choices=("rgb", "hsv_v_only"), default=None)
    p.set_defaults(func=_cmd_harmonize)

    p = sub.add_parser("augment", help="crop/flip draws of a target as synthetic references")
    p.add_argument("--target", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--draws", type=int, default=1)
    p.add_argument("--flip-prob", type=float, default=None)
    p.add_argument("--min-crop-frac", type=float, default=None)
    p.set_defaults(func=_cmd_augment)

    p = sub.add_parser("build-benchmark", help="retain the samples with non-empty retrieval")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_build_benchmark)

    p = sub.add_parser("evaluate", help="run the metric protocol over a dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--non-reference", action="store_true")
    p.add_argument("--identity", action="store_true", help="score the composites unchanged")
    p.add_argument("--out", help="write the report JSON here")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("sgf-check", help="run the attention kernel self-checks")
    p.add_argument("--dump", help="directory for the golden bundle blobs")
    p.set_defaults(func=_cmd_sgf_check)

    p = sub.add_parser("make-fixtures", help="generate the synthetic test corpus")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_make_fixtures)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args._parser = parser
    config = _load_config(args.config)
    try:
        return args.func(args, config)
    except RefharmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
