"""Attention-driven statistical color transfer for composite images.

The foreground of a composite is remapped per channel by an affine
transform whose target mean and deviation are an attention-weighted blend
of per-patch statistics from the background and (optionally) a reference
image. The attention weights come from the guided kernel in ``sgf``, with
per-patch color statistics as encoder tokens and the builtin content
descriptors as guidance, so a reference whose patches resemble the
foreground pulls the transfer toward its own illumination.

Background pixels are copied from the composite untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import EmptyForegroundError
from .features import (
    HsvImage,
    PatchGrid,
    compute_builtin_content,
    hsv_to_rgb,
    patchify,
    rgb_to_hsv,
)
from .imgio import CompositeSample, Image, WORKING_SIZE
from .retrieval import patch_coverage
from .sgf import SgfDims, init_weights, run_sgf

COLOR_SPACES = ("rgb", "hsv_v_only")
STATS = ("mean_std_affine",)
PATCH_COVERAGE_TAU = 0.5
SIGMA_FLOOR = 1e-4


@dataclass
class HarmonizeConfig:
    use_reference: bool = True
    color_space: str = "rgb"
    stat: str = "mean_std_affine"
    clamp: bool = True
    sgf_dims: SgfDims = field(default_factory=lambda: SgfDims(d_e=9, d_c=48, d_proj=16))
    seed: int = 0

    def __post_init__(self) -> None:
        if self.color_space not in COLOR_SPACES:
            raise ValueError(f"unknown color_space {self.color_space!r}")
        if self.stat not in STATS:
            raise ValueError(f"unknown stat {self.stat!r}")


def encode_tokens(img: Image, grid: PatchGrid) -> np.ndarray:
    """Per-patch raw color statistics as 9-dim encoder tokens.

    Layout: per-channel mean (3), per-channel population standard
    deviation (3), per-channel mid-range (min+max)/2 (3). Not normalized.
    """
    px = patchify(img.data.astype(np.float64), grid)
    means = px.mean(axis=1)
    stds = px.std(axis=1)
    mids = (px.min(axis=1) + px.max(axis=1)) / 2.0
    return np.concatenate([means, stds, mids], axis=1)


@dataclass
class HarmonizeTrace:
    """Intermediates kept for inspection and attention dumps."""

    grid: PatchGrid
    fg_patch_ids: np.ndarray
    bg_patch_ids: np.ndarray
    attention_weights: Optional[np.ndarray]
    target_mean: np.ndarray
    target_std: np.ndarray


def harmonize(
    sample: CompositeSample,
    reference: Optional[Image] = None,
    cfg: Optional[HarmonizeConfig] = None,
) -> Image:
    """Harmonized image at the working resolution; background verbatim."""
    out, _ = harmonize_with_trace(sample, reference, cfg)
    return out


def harmonize_with_trace(
    sample: CompositeSample,
    reference: Optional[Image] = None,
    cfg: Optional[HarmonizeConfig] = None,
) -> tuple[Image, HarmonizeTrace]:
    cfg = cfg or HarmonizeConfig()
    working = sample
    if (sample.composite.height, sample.composite.width) != (WORKING_SIZE, WORKING_SIZE):
        working = sample.resized(WORKING_SIZE)
    composite = working.composite
    mask = working.mask
    grid = PatchGrid.for_image(composite)

    coverage = patch_coverage(mask, grid)
    fg_ids = np.flatnonzero(coverage >= PATCH_COVERAGE_TAU)
    if fg_ids.size == 0:
        raise EmptyForegroundError(
            f"sample {sample.id!r}: no patch reaches foreground coverage "
            f"{PATCH_COVERAGE_TAU}"
        )
    bg_ids = np.flatnonzero(coverage < PATCH_COVERAGE_TAU)

    use_ref = cfg.use_reference and reference is not None
    ref_img: Optional[Image] = None
    if use_ref:
        ref_img = reference
        if (ref_img.height, ref_img.width) != (WORKING_SIZE, WORKING_SIZE):
            ref_img = ref_img.resized(WORKING_SIZE, WORKING_SIZE)

    if bg_ids.size == 0 and not use_ref:
        # No value tokens to attend over: nothing to transfer toward.
        trace = HarmonizeTrace(
            grid=grid,
            fg_patch_ids=fg_ids,
            bg_patch_ids=bg_ids,
            attention_weights=None,
            target_mean=np.zeros(0),
            target_std=np.zeros(0),
        )
        return Image(composite.data.copy()), trace

    tokens = encode_tokens(composite, grid)
    guidance = compute_builtin_content(composite, grid).vectors.astype(np.float64)
    e_f, c_f = tokens[fg_ids], guidance[fg_ids]
    e_b, c_b = tokens[bg_ids], guidance[bg_ids]
    if use_ref:
        ref_grid = PatchGrid.for_image(ref_img)
        e_r = encode_tokens(ref_img, ref_grid)
        c_r = compute_builtin_content(ref_img, ref_grid).vectors.astype(np.float64)
    else:
        e_r = np.zeros((0, tokens.shape[1]))
        c_r = np.zeros((0, guidance.shape[1]))

    w = init_weights(cfg.seed, cfg.sgf_dims, "sgf")
    bundle = run_sgf(e_f, e_b, e_r, c_f, c_b, c_r, w)
    mass = bundle.weights.sum(axis=0)
    total = float(mass.sum())

    if cfg.color_space == "rgb":
        value_means = np.concatenate([e_b[:, 0:3], e_r[:, 0:3]], axis=0)
        value_stds = np.concatenate([e_b[:, 3:6], e_r[:, 3:6]], axis=0)
    else:
        comp_v = rgb_to_hsv(composite).val
        pv = patchify(comp_v, grid)
        v_means = pv.mean(axis=1)[:, None]
        v_stds = pv.std(axis=1)[:, None]
        if use_ref:
            rv = patchify(rgb_to_hsv(ref_img).val, ref_grid)
            r_means = rv.mean(axis=1)[:, None]
            r_stds = rv.std(axis=1)[:, None]
        else:
            r_means = np.zeros((0, 1))
            r_stds = np.zeros((0, 1))
        value_means = np.concatenate([v_means[bg_ids], r_means], axis=0)
        value_stds = np.concatenate([v_stds[bg_ids], r_stds], axis=0)

    target_mean = mass @ value_means / total
    target_std = mass @ value_stds / total

    fg_pixels = mask.data == 1
    raw = composite.data.astype(np.float64)
    out = raw.copy()
    if cfg.color_space == "rgb":
        fg_vals = raw[fg_pixels]
        mu_f = fg_vals.mean(axis=0)
        sigma_f = np.maximum(fg_vals.std(axis=0), SIGMA_FLOOR)
        out[fg_pixels] = (fg_vals - mu_f) / sigma_f * target_std + target_mean
    else:
        hsv = rgb_to_hsv(composite)
        v = hsv.val.copy()
        fg_v = v[fg_pixels]
        mu_f = fg_v.mean()
        sigma_f = max(float(fg_v.std()), SIGMA_FLOOR)
        v[fg_pixels] = (fg_v - mu_f) / sigma_f * float(target_std[0]) + float(
            target_mean[0]
        )
        mapped = hsv_to_rgb(HsvImage(np.stack([hsv.hue, hsv.sat, v], axis=-1)))
        out[fg_pixels] = mapped.data.astype(np.float64)[fg_pixels]

    if cfg.clamp:
        out = np.clip(out, 0.0, 1.0)
    result = Image(out.astype(np.float32))
    # Background must survive float round trips bit-exactly, so copy it.
    data = result.data.copy()
    data[~fg_pixels] = composite.data[~fg_pixels]
    trace = HarmonizeTrace(
        grid=grid,
        fg_patch_ids=fg_ids,
        bg_patch_ids=bg_ids,
        attention_weights=bundle.weights,
        target_mean=np.atleast_1d(target_mean),
        target_std=np.atleast_1d(target_std),
    )
    return Image(data), trace
