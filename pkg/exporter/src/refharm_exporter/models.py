"""Patch descriptor models.

Every model is a pure function of the patch pixels: no weights are
downloaded and no state survives between calls, so identical images
export identical features on every run and machine. Inputs arrive as a
(P, ps, ps, 3) float32 block in [0, 1]; outputs are (P, dim) float64
rows that the export step normalizes and narrows to float32.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import ModelLoadError

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)

Model = Callable[[np.ndarray], np.ndarray]


def _channel_stats(patches: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    flat = patches.reshape(patches.shape[0], -1, 3).astype(np.float64)
    return flat, flat.mean(axis=1), flat.std(axis=1)


def _luma_gradient(patches: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    luma = patches.astype(np.float64) @ _LUMA
    gy = np.gradient(luma, axis=1)
    gx = np.gradient(luma, axis=2)
    return luma, np.sqrt(gy * gy + gx * gx)


def _tiny(patches: np.ndarray) -> np.ndarray:
    """8-dim summary: channel means and spreads, brightness, edge energy."""
    _, means, stds = _channel_stats(patches)
    luma, grad = _luma_gradient(patches)
    return np.concatenate(
        [
            means,
            stds,
            luma.mean(axis=(1, 2))[:, None],
            grad.mean(axis=(1, 2))[:, None],
        ],
        axis=1,
    )


def _base(patches: np.ndarray) -> np.ndarray:
    """16-dim summary: the tiny block plus channel extrema and
    second-order brightness/edge spreads."""
    flat, _, _ = _channel_stats(patches)
    luma, grad = _luma_gradient(patches)
    return np.concatenate(
        [
            _tiny(patches),
            flat.min(axis=1),
            flat.max(axis=1),
            luma.std(axis=(1, 2))[:, None],
            grad.std(axis=(1, 2))[:, None],
        ],
        axis=1,
    )


MODELS: dict[str, Model] = {
    "ref-dvt-tiny-v1": _tiny,
    "ref-dvt-base-v1": _base,
}


def load_model(name: str) -> Model:
    try:
        return MODELS[name]
    except KeyError:
        raise ModelLoadError(
            f"unknown model {name!r}; available: {', '.join(sorted(MODELS))}"
        ) from None
