"""Sliding-window prediction with Gaussian blending and model ensembling."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import product
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .preprocess import assemble_input, case_intensities, recipe_for_channels, resample_to_grid
from .volume_io import CaseRecord, LabelMap, Volume


@dataclass
class SlidingWindowConfig:
    patch_size: Tuple[int, int, int] = (32, 32, 32)
    overlap: float = 0.625
    sigma_scale: float = 0.125
    blend_mode: str = "gaussian"
    windows_per_batch: int = 1
    threads: int = 1

    def __post_init__(self):
        self.patch_size = tuple(int(p) for p in self.patch_size)
        if not 0 <= self.overlap < 1:
            raise ValueError(f"overlap must be in [0, 1), got {self.overlap}")
        if self.blend_mode not in ("gaussian", "constant"):
            raise ValueError(f"unknown blend mode {self.blend_mode!r}")
        if self.sigma_scale <= 0:
            raise ValueError("sigma_scale must be positive")


def gaussian_window(size, sigma_scale: float = 0.125) -> np.ndarray:
    """Separable Gaussian importance map with peak value 1."""
    axes = []
    for n in size:
        c = (n - 1) / 2.0
        sigma = sigma_scale * n
        axes.append(np.exp(-0.5 * ((np.arange(n) - c) / sigma) ** 2))
    w = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    w = w / w.max()
    return np.maximum(w, np.finfo(np.float64).tiny)


def window_starts(n: int, patch: int, overlap: float) -> List[int]:
    """Window origins along one axis; the last window sits flush with the border."""
    if n <= patch:
        return [0]
    stride = max(1, math.ceil(patch * (1 - overlap)))
    starts = list(range(0, n - patch + 1, stride))
    if starts[-1] + patch < n:
        starts.append(n - patch)
    return starts


def _needs_priors(model) -> bool:
    cfg = getattr(model, "config", None)
    return bool(getattr(cfg, "attention_enabled", False))


def _recipe(model, recipe: Optional[str]) -> str:
    if recipe is not None:
        return recipe
    cfg = getattr(model, "config", None)
    return recipe_for_channels(getattr(cfg, "in_channels", 1))


def sliding_window_arrays(
    model,
    x: np.ndarray,
    priors: Optional[np.ndarray],
    cfg: SlidingWindowConfig,
) -> np.ndarray:
    """Blend patch predictions over a C×X×Y×Z input; returns 3×X×Y×Z probabilities."""
    cfg_model = getattr(model, "config", None)
    if cfg_model is not None and x.shape[0] != cfg_model.in_channels:
        raise ValueError(
            f"model expects {cfg_model.in_channels} input channels, got {x.shape[0]}"
        )
    patch = cfg.patch_size
    dims = x.shape[1:]
    padded = tuple(max(d, p) for d, p in zip(dims, patch))
    pad = [(0, 0)] + [(0, p - d) for d, p in zip(dims, padded)]
    xp = np.pad(x, pad)
    pp = np.pad(priors, pad) if priors is not None else None

    starts = [window_starts(n, p, cfg.overlap) for n, p in zip(padded, patch)]
    windows = list(product(*starts))
    weight = (
        gaussian_window(patch, cfg.sigma_scale)
        if cfg.blend_mode == "gaussian"
        else np.ones(patch)
    )

    def slices(s):
        return tuple(slice(a, a + p) for a, p in zip(s, patch))

    batches = [
        windows[i: i + max(1, cfg.windows_per_batch)]
        for i in range(0, len(windows), max(1, cfg.windows_per_batch))
    ]

    def run(batch):
        xb = np.stack([xp[(slice(None),) + slices(s)] for s in batch])
        pb = np.stack([pp[(slice(None),) + slices(s)] for s in batch]) if pp is not None else None
        return np.asarray(model.predict_proba(xb, pb), dtype=np.float64)

    acc = np.zeros((3,) + padded, dtype=np.float64)
    wsum = np.zeros(padded, dtype=np.float64)
    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            results = list(pool.map(run, batches))
    else:
        results = map(run, batches)
    # accumulation happens here, in window order, whatever the worker count
    for batch, probs in zip(batches, results):
        for s, pr in zip(batch, probs):
            sl = slices(s)
            acc[(slice(None),) + sl] += weight * pr
            wsum[sl] += weight
    out = acc / wsum
    return out[(slice(None),) + tuple(slice(0, d) for d in dims)]


def sliding_window_predict(
    model,
    case: CaseRecord,
    cfg: SlidingWindowConfig,
    recipe: Optional[str] = None,
) -> np.ndarray:
    """Class probabilities (3×X×Y×Z) for one case on its own grid."""
    recipe = _recipe(model, recipe)
    priors = case.priors()
    x = assemble_input(case_intensities(case, recipe), priors, recipe)
    return sliding_window_arrays(model, x, priors if _needs_priors(model) else None, cfg)


def average_probabilities(maps: Sequence[np.ndarray]) -> np.ndarray:
    """Element-wise mean, summed in sorted order so model order cannot matter."""
    stack = np.sort(np.stack([np.asarray(m, dtype=np.float64) for m in maps]), axis=0)
    total = np.zeros(stack.shape[1:], dtype=np.float64)
    for layer in stack:
        total += layer
    return total / len(maps)


def argmax_labels(probs: np.ndarray) -> np.ndarray:
    """Highest-probability class per voxel; ties go to the lowest index."""
    return np.argmax(probs, axis=0).astype(np.uint8)


def ensemble_predict(
    models: Sequence,
    case: CaseRecord,
    cfg: SlidingWindowConfig,
    recipe: Optional[str] = None,
) -> Tuple[np.ndarray, LabelMap]:
    if not models:
        raise ValueError("ensemble needs at least one model")
    maps = [sliding_window_predict(m, case, cfg, recipe) for m in models]
    probs = average_probabilities(maps)
    return probs, LabelMap(argmax_labels(probs), case.image.spacing, case.image.origin)


def probability_volumes(probs: np.ndarray, like: Volume) -> List[Volume]:
    return [Volume(p.astype(np.float32), like.spacing, like.origin) for p in probs]


def resample_labels_to_original(labels: LabelMap, dims, spacing, origin) -> LabelMap:
    """Nearest-neighbour map of labels back onto the native grid."""
    out = resample_to_grid(labels, dims, spacing, origin, mode="nearest")
    return LabelMap(out.data, spacing, origin)
