"""Resampling, intensity normalization, patch sampling and augmentation.

Image tensors here are plain numpy arrays shaped C×X×Y×Z; the autodiff
Tensor only enters at the network boundary.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .volume_io import LabelMap, Volume

PAPER_CLASS_PROBS = (0.1, 0.45, 0.45)


@dataclass
class PatchSpec:
    size: Tuple[int, int, int] = (32, 32, 32)
    class_probs: Tuple[float, float, float] = PAPER_CLASS_PROBS

    def __post_init__(self):
        self.size = tuple(int(s) for s in self.size)
        self.class_probs = tuple(float(p) for p in self.class_probs)
        if len(self.size) != 3 or any(s < 1 for s in self.size):
            raise ValueError(f"patch size must be three positive ints, got {self.size}")
        if len(self.class_probs) != 3 or any(p < 0 for p in self.class_probs):
            raise ValueError("class_probs must be three nonnegative values")
        if abs(sum(self.class_probs) - 1.0) > 1e-9:
            raise ValueError(f"class_probs must sum to 1, got {sum(self.class_probs)}")


@dataclass
class AugmentConfig:
    rotation_deg: float = 25.0
    flip_axes: Tuple[int, ...] = (0, 1, 2)
    flip_prob: float = 0.5
    zoom_range: Tuple[float, float] = (0.8, 1.2)
    affine_prob: float = 1.0
    noise_prob: float = 0.15
    noise_std_range: Tuple[float, float] = (0.01, 0.1)
    blur_prob: float = 0.2
    blur_sigma_range: Tuple[float, float] = (0.5, 1.0)
    enabled: bool = True

    @classmethod
    def paper(cls) -> "AugmentConfig":
        return cls()

    @classmethod
    def off(cls) -> "AugmentConfig":
        return cls(enabled=False)

    def within_paper_bounds(self) -> bool:
        lo, hi = self.zoom_range
        return 0 <= self.rotation_deg <= 25.0 and 0.8 <= lo <= hi <= 1.2


# ---------------------------------------------------------------- geometry


def _axis_coords(n_out: int, s_out: float, o_out: float, s_in: float, o_in: float) -> np.ndarray:
    """Continuous input index of each output voxel center along one axis."""
    phys = o_out + np.arange(n_out) * s_out
    return (phys - o_in) / s_in


def _linear_1d(a: np.ndarray, coords: np.ndarray, axis: int) -> np.ndarray:
    n = a.shape[axis]
    c = np.clip(coords, 0, n - 1)
    lo = np.floor(c).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    t = (c - lo).astype(a.dtype if a.dtype.kind == "f" else np.float64)
    shape = [1] * a.ndim
    shape[axis] = -1
    t = t.reshape(shape)
    return np.take(a, lo, axis=axis) * (1 - t) + np.take(a, hi, axis=axis) * t


def _nearest_1d(a: np.ndarray, coords: np.ndarray, axis: int) -> np.ndarray:
    n = a.shape[axis]
    idx = np.clip(np.floor(coords + 0.5), 0, n - 1).astype(np.int64)
    return np.take(a, idx, axis=axis)


def resample_to_grid(
    v: Volume,
    dims: Sequence[int],
    spacing: Sequence[float],
    origin: Sequence[float],
    mode: str = "trilinear",
) -> Volume:
    """Sample ``v`` on an arbitrary axis-aligned grid (edge values beyond bounds)."""
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"unknown resampling mode {mode!r}")
    fn = _linear_1d if mode == "trilinear" else _nearest_1d
    out = np.asarray(v.data)
    if mode == "trilinear" and out.dtype.kind != "f":
        out = out.astype(np.float32)
    for ax in range(3):
        coords = _axis_coords(int(dims[ax]), spacing[ax], origin[ax], v.spacing[ax], v.origin[ax])
        out = fn(out, coords, ax)
    if isinstance(v, LabelMap):
        return LabelMap(out, spacing, origin)
    return Volume(out.astype(v.data.dtype), spacing, origin)


def resample(v: Volume, target_spacing=(1.0, 1.0, 1.0), mode: str = "trilinear") -> Volume:
    """Resample to ``target_spacing`` with voxel-center alignment.

    The output covers the same physical extent: its first voxel center sits
    half an output voxel inside the input's outer edge.
    """
    target = tuple(float(t) for t in target_spacing)
    if any(not (t > 0) for t in target):
        raise ValueError(f"target spacing must be positive, got {target}")
    dims = tuple(
        max(1, int(round(n * s / t))) for n, s, t in zip(v.dims, v.spacing, target)
    )
    origin = tuple(o - 0.5 * s + 0.5 * t for o, s, t in zip(v.origin, v.spacing, target))
    if dims == v.dims and np.allclose(target, v.spacing, rtol=0, atol=1e-9):
        return type(v)(np.array(v.data), v.spacing, v.origin)
    return resample_to_grid(v, dims, target, origin, mode)


def znorm(v: Volume) -> Volume:
    """Z-score the non-zero voxels (population std); zeros stay zero."""
    data = np.array(v.data, dtype=np.float64)
    nz = data != 0
    out = np.zeros_like(data)
    if nz.any():
        vals = data[nz]
        mu, sd = vals.mean(), vals.std()
        if sd > 0:
            out[nz] = (vals - mu) / sd
    return Volume(out.astype(v.data.dtype if v.data.dtype.kind == "f" else np.float32), v.spacing, v.origin)


def one_hot(labels, n_classes: int = 3) -> np.ndarray:
    """C×X×Y×Z indicator channels of a label array or LabelMap."""
    data = np.asarray(labels.data if isinstance(labels, Volume) else labels)
    return (data[None] == np.arange(n_classes).reshape((-1,) + (1,) * data.ndim)).astype(np.float32)


# ---------------------------------------------------------------- patches


def sample_patch_center(labels, spec: PatchSpec, rng: np.random.Generator) -> Tuple[int, int, int]:
    """Draw a class by ``spec.class_probs``, then a uniform voxel of that class.

    Classes with no voxels have their mass renormalized over the rest; the
    background class draws from the whole volume.
    """
    data = np.asarray(labels.data if isinstance(labels, Volume) else labels)
    probs = np.array(spec.class_probs, dtype=np.float64)
    present = np.array([True] + [bool((data == c).any()) for c in (1, 2)])
    probs = np.where(present, probs, 0.0)
    if probs.sum() <= 0:
        probs = np.array([1.0, 0.0, 0.0])
    probs /= probs.sum()
    cls = int(rng.choice(3, p=probs))
    if cls == 0:
        flat = int(rng.integers(data.size))
        return tuple(int(i) for i in np.unravel_index(flat, data.shape))
    idx = np.flatnonzero(data == cls)
    flat = int(idx[rng.integers(idx.size)])
    return tuple(int(i) for i in np.unravel_index(flat, data.shape))


def _crop_slices(shape, center, size):
    src, dst = [], []
    for n, c, s in zip(shape, center, size):
        lo = int(c) - s // 2
        a, b = max(lo, 0), min(lo + s, n)
        if b <= a:
            src.append(slice(0, 0))
            dst.append(slice(0, 0))
        else:
            src.append(slice(a, b))
            dst.append(slice(a - lo, b - lo))
    return tuple(src), tuple(dst)


def crop_patch(x, center, size) -> np.ndarray:
    """Extract ``[center - size//2, center - size//2 + size)``, zero-filled outside.

    ``x`` is a Volume or an array whose last three axes are spatial.
    """
    arr = np.asarray(x.data if isinstance(x, Volume) else x)
    size = tuple(int(s) for s in size)
    lead = arr.shape[:-3]
    out = np.zeros(lead + size, dtype=arr.dtype)
    src, dst = _crop_slices(arr.shape[-3:], center, size)
    out[(Ellipsis,) + dst] = arr[(Ellipsis,) + src]
    return out


def embed_patch(target: np.ndarray, patch: np.ndarray, center) -> np.ndarray:
    """Write ``patch`` back into ``target`` at ``center`` (inverse of crop_patch)."""
    size = patch.shape[-3:]
    src, dst = _crop_slices(target.shape[-3:], center, size)
    target[(Ellipsis,) + src] = patch[(Ellipsis,) + dst]
    return target


# ---------------------------------------------------------------- augmentation


def _rotation_matrix(angles_rad) -> np.ndarray:
    ax, ay, az = angles_rad
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def apply_affine(
    img: np.ndarray,
    masks: Optional[np.ndarray],
    angles_deg=(0.0, 0.0, 0.0),
    zoom: float = 1.0,
    flips: Sequence[int] = (),
):
    """Apply rotation ∘ zoom about the volume center, then flips.

    ``zoom > 1`` enlarges content. Images use trilinear, masks nearest.
    """
    img = np.asarray(img)
    spatial = img.shape[-3:]
    center = (np.array(spatial, dtype=np.float64) - 1) / 2
    fwd = _rotation_matrix(np.deg2rad(angles_deg)) * float(zoom)
    identity = np.allclose(fwd, np.eye(3))

    def warp(a: np.ndarray, order: int) -> np.ndarray:
        if identity:
            out = np.array(a)
        else:
            inv = np.linalg.inv(fwd)
            offset = center - inv @ center
            out = np.stack(
                [
                    ndimage.affine_transform(
                        ch, inv, offset=offset, order=order, mode="constant", cval=0.0
                    )
                    for ch in a.reshape((-1,) + spatial)
                ]
            ).reshape(a.shape)
        for ax in flips:
            out = np.flip(out, axis=a.ndim - 3 + ax)
        return np.ascontiguousarray(out).astype(a.dtype)

    out_img = warp(img, 1)
    out_masks = warp(masks, 0) if masks is not None else None
    return out_img, out_masks


def random_affine(img: np.ndarray, masks: Optional[np.ndarray], cfg: AugmentConfig, rng: np.random.Generator):
    """One random rotation/zoom/flip applied identically to image and masks."""
    if not cfg.enabled or rng.random() >= cfg.affine_prob:
        return np.array(img), (None if masks is None else np.array(masks))
    angles = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg, size=3)
    zoom = rng.uniform(*cfg.zoom_range)
    flips = [ax for ax in cfg.flip_axes if rng.random() < cfg.flip_prob]
    return apply_affine(img, masks, angles, zoom, flips)


def gaussian_noise(img: np.ndarray, std: float, rng: np.random.Generator) -> np.ndarray:
    if std < 0:
        raise ValueError("noise std must be nonnegative")
    if std == 0:
        return np.array(img)
    return (img + rng.normal(0.0, std, size=img.shape)).astype(img.dtype)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable normalized Gaussian over the last three axes, truncated at 4σ."""
    if sigma < 0:
        raise ValueError("blur sigma must be nonnegative")
    if sigma == 0:
        return np.array(img)
    sig = [0.0] * (img.ndim - 3) + [sigma] * 3
    return ndimage.gaussian_filter(img, sigma=sig, truncate=4.0, mode="nearest").astype(img.dtype)


def augment(img: np.ndarray, masks: Optional[np.ndarray], cfg: AugmentConfig, rng: np.random.Generator):
    """Full augmentation chain: affine, then noise and blur on the image only."""
    if not cfg.enabled:
        return np.array(img), (None if masks is None else np.array(masks))
    img, masks = random_affine(img, masks, cfg, rng)
    if rng.random() < cfg.noise_prob:
        img = gaussian_noise(img, rng.uniform(*cfg.noise_std_range), rng)
    if rng.random() < cfg.blur_prob:
        img = gaussian_blur(img, rng.uniform(*cfg.blur_sigma_range))
    return img, masks


# ---------------------------------------------------------------- input recipes

RECIPE_IMAGE = "image"
RECIPE_IMAGE_PRIORS = "image+priors"
RECIPE_IMAGE_PRIOR_IMAGE_PRIORS = "image+prior_image+priors"
RECIPE_CHANNELS = {
    RECIPE_IMAGE: 1,
    RECIPE_IMAGE_PRIORS: 3,
    RECIPE_IMAGE_PRIOR_IMAGE_PRIORS: 4,
}


def recipe_for_channels(in_channels: int) -> str:
    for recipe, n in RECIPE_CHANNELS.items():
        if n == in_channels:
            return recipe
    raise ValueError(f"no input recipe produces {in_channels} channels")


def case_intensities(case, recipe: str) -> np.ndarray:
    """Intensity channels (interpolated trilinearly under augmentation)."""
    chans = [np.asarray(case.image.data, dtype=np.float32)]
    if recipe == RECIPE_IMAGE_PRIOR_IMAGE_PRIORS:
        prior = case.prior_image
        chans.append(
            np.zeros(case.image.dims, np.float32) if prior is None else np.asarray(prior.data, np.float32)
        )
    return np.stack(chans)


def assemble_input(intensities: np.ndarray, priors: np.ndarray, recipe: str) -> np.ndarray:
    """Network input channels: intensities, then the two prior masks if the recipe uses them."""
    if recipe not in RECIPE_CHANNELS:
        raise ValueError(f"unknown input recipe {recipe!r}")
    if recipe == RECIPE_IMAGE:
        return np.asarray(intensities[:1], dtype=np.float32)
    return np.concatenate([intensities, priors], axis=0).astype(np.float32)
