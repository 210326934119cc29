"""Connected-component cleanup: small-region removal and MPDR prior-overlap filtering."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from scipy import ndimage

from .volume_io import LabelMap

_RANK = {6: 1, 18: 2, 26: 3}


@dataclass
class Component:
    class_id: int
    voxels: np.ndarray  # K×3 integer coordinates
    spacing: tuple = (1.0, 1.0, 1.0)

    @property
    def count(self) -> int:
        return int(len(self.voxels))

    @property
    def volume_cm3(self) -> float:
        return self.count * float(np.prod(self.spacing)) / 1000.0


def structure(connectivity: int) -> np.ndarray:
    if connectivity not in _RANK:
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    return ndimage.generate_binary_structure(3, _RANK[connectivity])


def _linear_index(coords: np.ndarray, shape) -> np.ndarray:
    """x-fastest linear index, matching the on-disk voxel order."""
    nx, ny, _ = shape
    return coords[:, 0] + nx * (coords[:, 1] + ny * coords[:, 2])


def label_class(data: np.ndarray, cls: int, connectivity: int = 26):
    """Integer component map for one class, components renumbered 1..n by minimum linear index."""
    lab, n = ndimage.label(np.asarray(data) == cls, structure=structure(connectivity))
    if n == 0:
        return lab, 0
    shape = lab.shape
    nx, ny, _ = shape
    xs, ys, zs = np.indices(shape, sparse=True)
    lin = xs + nx * (ys + ny * zs)
    first = ndimage.minimum(np.broadcast_to(lin, shape).copy(), lab, index=np.arange(1, n + 1))
    order = np.argsort(first, kind="stable")
    remap = np.zeros(n + 1, dtype=lab.dtype)
    remap[order + 1] = np.arange(1, n + 1)
    return remap[lab], n


def connected_components(labels: LabelMap, connectivity: int = 26) -> List[Component]:
    """Maximal connected sets per foreground class, class 1 first, then by minimum linear index."""
    data = np.asarray(labels.data)
    out = []
    for cls in (1, 2):
        lab, n = label_class(data, cls, connectivity)
        if n == 0:
            continue
        coords = np.argwhere(lab > 0)
        ids = lab[tuple(coords.T)]
        order = np.argsort(ids, kind="stable")
        coords, ids = coords[order], ids[order]
        bounds = np.searchsorted(ids, np.arange(1, n + 2))
        for i in range(n):
            vox = coords[bounds[i]: bounds[i + 1]]
            vox = vox[np.argsort(_linear_index(vox, data.shape), kind="stable")]
            out.append(Component(cls, vox, labels.spacing))
    return out


def remove_small(labels: LabelMap, min_cm3: float = 0.5, connectivity: int = 26, spacing=None) -> LabelMap:
    """Relabel components strictly smaller than ``min_cm3`` to background."""
    spacing = labels.spacing if spacing is None else tuple(spacing)
    voxel_cm3 = float(np.prod(spacing)) / 1000.0
    data = np.array(labels.data)
    for cls in (1, 2):
        lab, n = label_class(labels.data, cls, connectivity)
        if n == 0:
            continue
        sizes = np.bincount(lab.ravel(), minlength=n + 1)
        small = sizes * voxel_cm3 < min_cm3
        small[0] = False
        data[small[lab]] = 0
    return LabelMap(data, labels.spacing, labels.origin)


def mpdr_filter(
    pred: LabelMap,
    prior_gtvp: np.ndarray,
    prior_gtvn: np.ndarray,
    connectivity: int = 26,
    mode: str = "per_class",
) -> LabelMap:
    """Drop predicted components that share no voxel with the registered prior.

    ``mode="per_class"`` checks GTVp components against the GTVp prior and
    GTVn against GTVn; ``mode="union"`` checks both against the union.
    """
    if mode not in ("per_class", "union"):
        raise ValueError(f"unknown MPDR mode {mode!r}")
    pp, pn = np.asarray(prior_gtvp) > 0, np.asarray(prior_gtvn) > 0
    if pp.shape != pred.dims or pn.shape != pred.dims:
        raise ValueError(f"prior masks {pp.shape}/{pn.shape} do not match prediction grid {pred.dims}")
    union = pp | pn
    priors = {1: pp, 2: pn} if mode == "per_class" else {1: union, 2: union}
    data = np.array(pred.data)
    for cls in (1, 2):
        lab, n = label_class(pred.data, cls, connectivity)
        if n == 0:
            continue
        overlap = np.bincount(lab[priors[cls]].ravel(), minlength=n + 1)
        drop = overlap == 0
        drop[0] = False
        data[drop[lab]] = 0
    return LabelMap(data, pred.spacing, pred.origin)
