"""Small end-to-end experiments on synthetic phantoms, shared by scripts/ and the acceptance tests."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .evaluation import CaseMetrics, case_metrics, dsc_agg, dsc_agg_mean
from .fixtures import make_cohort, make_patient
from .inference import SlidingWindowConfig
from .network import NetworkConfig, build
from .postprocess import connected_components, mpdr_filter, remove_small
from .preprocess import AugmentConfig, znorm
from .training import TrainConfig, train, validate
from .volume_io import LabelMap

# ---------------------------------------------------------------- overfit sanity run


@dataclass
class OverfitResult:
    dice: float
    step_losses: List[float]
    window_means: List[float]
    seconds: float


def window_means(losses, window: int = 20) -> List[float]:
    return [float(np.mean(losses[i: i + window])) for i in range(0, len(losses) - window + 1, window)]


def toy_overfit(steps: int = 200, init_filters: int = 4, lr: float = 3e-3, size: int = 32, seed: int = 0,
                window: int = 20) -> OverfitResult:
    """Train a plain SegResNet on one pre-RT phantom until it memorizes it.

    The patch covers the whole 1 mm volume, so each epoch is one optimizer step.
    """
    pre, _ = make_patient(np.random.default_rng(seed), "toy", dims=(size,) * 3, spacing=(1, 1, 1))
    pre.image = znorm(pre.image)
    net = build(NetworkConfig(in_channels=1, init_filters=init_filters), seed)
    cfg = TrainConfig(lr=lr, epochs=steps, patches_per_sample=1, batch_size=1, patch_size=(size,) * 3,
                      augment=AugmentConfig.off(), seeds_per_split=1, sampling="center", seed=seed)
    t0 = time.perf_counter()
    res = train(net, [pre], cfg)
    seconds = time.perf_counter() - t0
    dsc = validate(net, [pre], SlidingWindowConfig(patch_size=(size,) * 3))
    return OverfitResult(float(dsc), res.step_losses, window_means(res.step_losses, window), seconds)


# ---------------------------------------------------------------- postprocessing ablation


@dataclass
class Injected:
    class_id: int
    voxels: np.ndarray  # K×3 indices
    volume_cm3: float


@dataclass
class AblationResult:
    raw: List[CaseMetrics] = field(default_factory=list)
    mpdr: List[CaseMetrics] = field(default_factory=list)
    pre_raw: List[CaseMetrics] = field(default_factory=list)
    pre_small: List[CaseMetrics] = field(default_factory=list)
    n_small_injected: int = 0
    n_large_injected: int = 0
    n_removed: int = 0
    removed_exactly_small: bool = True

    def summary(self) -> dict:
        out = {}
        for name, cases in (("mid_raw", self.raw), ("mid_mpdr", self.mpdr),
                            ("pre_raw", self.pre_raw), ("pre_remove_small", self.pre_small)):
            out[name] = {"gtvp": dsc_agg(cases, 1), "gtvn": dsc_agg(cases, 2), "mean": dsc_agg_mean(cases)}
        out["injected_small"] = self.n_small_injected
        out["injected_large"] = self.n_large_injected
        out["removed"] = self.n_removed
        return out


def _free_box(rng, occupied: np.ndarray, side: Tuple[int, int, int], tries: int = 500) -> Optional[Tuple[slice, ...]]:
    """A box whose one-voxel margin does not touch ``occupied``."""
    dims = occupied.shape
    for _ in range(tries):
        lo = [int(rng.integers(1, d - s)) for d, s in zip(dims, side)]
        margin = tuple(slice(a - 1, a + s + 1) for a, s in zip(lo, side))
        if not occupied[margin].any():
            return tuple(slice(a, a + s) for a, s in zip(lo, side))
    return None


def inject_false_positives(labels: np.ndarray, spacing, rng, n_small: int = 2, n_large: int = 1,
                           avoid: Optional[np.ndarray] = None) -> Tuple[np.ndarray, List[Injected]]:
    """Add isolated boxes of random class: ``n_small`` under 0.5 cm³ and ``n_large`` above it.

    Each box keeps a one-voxel gap to every other foreground voxel (and to
    ``avoid``), so with 26-connectivity it stays a component of its own.
    """
    out = labels.copy()
    occupied = out > 0 if avoid is None else (out > 0) | avoid
    vox_cm3 = float(np.prod(spacing)) / 1000.0
    injected = []
    for small in [True] * n_small + [False] * n_large:
        if small:
            side = tuple(int(s) for s in rng.integers(1, 5, size=3))
        else:
            edge = int(np.ceil((0.6 / vox_cm3) ** (1 / 3)))
            side = (edge, edge, edge)
        box = _free_box(rng, occupied, side)
        if box is None:
            continue
        cls = int(rng.integers(1, 3))
        out[box] = cls
        occupied[tuple(slice(max(b.start - 1, 0), b.stop + 1) for b in box)] = True
        mask = np.zeros_like(out, bool)
        mask[box] = True
        injected.append(Injected(cls, np.argwhere(mask), mask.sum() * vox_cm3))
    return out, injected


def phantom_ablation(n_patients: int = 20, seed: int = 0, n_small: int = 2, n_large: int = 1) -> AblationResult:
    """Apply the two postprocessing filters to ground truth corrupted with isolated false positives.

    Mid-RT predictions get false positives that do not touch the pre-RT masks
    and are filtered by MPDR; pre-RT predictions get small and large false
    positives and are filtered by small-component removal.
    """
    rng = np.random.default_rng(seed)
    res = AblationResult()
    for pre, mid in make_cohort(n_patients, seed):
        sp = mid.image.spacing
        truth = mid.ground_truth.data
        prior = mid.prior_gtvp.astype(bool) | mid.prior_gtvn.astype(bool)
        pred, _ = inject_false_positives(truth, sp, rng, n_small, n_large, avoid=prior)
        lab = LabelMap(pred, sp)
        res.raw.append(case_metrics(mid.case_id, pred, truth))
        res.mpdr.append(case_metrics(mid.case_id, mpdr_filter(lab, mid.prior_gtvp, mid.prior_gtvn).data, truth))

        ptruth = pre.ground_truth.data
        ppred, inj = inject_false_positives(ptruth, sp, rng, n_small, n_large)
        small = [i for i in inj if i.volume_cm3 < 0.5]
        res.n_small_injected += len(small)
        res.n_large_injected += len(inj) - len(small)
        cleaned = remove_small(LabelMap(ppred, sp), 0.5)
        removed = (ppred > 0) & (cleaned.data == 0)
        expected = np.zeros_like(removed)
        for i in small:
            expected[tuple(i.voxels.T)] = True
        res.removed_exactly_small &= bool(np.array_equal(removed, expected))
        before = len(connected_components(LabelMap(ppred, sp)))
        res.n_removed += before - len(connected_components(cleaned))
        res.pre_raw.append(case_metrics(pre.case_id, ppred, ptruth))
        res.pre_small.append(case_metrics(pre.case_id, cleaned.data, ptruth))
    return res
