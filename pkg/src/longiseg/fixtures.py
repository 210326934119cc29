"""Synthetic head-and-neck phantoms with known pre-/mid-RT ground truth.

Each patient has a primary tumour (GTVp) and one or two nodes (GTVn) as
ellipsoids inside an ellipsoidal "head". Mid-RT lesions share centers with
their pre-RT counterparts and have strictly smaller radii, so the mid-RT
truth is contained in the pre-RT truth.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .volume_io import MID_RT, PRE_RT, CaseRecord, LabelMap, Volume, write_nifti

BACKGROUND_TISSUE = 100.0
GTVP_INTENSITY = 170.0
GTVN_INTENSITY = 140.0


@dataclass
class Lesion:
    cls: int
    center_mm: np.ndarray
    radii_mm: np.ndarray

    def mask(self, coords: np.ndarray) -> np.ndarray:
        d = (coords - self.center_mm.reshape(3, 1, 1, 1)) / self.radii_mm.reshape(3, 1, 1, 1)
        return (d ** 2).sum(axis=0) <= 1.0

    def shrunk(self, factor: float) -> "Lesion":
        return Lesion(self.cls, self.center_mm.copy(), self.radii_mm * factor)


def _coords(dims, spacing) -> np.ndarray:
    return np.stack(
        np.meshgrid(*[np.arange(n) * s for n, s in zip(dims, spacing)], indexing="ij")
    )


def _render(dims, spacing, lesions: Sequence[Lesion], rng: np.random.Generator, noise: float):
    coords = _coords(dims, spacing)
    extent = np.array([n * s for n, s in zip(dims, spacing)])
    head = Lesion(0, (extent - np.array(spacing)) / 2, extent * 0.47).mask(coords)
    img = np.where(head, BACKGROUND_TISSUE, 0.0)
    labels = np.zeros(dims, dtype=np.uint8)
    for les in lesions:
        m = les.mask(coords) & head
        labels[m] = les.cls
        img[m] = GTVP_INTENSITY if les.cls == 1 else GTVN_INTENSITY
    img = np.where(head, img + rng.normal(0, noise, size=dims), 0.0)
    return img.astype(np.float32), labels


def _place(rng, extent, radii, taken: List[Tuple[np.ndarray, float]]) -> np.ndarray:
    for _ in range(200):
        c = extent / 2 + rng.uniform(-0.22, 0.22, size=3) * extent
        if all(np.linalg.norm(c - t) > r + radii.max() + 2.0 for t, r in taken):
            return c
    return extent / 2


def make_patient(
    rng: np.random.Generator,
    patient_id: str,
    dims=(40, 40, 32),
    spacing=(0.9, 0.9, 1.2),
    noise: float = 5.0,
    small_node: bool = False,
) -> Tuple[CaseRecord, CaseRecord]:
    """Return the (pre-RT, mid-RT) CaseRecords of one synthetic patient."""
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    extent = np.array([n * s for n, s in zip(dims, spacing)])
    lesions, taken = [], []
    rp = rng.uniform(7.0, 9.5, size=3)
    cp = _place(rng, extent, rp, taken)
    lesions.append(Lesion(1, cp, rp))
    taken.append((cp, rp.max()))
    for _ in range(int(rng.integers(1, 3))):
        rn = rng.uniform(6.0, 7.5, size=3)
        cn = _place(rng, extent, rn, taken)
        lesions.append(Lesion(2, cn, rn))
        taken.append((cn, rn.max()))
    mid_lesions = [les.shrunk(rng.uniform(0.75, 0.9)) for les in lesions]

    pre_img, pre_lab = _render(dims, spacing, lesions, rng, noise)
    mid_img, mid_lab = _render(dims, spacing, mid_lesions, rng, noise)
    pre_label = LabelMap(pre_lab, spacing)
    pre = CaseRecord(
        f"{patient_id}_pre", Volume(pre_img, spacing), PRE_RT,
        ground_truth=pre_label, patient_id=patient_id,
    )
    mid = CaseRecord(
        f"{patient_id}_mid", Volume(mid_img, spacing), MID_RT,
        prior_gtvp=(pre_lab == 1), prior_gtvn=(pre_lab == 2),
        ground_truth=LabelMap(mid_lab, spacing), prior_image=Volume(pre_img, spacing),
        patient_id=patient_id,
    )
    return pre, mid


def make_cohort(n_patients: int, seed: int = 0, **kwargs) -> List[Tuple[CaseRecord, CaseRecord]]:
    rng = np.random.default_rng(seed)
    return [make_patient(rng, f"P{i:03d}", **kwargs) for i in range(n_patients)]


def write_cohort(out_dir, n_patients: int = 20, seed: int = 0, n_folds: int = 5, **kwargs) -> Path:
    """Write phantoms as NIfTI plus ``manifest.json``; returns the manifest path."""
    from .training import crossval_split

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cohort = make_cohort(n_patients, seed, **kwargs)
    folds = crossval_split([pre.patient_id for pre, _ in cohort], n_folds, seed)
    entries = []
    for pre, mid in cohort:
        pid = pre.patient_id
        write_nifti(pre.image, out / f"{pid}_pre_image.nii")
        write_nifti(pre.ground_truth, out / f"{pid}_pre_label.nii")
        write_nifti(mid.image, out / f"{pid}_mid_image.nii")
        write_nifti(mid.ground_truth, out / f"{pid}_mid_label.nii")
        entries.append(
            {
                "case_id": pre.case_id,
                "patient_id": pid,
                "timepoint": PRE_RT,
                "image": f"{pid}_pre_image.nii",
                "ground_truth": f"{pid}_pre_label.nii",
                "fold": folds[pid],
            }
        )
        entries.append(
            {
                "case_id": mid.case_id,
                "patient_id": pid,
                "timepoint": MID_RT,
                "image": f"{pid}_mid_image.nii",
                "ground_truth": f"{pid}_mid_label.nii",
                "prior": f"{pid}_pre_label.nii",
                "prior_image": f"{pid}_pre_image.nii",
                "fold": folds[pid],
            }
        )
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps({"n_folds": n_folds, "cases": entries}, indent=2) + "\n")
    return manifest
