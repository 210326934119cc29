"""Case manifests: a JSON list of cases with paths relative to the manifest.

Example::

    {
      "n_folds": 5,
      "cases": [
        {"case_id": "P000_pre", "patient_id": "P000", "timepoint": "pre",
         "image": "P000_pre_image.nii", "ground_truth": "P000_pre_label.nii", "fold": 3},
        {"case_id": "P000_mid", "patient_id": "P000", "timepoint": "mid",
         "image": "P000_mid_image.nii", "ground_truth": "P000_mid_label.nii",
         "prior": "P000_pre_label.nii", "prior_image": "P000_pre_image.nii", "fold": 3}
      ]
    }

Priors are given either as one label file (``prior``, values 0/1/2) or as two
binary masks (``prior_gtvp`` and ``prior_gtvn``). ``ground_truth`` is optional.
Preprocessed manifests also carry ``native`` (dims, spacing, origin of the
original grid) so predictions can be mapped back.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .volume_io import MID_RT, PRE_RT, CaseRecord, LabelMap, load_binary_mask, read_nifti

PATH_KEYS = ("image", "ground_truth", "prior", "prior_gtvp", "prior_gtvn", "prior_image")
_KNOWN = set(PATH_KEYS) | {"case_id", "patient_id", "timepoint", "fold", "native"}


class ManifestError(ValueError):
    """Malformed manifest or missing referenced file."""


@dataclass
class ManifestEntry:
    case_id: str
    image: Path
    timepoint: str
    fold: int
    patient_id: str = ""
    ground_truth: Optional[Path] = None
    prior: Optional[Path] = None
    prior_gtvp: Optional[Path] = None
    prior_gtvn: Optional[Path] = None
    prior_image: Optional[Path] = None
    native: Optional[dict] = None

    def load(self) -> CaseRecord:
        image = read_nifti(self.image, kind="image")
        gt = read_nifti(self.ground_truth, kind="label") if self.ground_truth else None
        pp = pn = None
        if self.prior is not None:
            prior = read_nifti(self.prior, kind="label")
            pp, pn = prior.data == 1, prior.data == 2
        elif self.prior_gtvp is not None or self.prior_gtvn is not None:
            zeros = np.zeros(image.dims, dtype=bool)
            pp = load_binary_mask(self.prior_gtvp) if self.prior_gtvp else zeros
            pn = load_binary_mask(self.prior_gtvn) if self.prior_gtvn else zeros
        pimg = read_nifti(self.prior_image, kind="image") if self.prior_image else None
        for what, arr in (("prior_gtvp", pp), ("prior_gtvn", pn), ("ground_truth", gt), ("prior_image", pimg)):
            dims = None if arr is None else (arr.dims if hasattr(arr, "dims") else arr.shape)
            if dims is not None and tuple(dims) != image.dims:
                raise ManifestError(f"{self.case_id}: {what} grid {dims} differs from image {image.dims}")
        return CaseRecord(
            self.case_id, image, self.timepoint,
            prior_gtvp=pp, prior_gtvn=pn, ground_truth=gt, prior_image=pimg,
            patient_id=self.patient_id or self.case_id,
        )

    def to_dict(self, root: Path) -> dict:
        d = {"case_id": self.case_id, "patient_id": self.patient_id, "timepoint": self.timepoint}
        for k in PATH_KEYS:
            p = getattr(self, k)
            if p is not None:
                d[k] = _rel(p, root)
        d["fold"] = self.fold
        if self.native is not None:
            d["native"] = self.native
        return d


def _rel(p: Path, root: Path) -> str:
    try:
        return str(Path(p).resolve().relative_to(root.resolve()))
    except ValueError:
        return str(Path(p).resolve())


@dataclass
class Manifest:
    cases: List[ManifestEntry]
    n_folds: int = 5
    root: Path = field(default_factory=Path)

    def select(self, timepoints: Optional[Sequence[str]] = None, folds=None, exclude_folds=None) -> List[ManifestEntry]:
        out = []
        for e in self.cases:
            if timepoints is not None and e.timepoint not in timepoints:
                continue
            if folds is not None and e.fold not in folds:
                continue
            if exclude_folds is not None and e.fold in exclude_folds:
                continue
            out.append(e)
        return out

    def entry(self, case_id: str) -> ManifestEntry:
        for e in self.cases:
            if e.case_id == case_id:
                return e
        raise KeyError(case_id)

    def to_json(self, root: Optional[Path] = None) -> str:
        root = Path(root) if root is not None else self.root
        doc = {"n_folds": self.n_folds, "cases": [e.to_dict(root) for e in self.cases]}
        return json.dumps(doc, indent=2) + "\n"

    def save(self, path) -> None:
        path = Path(path)
        path.write_text(self.to_json(path.parent))


def load_manifest(path) -> Manifest:
    """Parse and validate a manifest; every referenced file must exist."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ManifestError(f"manifest not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("cases"), list):
        raise ManifestError("manifest must be an object with a 'cases' list")
    n_folds = int(doc.get("n_folds", 5))
    if n_folds < 1:
        raise ManifestError("n_folds must be >= 1")
    root = path.parent
    seen = set()
    entries = []
    for i, raw in enumerate(doc["cases"]):
        if not isinstance(raw, dict):
            raise ManifestError(f"case #{i} is not an object")
        unknown = set(raw) - _KNOWN
        if unknown:
            raise ManifestError(f"case #{i}: unknown key(s) {sorted(unknown)}")
        for key in ("case_id", "image", "timepoint", "fold"):
            if key not in raw:
                raise ManifestError(f"case #{i}: missing {key!r}")
        cid = str(raw["case_id"])
        if cid in seen:
            raise ManifestError(f"duplicate case_id {cid!r}")
        seen.add(cid)
        if raw["timepoint"] not in (PRE_RT, MID_RT):
            raise ManifestError(f"{cid}: timepoint must be {PRE_RT!r} or {MID_RT!r}")
        fold = raw["fold"]
        if isinstance(fold, bool) or not isinstance(fold, int) or not 1 <= fold <= n_folds:
            raise ManifestError(f"{cid}: fold {fold!r} outside [1, {n_folds}]")
        if "prior" in raw and ("prior_gtvp" in raw or "prior_gtvn" in raw):
            raise ManifestError(f"{cid}: give either 'prior' or 'prior_gtvp'/'prior_gtvn', not both")
        paths = {}
        for key in PATH_KEYS:
            if raw.get(key) is None:
                continue
            p = Path(raw[key])
            p = p if p.is_absolute() else root / p
            if not p.exists():
                raise ManifestError(f"{cid}: {key} file does not exist: {p}")
            paths[key] = p
        entries.append(
            ManifestEntry(
                case_id=cid, timepoint=raw["timepoint"], fold=fold,
                patient_id=str(raw.get("patient_id", cid)), native=raw.get("native"), **paths,
            )
        )
    return Manifest(entries, n_folds, root)
