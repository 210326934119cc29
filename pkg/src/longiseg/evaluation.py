"""Dice, aggregated Dice (pooled counts) and bootstrap comparison of configurations."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

CLASSES = (1, 2)
CLASS_NAMES = {1: "gtvp", 2: "gtvn"}


class UsageError(ValueError):
    pass


@dataclass(frozen=True)
class ClassCounts:
    intersection: int
    pred: int
    truth: int

    @property
    def dice(self) -> Optional[float]:
        denom = self.pred + self.truth
        return None if denom == 0 else 2.0 * self.intersection / denom


@dataclass(frozen=True)
class CaseMetrics:
    case_id: str
    gtvp: ClassCounts
    gtvn: ClassCounts

    def counts(self, cls: int) -> ClassCounts:
        return self.gtvp if cls == 1 else self.gtvn

    def dice(self, cls: int) -> Optional[float]:
        return self.counts(cls).dice

    def to_dict(self) -> dict:
        out = {"case_id": self.case_id}
        for cls in CLASSES:
            c = self.counts(cls)
            out[CLASS_NAMES[cls]] = {
                "intersection": c.intersection,
                "pred": c.pred,
                "truth": c.truth,
                "dice": c.dice,
            }
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "CaseMetrics":
        def cc(x):
            return ClassCounts(int(x["intersection"]), int(x["pred"]), int(x["truth"]))

        return cls(str(d["case_id"]), cc(d["gtvp"]), cc(d["gtvn"]))


def _arr(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x))


def class_counts(pred, gt, cls: int) -> ClassCounts:
    p, t = _arr(pred) == cls, _arr(gt) == cls
    if p.shape != t.shape:
        raise UsageError(f"prediction shape {p.shape} != ground truth shape {t.shape}")
    return ClassCounts(int(np.count_nonzero(p & t)), int(p.sum()), int(t.sum()))


def dice(pred, gt, cls: int) -> Optional[float]:
    """2·|P∩T|/(|P|+|T|) for one class; None when both sets are empty."""
    return class_counts(pred, gt, cls).dice


def case_metrics(case_id: str, pred, gt) -> CaseMetrics:
    return CaseMetrics(case_id, class_counts(pred, gt, 1), class_counts(pred, gt, 2))


def dsc_agg(cases: Sequence[CaseMetrics], cls: int) -> Optional[float]:
    """Aggregated Dice: 2·ΣI / Σ(P+T) with counts pooled over cases."""
    inter = sum(c.counts(cls).intersection for c in cases)
    denom = sum(c.counts(cls).pred + c.counts(cls).truth for c in cases)
    return None if denom == 0 else 2.0 * inter / denom


def dsc_agg_mean(cases: Sequence[CaseMetrics]) -> Optional[float]:
    """Mean of the GTVp and GTVn aggregated Dice (defined classes only)."""
    vals = [v for v in (dsc_agg(cases, 1), dsc_agg(cases, 2)) if v is not None]
    return float(np.mean(vals)) if vals else None


def dsc_agg_pooled(cases: Sequence[CaseMetrics]) -> Optional[float]:
    """Aggregated Dice with counts pooled across both classes as well."""
    inter = sum(c.counts(k).intersection for c in cases for k in CLASSES)
    denom = sum(c.counts(k).pred + c.counts(k).truth for c in cases for k in CLASSES)
    return None if denom == 0 else 2.0 * inter / denom


# ---------------------------------------------------------------- bootstrap


@dataclass(frozen=True)
class BootstrapResult:
    win_fraction: float  # fraction of trials where A > B
    loss_fraction: float  # fraction of trials where B > A
    significant: bool
    better: Optional[str]
    n_iter: int
    n_cases: int

    def to_dict(self) -> dict:
        return {
            "win_fraction_a": self.win_fraction,
            "win_fraction_b": self.loss_fraction,
            "significant": self.significant,
            "better": self.better,
            "n_iter": self.n_iter,
            "n_cases": self.n_cases,
        }


def _count_array(models: Sequence[Sequence[CaseMetrics]]) -> Tuple[List[str], np.ndarray]:
    """models × cases × classes × (I, P+T) integer array, cases sorted by id."""
    ids = sorted(c.case_id for c in models[0])
    arr = np.zeros((len(models), len(ids), 2, 2), dtype=np.float64)
    for m, cases in enumerate(models):
        by_id = {c.case_id: c for c in cases}
        if sorted(by_id) != ids:
            raise UsageError("all models must be evaluated on the same case set")
        for i, cid in enumerate(ids):
            for k, cls in enumerate(CLASSES):
                cc = by_id[cid].counts(cls)
                arr[m, i, k] = (cc.intersection, cc.pred + cc.truth)
    return ids, arr


def _config_scores(counts: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Per-trial score: DSC_agg class-mean per model, averaged over models."""
    pooled = np.einsum("tc,mckj->tmkj", weights, counts)
    inter, denom = pooled[..., 0], pooled[..., 1]
    with np.errstate(invalid="ignore", divide="ignore"):
        d = np.where(denom > 0, 2 * inter / np.where(denom > 0, denom, 1), np.nan)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        per_model = np.nanmean(d, axis=2)
        return np.nanmean(per_model, axis=1)


def bootstrap_compare(
    models_a: Sequence[Sequence[CaseMetrics]],
    models_b: Sequence[Sequence[CaseMetrics]],
    n_iter: int = 10_000,
    seed: int = 0,
    n_cases: Optional[int] = None,
    alpha: float = 0.05,
) -> BootstrapResult:
    """Paired bootstrap over cases between two groups of models.

    Each trial resamples the case ids with replacement, computes each
    model's mean-of-classes DSC_agg on the resample and averages over the
    models of a configuration. A configuration is significantly better when
    it strictly exceeds the other in at least ``1 - alpha`` of the trials.
    """
    if not models_a or not models_b:
        raise UsageError("need at least one model per configuration")
    ids_a, ca = _count_array(models_a)
    ids_b, cb = _count_array(models_b)
    if ids_a != ids_b:
        raise UsageError("configurations were evaluated on different case sets")
    n = len(ids_a)
    k = n if n_cases is None else int(n_cases)
    rng = np.random.default_rng(seed)
    draws = rng.integers(0, n, size=(n_iter, k))
    weights = np.zeros((n_iter, n), dtype=np.float64)
    np.add.at(weights, (np.repeat(np.arange(n_iter), k), draws.ravel()), 1.0)
    sa, sb = _config_scores(ca, weights), _config_scores(cb, weights)
    win = float(np.mean(sa > sb))
    loss = float(np.mean(sb > sa))
    thresh = 1.0 - alpha
    better = "a" if win >= thresh else ("b" if loss >= thresh else None)
    return BootstrapResult(win, loss, better is not None, better, n_iter, k)


# ---------------------------------------------------------------- reports


def build_report(cases: Sequence[CaseMetrics], name: str = "") -> dict:
    """Structured report: per-case records then a summary block (stable order)."""
    return {
        "name": name,
        "cases": [c.to_dict() for c in sorted(cases, key=lambda c: c.case_id)],
        "summary": {
            "n_cases": len(cases),
            "dsc_agg_gtvp": dsc_agg(cases, 1),
            "dsc_agg_gtvn": dsc_agg(cases, 2),
            "dsc_agg_mean": dsc_agg_mean(cases),
            "dsc_agg_pooled": dsc_agg_pooled(cases),
        },
    }


def write_report(report: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")


def read_report(path) -> List[CaseMetrics]:
    with open(path) as fh:
        report = json.load(fh)
    return [CaseMetrics.from_dict(c) for c in report["cases"]]
