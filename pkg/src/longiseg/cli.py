"""``longiseg`` command line: preprocess, train, infer, ensemble, postprocess, evaluate, compare, fixtures.

Exit codes: 0 success, 2 configuration or usage error, 3 data error,
4 numerical failure (NaN or Inf surfaced during compute).
The default worker-thread count comes from ``LONGISEG_THREADS`` (else 1).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np

from .config import PipelineConfig, load_config, preset
from .evaluation import UsageError, bootstrap_compare, build_report, case_metrics, read_report, write_report
from .fixtures import write_cohort
from .inference import argmax_labels, average_probabilities, resample_labels_to_original, sliding_window_predict
from .manifest import Manifest, ManifestEntry, ManifestError, load_manifest
from .network import BuildError, build
from .postprocess import mpdr_filter, remove_small
from .preprocess import resample, znorm
from .training import ConfigError, train_repeats
from .volume_io import CaseRecord, LabelMap, NiftiError, Volume, read_nifti, write_nifti
from .weights import WeightFileError, load_weights, save_weights

log = logging.getLogger("longiseg")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
THREADS_ENV = "LONGISEG_THREADS"


class DataError(Exception):
    """Input data is missing or inconsistent."""


def default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV}={raw!r} is not an integer") from exc
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1")
    return n


def resolve_config(spec: Optional[str]) -> PipelineConfig:
    """A config file path, or ``preset:NAME[:SCALE]`` for a built-in preset."""
    if spec is None:
        raise ConfigError("--config is required for this command")
    if spec.startswith("preset:"):
        parts = spec.split(":")
        return preset(parts[1], parts[2] if len(parts) > 2 else "paper")
    if not Path(spec).exists():
        raise ConfigError(f"config file not found: {spec}")
    return load_config(spec)


def _map_cases(fn: Callable, items: Sequence, threads: int) -> list:
    """Run ``fn`` over cases; results come back in input order."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- commands


def cmd_fixtures(out_dir, seed: int = 0, n_patients: int = 20, n_folds: int = 5, dims=(40, 40, 32)) -> Path:
    return write_cohort(out_dir, n_patients=n_patients, seed=seed, n_folds=n_folds, dims=tuple(dims))


def _native(v: Volume) -> dict:
    return {"dims": list(v.dims), "spacing": list(v.spacing), "origin": list(v.origin)}


def cmd_preprocess(manifest: Manifest, out_dir, cfg: Optional[PipelineConfig] = None, threads: int = 1) -> Path:
    """Resample every case to the target spacing, z-normalize intensities, and write a new manifest."""
    spacing = (1.0, 1.0, 1.0) if cfg is None else cfg.target_spacing
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def one(e: ManifestEntry) -> ManifestEntry:
        image = read_nifti(e.image, kind="image")
        new = ManifestEntry(e.case_id, out / f"{e.case_id}_image.nii", e.timepoint, e.fold, e.patient_id)
        new.native = e.native if e.native is not None else _native(image)
        write_nifti(znorm(resample(image, spacing, "trilinear")), new.image)
        if e.prior_image is not None:
            new.prior_image = out / f"{e.case_id}_prior_image.nii"
            write_nifti(znorm(resample(read_nifti(e.prior_image, kind="image"), spacing, "trilinear")), new.prior_image)
        if e.ground_truth is not None:
            new.ground_truth = out / f"{e.case_id}_label.nii"
            write_nifti(resample(read_nifti(e.ground_truth, kind="label"), spacing, "nearest"), new.ground_truth)
        if e.prior is not None:
            new.prior = out / f"{e.case_id}_prior.nii"
            write_nifti(resample(read_nifti(e.prior, kind="label"), spacing, "nearest"), new.prior)
        for key in ("prior_gtvp", "prior_gtvn"):
            src = getattr(e, key)
            if src is not None:
                dst = out / f"{e.case_id}_{key}.nii"
                mask = read_nifti(src, kind="label")
                write_nifti(resample(LabelMap((mask.data > 0).astype(np.uint8), mask.spacing, mask.origin), spacing, "nearest"), dst)
                setattr(new, key, dst)
        return new

    entries = _map_cases(one, manifest.cases, threads)
    path = out / "manifest.json"
    Manifest(entries, manifest.n_folds, out).save(path)
    return path


def split_for_fold(manifest: Manifest, cfg: PipelineConfig, fold: Optional[int]):
    """Training entries (other folds, configured timepoints) and validation entries (held-out fold)."""
    if fold is None:
        return manifest.select(cfg.training_timepoints), []
    if not 1 <= fold <= manifest.n_folds:
        raise ConfigError(f"fold {fold} outside [1, {manifest.n_folds}]")
    tr = manifest.select(cfg.training_timepoints, exclude_folds={fold})
    va = manifest.select([cfg.validation_timepoint], folds={fold})
    return tr, va


def cmd_train(cfg: PipelineConfig, manifest: Manifest, fold: Optional[int], out_dir, seed: Optional[int] = None) -> Path:
    """Train on the folds other than ``fold``; writes the weights plus a JSON sidecar."""
    cfg.validate()
    seed = cfg.train.seed if seed is None else seed
    tcfg = dataclasses.replace(cfg.train, seed=seed)
    tr, va = split_for_fold(manifest, cfg, fold)
    if not tr:
        raise DataError("no training cases for this fold and timepoint selection")
    train_cases = [e.load() for e in tr]
    val_cases = [e.load() for e in va]
    for c in train_cases + val_cases:
        if c.ground_truth is None:
            raise DataError(f"{c.case_id}: training and validation cases need ground truth")
    res = train_repeats(
        lambda s: build(cfg.network, s), train_cases, tcfg, val_cases, cfg.sliding_window, cfg.input_recipe
    )
    net = build(cfg.network, res.seed)
    net.load_state_dict(res.best_state)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"fold{fold if fold is not None else 0}_seed{res.seed}"
    wpath = out / f"{stem}.lsw"
    save_weights(net, wpath)
    sidecar = {
        "epoch": res.best_epoch,
        "val_dsc_agg": res.best_val_dsc,
        "config_hash": cfg.hash(),
        "config_name": cfg.name,
        "seed": res.seed,
        "fold": fold,
        "history": [dataclasses.asdict(h) for h in res.history],
    }
    (out / f"{stem}.json").write_text(json.dumps(sidecar, indent=2) + "\n")
    return wpath


def load_checkpoint(path, cfg: PipelineConfig):
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    side = path.with_suffix(".json")
    if side.exists():
        meta = json.loads(side.read_text())
        if meta.get("config_hash") not in (None, cfg.hash()):
            log.warning("%s was trained with a different config (hash %s, now %s)", path, meta["config_hash"], cfg.hash())
    return load_weights(path, cfg.network)


def apply_postprocess(labels: LabelMap, case: CaseRecord, cfg: PipelineConfig) -> LabelMap:
    pp = cfg.postprocess
    if pp.remove_small:
        labels = remove_small(labels, pp.min_cm3, pp.connectivity)
    if pp.mpdr:
        if not case.has_priors:
            raise DataError(f"{case.case_id}: MPDR needs prior masks")
        labels = mpdr_filter(labels, case.prior_gtvp, case.prior_gtvn, pp.connectivity, pp.mpdr_mode)
    return labels


def _write_outputs(e: ManifestEntry, case: CaseRecord, probs: np.ndarray, cfg: PipelineConfig, out: Path, save_probs: bool):
    like = case.image
    if save_probs:
        for k in range(probs.shape[0]):
            write_nifti(Volume(probs[k].astype(np.float32), like.spacing, like.origin), out / f"{e.case_id}_prob{k}.nii")
    labels = LabelMap(argmax_labels(probs), like.spacing, like.origin)
    labels = apply_postprocess(labels, case, cfg)
    write_nifti(labels, out / f"{e.case_id}_label.nii")
    if e.native is not None and tuple(e.native["dims"]) != labels.dims:
        nat = resample_labels_to_original(labels, e.native["dims"], e.native["spacing"], e.native["origin"])
        write_nifti(nat, out / f"{e.case_id}_label_native.nii")
    return labels


def _select(manifest: Manifest, timepoints=None, folds=None) -> List[ManifestEntry]:
    entries = manifest.select(timepoints, folds)
    if not entries:
        raise DataError("no cases match the selection")
    return entries


def cmd_infer(
    cfg: PipelineConfig,
    manifest: Manifest,
    checkpoints: Sequence,
    out_dir,
    folds=None,
    timepoints=None,
    save_probs: bool = True,
    threads: int = 1,
) -> Path:
    """Ensemble sliding-window prediction of every selected case."""
    cfg.validate()
    if not checkpoints:
        raise ConfigError("at least one checkpoint is required")
    models = [load_checkpoint(p, cfg) for p in checkpoints]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def one(e: ManifestEntry):
        case = e.load()
        probs = average_probabilities([sliding_window_predict(m, case, cfg.sliding_window, cfg.input_recipe) for m in models])
        if not np.all(np.isfinite(probs)):
            raise FloatingPointError(f"{e.case_id}: non-finite probabilities")
        _write_outputs(e, case, probs, cfg, out, save_probs)

    _map_cases(one, _select(manifest, timepoints, folds), threads)
    return out


def cmd_ensemble(cfg: PipelineConfig, manifest: Manifest, input_dirs: Sequence, out_dir, folds=None, timepoints=None, threads: int = 1) -> Path:
    """Average saved probability maps from several inference runs."""
    if not input_dirs:
        raise ConfigError("at least one input directory is required")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def one(e: ManifestEntry):
        case = e.load()
        maps = []
        for d in input_dirs:
            files = [Path(d) / f"{e.case_id}_prob{k}.nii" for k in range(3)]
            missing = [f for f in files if not f.exists()]
            if missing:
                raise DataError(f"missing probability map {missing[0]}")
            maps.append(np.stack([read_nifti(f, kind="image").data for f in files]))
        _write_outputs(e, case, average_probabilities(maps), cfg, out, True)

    _map_cases(one, _select(manifest, timepoints, folds), threads)
    return out


def cmd_postprocess(cfg: PipelineConfig, manifest: Manifest, input_dir, out_dir, folds=None, timepoints=None, threads: int = 1) -> Path:
    """Apply the configured filters to existing label maps."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def one(e: ManifestEntry):
        src = Path(input_dir) / f"{e.case_id}_label.nii"
        if not src.exists():
            raise DataError(f"missing prediction {src}")
        write_nifti(apply_postprocess(read_nifti(src, kind="label"), e.load(), cfg), out / src.name)

    _map_cases(one, _select(manifest, timepoints, folds), threads)
    return out


def cmd_evaluate(manifest: Manifest, pred_dir, out_path, name: str = "", folds=None, timepoints=None, threads: int = 1) -> dict:
    """Per-case counts and DSC_agg summary for every case with a prediction and ground truth."""
    pred_dir = Path(pred_dir)
    entries = [e for e in _select(manifest, timepoints, folds) if e.ground_truth is not None]
    entries = [e for e in entries if (pred_dir / f"{e.case_id}_label.nii").exists()]
    if not entries:
        raise DataError(f"no predictions with ground truth found in {pred_dir}")

    def one(e: ManifestEntry):
        pred = read_nifti(pred_dir / f"{e.case_id}_label.nii", kind="label")
        gt = read_nifti(e.ground_truth, kind="label")
        if pred.dims != gt.dims:
            raise DataError(f"{e.case_id}: prediction grid {pred.dims} differs from ground truth {gt.dims}")
        return case_metrics(e.case_id, pred.data, gt.data)

    report = build_report(_map_cases(one, entries, threads), name)
    if out_path is not None:
        write_report(report, out_path)
    return report


def cmd_compare(reports_a: Sequence, reports_b: Sequence, seed: int = 0, n_iter: int = 10_000, out_path=None) -> dict:
    res = bootstrap_compare([read_report(p) for p in reports_a], [read_report(p) for p in reports_b], n_iter, seed)
    verdict = {
        "a": [str(p) for p in reports_a],
        "b": [str(p) for p in reports_b],
        "seed": seed,
        "n_iter": res.n_iter,
        "n_cases": res.n_cases,
        "win_fraction_a": res.win_fraction,
        "win_fraction_b": res.loss_fraction,
        "significant": res.significant,
        "better": res.better,
    }
    if out_path is not None:
        Path(out_path).write_text(json.dumps(verdict, indent=2) + "\n")
    return verdict


# ---------------------------------------------------------------- argument parsing


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config JSON path, or preset:NAME[:paper|desk]")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=None, help=f"worker threads (default ${THREADS_ENV} or 1)")
    common.add_argument("--out", default=None, help="output directory (or file for evaluate/compare)")
    common.add_argument("-v", "--verbose", action="store_true")

    sel = argparse.ArgumentParser(add_help=False)
    sel.add_argument("--manifest", required=True)
    sel.add_argument("--fold", type=int, action="append", default=None, help="restrict to fold(s); repeatable")
    sel.add_argument("--timepoint", choices=("pre", "mid"), action="append", default=None)

    p = argparse.ArgumentParser(prog="longiseg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fixtures", parents=[common], help="write a synthetic phantom cohort")
    f.add_argument("--patients", type=int, default=20)
    f.add_argument("--folds", type=int, default=5)
    f.add_argument("--dims", type=int, nargs=3, default=(40, 40, 32))

    pr = sub.add_parser("preprocess", parents=[common], help="resample to target spacing and z-normalize")
    pr.add_argument("--manifest", required=True)

    t = sub.add_parser("train", parents=[common], help="train one model on the folds other than --fold")
    t.add_argument("--manifest", required=True)
    t.add_argument("--fold", type=int, default=None, help="held-out validation fold (omit to train on all)")

    i = sub.add_parser("infer", parents=[common, sel], help="ensemble sliding-window inference")
    i.add_argument("--checkpoints", nargs="+", required=True)
    i.add_argument("--no-probs", action="store_true", help="do not write probability maps")

    e = sub.add_parser("ensemble", parents=[common, sel], help="average saved probability maps")
    e.add_argument("--inputs", nargs="+", required=True)

    pp = sub.add_parser("postprocess", parents=[common, sel], help="apply remove_small / MPDR to label maps")
    pp.add_argument("--inputs", required=True)

    ev = sub.add_parser("evaluate", parents=[common, sel], help="write a DSC_agg report")
    ev.add_argument("--inputs", required=True, help="directory with <case_id>_label.nii files")
    ev.add_argument("--name", default="")

    c = sub.add_parser("compare", parents=[common], help="paired bootstrap between two groups of reports")
    c.add_argument("--a", nargs="+", required=True)
    c.add_argument("--b", nargs="+", required=True)
    c.add_argument("--iterations", type=int, default=10_000)
    return p


def _run(args) -> None:
    threads = args.threads if args.threads is not None else default_threads()
    if threads < 1:
        raise ConfigError("--threads must be >= 1")
    cmd = args.command
    if cmd == "fixtures":
        out = args.out or "fixtures"
        path = cmd_fixtures(out, args.seed or 0, args.patients, args.folds, args.dims)
        print(path)
        return
    if cmd == "compare":
        verdict = cmd_compare(args.a, args.b, args.seed or 0, args.iterations, args.out)
        print(json.dumps(verdict, indent=2))
        return

    manifest = load_manifest(args.manifest)
    if cmd == "evaluate":
        report = cmd_evaluate(manifest, args.inputs, args.out, args.name, args.fold, args.timepoint, threads)
        print(json.dumps(report["summary"], indent=2))
        return
    cfg = resolve_config(args.config) if (args.config or cmd != "preprocess") else None
    if cfg is not None:
        cfg.validate()
    out = args.out or cmd
    if cmd == "preprocess":
        print(cmd_preprocess(manifest, out, cfg, threads))
    elif cmd == "train":
        print(cmd_train(cfg, manifest, args.fold, out, args.seed))
    elif cmd == "infer":
        print(cmd_infer(cfg, manifest, args.checkpoints, out, args.fold, args.timepoint, not args.no_probs, threads))
    elif cmd == "ensemble":
        print(cmd_ensemble(cfg, manifest, args.inputs, out, args.fold, args.timepoint, threads))
    elif cmd == "postprocess":
        print(cmd_postprocess(cfg, manifest, args.inputs, out, args.fold, args.timepoint, threads))


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _run(args)
    except FloatingPointError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, ManifestError, NiftiError, WeightFileError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, BuildError, UsageError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
