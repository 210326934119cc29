"""Deep-supervision compound loss, AdamW with cosine annealing, and the training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor, backward
from .autodiff import functional as F
from .evaluation import case_metrics, dsc_agg_mean
from .inference import SlidingWindowConfig, argmax_labels, sliding_window_predict
from .network import DEEP_SUPERVISION_WEIGHTS, Network
from .preprocess import (
    AugmentConfig,
    PatchSpec,
    assemble_input,
    augment,
    case_intensities,
    crop_patch,
    one_hot,
    recipe_for_channels,
    sample_patch_center,
)
from .volume_io import MID_RT, PRE_RT, CaseRecord

log = logging.getLogger(__name__)

DICE_SMOOTH = 1e-5


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    lr_min: float = 0.0
    epochs: int = 400
    patches_per_sample: int = 2
    batch_size: int = 3
    patch_size: Tuple[int, int, int] = (192, 192, 128)
    class_probs: Tuple[float, float, float] = (0.1, 0.45, 0.45)
    grad_clip: Optional[float] = None
    val_interval: int = 1
    seed: int = 0
    seeds_per_split: int = 3
    sampling: str = "class"
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.patch_size = tuple(int(p) for p in self.patch_size)
        self.class_probs = tuple(self.class_probs)
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.patches_per_sample < 1 or self.batch_size < 1:
            raise ConfigError("patches_per_sample and batch_size must be >= 1")
        if self.sampling not in ("class", "center"):
            raise ConfigError(f"sampling must be 'class' or 'center', got {self.sampling!r}")

    @classmethod
    def paper(cls, task: int = 1) -> "TrainConfig":
        size = (192, 192, 128) if task == 1 else (160, 160, 128)
        return cls(patch_size=size)

    @classmethod
    def desk(cls) -> "TrainConfig":
        return cls(lr=2e-3, epochs=4, patch_size=(32, 32, 32), seeds_per_split=1)


# ---------------------------------------------------------------- losses


def _target_onehot(target: np.ndarray, n_classes: int, dtype) -> np.ndarray:
    """N×X×Y×Z labels -> N×C×X×Y×Z one-hot."""
    return np.stack([one_hot(t, n_classes) for t in np.asarray(target)]).astype(dtype)


def dice_loss(probs: Tensor, target_onehot: np.ndarray, smooth: float = DICE_SMOOTH, reduction: str = "sum") -> Tensor:
    """Soft Dice loss over the foreground classes, one value per sample.

    Per sample: 1 - mean_c (2·Σp·t + s) / (Σp + Σt + s) for c in {1, 2}.
    """
    t = np.asarray(target_onehot, dtype=probs.dtype)
    if t.shape != probs.shape:
        raise ValueError(f"dice_loss: target {t.shape} does not match prediction {probs.shape}")
    axes = tuple(range(2, probs.ndim))
    fg = (slice(None), slice(1, None))
    p = F.getitem(probs, fg)
    tf = np.ascontiguousarray(t[fg])
    inter = F.sum(p * tf, axis=axes)
    denom = F.sum(p, axis=axes) + (tf.sum(axis=axes) + smooth)
    score = F.div(inter * 2.0 + smooth, denom)
    per_sample = 1.0 - F.mean(score, axis=1)
    return _reduce(per_sample, reduction)


def ce_loss(logits: Tensor, target: np.ndarray, reduction: str = "sum") -> Tensor:
    """Voxel-mean cross-entropy from logits, one value per sample."""
    t = _target_onehot(target, logits.shape[1], logits.dtype)
    if t.shape != logits.shape:
        raise ValueError(f"ce_loss: target {t.shape[2:]} does not match logits {logits.shape[2:]}")
    axes = tuple(range(1, logits.ndim))
    nvox = int(np.prod(logits.shape[2:]))
    per_sample = F.neg(F.sum(F.log_softmax(logits, axis=1) * t, axis=axes)) * (1.0 / nvox)
    return _reduce(per_sample, reduction)


def _reduce(per_sample: Tensor, reduction: str) -> Tensor:
    if reduction == "sum":
        return F.sum(per_sample)
    if reduction == "mean":
        return F.mean(per_sample)
    if reduction == "none":
        return per_sample
    raise ValueError(f"unknown reduction {reduction!r}")


def downsample_target(target: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour label downsampling by an integer factor (source index i·factor)."""
    return np.ascontiguousarray(np.asarray(target)[..., ::factor, ::factor, ::factor])


def compound_loss(heads: Sequence[Tensor], target: np.ndarray, weights=DEEP_SUPERVISION_WEIGHTS) -> Tensor:
    """Σ_k w_k Σ_j [CE + Dice] over deep-supervision heads given as logits.

    ``target`` is N×X×Y×Z at the resolution of the first head.
    """
    if len(heads) != len(weights):
        raise ConfigError(f"expected {len(weights)} heads, got {len(heads)}")
    target = np.asarray(target)
    total = None
    for k, (z, w) in enumerate(zip(heads, weights)):
        tk = downsample_target(target, 2 ** k)
        if tk.shape[1:] != z.shape[2:]:
            raise ConfigError(f"head {k + 1} has spatial dims {z.shape[2:]}, target {tk.shape[1:]}")
        probs = F.softmax(z, axis=1)
        onehot = _target_onehot(tk, z.shape[1], z.dtype)
        term = (ce_loss(z, tk) + dice_loss(probs, onehot)) * float(w)
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------- optimizer


def cosine_lr(epoch: float, total_epochs: int, lr0: float, lr_min: float = 0.0) -> float:
    return lr_min + 0.5 * (lr0 - lr_min) * (1 + math.cos(math.pi * epoch / total_epochs))


@dataclass
class OptimizerState:
    step: int = 0
    m: Dict[int, np.ndarray] = field(default_factory=dict)
    v: Dict[int, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: Sequence[Tensor],
    grads: Sequence[Optional[np.ndarray]],
    state: OptimizerState,
    lr: float,
    weight_decay: float = 1e-5,
    betas=(0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One AdamW update in place; weight decay is decoupled from the moments."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if i not in state.m:
            state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        m, v = state.m[i], state.v[i]
        if m.shape != p.shape:
            raise ValueError(f"optimizer state shape {m.shape} does not match parameter {p.shape}")
        p.data *= 1 - lr * weight_decay
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


class AdamW:
    def __init__(self, params: Sequence[Tensor], lr=1e-4, weight_decay=1e-5, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.weight_decay, self.betas, self.eps = lr, weight_decay, betas, eps
        self.state = OptimizerState()

    def step(self, lr: Optional[float] = None) -> None:
        adamw_step(
            self.params,
            [p.grad for p in self.params],
            self.state,
            self.lr if lr is None else lr,
            self.weight_decay,
            self.betas,
            self.eps,
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------- data


def sample_training_patch(
    case: CaseRecord,
    recipe: str,
    spec: PatchSpec,
    aug: AugmentConfig,
    rng: np.random.Generator,
    sampling: str = "class",
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One augmented (input, priors, labels) patch from a case.

    ``sampling="center"`` crops around the volume center instead of drawing
    a class-balanced center; the overfit sanity run uses it.
    """
    if case.ground_truth is None:
        raise ConfigError(f"case {case.case_id} has no ground truth")
    labels = case.ground_truth.data
    if sampling == "center":
        center = tuple(d // 2 for d in labels.shape)
    else:
        center = sample_patch_center(labels, spec, rng)
    intens = crop_patch(case_intensities(case, recipe), center, spec.size)
    masks = crop_patch(
        np.concatenate([labels[None].astype(np.float32), case.priors()]), center, spec.size
    )
    intens, masks = augment(intens, masks, aug, rng)
    lab = np.rint(masks[0]).astype(np.int64)
    priors = masks[1:3]
    return assemble_input(intens, priors, recipe), priors, lab


def _clip_gradients(params: Sequence[Tensor], max_norm: float) -> None:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale


# ---------------------------------------------------------------- training loop


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    val_dsc: Optional[float] = None


@dataclass
class TrainResult:
    history: List[EpochRecord]
    step_losses: List[float]
    best_epoch: int
    best_val_dsc: Optional[float]
    best_state: Dict[str, np.ndarray]
    seed: int = 0

    @property
    def loss_trace(self) -> List[float]:
        return self.step_losses


def validate(
    model: Network,
    cases: Sequence[CaseRecord],
    sw_cfg: SlidingWindowConfig,
    recipe: Optional[str] = None,
) -> Optional[float]:
    """Mean-of-classes DSC_agg of full-volume sliding-window predictions."""
    metrics = []
    for case in cases:
        probs = sliding_window_predict(model, case, sw_cfg, recipe)
        metrics.append(case_metrics(case.case_id, argmax_labels(probs), case.ground_truth.data))
    return dsc_agg_mean(metrics)


def select_best(history: Sequence[EpochRecord]) -> EpochRecord:
    """Epoch with the highest validation DSC_agg (earliest on ties)."""
    scored = [h for h in history if h.val_dsc is not None]
    if not scored:
        return history[-1]
    return max(scored, key=lambda h: (h.val_dsc, -h.epoch))


def train(
    model: Network,
    cases: Sequence[CaseRecord],
    cfg: TrainConfig,
    val_cases: Sequence[CaseRecord] = (),
    sw_cfg: Optional[SlidingWindowConfig] = None,
    recipe: Optional[str] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainResult:
    """Train ``model`` in place; returns the history and the best-validation weights."""
    cases = list(cases)
    if not cases:
        raise ConfigError("training set is empty")
    recipe = recipe or recipe_for_channels(model.config.in_channels)
    spec = PatchSpec(cfg.patch_size, cfg.class_probs)
    if sw_cfg is None:
        sw_cfg = SlidingWindowConfig(patch_size=cfg.patch_size)
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = AdamW(params, cfg.lr, cfg.weight_decay, cfg.betas, cfg.eps)
    needs_priors = model.config.attention_enabled

    history: List[EpochRecord] = []
    step_losses: List[float] = []
    best_state, best = None, None
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr, cfg.lr_min)
        order = rng.permutation(len(cases))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            xs, ps, ys = [], [], []
            for ci in order[start: start + cfg.batch_size]:
                for _ in range(cfg.patches_per_sample):
                    x, p, y = sample_training_patch(cases[ci], recipe, spec, cfg.augment, rng, cfg.sampling)
                    xs.append(x)
                    ps.append(p)
                    ys.append(y)
            x = Tensor(np.stack(xs).astype(model.dtype))
            priors = np.stack(ps).astype(model.dtype) if needs_priors else None
            opt.zero_grad()
            loss = compound_loss(model.forward_logits(x, priors), np.stack(ys))
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            backward(loss)
            if cfg.grad_clip:
                _clip_gradients(params, cfg.grad_clip)
            opt.step(lr)
            step_losses.append(loss.item())
            epoch_losses.append(loss.item())

        rec = EpochRecord(epoch, lr, float(np.mean(epoch_losses)))
        if val_cases and ((epoch + 1) % cfg.val_interval == 0 or epoch == cfg.epochs - 1):
            rec.val_dsc = validate(model, val_cases, sw_cfg, recipe)
            if rec.val_dsc is not None and (best is None or rec.val_dsc > best.val_dsc):
                best = rec
                best_state = {k: v.copy() for k, v in model.state_dict().items()}
        history.append(rec)
        log.info("epoch %d lr %.3g loss %.4f val %s", epoch, lr, rec.loss, rec.val_dsc)
        if on_epoch is not None:
            on_epoch(rec)

    if best is None:
        best = history[-1]
        best_state = {k: v.copy() for k, v in model.state_dict().items()}
    return TrainResult(history, step_losses, best.epoch, best.val_dsc, best_state, cfg.seed)


def train_repeats(
    build_model: Callable[[int], Network],
    cases: Sequence[CaseRecord],
    cfg: TrainConfig,
    val_cases: Sequence[CaseRecord] = (),
    sw_cfg: Optional[SlidingWindowConfig] = None,
    recipe: Optional[str] = None,
) -> TrainResult:
    """Train ``cfg.seeds_per_split`` times and keep the run with the best validation DSC_agg."""
    best = None
    for r in range(cfg.seeds_per_split):
        seed = cfg.seed + r
        run_cfg = TrainConfig(**{**cfg.__dict__, "seed": seed})
        res = train(build_model(seed), cases, run_cfg, val_cases, sw_cfg, recipe)
        score = -math.inf if res.best_val_dsc is None else res.best_val_dsc
        if best is None or score > best[0]:
            best = (score, res)
    return best[1]


def crossval_split(cases_or_ids: Sequence, n_folds: int = 5, seed: int = 0) -> Dict[str, int]:
    """Assign patients to folds 1..n_folds as evenly as possible.

    Accepts patient ids or CaseRecords; all timepoints of a patient share a fold.
    """
    ids = []
    for c in cases_or_ids:
        pid = c.patient_id if isinstance(c, CaseRecord) else str(c)
        if pid not in ids:
            ids.append(pid)
    ids.sort()
    perm = np.random.default_rng(seed).permutation(len(ids))
    return {ids[j]: int(i % n_folds) + 1 for i, j in enumerate(perm)}


def select_cases(cases: Sequence[CaseRecord], timepoints: Sequence[str]) -> List[CaseRecord]:
    return [c for c in cases if c.timepoint in timepoints]


__all__ = [
    "AdamW",
    "ConfigError",
    "EpochRecord",
    "MID_RT",
    "OptimizerState",
    "PRE_RT",
    "TrainConfig",
    "TrainResult",
    "adamw_step",
    "ce_loss",
    "compound_loss",
    "cosine_lr",
    "crossval_split",
    "dice_loss",
    "select_best",
    "train",
    "train_repeats",
]
