"""Pipeline configuration: dataclasses, JSON round-trip and shipped presets.

Config files are JSON objects mirroring :class:`PipelineConfig`; nested
sections are ``network``, ``train`` (with ``augment``), ``sliding_window``
and ``postprocess``. Unknown keys are rejected.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Tuple

from .inference import SlidingWindowConfig
from .network import NetworkConfig
from .preprocess import (
    RECIPE_CHANNELS,
    RECIPE_IMAGE,
    RECIPE_IMAGE_PRIOR_IMAGE_PRIORS,
    RECIPE_IMAGE_PRIORS,
    AugmentConfig,
)
from .training import ConfigError, TrainConfig
from .volume_io import MID_RT, PRE_RT

SEGRESNET = "segresnet"
MA_SEGRESNET = "ma-segresnet"


@dataclass
class PostprocessConfig:
    remove_small: bool = False
    min_cm3: float = 0.5
    mpdr: bool = False
    mpdr_mode: str = "per_class"
    connectivity: int = 26


@dataclass
class PipelineConfig:
    name: str = "task1"
    task: int = 1
    architecture: str = SEGRESNET
    input_recipe: str = RECIPE_IMAGE
    training_timepoints: Tuple[str, ...] = (PRE_RT, MID_RT)
    target_spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    n_folds: int = 5
    split_seeds: Tuple[int, ...] = (0, 1)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sliding_window: SlidingWindowConfig = field(default_factory=SlidingWindowConfig)
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    model_paths: Tuple[str, ...] = ()

    def __post_init__(self):
        self.training_timepoints = tuple(self.training_timepoints)
        self.target_spacing = tuple(float(s) for s in self.target_spacing)
        self.split_seeds = tuple(int(s) for s in self.split_seeds)
        self.model_paths = tuple(self.model_paths)

    @property
    def validation_timepoint(self) -> str:
        """Model selection uses pre-RT scans for Task 1 and mid-RT scans for Task 2."""
        return PRE_RT if self.task == 1 else MID_RT

    def validate(self) -> "PipelineConfig":
        if self.task not in (1, 2):
            raise ConfigError(f"task must be 1 or 2, got {self.task}")
        if self.architecture not in (SEGRESNET, MA_SEGRESNET):
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.input_recipe not in RECIPE_CHANNELS:
            raise ConfigError(f"unknown input recipe {self.input_recipe!r}")
        if not self.training_timepoints or any(
            t not in (PRE_RT, MID_RT) for t in self.training_timepoints
        ):
            raise ConfigError(f"training_timepoints must be drawn from {PRE_RT!r}/{MID_RT!r}")
        if self.architecture == MA_SEGRESNET:
            if self.task != 2 or self.input_recipe == RECIPE_IMAGE:
                raise ConfigError("ma-segresnet needs Task 2 and a recipe that includes prior masks")
        if self.task == 1:
            if self.postprocess.mpdr:
                raise ConfigError("MPDR needs registered prior contours and is not allowed for Task 1")
            if self.input_recipe != RECIPE_IMAGE:
                raise ConfigError("Task 1 models take the image only")
        if self.network.in_channels != RECIPE_CHANNELS[self.input_recipe]:
            raise ConfigError(
                f"network.in_channels={self.network.in_channels} but recipe "
                f"{self.input_recipe!r} produces {RECIPE_CHANNELS[self.input_recipe]}"
            )
        if self.network.attention_enabled != (self.architecture == MA_SEGRESNET):
            raise ConfigError("network.attention_enabled must match the architecture")
        if self.train.patch_size != self.sliding_window.patch_size:
            raise ConfigError("training and sliding-window patch sizes differ")
        if any(p % self.network.divisor for p in self.train.patch_size):
            raise ConfigError(f"patch size {self.train.patch_size} must be divisible by {self.network.divisor}")
        if self.postprocess.connectivity not in (6, 18, 26):
            raise ConfigError("postprocess.connectivity must be 6, 18 or 26")
        if self.postprocess.mpdr_mode not in ("per_class", "union"):
            raise ConfigError("postprocess.mpdr_mode must be 'per_class' or 'union'")
        try:
            self.network.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return _build(cls, d, "config")

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc


_NESTED = {
    (PipelineConfig, "network"): NetworkConfig,
    (PipelineConfig, "train"): TrainConfig,
    (PipelineConfig, "sliding_window"): SlidingWindowConfig,
    (PipelineConfig, "postprocess"): PostprocessConfig,
    (TrainConfig, "augment"): AugmentConfig,
}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    kwargs = {}
    for k, v in d.items():
        sub = _NESTED.get((cls, k))
        kwargs[k] = _build(sub, v, f"{where}.{k}") if sub is not None else v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(path) -> PipelineConfig:
    return PipelineConfig.from_json(Path(path).read_text()).validate()


def save_config(cfg: PipelineConfig, path) -> None:
    Path(path).write_text(cfg.to_json())


# ---------------------------------------------------------------- presets

PAPER_INIT_FILTERS = NetworkConfig.init_filters
DESK_INIT_FILTERS = 4


def _base(task: int, recipe: str, arch: str, timepoints, scale: str, name: str, post: PostprocessConfig):
    if scale not in ("paper", "desk"):
        raise ConfigError(f"unknown preset scale {scale!r}")
    if scale == "paper":
        train = TrainConfig.paper(task)
        init = PAPER_INIT_FILTERS
    else:
        train = TrainConfig.desk()
        init = DESK_INIT_FILTERS
    net = NetworkConfig(
        in_channels=RECIPE_CHANNELS[recipe],
        init_filters=init,
        attention_enabled=arch == MA_SEGRESNET,
    )
    return PipelineConfig(
        name=name,
        task=task,
        architecture=arch,
        input_recipe=recipe,
        training_timepoints=tuple(timepoints),
        network=net,
        train=train,
        sliding_window=SlidingWindowConfig(patch_size=train.patch_size),
        postprocess=post,
    ).validate()


_T1_POST = PostprocessConfig(remove_small=True)
_NO_POST = PostprocessConfig()
_MPDR = PostprocessConfig(mpdr=True)

# name -> (task, recipe, architecture, training timepoints, postprocess)
PRESETS: Dict[str, tuple] = {
    "task1": (1, RECIPE_IMAGE, SEGRESNET, (PRE_RT, MID_RT), _T1_POST),
    "task2": (2, RECIPE_IMAGE_PRIORS, MA_SEGRESNET, (PRE_RT, MID_RT), _MPDR),
    "table3_pre_only": (1, RECIPE_IMAGE, SEGRESNET, (PRE_RT,), _T1_POST),
    "table3_mid_and_pre": (1, RECIPE_IMAGE, SEGRESNET, (PRE_RT, MID_RT), _T1_POST),
    "table4_row1": (2, RECIPE_IMAGE, SEGRESNET, (MID_RT,), _NO_POST),
    "table4_row2": (2, RECIPE_IMAGE, SEGRESNET, (PRE_RT, MID_RT), _NO_POST),
    "table4_row3": (2, RECIPE_IMAGE_PRIOR_IMAGE_PRIORS, SEGRESNET, (MID_RT,), _NO_POST),
    "table4_row4": (2, RECIPE_IMAGE_PRIORS, SEGRESNET, (MID_RT,), _NO_POST),
    "table4_row5": (2, RECIPE_IMAGE_PRIORS, SEGRESNET, (PRE_RT, MID_RT), _NO_POST),
    "table4_row6": (2, RECIPE_IMAGE_PRIORS, MA_SEGRESNET, (PRE_RT, MID_RT), _NO_POST),
    "table4_row7": (2, RECIPE_IMAGE_PRIORS, MA_SEGRESNET, (PRE_RT, MID_RT), _MPDR),
}


def preset(name: str, scale: str = "paper") -> PipelineConfig:
    """A named configuration at ``"paper"`` or ``"desk"`` scale."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    task, recipe, arch, tps, post = PRESETS[name]
    return _base(task, recipe, arch, tps, scale, f"{name}_{scale}", copy.deepcopy(post))
