"""SegResNet with deep supervision, optionally with mask-aware attention.

Encoder level ``l`` (1-based) works at ``init_filters * 2**(l-1)`` channels
and ``1/2**(l-1)`` resolution. The decoder mirrors it with one residual block
per level; heads emit softmax maps at the four finest decoder levels.
"""
from __future__ import annotations

import copy
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor, no_grad
from .autodiff import functional as F

PAPER_BLOCKS = (1, 2, 2, 4, 4, 4)
DEEP_SUPERVISION_WEIGHTS = (1.0, 0.5, 0.25, 0.125)


class BuildError(ValueError):
    pass


@dataclass
class NetworkConfig:
    in_channels: int = 1
    n_classes: int = 3
    init_filters: int = 32
    blocks_per_level: Tuple[int, ...] = PAPER_BLOCKS
    deep_supervision_levels: int = 4
    attention_enabled: bool = False
    mlp_reduction_ratio: int = 8
    spatial_attention_kernel: int = 7
    norm_eps: float = 1e-5

    def __post_init__(self):
        self.blocks_per_level = tuple(int(b) for b in self.blocks_per_level)

    @property
    def n_levels(self) -> int:
        return len(self.blocks_per_level)

    @property
    def divisor(self) -> int:
        return 2 ** (self.n_levels - 1)

    def channels(self, level: int) -> int:
        """Feature width at 1-based encoder ``level``."""
        return self.init_filters * 2 ** (level - 1)

    def validate(self) -> None:
        if self.in_channels < 1 or self.init_filters < 1:
            raise BuildError("in_channels and init_filters must be positive")
        if self.n_classes != 3:
            raise BuildError("n_classes must be 3 (background, GTVp, GTVn)")
        if self.n_levels < 1 or any(b < 1 for b in self.blocks_per_level):
            raise BuildError("blocks_per_level must be a non-empty list of positive counts")
        if not 1 <= self.deep_supervision_levels <= self.n_levels:
            raise BuildError(
                f"deep_supervision_levels={self.deep_supervision_levels} must be in [1, {self.n_levels}]"
            )
        if self.mlp_reduction_ratio < 1:
            raise BuildError("mlp_reduction_ratio must be >= 1")
        if self.spatial_attention_kernel % 2 != 1:
            raise BuildError("spatial_attention_kernel must be odd")
        if self.attention_enabled and self.in_channels < 1:
            raise BuildError("attention needs at least the image channel")

    @classmethod
    def paper(cls, task: int = 1, attention: bool = False, in_channels: Optional[int] = None) -> "NetworkConfig":
        if in_channels is None:
            in_channels = 1 if task == 1 else 3
        return cls(in_channels=in_channels, attention_enabled=attention)


# ---------------------------------------------------------------- modules


class Module:
    """Container that discovers parameters and submodules by attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, val in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(val, Tensor):
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full + ".")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{full}.{i}", item

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]


def _he(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)
    return Tensor(w, requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class Conv(Module):
    def __init__(self, cin, cout, k, rng, dtype, stride=1, padding=None, bias=True):
        self.weight = _he(rng, (cout, cin, k, k, k), cin * k ** 3, dtype)
        self.bias = _zeros((cout,), dtype) if bias else None
        self.stride = stride
        self.padding = k // 2 if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv3d(x, self.weight, self.bias, self.stride, self.padding)


class UpConv(Module):
    """Stride-2 transposed convolution with a 2×2×2 kernel (doubles each dim)."""

    def __init__(self, cin, cout, rng, dtype):
        self.weight = _he(rng, (cin, cout, 2, 2, 2), cin * 8, dtype)
        self.bias = _zeros((cout,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv_transpose3d(x, self.weight, self.bias, stride=2, padding=0)


class Norm(Module):
    def __init__(self, c, dtype, eps):
        self.gamma = _ones((c,), dtype)
        self.beta = _zeros((c,), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return F.instance_norm(x, self.gamma, self.beta, self.eps)


class ResidualBlock(Module):
    """Two (instance norm -> ReLU -> 3×3×3 conv) units plus identity skip."""

    def __init__(self, c, rng, dtype, eps=1e-5):
        self.norm1 = Norm(c, dtype, eps)
        self.conv1 = Conv(c, c, 3, rng, dtype)
        self.norm2 = Norm(c, dtype, eps)
        self.conv2 = Conv(c, c, 3, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv1(F.relu(self.norm1(x)))
        h = self.conv2(F.relu(self.norm2(h)))
        return x + h


def pool_masks(mask: np.ndarray, iterations: int) -> Tuple[np.ndarray, np.ndarray]:
    """Repeated (k=3, s=2, p=1) average and max pooling of a prior mask.

    ``mask`` is N×1×D×H×W (or D×H×W). Returns the average-pooled and
    max-pooled chains after ``iterations`` steps.
    """
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    m = np.asarray(mask)
    if m.ndim == 3:
        m = m[None, None]
    avg, mx = Tensor(m), Tensor(m)
    for _ in range(iterations):
        if any(d < 2 for d in avg.shape[2:]):
            raise ValueError(f"cannot pool spatial dims {avg.shape[2:]} any further")
        with no_grad():
            avg = F.avgpool3d(avg, 3, 2, 1)
            mx = F.maxpool3d(mx, 3, 2, 1)
    return avg.data, mx.data


def mask_pyramid(priors: np.ndarray, n_levels: int) -> List[np.ndarray]:
    """Per-level N×4×d×h×w stacks [avg(gtvp), max(gtvp), avg(gtvn), max(gtvn)].

    Level ``l`` (0-based here) has been pooled ``l`` times.
    """
    priors = np.asarray(priors)
    out = []
    with no_grad():
        avg_p = max_p = Tensor(priors[:, 0:1])
        avg_n = max_n = Tensor(priors[:, 1:2])
        for level in range(n_levels):
            if level:
                avg_p, max_p = F.avgpool3d(avg_p), F.maxpool3d(max_p)
                avg_n, max_n = F.avgpool3d(avg_n), F.maxpool3d(max_n)
            out.append(np.concatenate([avg_p.data, max_p.data, avg_n.data, max_n.data], axis=1))
    return out


class MaskAttention(Module):
    """Channel attention then prior-mask-guided spatial attention, added back to the input."""

    def __init__(self, c, rng, dtype, reduction=8, kernel=7):
        hidden = max(1, c // reduction)
        self.fc1_w = _he(rng, (hidden, c), c, dtype)
        self.fc1_b = _zeros((hidden,), dtype)
        self.fc2_w = _he(rng, (c, hidden), hidden, dtype)
        self.fc2_b = _zeros((c,), dtype)
        self.spatial = Conv(6, 1, kernel, rng, dtype)
        self.channels = c

    def mlp(self, v: Tensor) -> Tensor:
        h = F.relu(F.linear(v, self.fc1_w, self.fc1_b))
        return F.linear(h, self.fc2_w, self.fc2_b)

    def channel_attention(self, f: Tensor) -> Tuple[Tensor, Tensor]:
        n, c = f.shape[:2]
        if c != self.channels:
            raise ValueError(f"channel attention expects {self.channels} channels, got {c}")
        avg = F.reshape(F.global_avgpool_s(f), (n, c))
        mx = F.reshape(F.global_maxpool_s(f), (n, c))
        a_c = F.sigmoid(self.mlp(avg) + self.mlp(mx), open_interval=True)
        a_c = F.reshape(a_c, (n, c, 1, 1, 1))
        return a_c, F.mul_channelwise(f, a_c)

    def spatial_attention(self, f1: Tensor, pooled_masks: np.ndarray) -> Tuple[Tensor, Tensor]:
        """``pooled_masks`` is N×4×d×h×w ordered avg/max GTVp, avg/max GTVn."""
        pooled_masks = np.asarray(pooled_masks, dtype=f1.dtype)
        if pooled_masks.shape[2:] != f1.shape[2:] or pooled_masks.shape[:2] != (f1.shape[0], 4):
            raise ValueError(
                f"pooled masks {pooled_masks.shape} do not match features {f1.shape}"
            )
        stacked = F.concat([F.avgpool_c(f1), F.maxpool_c(f1), Tensor(pooled_masks)], axis=1)
        a_s = F.sigmoid(self.spatial(stacked), open_interval=True)
        return a_s, F.mul_spatialwise(f1, a_s)

    def __call__(self, f: Tensor, pooled_masks: np.ndarray) -> Tensor:
        _, f1 = self.channel_attention(f)
        _, f2 = self.spatial_attention(f1, pooled_masks)
        return f + f2


class Network(Module):
    def __init__(self, config: NetworkConfig, rng: np.random.Generator, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        c = config.channels
        eps = config.norm_eps
        self.conv_init = Conv(config.in_channels, c(1), 3, rng, dtype)
        self.down: List[Module] = []
        self.enc_blocks: List[Module] = []
        self.attention: List[Module] = []
        for level in range(1, config.n_levels + 1):
            if level > 1:
                self.down.append(Conv(c(level - 1), c(level), 3, rng, dtype, stride=2, padding=1))
            self.enc_blocks.append(
                _Stage([ResidualBlock(c(level), rng, dtype, eps) for _ in range(config.blocks_per_level[level - 1])])
            )
            if config.attention_enabled:
                self.attention.append(
                    MaskAttention(c(level), rng, dtype, config.mlp_reduction_ratio, config.spatial_attention_kernel)
                )
        # decoder index i builds level i+1 from level i+2
        self.up: List[Module] = []
        self.dec_blocks: List[Module] = []
        for level in range(config.n_levels - 1, 0, -1):
            self.up.append(UpConv(c(level + 1), c(level), rng, dtype))
            self.dec_blocks.append(ResidualBlock(c(level), rng, dtype, eps))
        self.heads: List[Module] = [
            Conv(c(k), config.n_classes, 1, rng, dtype, padding=0)
            for k in range(1, config.deep_supervision_levels + 1)
        ]

    # -- introspection

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data) for n, p in self.named_parameters())

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"parameter {name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(self.dtype, copy=True)

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def astype(self, dtype) -> "Network":
        """Copy of this network with every parameter cast to ``dtype``."""
        clone = Network.__new__(Network)
        clone.__dict__ = copy.deepcopy(self.__dict__)
        clone.dtype = np.dtype(dtype)
        for _, p in clone.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return clone

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    # -- forward

    def _check_input(self, x: Tensor, priors) -> None:
        cfg = self.config
        if x.ndim != 5 or x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected N×{cfg.in_channels}×D×H×W input, got {x.shape}")
        if any(d % cfg.divisor for d in x.shape[2:]):
            raise ValueError(f"spatial dims {x.shape[2:]} must be divisible by {cfg.divisor}")
        if cfg.attention_enabled:
            if priors is None:
                raise ValueError("attention-enabled network needs prior masks (zeros allowed)")
            if np.shape(priors) != (x.shape[0], 2) + x.shape[2:]:
                raise ValueError(f"priors must be N×2×D×H×W, got {np.shape(priors)}")

    def encode(self, x: Tensor, priors=None) -> List[Tensor]:
        cfg = self.config
        pyramid = mask_pyramid(priors, cfg.n_levels) if cfg.attention_enabled else None
        h = self.conv_init(x)
        skips = []
        for i in range(cfg.n_levels):
            if i:
                h = self.down[i - 1](h)
            h = self.enc_blocks[i](h)
            if cfg.attention_enabled:
                h = self.attention[i](h, pyramid[i])
            skips.append(h)
        return skips

    def forward_logits(self, x, priors=None) -> List[Tensor]:
        """Head logits, finest first (k=1 at full resolution)."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        self._check_input(x, priors)
        cfg = self.config
        skips = self.encode(x, priors)
        h = skips[-1]
        outs = {cfg.n_levels - 1: h}
        for j, level in enumerate(range(cfg.n_levels - 2, -1, -1)):
            h = self.up[j](h) + skips[level]
            h = self.dec_blocks[j](h)
            outs[level] = h
        return [self.heads[k](outs[k]) for k in range(cfg.deep_supervision_levels)]

    def forward(self, x, priors=None) -> List[Tensor]:
        """Per-head softmax probability maps, finest first."""
        return [F.softmax(z, axis=1) for z in self.forward_logits(x, priors)]

    __call__ = forward

    def predict_proba(self, x: np.ndarray, priors: Optional[np.ndarray] = None) -> np.ndarray:
        """Full-resolution class probabilities without recording a graph."""
        with no_grad():
            z = self.forward_logits(Tensor(np.asarray(x, dtype=self.dtype)), priors)[0]
            return F.softmax(z, axis=1).data


class _Stage(Module):
    def __init__(self, blocks: Sequence[Module]):
        self.blocks = list(blocks)

    def __call__(self, x: Tensor) -> Tensor:
        for b in self.blocks:
            x = b(x)
        return x

    def __len__(self):
        return len(self.blocks)


def build(config: NetworkConfig, rng=None, dtype=np.float32) -> Network:
    """Assemble a network with deterministic initialization from ``rng`` (or a seed)."""
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(0 if rng is None else int(rng))
    return Network(config, rng, dtype)


def channel_attention(f: Tensor, module: MaskAttention):
    return module.channel_attention(f)


def spatial_attention(f1: Tensor, gtvp: np.ndarray, gtvn: np.ndarray, module: MaskAttention, level: int):
    """Spatial attention at 1-based encoder ``level`` from full-resolution priors."""
    pm = [pool_masks(m, level - 1) for m in (gtvp, gtvn)]
    stacked = np.concatenate([pm[0][0], pm[0][1], pm[1][0], pm[1][1]], axis=1)
    return module.spatial_attention(f1, stacked)


def mask_attention_apply(f: Tensor, gtvp: np.ndarray, gtvn: np.ndarray, module: MaskAttention, level: int) -> Tensor:
    _, f1 = module.channel_attention(f)
    _, f2 = spatial_attention(f1, gtvp, gtvn, module, level)
    return f + f2
