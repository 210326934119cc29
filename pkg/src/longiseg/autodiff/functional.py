"""Differentiable primitives for N×C×D×H×W volumetric networks.

Elementwise binary ops require identical shapes (or a Python scalar / a
constant numpy array of the same shape). The only broadcasting products are
:func:`mul_channelwise` and :func:`mul_spatialwise`.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, make_result

SPATIAL = (2, 3, 4)


def _triple(v) -> tuple:
    if isinstance(v, (tuple, list)):
        assert len(v) == 3
        return tuple(int(i) for i in v)
    return (int(v),) * 3


def _const(x, like: Tensor):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=like.dtype)
    return Tensor(arr)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if b.data.ndim == 0:
        return
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch, expected {a.shape}, got {b.shape}")


def _unscalar(g: np.ndarray, t: Tensor) -> np.ndarray:
    return np.asarray(g.sum(), dtype=t.dtype).reshape(t.shape) if t.data.ndim == 0 else g


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b) -> Tensor:
    b = _const(b, a)
    _same_shape(a, b, "add")
    return make_result(
        a.data + b.data, (a, b), lambda g: (g, _unscalar(g, b)), "add"
    )


def sub(a: Tensor, b) -> Tensor:
    b = _const(b, a)
    _same_shape(a, b, "sub")
    return make_result(
        a.data - b.data, (a, b), lambda g: (g, _unscalar(-g, b)), "sub"
    )


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b) -> Tensor:
    b = _const(b, a)
    _same_shape(a, b, "mul")
    return make_result(
        a.data * b.data,
        (a, b),
        lambda g: (g * b.data, _unscalar(g * a.data, b)),
        "mul",
    )


def div(a: Tensor, b) -> Tensor:
    b = _const(b, a)
    _same_shape(a, b, "div")
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return ga, _unscalar(-ga * out, b)

    return make_result(out, (a, b), bw, "div")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return make_result(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,), "relu")


def sigmoid(a: Tensor, open_interval: bool = False) -> Tensor:
    """Logistic function; ``open_interval`` keeps saturated outputs one ulp inside (0, 1)."""
    x = a.data
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype)
    if open_interval:
        fi = np.finfo(a.dtype)
        out = np.clip(out, fi.smallest_subnormal, np.nextafter(a.dtype.type(1), a.dtype.type(0)))
    return make_result(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def softmax(a: Tensor, axis: int = 1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = 1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (a,), bw, "log_softmax")


# ---------------------------------------------------------------- reductions and shape


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return make_result(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return make_result(
        a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape"
    )


def getitem(a: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return make_result(np.array(a.data[idx]), (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        other[axis] = ref[axis]
        if other != ref:
            raise ValueError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(out, tensors, bw, "concat")


# ---------------------------------------------------------------- linear algebra


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w.T + b`` for x of shape N×C_in and w of shape C_out×C_in."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"linear: expected N×{w.shape[1] if w.ndim == 2 else '?'} input, got {x.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def bw(g):
        gx = g @ w.data
        gw = g.T @ x.data
        gb = g.sum(axis=0) if b is not None else None
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return make_result(out, parents, bw, "linear")


def _pad5(x: np.ndarray, p: tuple, value=0.0) -> np.ndarray:
    if not any(p):
        return x
    return np.pad(x, ((0, 0), (0, 0)) + tuple((q, q) for q in p), constant_values=value)


def _window(xp: np.ndarray, off: tuple, out_sp: tuple, s: tuple):
    a, b, c = off
    return xp[
        :, :,
        a: a + s[0] * (out_sp[0] - 1) + 1: s[0],
        b: b + s[1] * (out_sp[1] - 1) + 1: s[1],
        c: c + s[2] * (out_sp[2] - 1) + 1: s[2],
    ]


def _offsets(k: tuple):
    for a in range(k[0]):
        for b in range(k[1]):
            for c in range(k[2]):
                yield a, b, c


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _cols(xp: np.ndarray, k: tuple, out_sp: tuple, s: tuple, a: int) -> np.ndarray:
    """im2col block for first-axis kernel offset ``a``: N×(C·kH·kW)×S."""
    n, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, k[1:], axis=(3, 4))
    win = win[
        :, :,
        a: a + s[0] * (out_sp[0] - 1) + 1: s[0],
        : s[1] * (out_sp[1] - 1) + 1: s[1],
        : s[2] * (out_sp[2] - 1) + 1: s[2],
    ]
    # n, c, D, H, W, kb, kc -> n, c, kb, kc, D, H, W
    win = win.transpose(0, 1, 5, 6, 2, 3, 4)
    return win.reshape(n, c * k[1] * k[2], -1)


def _correlate(xp: np.ndarray, wd: np.ndarray, out_sp: tuple, s: tuple) -> np.ndarray:
    """Raw strided cross-correlation of a pre-padded input, N×C_out×S."""
    n = xp.shape[0]
    cout, cin = wd.shape[:2]
    k = wd.shape[2:]
    out = np.zeros((n, cout, int(np.prod(out_sp))), dtype=xp.dtype)
    for a in range(k[0]):
        wk = wd[:, :, a].reshape(cout, cin * k[1] * k[2])
        out += np.matmul(wk, _cols(xp, k, out_sp, s, a))
    return out


def conv3d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    """3D cross-correlation; weight layout C_out×C_in×kD×kH×kW."""
    if x.ndim != 5 or w.ndim != 5:
        raise ValueError(f"conv3d: expected 5D input and weight, got {x.shape} and {w.shape}")
    n, cin = x.shape[:2]
    cout, wcin = w.shape[:2]
    if wcin != cin:
        raise ValueError(f"conv3d: expected {wcin} input channels, got {cin} (input {x.shape})")
    if b is not None and b.shape != (cout,):
        raise ValueError(f"conv3d: expected bias shape ({cout},), got {b.shape}")
    k, s, p = tuple(w.shape[2:]), _triple(stride), _triple(padding)
    sp = x.shape[2:]
    if any(sp[i] + 2 * p[i] < k[i] for i in range(3)):
        raise ValueError(f"conv3d: spatial dims {sp} with padding {p} smaller than kernel {k}")
    out_sp = tuple(conv_output_size(sp[i], k[i], s[i], p[i]) for i in range(3))
    S = int(np.prod(out_sp))
    xp = _pad5(x.data, p)
    wd = w.data
    out = _correlate(xp, wd, out_sp, s)
    if b is not None:
        out += b.data[None, :, None]
    out = out.reshape((n, cout) + out_sp)

    def bw(g):
        g2 = g.reshape(n, cout, S)
        gx = gw = None
        if w.requires_grad:
            gw = np.empty_like(wd)
            for a in range(k[0]):
                cols = _cols(xp, k, out_sp, s, a)
                gw[:, :, a] = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(
                    cout, cin, k[1], k[2]
                )
        if x.requires_grad:
            if s == (1, 1, 1):
                # input gradient = correlation of the fully padded output
                # gradient with the flipped, channel-transposed kernel
                gp = _pad5(np.ascontiguousarray(g), tuple(ki - 1 for ki in k))
                wf = np.ascontiguousarray(wd[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
                full_sp = tuple(sp[i] + 2 * p[i] for i in range(3))
                gxp = _correlate(gp, wf, full_sp, s).reshape((n, cin) + full_sp)
            else:
                gxp = np.zeros_like(xp)
                for off in _offsets(k):
                    wk = wd[:, :, off[0], off[1], off[2]]
                    _window(gxp, off, out_sp, s)[...] += np.matmul(wk.T, g2).reshape(
                        (n, cin) + out_sp
                    )
            gx = gxp[:, :, p[0]: p[0] + sp[0], p[1]: p[1] + sp[1], p[2]: p[2] + sp[2]]
        gb = g2.sum(axis=(0, 2)) if b is not None else None
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return make_result(out, parents, bw, "conv3d")


def conv_transpose3d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride=2, padding=0) -> Tensor:
    """Transposed 3D convolution; weight layout C_in×C_out×kD×kH×kW.

    This is the adjoint of :func:`conv3d` with the same weight array.
    """
    if x.ndim != 5 or w.ndim != 5:
        raise ValueError(f"conv_transpose3d: expected 5D tensors, got {x.shape} and {w.shape}")
    n, cin = x.shape[:2]
    wcin, cout = w.shape[:2]
    if wcin != cin:
        raise ValueError(f"conv_transpose3d: expected {wcin} input channels, got {cin}")
    if b is not None and b.shape != (cout,):
        raise ValueError(f"conv_transpose3d: expected bias shape ({cout},), got {b.shape}")
    k, s, p = tuple(w.shape[2:]), _triple(stride), _triple(padding)
    sp = x.shape[2:]
    full = tuple((sp[i] - 1) * s[i] + k[i] for i in range(3))
    out_sp = tuple(full[i] - 2 * p[i] for i in range(3))
    if any(o < 1 for o in out_sp):
        raise ValueError(f"conv_transpose3d: padding {p} too large for output {full}")
    S = int(np.prod(sp))
    x2 = x.data.reshape(n, cin, S)
    wd = w.data
    outf = np.zeros((n, cout) + full, dtype=x.dtype)
    for off in _offsets(k):
        wk = wd[:, :, off[0], off[1], off[2]]
        _window(outf, off, sp, s)[...] += np.matmul(wk.T, x2).reshape((n, cout) + sp)
    out = outf[:, :, p[0]: p[0] + out_sp[0], p[1]: p[1] + out_sp[1], p[2]: p[2] + out_sp[2]]
    if b is not None:
        out = out + b.data[None, :, None, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        gf = _pad5(g, p)
        gx = np.zeros((n, cin, S), dtype=x.dtype) if x.requires_grad else None
        gw = np.zeros_like(wd) if w.requires_grad else None
        for off in _offsets(k):
            gwin = _window(gf, off, sp, s).reshape(n, cout, S)
            if gx is not None:
                gx += np.matmul(wd[:, :, off[0], off[1], off[2]], gwin)
            if gw is not None:
                gw[:, :, off[0], off[1], off[2]] = np.einsum("ncs,nos->co", x2, gwin)
        gb = g.sum(axis=(0, 2, 3, 4)) if b is not None else None
        return (gx.reshape(x.shape) if gx is not None else None), gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return make_result(out, parents, bw, "conv_transpose3d")


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per (sample, channel) normalization over the spatial axes, then affine."""
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"instance_norm: expected gamma/beta of shape ({c},)")
    mu = x.data.mean(axis=SPATIAL, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=SPATIAL, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data[None, :, None, None, None]
    out = xhat * gd + beta.data[None, :, None, None, None]

    def bw(g):
        gg = (g * xhat).sum(axis=(0,) + SPATIAL)
        gbeta = g.sum(axis=(0,) + SPATIAL)
        gxhat = g * gd
        gx = inv * (
            gxhat
            - gxhat.mean(axis=SPATIAL, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=SPATIAL, keepdims=True)
        )
        return gx, gg, gbeta

    return make_result(out.astype(x.dtype), (x, gamma, beta), bw, "instance_norm")


# ---------------------------------------------------------------- pooling


def avgpool3d(x: Tensor, k=3, stride=2, padding=1) -> Tensor:
    """Average pooling over the spatial axes, padded cells excluded from the count."""
    k, s, p = _triple(k), _triple(stride), _triple(padding)
    sp = x.shape[2:]
    out_sp = tuple(conv_output_size(sp[i], k[i], s[i], p[i]) for i in range(3))
    if any(o < 1 for o in out_sp):
        raise ValueError(f"avgpool3d: input {sp} too small")
    xp = _pad5(x.data, p)
    ones = _pad5(np.ones((1, 1) + sp, dtype=x.dtype), p)
    acc = np.zeros(x.shape[:2] + out_sp, dtype=x.dtype)
    cnt = np.zeros((1, 1) + out_sp, dtype=x.dtype)
    for off in _offsets(k):
        acc += _window(xp, off, out_sp, s)
        cnt += _window(ones, off, out_sp, s)
    out = acc / cnt

    def bw(g):
        gq = g / cnt
        gxp = np.zeros_like(xp)
        for off in _offsets(k):
            _window(gxp, off, out_sp, s)[...] += gq
        return (gxp[:, :, p[0]: p[0] + sp[0], p[1]: p[1] + sp[1], p[2]: p[2] + sp[2]],)

    return make_result(out, (x,), bw, "avgpool3d")


def maxpool3d(x: Tensor, k=3, stride=2, padding=1) -> Tensor:
    """Max pooling over the spatial axes; padding never wins."""
    k, s, p = _triple(k), _triple(stride), _triple(padding)
    sp = x.shape[2:]
    out_sp = tuple(conv_output_size(sp[i], k[i], s[i], p[i]) for i in range(3))
    if any(o < 1 for o in out_sp):
        raise ValueError(f"maxpool3d: input {sp} too small")
    xp = _pad5(x.data, p, value=-np.inf)
    best = np.full(x.shape[:2] + out_sp, -np.inf, dtype=x.dtype)
    arg = np.zeros(best.shape, dtype=np.int16)
    for i, off in enumerate(_offsets(k)):
        win = _window(xp, off, out_sp, s)
        better = win > best
        best = np.where(better, win, best)
        arg[better] = i

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for i, off in enumerate(_offsets(k)):
            _window(gxp, off, out_sp, s)[...] += g * (arg == i)
        return (gxp[:, :, p[0]: p[0] + sp[0], p[1]: p[1] + sp[1], p[2]: p[2] + sp[2]],)

    return make_result(best, (x,), bw, "maxpool3d")


def global_avgpool_s(x: Tensor) -> Tensor:
    """Mean over all spatial positions -> N×C×1×1×1."""
    return mean(x, axis=SPATIAL, keepdims=True)


def _argmax_pool(x: Tensor, axes: tuple, op: str) -> Tensor:
    moved = np.moveaxis(x.data, axes, tuple(range(x.ndim - len(axes), x.ndim)))
    flat = moved.reshape(moved.shape[: x.ndim - len(axes)] + (-1,))
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)
    out_shape = tuple(1 if i in axes else d for i, d in enumerate(x.shape))
    out = out.reshape(out_shape)

    def bw(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g.reshape(idx.shape + (1,)), axis=-1)
        gm = gflat.reshape(moved.shape)
        return (np.moveaxis(gm, tuple(range(x.ndim - len(axes), x.ndim)), axes),)

    return make_result(out, (x,), bw, op)


def global_maxpool_s(x: Tensor) -> Tensor:
    """Max over all spatial positions -> N×C×1×1×1 (gradient to first maximum)."""
    return _argmax_pool(x, SPATIAL, "global_maxpool_s")


def avgpool_c(x: Tensor) -> Tensor:
    """Mean over channels -> N×1×D×H×W."""
    return mean(x, axis=1, keepdims=True)


def maxpool_c(x: Tensor) -> Tensor:
    """Max over channels -> N×1×D×H×W."""
    return _argmax_pool(x, (1,), "maxpool_c")


# ---------------------------------------------------------------- attention products


def mul_channelwise(f: Tensor, a: Tensor) -> Tensor:
    """F ⊗_c A with A shaped N×C×1×1×1 broadcast over space."""
    n, c = f.shape[:2]
    if a.shape != (n, c, 1, 1, 1):
        raise ValueError(f"mul_channelwise: expected weights {(n, c, 1, 1, 1)}, got {a.shape}")

    def bw(g):
        return g * a.data, (g * f.data).sum(axis=SPATIAL, keepdims=True)

    return make_result(f.data * a.data, (f, a), bw, "mul_channelwise")


def mul_spatialwise(f: Tensor, a: Tensor) -> Tensor:
    """F ⊗_s A with A shaped N×1×D×H×W broadcast over channels."""
    expected = (f.shape[0], 1) + f.shape[2:]
    if a.shape != expected:
        raise ValueError(f"mul_spatialwise: expected weights {expected}, got {a.shape}")

    def bw(g):
        return g * a.data, (g * f.data).sum(axis=1, keepdims=True)

    return make_result(f.data * a.data, (f, a), bw, "mul_spatialwise")
