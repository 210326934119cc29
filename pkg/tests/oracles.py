"""Independent reference implementations used as test oracles.

Everything here is written in the most literal way possible (explicit
loops, no shared code with the package) so that agreement is meaningful.
"""
from __future__ import annotations

import itertools
from collections import deque

import numpy as np

from longiseg.autodiff import Tensor, backward


def conv3d_loops(x, w, b=None, stride=1, padding=0):
    """Direct cross-correlation with six nested loops over output and kernel."""
    n, cin, d, h, wd = x.shape
    cout, _, k, _, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
    od = (d + 2 * padding - k) // stride + 1
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, cout, od, oh, ow), dtype=np.float64)
    for i, j, l in itertools.product(range(od), range(oh), range(ow)):
        for a, bb, c in itertools.product(range(k), range(k), range(k)):
            patch = xp[:, :, i * stride + a, j * stride + bb, l * stride + c]  # N×Cin
            out[:, :, i, j, l] += patch @ w[:, :, a, bb, c].T
    if b is not None:
        out += b.reshape(1, -1, 1, 1, 1)
    return out


def conv_transpose3d_scatter(x, w, b=None, stride=2, padding=0):
    """Transposed convolution by scattering every input voxel times the kernel."""
    n, cin, d, h, wd = x.shape
    _, cout, k, _, _ = w.shape
    full = [(s - 1) * stride + k for s in (d, h, wd)]
    out = np.zeros((n, cout, *full))
    for i, j, l in itertools.product(range(d), range(h), range(wd)):
        contrib = np.einsum("nc,cokpq->nokpq", x[:, :, i, j, l], w)
        out[:, :, i * stride: i * stride + k, j * stride: j * stride + k, l * stride: l * stride + k] += contrib
    p = padding
    out = out[:, :, p: full[0] - p, p: full[1] - p, p: full[2] - p]
    if b is not None:
        out += b.reshape(1, -1, 1, 1, 1)
    return out


def pool3d_loops(x, k, stride, padding, op):
    """Spatial pooling; the average excludes padded cells, max ignores them."""
    n, c, d, h, wd = x.shape
    od = (d + 2 * padding - k) // stride + 1
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, c, od, oh, ow))
    for i, j, l in itertools.product(range(od), range(oh), range(ow)):
        vals = []
        for a, bb, cc in itertools.product(range(k), range(k), range(k)):
            z, y, q = i * stride + a - padding, j * stride + bb - padding, l * stride + cc - padding
            if 0 <= z < d and 0 <= y < h and 0 <= q < wd:
                vals.append(x[:, :, z, y, q])
        vals = np.stack(vals)
        out[:, :, i, j, l] = vals.mean(0) if op == "avg" else vals.max(0)
    return out


def instance_norm_ref(x, gamma, beta, eps=1e-5):
    out = np.empty_like(x, dtype=np.float64)
    for n in range(x.shape[0]):
        for c in range(x.shape[1]):
            v = x[n, c].astype(np.float64)
            out[n, c] = (v - v.mean()) / np.sqrt(v.var() + eps) * gamma[c] + beta[c]
    return out


def flood_fill_components(mask, connectivity):
    """Breadth-first flood fill; returns a list of voxel sets ordered by minimum x-fastest index."""
    mask = np.asarray(mask, bool)
    if connectivity == 6:
        nbrs = [o for o in itertools.product((-1, 0, 1), repeat=3) if sum(map(abs, o)) == 1]
    elif connectivity == 18:
        nbrs = [o for o in itertools.product((-1, 0, 1), repeat=3) if 0 < sum(map(abs, o)) <= 2]
    else:
        nbrs = [o for o in itertools.product((-1, 0, 1), repeat=3) if any(o)]
    seen = np.zeros_like(mask)
    comps = []
    nx, ny, nz = mask.shape
    # x-fastest scan order so the first seed of each component is its minimum linear index
    for z, y, x in itertools.product(range(nz), range(ny), range(nx)):
        if not mask[x, y, z] or seen[x, y, z]:
            continue
        comp = set()
        q = deque([(x, y, z)])
        seen[x, y, z] = True
        while q:
            v = q.popleft()
            comp.add(v)
            for o in nbrs:
                u = (v[0] + o[0], v[1] + o[1], v[2] + o[2])
                if 0 <= u[0] < nx and 0 <= u[1] < ny and 0 <= u[2] < nz and mask[u] and not seen[u]:
                    seen[u] = True
                    q.append(u)
        comps.append(comp)
    return comps


def gaussian_window_ref(size, sigma_scale):
    out = np.ones(size)
    for idx in itertools.product(*[range(s) for s in size]):
        v = 1.0
        for i, s in zip(idx, size):
            c, sig = (s - 1) / 2.0, sigma_scale * s
            v *= np.exp(-0.5 * ((i - c) / sig) ** 2)
        out[idx] = v
    return out


def sliding_window_naive(predict, x, patch, overlap, sigma_scale):
    """Materialize every window explicitly, then blend with a Gaussian weight.

    ``predict`` maps a C×p×p×p patch to a K×p×p×p probability patch. Windows
    start at multiples of ceil(p·(1−overlap)) with the last one flush to the
    border; undersized volumes are zero-padded at the end.
    """
    spatial = x.shape[1:]
    padded = tuple(max(s, p) for s, p in zip(spatial, patch))
    xp = np.zeros((x.shape[0],) + padded)
    xp[(slice(None),) + tuple(slice(0, s) for s in spatial)] = x
    starts = []
    for s, p in zip(padded, patch):
        step = max(1, int(np.ceil(p * (1 - overlap))))
        st = list(range(0, s - p + 1, step))
        if st[-1] != s - p:
            st.append(s - p)
        starts.append(st)
    wgt = gaussian_window_ref(patch, sigma_scale)
    acc, norm = None, np.zeros(padded)
    for a, b, c in itertools.product(*starts):
        sl = (slice(a, a + patch[0]), slice(b, b + patch[1]), slice(c, c + patch[2]))
        prob = predict(xp[(slice(None),) + sl])
        if acc is None:
            acc = np.zeros((prob.shape[0],) + padded)
        acc[(slice(None),) + sl] += prob * wgt
        norm[sl] += wgt
    out = acc / norm
    return out[(slice(None),) + tuple(slice(0, s) for s in spatial)]


# ---------------------------------------------------------------- finite differences


def numeric_grad(f, arr, eps=1e-4, indices=None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``arr`` (modified in place)."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = {}
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        out[i] = (fp - fm) / (2 * eps)
    return out


def rel_err(a, n, floor=1e-6):
    a, n = np.asarray(a, np.float64), np.asarray(n, np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_grads(fn, arrays, eps=1e-4, seed=0, max_entries=None):
    """Max element-wise relative error between autodiff and finite differences.

    ``fn(*tensors)`` returns an output Tensor; it is contracted with a fixed
    random weight so that every output element matters.
    """
    rng = np.random.default_rng(seed)
    tensors = [Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    proj = rng.normal(size=out.shape)

    def loss_value():
        return float((fn(*[Tensor(t.data) for t in tensors]).data * proj).sum())

    loss = (out * Tensor(proj)).sum()
    backward(loss)
    worst = 0.0
    for t in tensors:
        n = t.data.size
        idx = None if max_entries is None or n <= max_entries else rng.choice(n, max_entries, replace=False)
        num = numeric_grad(loss_value, t.data, eps, idx)
        keys = list(num)
        worst = max(worst, float(rel_err(t.grad.reshape(-1)[keys], [num[k] for k in keys]).max()))
    return worst
