"""Differentiable ops.

Feature maps use a channel-first layout ``(C, N, *spatial)``: channels lead so
that a convolution is a single matmul over a contiguous ``(C, N*V)`` view.
Kernels are ``(C_out, C_in, *k)``.
"""

from __future__ import annotations

import itertools

import numpy as np

from ..errors import LabelOutOfRange, ShapeMismatch
from .tensor import Tensor, accumulate, grad_enabled, make_result


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")

    def backward(g):
        accumulate(a, g)
        accumulate(b, g)

    return make_result(a.data + b.data, (a, b), backward, "add")


def scale(a: Tensor, factor: float) -> Tensor:
    def backward(g):
        accumulate(a, g * factor)

    return make_result(a.data * factor, (a,), backward, "scale")


def total(a: Tensor) -> Tensor:
    def backward(g):
        accumulate(a, np.broadcast_to(g, a.shape))

    return make_result(np.asarray(a.data.sum()), (a,), backward, "sum")


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0

    def backward(g):
        accumulate(a, g * mask)

    return make_result(a.data * mask, (a,), backward, "relu")


def concat(ts, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in ts]
    if not ts:
        raise ShapeMismatch("concat of nothing")
    ref = ts[0].shape
    nd = len(ref)
    ax = axis % nd
    for t in ts[1:]:
        if len(t.shape) != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise ShapeMismatch(f"concat along {axis}: {ref} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def backward(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * nd
                idx[ax] = slice(lo, hi)
                accumulate(t, g[tuple(idx)])

    return make_result(np.concatenate([t.data for t in ts], axis=ax), ts, backward, "concat")


def channel_affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-channel ``x * weight[c] + bias[c]`` on a channel-first tensor."""
    c = x.shape[0]
    if weight.shape != (c,) or bias.shape != (c,):
        raise ShapeMismatch(f"affine params {weight.shape}/{bias.shape} for {c} channels")
    bshape = (c,) + (1,) * (x.data.ndim - 1)
    w, b = weight.data.reshape(bshape), bias.data.reshape(bshape)
    reduce_axes = tuple(range(1, x.data.ndim))

    def backward(g):
        accumulate(x, g * w)
        if weight.requires_grad:
            accumulate(weight, (g * x.data).sum(axis=reduce_axes))
        if bias.requires_grad:
            accumulate(bias, g.sum(axis=reduce_axes))

    return make_result(x.data * w + b, (x, weight, bias), backward, "affine")


# --- convolution --------------------------------------------------------------------


def _pad_amounts(ksize, padding):
    if padding == "valid":
        return [(0, 0)] * len(ksize)
    if padding == "same":
        if any(k % 2 == 0 for k in ksize):
            raise ShapeMismatch(f"'same' padding needs odd kernel sizes, got {ksize}")
        return [(k // 2, k // 2) for k in ksize]
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def _window(offset, out_sp, stride):
    return tuple(slice(t, t + (o - 1) * stride + 1, stride) for t, o in zip(offset, out_sp))


def conv(x: Tensor, w: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """N-d cross-correlation on ``(C_in, N, *S)`` input with a ``(C_out, C_in, *k)`` kernel.

    Forward and backward are each one matmul plus shifted copies. The shifted
    copies are done on whichever side of the matmul has fewer channels
    (``C_in`` vs ``C_out``) to keep memory traffic low. Stride-1 'same' convs
    with more input than output channels skip the padded border entirely. All
    routes compute the same sums.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    nsp = x.data.ndim - 2
    if w.data.ndim != nsp + 2:
        raise ShapeMismatch(f"kernel rank {w.data.ndim} for input rank {x.data.ndim}")
    c_out, c_in = w.shape[:2]
    if x.shape[0] != c_in:
        raise ShapeMismatch(f"input has {x.shape[0]} channels, kernel expects {c_in}")
    stride = int(stride)
    if stride < 1:
        raise ShapeMismatch("stride must be >= 1")
    ksize = w.shape[2:]
    pads = _pad_amounts(ksize, padding)
    xp = np.pad(x.data, [(0, 0), (0, 0)] + pads) if any(p[0] for p in pads) else x.data
    n = x.shape[1]
    sp_pad = xp.shape[2:]
    out_sp = tuple((s - k) // stride + 1 for s, k in zip(sp_pad, ksize))
    if any(o < 1 for o in out_sp):
        raise ShapeMismatch(f"kernel {ksize} larger than padded input {sp_pad}")
    offsets = list(itertools.product(*(range(k) for k in ksize)))
    kk = len(offsets)
    gather_input = c_in <= c_out
    track = grad_enabled() and (x.requires_grad or w.requires_grad)

    if gather_input:
        # cols[ci, t] = input patch at offset t
        cols = np.empty((c_in, kk, n) + out_sp)
        for t, off in enumerate(offsets):
            cols[:, t] = xp[(slice(None), slice(None)) + _window(off, out_sp, stride)]
        wm = w.data.reshape(c_out, c_in * kk)
        y = (wm @ cols.reshape(c_in * kk, -1)).reshape((c_out, n) + out_sp)
    elif stride == 1 and padding == "same":
        return _spread_same(x, w, offsets, ksize, track)
    else:
        # spread every input voxel to all kernel offsets, then shift-add
        wt = np.moveaxis(w.data.reshape(c_out, c_in, kk), 2, 0).reshape(kk * c_out, c_in)
        big = (wt @ xp.reshape(c_in, -1)).reshape((kk, c_out, n) + sp_pad)
        y = np.zeros((c_out, n) + out_sp)
        for t, off in enumerate(offsets):
            y += big[(t, slice(None), slice(None)) + _window(off, out_sp, stride)]
        del big
        cols = None

    if not track:
        return make_result(y, (x, w), None, "conv")

    def backward(g):
        gflat = g.reshape(c_out, -1)
        if gather_input:
            if w.requires_grad:
                accumulate(w, (gflat @ cols.reshape(c_in * kk, -1).T).reshape(w.shape))
            if x.requires_grad:
                wz = np.transpose(w.data.reshape(c_out, c_in, kk), (2, 1, 0)).reshape(kk * c_in, c_out)
                z = (wz @ gflat).reshape((kk, c_in, n) + out_sp)
                dxp = np.zeros(xp.shape)
                for t, off in enumerate(offsets):
                    dxp[(slice(None), slice(None)) + _window(off, out_sp, stride)] += z[t]
                accumulate(x, _unpad(dxp, pads))
        else:
            # gradient placed at every offset: big_g[t] holds g shifted by t
            big_g = np.zeros((kk, c_out, n) + sp_pad)
            for t, off in enumerate(offsets):
                big_g[(t, slice(None), slice(None)) + _window(off, out_sp, stride)] = g
            flat = big_g.reshape(kk * c_out, -1)
            if w.requires_grad:
                m = flat @ xp.reshape(c_in, -1).T  # (kk*c_out, c_in)
                accumulate(w, np.moveaxis(m.reshape(kk, c_out, c_in), 0, 2).reshape(w.shape))
            if x.requires_grad:
                wm2 = np.moveaxis(w.data.reshape(c_out, c_in, kk), 2, 0).reshape(kk * c_out, c_in).T
                dxp = (wm2 @ flat).reshape(xp.shape)
                accumulate(x, _unpad(dxp, pads))

    return make_result(y, (x, w), backward, "conv")


def _shift_slices(d, sp):
    """Slices (dst, src) with dst[o] <- src[o + d] along each axis, clipped to the grid."""
    dst = tuple(slice(max(0, -di), n - max(0, di)) for di, n in zip(d, sp))
    src = tuple(slice(max(0, di), n + min(0, di)) for di, n in zip(d, sp))
    return (slice(None), slice(None)) + dst, (slice(None), slice(None)) + src


def _spread_same(x, w, offsets, ksize, track):
    """Stride-1 'same' conv on the unpadded grid: zero padding contributes nothing,
    so matmuls skip the border and the shift-adds are clipped instead."""
    c_out, c_in = w.shape[:2]
    kk = len(offsets)
    sp = x.shape[2:]
    n = x.shape[1]
    shifts = [_shift_slices(tuple(o - k // 2 for o, k in zip(off, ksize)), sp) for off in offsets]
    xf = x.data.reshape(c_in, -1)
    wt = np.moveaxis(w.data.reshape(c_out, c_in, kk), 2, 0).reshape(kk * c_out, c_in)
    big = (wt @ xf).reshape((kk, c_out, n) + sp)
    y = np.zeros((c_out, n) + sp)
    for t, (dst, src) in enumerate(shifts):
        y[dst] += big[t][src]
    del big
    if not track:
        return make_result(y, (x, w), None, "conv")

    def backward(g):
        # big_g[t][i] = g[i - d_t]: the output gradient seen from input voxel i
        big_g = np.zeros((kk, c_out, n) + sp)
        for t, (dst, src) in enumerate(shifts):
            big_g[t][src] = g[dst]
        flat = big_g.reshape(kk * c_out, -1)
        if w.requires_grad:
            m = flat @ xf.T
            accumulate(w, np.moveaxis(m.reshape(kk, c_out, c_in), 0, 2).reshape(w.shape))
        if x.requires_grad:
            accumulate(x, (wt.T @ flat).reshape(x.shape))

    return make_result(y, (x, w), backward, "conv")


def _unpad(a, pads):
    if not any(p[0] or p[1] for p in pads):
        return a
    idx = (slice(None), slice(None)) + tuple(slice(lo, a.shape[2 + i] - hi) for i, (lo, hi) in enumerate(pads))
    return a[idx]


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    if x.data.ndim != 4:
        raise ShapeMismatch(f"conv2d expects (C, N, H, W) input, got {x.shape}")
    return conv(x, w, stride, padding)


def conv3d(x: Tensor, w: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    if x.data.ndim != 5:
        raise ShapeMismatch(f"conv3d expects (C, N, D, H, W) input, got {x.shape}")
    return conv(x, w, stride, padding)


# --- loss ---------------------------------------------------------------------------


def softmax(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_cross_entropy(logits: Tensor, target, reduction: str = "mean") -> Tensor:
    """Cross-entropy of channel-first ``logits`` (C, ...) against class indices (...).

    A float ``target`` with the same shape as ``logits`` is read as per-voxel
    target distributions instead of indices.
    """
    logits = _as_tensor(logits)
    c = logits.shape[0]
    target = np.asarray(target)
    logp = log_softmax(logits.data, axis=0)
    if target.shape == logits.shape and np.issubdtype(target.dtype, np.floating):
        soft = target
    else:
        if target.shape != logits.shape[1:]:
            raise ShapeMismatch(f"targets {target.shape} vs logits {logits.shape}")
        if target.size and (target.min() < 0 or target.max() >= c):
            raise LabelOutOfRange(f"targets must lie in [0, {c})")
        soft = None
    count = logits.data[0].size
    if soft is None:
        picked = np.take_along_axis(logp, target[None].astype(np.intp), axis=0)[0]
        losses = -picked
    else:
        losses = -(soft * logp).sum(axis=0)
    if reduction == "mean":
        value, norm = losses.sum() / count, 1.0 / count
    elif reduction == "sum":
        value, norm = losses.sum(), 1.0
    else:
        raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")

    def backward(g):
        p = np.exp(logp)
        if soft is None:
            np.put_along_axis(p, target[None].astype(np.intp), np.take_along_axis(p, target[None].astype(np.intp), axis=0) - 1.0, axis=0)
            grad = p
        else:
            grad = p * soft.sum(axis=0, keepdims=True) - soft
        accumulate(logits, grad * (norm * float(g)))

    return make_result(np.asarray(value), (logits,), backward, "softmax_xent")
