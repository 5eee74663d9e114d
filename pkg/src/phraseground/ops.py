"""Fused differentiable ops on top of the tape: softmax family, normalization,
2-D convolution, bilinear resize and point sampling.

All spatial features are [H, W, C]; token stacks are [T, C]; mask stacks are
[N, H, W]. Out-of-range sample points clamp to the border so gradients stay
alive at image edges.
"""

from __future__ import annotations

import numpy as np

from .tensor import (
    ContractViolation,
    Tensor,
    _make,
    _plain,
    _sigmoid_np,
    _tracked,
    accumulate_grad,
)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along one axis."""
    if not -x.ndim <= axis < x.ndim:
        raise ContractViolation(f"softmax axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    if not _tracked(x):
        return _plain(y)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        accumulate_grad(x, y * (g - dot))

    return _make(y, (x,), backward)


def masked_softmax(x: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax with boolean keep-mask: dropped positions get weight exactly 0.

    Rows whose mask is entirely False fall back to unmasked attention, the
    usual masked-attention convention.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ContractViolation(f"mask shape {mask.shape} != input shape {x.shape}")
    any_kept = mask.any(axis=axis, keepdims=True)
    keep = np.where(any_kept, mask, True)
    neg = np.where(keep, x.data, -np.inf)
    z = x.data - neg.max(axis=axis, keepdims=True)
    e = np.exp(z) * keep
    y = e / e.sum(axis=axis, keepdims=True)
    if not _tracked(x):
        return _plain(y)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        accumulate_grad(x, y * (g - dot))

    return _make(y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    if not _tracked(x):
        return _plain(y)
    p = np.exp(y)

    def backward(g):
        accumulate_grad(x, g - p * g.sum(axis=axis, keepdims=True))

    return _make(y, (x,), backward)


def normalize(x: Tensor, axes, eps: float = 1e-5) -> Tensor:
    """(x - mean) / sqrt(var + eps) over ``axes``; affine scale/shift live outside."""
    axes = (axes,) if isinstance(axes, int) else tuple(axes)
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    if not _tracked(x):
        return _plain(xhat)

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        accumulate_grad(x, inv * (g - gm - xhat * gxm))

    return _make(xhat, (x,), backward)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on logits, numerically stable."""
    t = np.asarray(targets, dtype=logits.dtype)
    x = logits.data
    # log(1 + exp(-|x|)) + max(x, 0) - x * t
    loss = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0) - x * t
    if not _tracked(logits):
        return _plain(loss)
    p = _sigmoid_np(x)

    def backward(g):
        accumulate_grad(logits, g * (p - t))

    return _make(loss, (logits,), backward)


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """x [H,W,Cin] * w [kh,kw,Cin,Cout] + b -> [Ho,Wo,Cout].

    Implemented as one matmul per kernel tap; the backward pass uses
    non-overlapping strided slice adds, no scatter needed.
    """
    H, W, Cin = x.data.shape
    kh, kw, wcin, Cout = w.data.shape
    if wcin != Cin:
        raise ContractViolation(f"conv2d channel mismatch: input {Cin}, kernel {wcin}")
    xp = np.pad(x.data, ((padding, padding), (padding, padding), (0, 0))) if padding else x.data
    Hp, Wp = xp.shape[:2]
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    out = np.zeros((Ho * Wo, Cout), dtype=x.dtype)
    taps = []
    for di in range(kh):
        for dj in range(kw):
            xs = xp[di : di + stride * Ho : stride, dj : dj + stride * Wo : stride]
            taps.append(xs)
            out += xs.reshape(-1, Cin) @ w.data[di, dj]
    out = out.reshape(Ho, Wo, Cout)
    if b is not None:
        out = out + b.data
    inputs = (x, w) if b is None else (x, w, b)
    if not _tracked(*inputs):
        return _plain(out)

    def backward(g):
        g2 = g.reshape(-1, Cout)
        dw = np.empty_like(w.data)
        dxp = np.zeros((Hp, Wp, Cin), dtype=x.dtype)
        for idx, (di, dj) in enumerate((i, j) for i in range(kh) for j in range(kw)):
            xs = taps[idx]
            dw[di, dj] = xs.reshape(-1, Cin).T @ g2
            dxp[di : di + stride * Ho : stride, dj : dj + stride * Wo : stride] += (
                g2 @ w.data[di, dj].T
            ).reshape(Ho, Wo, Cin)
        accumulate_grad(w, dw)
        if padding:
            accumulate_grad(x, dxp[padding:-padding, padding:-padding])
        else:
            accumulate_grad(x, dxp)
        if b is not None:
            accumulate_grad(b, g.sum(axis=(0, 1)))

    return _make(out, inputs, backward)


# ---------------------------------------------------------------------------
# bilinear resize (separable matrix form: no scatter in either direction)

_RESIZE_CACHE: dict = {}


def _resize_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    key = (n_in, n_out, np.dtype(dtype).str)
    mat = _RESIZE_CACHE.get(key)
    if mat is None:
        mat = np.zeros((n_out, n_in), dtype=dtype)
        if n_in == 1:
            mat[:, 0] = 1.0
        else:
            src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
            src = np.clip(src, 0.0, n_in - 1.0)
            lo = np.floor(src).astype(np.int64)
            hi = np.minimum(lo + 1, n_in - 1)
            frac = src - lo
            mat[np.arange(n_out), lo] += 1.0 - frac
            mat[np.arange(n_out), hi] += frac
        _RESIZE_CACHE[key] = mat
    return mat


def bilinear_resize_hwc(x: Tensor, out_hw) -> Tensor:
    """Resize [H,W,C] -> [Ho,Wo,C] with half-pixel-aligned bilinear weights."""
    H, W, C = x.data.shape
    Ho, Wo = out_hw
    Ah = _resize_matrix(H, Ho, x.dtype)
    Aw = _resize_matrix(W, Wo, x.dtype)
    tmp = np.tensordot(Ah, x.data, axes=(1, 0))  # [Ho, W, C]
    out = np.tensordot(Aw, tmp, axes=(1, 1)).transpose(1, 0, 2)  # [Ho, Wo, C]
    if not _tracked(x):
        return _plain(out)

    def backward(g):
        t = np.tensordot(Ah.T, g, axes=(1, 0))  # [H, Wo, C]
        accumulate_grad(x, np.tensordot(Aw.T, t, axes=(1, 1)).transpose(1, 0, 2))

    return _make(out, (x,), backward)


def bilinear_resize_nhw(x: Tensor, out_hw) -> Tensor:
    """Resize a mask/map stack [N,H,W] -> [N,Ho,Wo]."""
    N, H, W = x.data.shape
    Ho, Wo = out_hw
    Ah = _resize_matrix(H, Ho, x.dtype)
    Aw = _resize_matrix(W, Wo, x.dtype)
    tmp = np.tensordot(x.data, Aw, axes=(2, 1))  # [N, H, Wo]
    out = np.tensordot(Ah, tmp, axes=(1, 1)).transpose(1, 0, 2)  # [N, Ho, Wo]
    if not _tracked(x):
        return _plain(out)

    def backward(g):
        t = np.tensordot(g, Aw, axes=(2, 0))  # [N, Ho, W]
        accumulate_grad(x, np.tensordot(Ah, t, axes=(0, 1)).transpose(1, 0, 2))

    return _make(out, (x,), backward)


def resize_nhw_np(x: np.ndarray, out_hw) -> np.ndarray:
    """Tape-free bilinear resize for plain arrays (mask scheduling paths)."""
    N, H, W = x.shape
    Ho, Wo = out_hw
    Ah = _resize_matrix(H, Ho, x.dtype if x.dtype in (np.float32, np.float64) else np.float32)
    Aw = _resize_matrix(W, Wo, Ah.dtype)
    xf = x.astype(Ah.dtype, copy=False)
    tmp = np.tensordot(xf, Aw, axes=(2, 1))
    return np.tensordot(Ah, tmp, axes=(1, 1)).transpose(1, 0, 2)


# ---------------------------------------------------------------------------
# point sampling


def bilinear_sample(feature: Tensor, points: Tensor) -> Tensor:
    """Sample [H,W,C] at P normalized points in [0,1]^2 -> [P,C].

    Coordinates are (u, v) with u horizontal: (0,0) is the center of pixel
    (0,0) and (1,1) the center of pixel (H-1, W-1). Out-of-range points clamp
    to the border; clamped coordinates get zero point-gradient there.
    """
    H, W, C = feature.data.shape
    pts = points.data
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ContractViolation(f"points must be [P,2], got {pts.shape}")
    u = pts[:, 0] * (W - 1)
    v = pts[:, 1] * (H - 1)
    inside_u = (u > 0.0) & (u < W - 1)
    inside_v = (v > 0.0) & (v < H - 1)
    u = np.clip(u, 0.0, W - 1)
    v = np.clip(v, 0.0, H - 1)
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)
    fu = (u - u0)[:, None]
    fv = (v - v0)[:, None]
    f = feature.data
    f00 = f[v0, u0]
    f01 = f[v0, u1]
    f10 = f[v1, u0]
    f11 = f[v1, u1]
    top = f00 * (1 - fu) + f01 * fu
    bot = f10 * (1 - fu) + f11 * fu
    out = top * (1 - fv) + bot * fv
    if not _tracked(feature, points):
        return _plain(out)

    def backward(g):
        if feature.requires_grad or feature._backward is not None:
            buf = np.zeros_like(f)
            np.add.at(buf, (v0, u0), g * ((1 - fu) * (1 - fv)))
            np.add.at(buf, (v0, u1), g * (fu * (1 - fv)))
            np.add.at(buf, (v1, u0), g * ((1 - fu) * fv))
            np.add.at(buf, (v1, u1), g * (fv * fu))
            accumulate_grad(feature, buf)
        if points.requires_grad or points._backward is not None:
            du = ((f01 - f00) * (1 - fv) + (f11 - f10) * fv) * g
            dv = ((f10 - f00) * (1 - fu) + (f11 - f01) * fu) * g
            dp = np.empty_like(pts)
            dp[:, 0] = du.sum(axis=1) * (W - 1) * inside_u
            dp[:, 1] = dv.sum(axis=1) * (H - 1) * inside_v
            accumulate_grad(points, dp)

    return _make(out, (feature, points), backward)
