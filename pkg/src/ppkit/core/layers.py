"""Differentiable layers used by the generator, the discriminator and the losses."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor, make_result

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _same_padding(size: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Gather (n, oh, ow, kh*kw, c) patches from a padded channels-last array."""
    n, c = xp.shape[0], xp.shape[3]
    cols = np.empty((n, oh, ow, kh * kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i * kw + j, :] = xp[:, i : i + stride * (oh - 1) + 1 : stride,
                                              j : j + stride * (ow - 1) + 1 : stride, :]
    return cols.reshape(n * oh * ow, kh * kw * c)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: str = "same") -> Tensor:
    """2-D cross-correlation of ``x`` (n, c, h, w) with ``kernel`` (o, c, kh, kw).

    ``same`` padding zero-pads so the output is ``ceil(h/stride)`` by
    ``ceil(w/stride)``; odd remainders go to the bottom/right edge.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects rank-4 input and kernel, got {x.shape} and {kernel.shape}")
    if 0 in x.shape or 0 in kernel.shape:
        raise ValueError(f"conv2d got a zero-sized dimension: input {x.shape}, kernel {kernel.shape}")
    n, c, h, w = x.shape
    o, kc, kh, kw = kernel.shape
    if kc != c:
        raise ValueError(f"conv2d channel mismatch: input has {c} channels, kernel expects {kc}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"bias shape {bias.shape} does not match {o} output channels")

    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"same padding needs odd kernel dims, got {kh}x{kw}")
        oh, top, bottom = _same_padding(h, kh, stride)
        ow, left, right = _same_padding(w, kw, stride)
    elif padding == "valid":
        if h < kh or w < kw:
            raise ValueError(f"input {h}x{w} smaller than kernel {kh}x{kw}")
        oh, ow = (h - kh) // stride + 1, (w - kw) // stride + 1
        top = bottom = left = right = 0
    else:
        raise ValueError(f"unknown padding mode {padding!r}")

    # Channels-last internally: patch rows are contiguous runs of c values.
    xp = np.zeros((n, h + top + bottom, w + left + right, c), dtype=x.dtype)
    xp[:, top : top + h, left : left + w, :] = x.data.transpose(0, 2, 3, 1)
    if stride == 1:
        out, bw = _conv_shifted(xp, kernel.data, bias, (n, c, h, w), (oh, ow), (top, left))
    else:
        out, bw = _conv_im2col(xp, kernel.data, bias, (n, c, h, w), (oh, ow), (top, left), stride)
    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result(out, inputs, bw)


def _conv_shifted(xp, k, bias, in_shape, out_hw, offsets):
    """Stride-1 convolution as kh*kw shifted matmuls over the flattened padded image.

    Output pixel (y, x) of image b lives at flat row b*Hp*Wp + y*Wp + x; the
    tap (i, j) reads row + i*Wp + j. Rows past the valid region are computed
    and discarded, which keeps every operand a contiguous slice.
    """
    n, c, h, w = in_shape
    oh, ow = out_hw
    top, left = offsets
    o, _, kh, kw = k.shape
    hp, wp = xp.shape[1], xp.shape[2]
    rows = n * hp * wp
    span = rows - ((kh - 1) * wp + kw - 1)
    flat = xp.reshape(rows, c)
    taps = np.ascontiguousarray(k.transpose(2, 3, 1, 0))  # (kh, kw, c, o)
    full = np.zeros((rows, o), dtype=xp.dtype)
    tmp = np.empty((span, o), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            off = i * wp + j
            np.matmul(flat[off : off + span], taps[i, j], out=tmp)
            full[:span] += tmp
    if bias is not None:
        full += bias.data
    out = np.ascontiguousarray(full.reshape(n, hp, wp, o)[:, :oh, :ow, :].transpose(0, 3, 1, 2))

    def bw(g, needs):
        gfull = np.zeros((rows, o), dtype=g.dtype)
        gfull.reshape(n, hp, wp, o)[:, :oh, :ow, :] = g.transpose(0, 2, 3, 1)
        gspan = gfull[:span]
        gx = gk = gb = None
        if needs[0]:
            gflat = np.zeros((rows, c), dtype=g.dtype)
            tmpx = np.empty((span, c), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    off = i * wp + j
                    np.matmul(gspan, taps[i, j].T, out=tmpx)
                    gflat[off : off + span] += tmpx
            gx = np.ascontiguousarray(
                gflat.reshape(n, hp, wp, c)[:, top : top + h, left : left + w, :].transpose(0, 3, 1, 2))
        if needs[1]:
            gt = np.empty((kh, kw, c, o), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    off = i * wp + j
                    gt[i, j] = flat[off : off + span].T @ gspan
            gk = np.ascontiguousarray(gt.transpose(3, 2, 0, 1))
        if len(needs) > 2 and needs[2]:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gk, gb

    return out, bw


def _conv_im2col(xp, k, bias, in_shape, out_hw, offsets, stride):
    n, c, h, w = in_shape
    oh, ow = out_hw
    top, left = offsets
    o, _, kh, kw = k.shape
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    wmat = k.transpose(0, 2, 3, 1).reshape(o, kh * kw * c)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2))

    def bw(g, needs):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, o)
        gx = gk = gb = None
        if needs[0]:
            gcols = (g2 @ wmat).reshape(n, oh, ow, kh * kw, c)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * (oh - 1) + 1 : stride,
                        j : j + stride * (ow - 1) + 1 : stride, :] += gcols[:, :, :, i * kw + j, :]
            gx = np.ascontiguousarray(gxp[:, top : top + h, left : left + w, :].transpose(0, 3, 1, 2))
        if needs[1]:
            gk = np.ascontiguousarray((g2.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2))
        if len(needs) > 2 and needs[2]:
            gb = g2.sum(axis=0)
        return gx, gk, gb

    return out, bw


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Parametric ReLU with one learned negative slope per channel."""
    if slope.shape != (x.shape[1],):
        raise ValueError(f"prelu slope length {slope.shape} != channel count {x.shape[1]}")
    a = slope.data.reshape(1, -1, *([1] * (x.ndim - 2)))
    neg = x.data < 0
    out = np.where(neg, a * x.data, x.data)

    def bw(g, needs):
        gx = g * np.where(neg, a, 1.0).astype(g.dtype) if needs[0] else None
        ga = None
        if needs[1]:
            axes = tuple(i for i in range(x.ndim) if i != 1)
            ga = np.sum(g * np.where(neg, x.data, 0.0), axis=axes)
        return gx, ga

    return make_result(out.astype(x.dtype), (x, slope), bw)


def batch_norm(x: Tensor, scale: Tensor, shift: Tensor, mode: str = "train",
               running_mean: np.ndarray | None = None, running_var: np.ndarray | None = None,
               eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
    """Per-channel batch normalisation.

    Returns ``(output, new_running_mean, new_running_var)``. In ``train`` mode
    the batch statistics normalise the input and the running statistics are
    blended as ``momentum * old + (1 - momentum) * batch`` (biased variance);
    nothing is mutated, the caller decides whether to keep the new stats. In
    ``infer`` mode the running statistics are used and returned unchanged.
    """
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ValueError(f"batch_norm scale/shift must have length {c}")
    axes = (0, 2, 3)
    bshape = (1, c, 1, 1)
    gamma = scale.data.reshape(bshape)

    if mode == "infer":
        if running_mean is None or running_var is None:
            raise ValueError("batch_norm infer mode requires populated running mean and variance")
        mu = np.asarray(running_mean, dtype=x.dtype).reshape(bshape)
        inv = 1.0 / np.sqrt(np.asarray(running_var, dtype=x.dtype).reshape(bshape) + eps)
        xhat = (x.data - mu) * inv
        out = gamma * xhat + shift.data.reshape(bshape)

        def bw_infer(g, needs):
            return (g * gamma * inv if needs[0] else None,
                    np.sum(g * xhat, axis=axes) if needs[1] else None,
                    np.sum(g, axis=axes) if needs[2] else None)

        return make_result(out, (x, scale, shift), bw_infer), running_mean, running_var

    if mode != "train":
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    m = x.size // c
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma * xhat + shift.data.reshape(bshape)

    def bw_train(g, needs):
        gx = None
        if needs[0]:
            gxhat = g * gamma
            gx = inv / m * (m * gxhat - gxhat.sum(axis=axes, keepdims=True)
                            - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
        return (gx,
                np.sum(g * xhat, axis=axes) if needs[1] else None,
                np.sum(g, axis=axes) if needs[2] else None)

    new_mean = new_var = None
    if running_mean is not None and running_var is not None:
        new_mean = momentum * running_mean + (1.0 - momentum) * mu.reshape(c)
        new_var = momentum * running_var + (1.0 - momentum) * var.reshape(c)
    return make_result(out, (x, scale, shift), bw_train), new_mean, new_var


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    if x.ndim != 2:
        raise ValueError(f"dense expects a flattened (n, features) input, got {x.shape}")
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ValueError(f"dense weight {weight.shape} incompatible with input length {x.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"dense bias {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def bw(g, needs):
        return (g @ weight.data if needs[0] else None,
                g.T @ x.data if needs[1] else None,
                (g.sum(axis=0) if needs[2] else None) if len(needs) > 2 else None)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, inputs, bw)


def gaussian_window(size: int = 11, sigma: float = 1.5, dtype=np.float64) -> np.ndarray:
    """Normalised 1-D Gaussian taps."""
    if size % 2 == 0:
        raise ValueError(f"window size must be odd, got {size}")
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    taps = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return (taps / taps.sum()).astype(dtype)


def separable_filter(x: Tensor, taps: np.ndarray) -> Tensor:
    """Valid-mode per-channel filtering with the outer product of ``taps``.

    The taps are constants. Output is (n, c, h-k+1, w-k+1).
    """
    k = len(taps)
    n, c, h, w = x.shape
    if h < k or w < k:
        raise ValueError(f"image {h}x{w} smaller than the {k}x{k} window")
    t = np.asarray(taps, dtype=x.dtype)
    rows = sliding_window_view(x.data, k, axis=2) @ t
    out = sliding_window_view(rows, k, axis=3) @ t

    def bw(g, needs):
        # Adjoint of a valid correlation is a full convolution.
        gr = np.zeros((n, c, h - k + 1, w), dtype=g.dtype)
        for j in range(k):
            gr[:, :, :, j : j + w - k + 1] += t[j] * g
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        for i in range(k):
            gx[:, :, i : i + h - k + 1, :] += t[i] * gr
        return (gx,)

    return make_result(np.ascontiguousarray(out), (x,), bw)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 mean pooling with stride 2; a trailing odd row/column is dropped."""
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ValueError(f"cannot pool a {h}x{w} image")
    xc = x.data[:, :, : 2 * h2, : 2 * w2]
    out = xc.reshape(n, c, h2, 2, w2, 2).mean(axis=(3, 5))

    def bw(g, needs):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, : 2 * h2, : 2 * w2] = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        return (gx,)

    return make_result(out, (x,), bw)


def he_std(fan_in: int) -> float:
    return math.sqrt(2.0 / fan_in)
