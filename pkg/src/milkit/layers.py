"""Layer vocabulary: dense, strided valid convolution, ReLU, layer
normalization, spatial soft-argmax, and the bias transformation.

All functions take graph nodes (plain arrays are lifted to constants) and
return nodes, so everything here is differentiable to second order.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    Node, ShapeError, add, broadcast_to, concat, constant, div, exp, matmul,
    mean, mul, nsum, relu, reshape, slice_axis, sqrt, sub, take_flat,
    transpose, _lift,
)

__all__ = ["dense", "conv2d", "conv_output_hw", "layer_norm",
           "spatial_soft_argmax", "bias_transform", "relu"]

LAYER_NORM_EPS = 1e-6

_im2col_cache: dict[tuple, np.ndarray] = {}


def dense(x, w, b) -> Node:
    """Affine map ``x @ w + b``; accepts a single vector or a batch."""
    x, w, b = _lift(x), _lift(w), _lift(b)
    single = x.ndim == 1
    if single:
        x = reshape(x, (1, x.shape[0]))
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"dense: bias {b.shape} incompatible with weight {w.shape}")
    out = add(matmul(x, w), b)
    return reshape(out, (w.shape[1],)) if single else out


def conv_output_hw(h: int, w: int, kernel: int, stride: int) -> tuple[int, int]:
    """Spatial extents of a valid (no-padding) convolution."""
    if kernel > h or kernel > w:
        raise ShapeError(f"conv2d: {kernel}x{kernel} kernel larger than {h}x{w} input")
    if stride < 1:
        raise ValueError("stride must be positive")
    return (h - kernel) // stride + 1, (w - kernel) // stride + 1


def _im2col_indices(n, c, h, w, kh, kw, stride):
    key = (n, c, h, w, kh, kw, stride)
    idx = _im2col_cache.get(key)
    if idx is None:
        oh, ow = conv_output_hw(h, w, kh, stride)
        ni = np.arange(n).reshape(n, 1, 1, 1, 1, 1)
        oy = (np.arange(oh) * stride).reshape(1, oh, 1, 1, 1, 1)
        ox = (np.arange(ow) * stride).reshape(1, 1, ow, 1, 1, 1)
        ci = np.arange(c).reshape(1, 1, 1, c, 1, 1)
        dy = np.arange(kh).reshape(1, 1, 1, 1, kh, 1)
        dx = np.arange(kw).reshape(1, 1, 1, 1, 1, kw)
        idx = ((ni * c + ci) * h + oy + dy) * w + (ox + dx)
        idx = np.ascontiguousarray(idx.reshape(n * oh * ow, c * kh * kw))
        _im2col_cache[key] = idx
    return idx


def conv2d(images, kernels, stride: int = 1) -> Node:
    """Strided valid 2-D convolution (cross-correlation).

    ``images``: (N, C, H, W); ``kernels``: (F, C, kh, kw); output
    (N, F, H', W') with H' = floor((H - kh)/stride) + 1 and likewise W'.
    Implemented as a gather into patch rows followed by a matmul, which keeps
    it differentiable to any order.
    """
    images, kernels = _lift(images), _lift(kernels)
    if images.ndim != 4 or kernels.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D images/kernels, got {images.shape}, {kernels.shape}")
    n, c, h, w = images.shape
    f, ck, kh, kw = kernels.shape
    if ck != c:
        raise ShapeError(f"conv2d: image channels {c} != kernel channels {ck}")
    oh, ow = conv_output_hw(h, w, kh, stride)
    if kh != kw:
        raise ShapeError("conv2d: only square kernels supported")
    idx = _im2col_indices(n, c, h, w, kh, kw, stride)
    cols = take_flat(images, idx)                       # (n*oh*ow, c*kh*kw)
    kmat = transpose(reshape(kernels, (f, c * kh * kw)))
    out = matmul(cols, kmat)                            # (n*oh*ow, f)
    return transpose(reshape(out, (n, oh, ow, f)), (0, 3, 1, 2))


def layer_norm(x, gamma, beta, eps: float = LAYER_NORM_EPS) -> Node:
    """Normalize each sample to zero mean / unit variance, then scale & shift.

    2-D input (N, D): per-row statistics, ``gamma``/``beta`` of shape (D,).
    4-D input (N, C, H, W): statistics over all C*H*W features of a sample,
    ``gamma``/``beta`` per channel, shape (C,).
    """
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    orig = x.shape
    if x.ndim == 1:
        x = reshape(x, (1, orig[0]))
    if x.ndim == 2:
        flat = x
    elif x.ndim == 4:
        flat = reshape(x, (orig[0], int(np.prod(orig[1:]))))
    else:
        raise ShapeError(f"layer_norm: unsupported input shape {orig}")
    if flat.shape[1] < 1:
        raise ShapeError("layer_norm: empty feature axis")

    mu = mean(flat, axis=1, keepdims=True)
    centered = sub(flat, mu)
    var = mean(mul(centered, centered), axis=1, keepdims=True)
    normed = div(centered, sqrt(add(var, eps)))

    if len(orig) == 4:
        normed = reshape(normed, orig)
        gamma = reshape(gamma, (1, orig[1], 1, 1))
        beta = reshape(beta, (1, orig[1], 1, 1))
    out = add(mul(normed, gamma), beta)
    return reshape(out, orig) if len(orig) == 1 else out


def _grid_coords(k: int) -> np.ndarray:
    return np.linspace(-1.0, 1.0, k) if k > 1 else np.zeros(1)


def spatial_soft_argmax(features) -> Node:
    """Per-channel softmax over spatial locations, then expected (x, y).

    Input (N, C, H, W); output (N, 2C) with coordinates interleaved per
    channel as (x_0, y_0, x_1, y_1, ...), each in [-1, 1]. Temperature 1.
    """
    features = _lift(features)
    if features.ndim != 4:
        raise ShapeError(f"spatial_soft_argmax: need (N, C, H, W), got {features.shape}")
    n, c, h, w = features.shape
    if h * w == 0:
        raise ShapeError("spatial_soft_argmax: empty spatial extent")
    flat = reshape(features, (n * c, h * w))
    # shifting by a constant leaves the softmax (and its gradient) unchanged;
    # the detached row max just guards exp against overflow
    if flat.value is not None:
        flat = sub(flat, constant(flat.value.max(axis=1, keepdims=True)))
    e = exp(flat)
    p = div(e, nsum(e, axis=1, keepdims=True))
    xs = constant(np.tile(_grid_coords(w), h))      # flat index = y*w + x
    ys = constant(np.repeat(_grid_coords(h), w))
    ex = reshape(nsum(mul(p, xs), axis=1), (n * c, 1))
    ey = reshape(nsum(mul(p, ys), axis=1), (n * c, 1))
    return reshape(concat([ex, ey], axis=1), (n, 2 * c))


def bias_transform(x, z, w1, w2, b) -> Node:
    """``x @ w1 + z @ w2 + b`` with a learned input-independent vector ``z``.

    Reparameterizes the bias as ``z @ w2 + b`` so its gradient update is
    controlled by ``z`` and ``w2`` rather than tied to the input gradient.
    """
    x, z, w1, w2, b = map(_lift, (x, z, w1, w2, b))
    single = x.ndim == 1
    if single:
        x = reshape(x, (1, x.shape[0]))
    if z.ndim != 1 or w2.shape != (z.shape[0], w1.shape[1]):
        raise ShapeError(
            f"bias_transform: z {z.shape} / w2 {w2.shape} mismatch with w1 {w1.shape}")
    zrow = reshape(z, (1, z.shape[0]))
    out = add(add(matmul(x, w1), matmul(zrow, w2)), b)
    return reshape(out, (w1.shape[1],)) if single else out
