"""Differentiable feature-map kernels and the two hybrid block types.

Feature maps are ``[B, C, H, W]``; single samples ``[C, H, W]`` are accepted
and returned unbatched.  Convolutions use cross-correlation indexing, so a
stored kernel ``weights[c, a, b]`` multiplies the input at offset
``(a - kh // 2, b - kw // 2)`` from the output site.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ShapeError, SizeError
from .tensor import Tensor, record

EXPANSION = 4


def _batched(x: Tensor):
    if x.ndim == 4:
        return x, False
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    raise ShapeError(f"feature map must be [C,H,W] or [B,C,H,W], got {list(x.shape)}")


def _unbatch(y: Tensor, squeeze: bool) -> Tensor:
    return T.reshape(y, y.shape[1:]) if squeeze else y


def _out_extent(n: int, k: int, stride: int, padding: str) -> tuple[int, int]:
    """Return (output size, leading pad) for one spatial axis."""
    if padding == "same":
        if k % 2 == 0:
            raise SizeError(f"same padding needs an odd kernel, got {k}")
        return (n - 1) // stride + 1, k // 2
    if padding == "valid":
        if k > n:
            raise SizeError(f"kernel extent {k} exceeds input extent {n}")
        return (n - k) // stride + 1, 0
    raise ValueError(f"unknown padding {padding!r}")


def _pad(x: np.ndarray, ph: int, pw: int, kh: int, kw: int, ho: int, wo: int, s: int) -> np.ndarray:
    h, w = x.shape[-2:]
    hneed = (ho - 1) * s + kh
    wneed = (wo - 1) * s + kw
    return np.pad(x, ((0, 0), (0, 0), (ph, max(0, hneed - h - ph)), (pw, max(0, wneed - w - pw))))


def depthwise_conv2d(x: Tensor, weights: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """One ``kh x kw`` filter per channel; no mixing across channels."""
    xb, squeeze = _batched(x)
    b, c, h, w = xb.shape
    if weights.ndim != 3 or weights.shape[0] != c:
        raise ShapeError(f"kernel {list(weights.shape)} does not match {c} input channels")
    _, kh, kw = weights.shape
    ho, ph = _out_extent(h, kh, stride, padding)
    wo, pw = _out_extent(w, kw, stride, padding)
    xp = _pad(xb.data, ph, pw, kh, kw, ho, wo, stride)
    wd = weights.data
    s = stride
    out = np.zeros((b, c, ho, wo))
    for a in range(kh):
        for bb in range(kw):
            out += wd[None, :, a, bb, None, None] * xp[:, :, a : a + s * ho : s, bb : bb + s * wo : s]

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wd)
        for a in range(kh):
            for bb in range(kw):
                sl = (slice(None), slice(None), slice(a, a + s * ho, s), slice(bb, bb + s * wo, s))
                gxp[sl] += g * wd[None, :, a, bb, None, None]
                gw[:, a, bb] = (g * xp[sl]).sum(axis=(0, 2, 3))
        return gxp[:, :, ph : ph + h, pw : pw + w], gw

    return _unbatch(record("depthwise_conv2d", out, (xb, weights), bw), squeeze)


def conv2d(x: Tensor, weights: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """Dense convolution, ``weights`` shaped ``[C_out, C_in, kh, kw]``."""
    xb, squeeze = _batched(x)
    b, c, h, w = xb.shape
    if weights.ndim != 4 or weights.shape[1] != c:
        raise ShapeError(f"kernel {list(weights.shape)} does not match {c} input channels")
    co, _, kh, kw = weights.shape
    ho, ph = _out_extent(h, kh, stride, padding)
    wo, pw = _out_extent(w, kw, stride, padding)
    xp = _pad(xb.data, ph, pw, kh, kw, ho, wo, stride)
    wd = weights.data
    s = stride
    out = np.zeros((b, co, ho, wo))
    for a in range(kh):
        for bb in range(kw):
            patch = xp[:, :, a : a + s * ho : s, bb : bb + s * wo : s]
            out += np.einsum("oc,bchw->bohw", wd[:, :, a, bb], patch, optimize=True)

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wd)
        for a in range(kh):
            for bb in range(kw):
                sl = (slice(None), slice(None), slice(a, a + s * ho, s), slice(bb, bb + s * wo, s))
                gxp[sl] += np.einsum("oc,bohw->bchw", wd[:, :, a, bb], g, optimize=True)
                gw[:, :, a, bb] = np.einsum("bohw,bchw->oc", g, xp[sl], optimize=True)
        return gxp[:, :, ph : ph + h, pw : pw + w], gw

    return _unbatch(record("conv2d", out, (xb, weights), bw), squeeze)


def pointwise_conv(x: Tensor, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Per-pixel channel mixing with a ``[C_out, C]`` matrix."""
    xb, squeeze = _batched(x)
    c = xb.shape[1]
    if weights.ndim != 2 or weights.shape[1] != c:
        raise ShapeError(f"weights {list(weights.shape)} do not match {c} input channels")
    if bias is not None and bias.shape != (weights.shape[0],):
        raise ShapeError(f"bias {list(bias.shape)} does not match {weights.shape[0]} outputs")
    xd, wd = xb.data, weights.data
    out = np.einsum("oc,bchw->bohw", wd, xd, optimize=True)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        gx = np.einsum("oc,bohw->bchw", wd, g, optimize=True)
        gw = np.einsum("bohw,bchw->oc", g, xd, optimize=True)
        return (gx, gw) if bias is None else (gx, gw, g.sum(axis=(0, 2, 3)))

    inputs = (xb, weights) if bias is None else (xb, weights, bias)
    return _unbatch(record("pointwise_conv", out, inputs, bw), squeeze)


def subsample(x: Tensor, stride: int) -> Tensor:
    """Keep every ``stride``-th row and column (a strided 1x1 sampling)."""
    xb, squeeze = _batched(x)
    shape = xb.shape
    out = xb.data[:, :, ::stride, ::stride]

    def bw(g):
        gx = np.zeros(shape)
        gx[:, :, ::stride, ::stride] = g
        return (gx,)

    return _unbatch(record("subsample", out, (xb,), bw), squeeze)


# -- attention --------------------------------------------------------------


def _ordered_sum(a: np.ndarray) -> np.ndarray:
    # Summing sorted terms makes the result independent of term order, which
    # keeps attention exactly equivariant under position permutations.
    return np.sort(a, axis=-1).sum(axis=-1)


def _positions(xd: np.ndarray) -> np.ndarray:
    b, c, h, w = xd.shape
    return xd.reshape(b, c, h * w).transpose(0, 2, 1)


def _attention_weights(pos: np.ndarray) -> np.ndarray:
    gram = (pos[:, :, None, :] * pos[:, None, :, :]).sum(axis=-1)
    e = np.exp(gram - gram.max(axis=-1, keepdims=True))
    return e / _ordered_sum(e)[..., None]


def attention_matrix(x: Tensor) -> np.ndarray:
    """Row-stochastic weights ``A[i, j]`` between flattened spatial positions."""
    xb, squeeze = _batched(x)
    a = _attention_weights(_positions(xb.data))
    return a[0] if squeeze else a


def global_self_attention(x: Tensor) -> Tensor:
    """Each position becomes the softmax(x_i . x_j)-weighted mean of all positions.

    No projections and no positional term: the similarity is the raw dot
    product of the channel vectors.
    """
    xb, squeeze = _batched(x)
    b, c, h, w = xb.shape
    pos = _positions(xb.data)
    a = _attention_weights(pos)
    terms = a[:, :, :, None] * pos[:, None, :, :]
    y = _ordered_sum(terms.transpose(0, 1, 3, 2))
    out = y.transpose(0, 2, 1).reshape(b, c, h, w)

    def bw(g):
        gy = _positions(g)
        ga = np.einsum("bic,bjc->bij", gy, pos)
        gpos = np.einsum("bij,bic->bjc", a, gy)
        gs = a * (ga - (ga * a).sum(axis=-1, keepdims=True))
        gpos += np.einsum("bij,bjc->bic", gs + gs.transpose(0, 2, 1), pos)
        return (gpos.transpose(0, 2, 1).reshape(b, c, h, w),)

    return _unbatch(record("global_self_attention", out, (xb,), bw), squeeze)


# -- normalization ----------------------------------------------------------


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels), np.ones(channels))


def normalize(
    x: Tensor,
    kind: str,
    scale: Tensor,
    shift: Tensor,
    epsilon: float = 1e-5,
    training: bool = True,
    running: Optional[RunningStats] = None,
    momentum: float = 0.1,
) -> Tensor:
    """Standardize then apply a per-channel affine map.

    ``channel-stat`` pools statistics over batch and space per channel and,
    outside training, reads them from ``running`` when given.  ``layer-stat``
    standardizes each position across its channel vector.
    """
    xb, squeeze = _batched(x)
    c = xb.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"scale/shift {list(scale.shape)}/{list(shift.shape)} vs {c} channels")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if kind == "channel-stat":
        axes = (0, 2, 3)
    elif kind == "layer-stat":
        axes = (1,)
    else:
        raise ValueError(f"unknown normalization {kind!r}")

    xd = xb.data
    sd = scale.data[None, :, None, None]
    fixed = kind == "channel-stat" and not training and running is not None
    if fixed:
        mu = running.mean[None, :, None, None]
        var = running.var[None, :, None, None]
    else:
        mu = xd.mean(axis=axes, keepdims=True)
        var = ((xd - mu) ** 2).mean(axis=axes, keepdims=True)
        if kind == "channel-stat" and training and running is not None:
            running.mean = (1 - momentum) * running.mean + momentum * mu.reshape(c)
            running.var = (1 - momentum) * running.var + momentum * var.reshape(c)
    inv = 1.0 / np.sqrt(var + epsilon)
    xhat = (xd - mu) * inv
    out = xhat * sd + shift.data[None, :, None, None]
    n = xd.size // c if kind == "channel-stat" else c

    def bw(g):
        gxhat = g * sd
        if fixed:
            gx = gxhat * inv
        else:
            gx = inv / n * (
                n * gxhat
                - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
            )
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _unbatch(record("normalize", out, (xb, scale, shift), bw), squeeze)


# -- pooling / head ---------------------------------------------------------


def pool2d(x: Tensor, kind: str, window: int = 2, stride: Optional[int] = None) -> Tensor:
    xb, squeeze = _batched(x)
    b, c, h, w = xb.shape
    xd = xb.data
    if kind == "global-avg":
        out = xd.mean(axis=(2, 3), keepdims=True)
        return _unbatch(
            record("pool2d", out, (xb,), lambda g: (np.broadcast_to(g / (h * w), xd.shape).copy(),)),
            squeeze,
        )
    stride = window if stride is None else stride
    if window > h or window > w:
        raise SizeError(f"window {window} exceeds spatial extent {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    slices = [
        (slice(None), slice(None), slice(a, a + stride * ho, stride), slice(bb, bb + stride * wo, stride))
        for a in range(window)
        for bb in range(window)
    ]
    stack = np.stack([xd[sl] for sl in slices], axis=-1)
    if kind == "max":
        idx = stack.argmax(axis=-1)
        out = np.take_along_axis(stack, idx[..., None], axis=-1)[..., 0]

        def bw(g):
            gx = np.zeros_like(xd)
            for k, sl in enumerate(slices):
                gx[sl] += np.where(idx == k, g, 0.0)
            return (gx,)

    elif kind == "avg":
        out = stack.mean(axis=-1)
        area = window * window

        def bw(g):
            gx = np.zeros_like(xd)
            for sl in slices:
                gx[sl] += g / area
            return (gx,)

    else:
        raise ValueError(f"unknown pooling {kind!r}")
    return _unbatch(record("pool2d", out, (xb,), bw), squeeze)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` shaped ``[B, D]``."""
    if x.ndim != 2 or weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"linear: input {list(x.shape)} vs weight {list(weight.shape)}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data[None, :]

    def bw(g):
        grads = (g @ wd, g.T @ xd)
        return grads if bias is None else grads + (g.sum(axis=0),)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("linear", out, inputs, bw)


# -- blocks -----------------------------------------------------------------


@dataclass
class MBConvParams:
    expand: Tensor  # [4 * C_in, C_in]
    bn1_scale: Tensor
    bn1_shift: Tensor
    depthwise: Tensor  # [4 * C_in, 3, 3]
    bn2_scale: Tensor
    bn2_shift: Tensor
    project: Tensor  # [C_out, 4 * C_in]
    shortcut: Optional[Tensor] = None  # [C_out, C_in]
    stride: int = 1
    bn1_stats: RunningStats = field(default=None)
    bn2_stats: RunningStats = field(default=None)

    def __post_init__(self):
        hidden = self.expand.shape[0]
        if self.bn1_stats is None:
            self.bn1_stats = RunningStats.fresh(hidden)
        if self.bn2_stats is None:
            self.bn2_stats = RunningStats.fresh(hidden)


def mbconv_block(x: Tensor, p: MBConvParams, training: bool = False, act: str = "gelu") -> Tensor:
    xb, squeeze = _batched(x)
    c_in = xb.shape[1]
    if p.expand.shape[1] != c_in:
        raise ShapeError(f"expand weights {list(p.expand.shape)} vs {c_in} input channels")
    c_out = p.project.shape[0]
    needs_shortcut = p.stride != 1 or c_out != c_in
    if needs_shortcut and p.shortcut is None:
        raise ShapeError("block changes shape but has no shortcut projection")

    h = pointwise_conv(xb, p.expand)
    h = normalize(h, "channel-stat", p.bn1_scale, p.bn1_shift, training=training, running=p.bn1_stats)
    h = T.activation(h, act)
    h = depthwise_conv2d(h, p.depthwise, stride=p.stride, padding="same")
    h = normalize(h, "channel-stat", p.bn2_scale, p.bn2_shift, training=training, running=p.bn2_stats)
    h = T.activation(h, act)
    h = pointwise_conv(h, p.project)
    if needs_shortcut:
        skip = subsample(xb, p.stride) if p.stride != 1 else xb
        skip = pointwise_conv(skip, p.shortcut)
    else:
        skip = xb
    return _unbatch(T.add(h, skip), squeeze)


@dataclass
class TransformerParams:
    ln1_scale: Tensor
    ln1_shift: Tensor
    ln2_scale: Tensor
    ln2_shift: Tensor
    ff1: Tensor  # [4C, C]
    ff1_bias: Tensor
    ff2: Tensor  # [C, 4C]
    ff2_bias: Tensor
    proj: Optional[Tensor] = None  # [C, C_in], applied before the block when widths differ
    stride: int = 1


def transformer_block(x: Tensor, p: TransformerParams, act: str = "gelu") -> Tensor:
    xb, squeeze = _batched(x)
    if p.stride == 2:
        xb = pool2d(xb, "max", 2, 2)
    elif p.stride != 1:
        raise ShapeError(f"unsupported stride {p.stride}")
    if p.proj is not None:
        xb = pointwise_conv(xb, p.proj)
    c = xb.shape[1]
    if p.ln1_scale.shape != (c,) or p.ff1.shape[1] != c or p.ff2.shape[0] != c:
        raise ShapeError(f"transformer parameters do not match {c} channels")

    h = normalize(xb, "layer-stat", p.ln1_scale, p.ln1_shift)
    xb = T.add(xb, global_self_attention(h))
    h = normalize(xb, "layer-stat", p.ln2_scale, p.ln2_shift)
    h = pointwise_conv(h, p.ff1, p.ff1_bias)
    h = T.activation(h, act)
    h = pointwise_conv(h, p.ff2, p.ff2_bias)
    return _unbatch(T.add(xb, h), squeeze)
