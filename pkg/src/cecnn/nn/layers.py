"""Convolution, pooling, dense and activation layers.

The functional forms (``conv2d_forward`` etc.) accept either a single sample
``[C, H, W]`` or a batch ``[N, C, H, W]``; layer objects always see batches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from .tensor import Tensor, as_tensor

ACTIVATIONS = ("sigmoid", "tanh", "relu", "identity")


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected [C,H,W] or [N,C,H,W] input, got shape {x.shape}")
    return x, False


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d_forward(x, kernels, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate ``x`` with ``kernels`` ([F, C, kh, kw]) and add ``bias``."""
    x, squeeze = _batched(as_tensor(x))
    w = as_tensor(kernels)
    b = as_tensor(bias)
    n, c, h, wd = x.shape
    if w.ndim != 4:
        raise ShapeError(f"kernels must be [F,C,kh,kw], got {w.shape}")
    f, kc, kh, kw = w.shape
    if kc != c:
        raise ShapeError(f"kernel expects {kc} input channels, input has {c}")
    if b.shape != (f,):
        raise ShapeError(f"bias must have shape ({f},), got {b.shape}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{wd + 2 * padding}"
        )
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # cols: [N*Ho*Wo, C*kh*kw]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(f, -1)
    out = (cols @ wmat.T + b.data).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        if w.requires_grad:
            w._accumulate((gmat.T @ cols).reshape(w.shape))
        if b.requires_grad:
            b._accumulate(gmat.sum(axis=0))
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            x._accumulate(dxp[:, :, padding : padding + h, padding : padding + wd])

    result = Tensor._from_op(out, (x, w, b), bw)
    return result.reshape(result.shape[1:]) if squeeze else result


def maxpool2d_forward(x, pool: int, stride: int | None = None) -> Tensor:
    """Max over ``pool``x``pool`` windows; the argmax of each window routes the gradient."""
    x, squeeze = _batched(as_tensor(x))
    stride = pool if stride is None else stride
    n, c, h, wd = x.shape
    if pool > h or pool > wd:
        raise ShapeError(f"pool {pool} larger than spatial dims {h}x{wd}")
    if pool < 1 or stride < 1:
        raise ShapeError("pool and stride must be >= 1")
    ho = (h - pool) // stride + 1
    wo = (wd - pool) // stride + 1
    win = sliding_window_view(x.data, (pool, pool), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, ho, wo, pool * pool)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    # flat index into x.data of each window's maximum
    rows = (np.arange(ho) * stride)[:, None] + arg // pool
    cols = (np.arange(wo) * stride)[None, :] + arg % pool
    plane = (np.arange(n * c) * (h * wd)).reshape(n, c, 1, 1)
    flat_idx = (plane + rows * wd + cols).ravel()

    def bw(g):
        dx = np.bincount(flat_idx, weights=g.ravel(), minlength=x.data.size)
        x._accumulate(dx.reshape(x.shape))

    result = Tensor._from_op(out, (x,), bw)
    return result.reshape(result.shape[1:]) if squeeze else result


def dense_forward(x, w, b) -> Tensor:
    """``out[m] = sum_k w[m, k] x[k] + b[m]``; ``x`` may be [K] or [N, K]."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.ndim != 2 or b.shape != (w.shape[0],):
        raise ShapeError(f"dense weights {w.shape} and bias {b.shape} do not conform")
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"dense expects {w.shape[1]} inputs, got {x.shape[-1]}")
    if x.ndim == 1:
        return (x.reshape(1, -1) @ w.T + b).reshape(w.shape[0])
    return x @ w.T + b


def activation_apply(x, kind: str) -> Tensor:
    x = as_tensor(x)
    if kind == "sigmoid":
        return x.sigmoid()
    if kind == "tanh":
        return x.tanh()
    if kind == "relu":
        return x.relu()
    if kind == "identity":
        return x
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


# ---------------------------------------------------------------------------
# Layer objects
# ---------------------------------------------------------------------------


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class Layer:
    kind: str
    params: dict[str, Tensor] = field(default_factory=dict)
    hyper: dict = field(default_factory=dict)

    def forward(self, x: Tensor) -> Tensor:
        h = self.hyper
        if self.kind == "conv2d":
            return conv2d_forward(
                x, self.params["kernels"], self.params["bias"], h["stride"], h["padding"]
            )
        if self.kind == "maxpool2d":
            return maxpool2d_forward(x, h["pool"], h["stride"])
        if self.kind == "flatten":
            return x.reshape(x.shape[0], -1)
        if self.kind == "dense":
            return dense_forward(x, self.params["weight"], self.params["bias"])
        if self.kind == "activation":
            return activation_apply(x, h["name"])
        raise ValueError(f"unknown layer kind {self.kind!r}")

    def output_shape(self, in_shape: tuple) -> tuple:
        """Shape of one sample's output given one sample's input shape."""
        h = self.hyper
        if self.kind == "conv2d":
            f, c, kh, kw = self.params["kernels"].shape
            if len(in_shape) != 3 or in_shape[0] != c:
                raise ShapeError(f"conv2d expects {c} channels, got input {in_shape}")
            _, hh, ww = in_shape
            if hh + 2 * h["padding"] < kh or ww + 2 * h["padding"] < kw:
                raise ShapeError(f"conv kernel {kh}x{kw} exceeds padded input {in_shape}")
            return (
                f,
                conv_output_size(hh, kh, h["stride"], h["padding"]),
                conv_output_size(ww, kw, h["stride"], h["padding"]),
            )
        if self.kind == "maxpool2d":
            c, hh, ww = in_shape
            if h["pool"] > hh or h["pool"] > ww:
                raise ShapeError(f"pool {h['pool']} exceeds spatial dims of {in_shape}")
            return (c, (hh - h["pool"]) // h["stride"] + 1, (ww - h["pool"]) // h["stride"] + 1)
        if self.kind == "flatten":
            return (int(np.prod(in_shape)),)
        if self.kind == "dense":
            m, k = self.params["weight"].shape
            if in_shape != (k,):
                raise ShapeError(f"dense expects input ({k},), got {in_shape}")
            return (m,)
        return in_shape
