"""Convolution, batch normalization, pooling, dense and loss ops."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import kernels
from .errors import ContractError, DimensionError
from .tensor import Tensor, log_kink, make_node, relu, sigmoid  # noqa: F401  (re-exported)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _out_extent(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


@dataclass
class Conv2dParams:
    weight: Tensor  # (Cout, Cin/groups, kh, kw)
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise DimensionError(f"conv weight must be 4-D, got {self.weight.shape}")
        if self.stride < 1 or self.padding < 0 or self.groups < 1:
            raise ContractError("stride >= 1, padding >= 0 and groups >= 1 required")
        if self.weight.shape[0] % self.groups:
            raise DimensionError(
                f"output channels {self.weight.shape[0]} not divisible by groups {self.groups}"
            )
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(f"conv bias shape {self.bias.shape} != ({self.weight.shape[0]},)")


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Grouped 2-D cross-correlation with zero padding."""
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects N×C×H×W input, got {x.shape}")
    n, cin, h, w = x.shape
    cout, cin_g, kh, kw = p.weight.shape
    g = p.groups
    if cin % g or cin_g * g != cin:
        raise DimensionError(
            f"input channels {cin} incompatible with weight {p.weight.shape} and groups {g}"
        )
    s, pad = p.stride, p.padding
    ho, wo = _out_extent(h, kh, s, pad), _out_extent(w, kw, s, pad)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d output would be empty for input {x.shape}, kernel {kh}×{kw}")
    cout_g, kdim, L = cout // g, cin_g * kh * kw, ho * wo
    pointwise = kh == 1 and kw == 1 and s == 1 and pad == 0
    if pointwise:
        cols = x.data.reshape(n, cin, L)
    else:
        cols = kernels.im2col(x.data, kh, kw, s, pad, ho, wo)
    cols_g = cols.reshape(n, g, kdim, L)
    wmat = p.weight.data.reshape(g, cout_g, kdim)
    out = np.matmul(wmat, cols_g).reshape(n, cout, ho, wo)
    bias = p.bias
    if bias is not None:
        out += bias.data[:, None, None]
    weight = p.weight

    def grad_fn(grad):
        dg = grad.reshape(n, g, cout_g, L)
        dx = dw = db = None
        if weight.requires_grad:
            dw = np.matmul(dg, cols_g.transpose(0, 1, 3, 2)).sum(axis=0).reshape(weight.shape)
        if x.requires_grad:
            dcols = np.matmul(wmat.transpose(0, 2, 1), dg).reshape(n, cin * kh * kw, L)
            if pointwise:
                dx = dcols.reshape(x.shape)
            else:
                dx = kernels.col2im(dcols, x.shape, kh, kw, s, pad, ho, wo)
        if bias is not None and bias.requires_grad:
            db = grad.sum(axis=(0, 2, 3))
        return (dx, dw) if bias is None else (dx, dw, db)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, grad_fn, "conv2d")


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS
    mode: Literal["train", "eval"] = "train"

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32, **kw) -> "BatchNormParams":
        return cls(
            gamma=Tensor(np.ones(channels, dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype), requires_grad=True),
            running_mean=Tensor(np.zeros(channels, dtype)),
            running_var=Tensor(np.ones(channels, dtype)),
            **kw,
        )


def batchnorm2d(x: Tensor, p: BatchNormParams) -> Tensor:
    """Per-channel batch normalization.

    Train mode normalizes with the biased batch variance and folds batch
    statistics into the running buffers; eval mode reads only the buffers.
    """
    if x.ndim != 4 or p.gamma.shape != (x.shape[1],):
        raise DimensionError(f"batchnorm2d: input {x.shape} vs gamma {p.gamma.shape}")
    n, c, h, w = x.shape
    gamma, beta = p.gamma, p.beta
    gd = gamma.data[:, None, None]
    if p.mode == "train":
        m = n * h * w
        if m < 2:
            raise ContractError(f"train-mode batchnorm needs N*H*W >= 2, got {m}")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        mom = p.momentum
        p.running_mean.data[...] = (1 - mom) * p.running_mean.data + mom * mu
        p.running_var.data[...] = (1 - mom) * p.running_var.data + mom * var
    elif p.mode == "eval":
        m = None
        mu, var = p.running_mean.data, p.running_var.data
    else:
        raise ContractError(f"unknown batchnorm mode {p.mode!r}")
    inv = (1.0 / np.sqrt(var + p.eps)).astype(x.dtype)
    xhat = (x.data - mu[:, None, None]) * inv[:, None, None]
    out = gd * xhat + beta.data[:, None, None]

    def grad_fn(grad):
        dgamma = (grad * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        dbeta = grad.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = grad * gd
            if m is None:
                dx = dxhat * inv[:, None, None]
            else:
                s1 = dxhat.sum(axis=(0, 2, 3))[:, None, None]
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[:, None, None]
                dx = (inv[:, None, None] / m) * (m * dxhat - s1 - xhat * s2)
        return dx, dgamma, dbeta

    return make_node(out.astype(x.dtype, copy=False), (x, gamma, beta), grad_fn, "batchnorm2d")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects N×C×H×W, got {x.shape}")
    n, c, h, w = x.shape
    hw = h * w

    def grad_fn(grad):
        return (np.broadcast_to(grad[:, :, None, None] / hw, x.shape).copy(),)

    return make_node(x.data.mean(axis=(2, 3)), (x,), grad_fn, "global_avg_pool")


def maxpool2d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    """Windowed max; padded cells never win. Gradient goes to the first argmax."""
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects N×C×H×W, got {x.shape}")
    if padding > kernel // 2:
        raise ContractError("maxpool padding must not exceed half the kernel")
    n, c, h, w = x.shape
    ho, wo = _out_extent(h, kernel, stride, padding), _out_extent(w, kernel, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"maxpool2d output would be empty for input {x.shape}, kernel {kernel}")
    out, argmax = kernels.maxpool_forward(x.data, kernel, stride, padding, ho, wo)
    log_kink(argmax)

    def grad_fn(grad):
        return (kernels.maxpool_backward(grad, argmax, x.shape),)

    return make_node(out, (x,), grad_fn, "maxpool2d")


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for x (N, D), weight (D, E), bias (E)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"dense shape mismatch: x {x.shape}, weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"dense bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data

    def grad_fn(grad):
        gx = grad @ wd.T if x.requires_grad else None
        gw = xd.T @ grad if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, grad.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, grad_fn, "dense")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch mean of ``-log softmax(logits)[label]`` with max subtraction."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} vs labels {labels.shape}")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = int(np.flatnonzero((labels < 0) | (labels >= k))[0])
        raise ContractError(f"label {labels[bad]} at index {bad} outside [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = (logsumexp - z[rows, labels]).mean()

    def grad_fn(grad):
        p = np.exp(z - logsumexp[:, None])
        p[rows, labels] -= 1
        return (p * (grad / n),)

    return make_node(np.asarray(loss, dtype=logits.dtype), (logits,), grad_fn, "softmax_cross_entropy")
