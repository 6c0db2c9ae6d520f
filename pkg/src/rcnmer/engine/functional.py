"""Layer primitives used by the RCN family.

All functions take and return :class:`Tensor` objects and register their
backward rules with the graph.  Convolutions are cross-correlations (no
kernel flip) computed through an im2col matrix product.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .._resample import adaptive_pool_matrix, resize_matrix
from .tensor import Tensor, make_result, unbroadcast

PROB_EPS = 1e-7


def conv_output_size(size: int, kernel: int, stride: int = 1, padding: int = 0, dilation: int = 1) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    """Patch matrix [N, C*k*k, Ho*Wo]; the output-position axis is innermost."""
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    view = as_strided(
        xp,
        shape=(n, c, k, k, ho, wo),
        strides=(sn, sc, sh * dilation, sw * dilation, sh * stride, sw * stride),
        writeable=False,
    )
    return view.reshape(n, c * k * k, ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation of ``x`` [N,Cin,H,W] with ``weight`` [Cout,Cin,k,k]."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if k != k2:
        raise ValueError("only square kernels are supported")
    if wcin != cin:
        raise ValueError(f"channel mismatch: input has {cin}, weight expects {wcin}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} does not match {cout} output channels")
    ho = conv_output_size(h, k, stride, padding, dilation)
    wo = conv_output_size(w, k, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ValueError(f"non-positive output extent {ho}x{wo} for input {h}x{w}")

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(np.ascontiguousarray(xd), k, stride, dilation, ho, wo)
    wmat = weight.data.reshape(cout, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, cout, ho, wo)
    hp, wp = xd.shape[2], xd.shape[3]

    def backward(g):
        g3 = g.reshape(n, cout, ho * wo)
        gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape) if weight.requires_grad else None
        gb = g3.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            # [N, Cin*k*k, Ho*Wo] so every tap slice below is a plain strided add
            dcols = np.matmul(wmat.T, g3).reshape(n, cin, k, k, ho, wo)
            gxp = np.zeros((n, cin, hp, wp), dtype=g.dtype)
            hspan = stride * (ho - 1) + 1
            wspan = stride * (wo - 1) + 1
            for ki in range(k):
                r0 = ki * dilation
                for kj in range(k):
                    c0 = kj * dilation
                    gxp[:, :, r0:r0 + hspan:stride, c0:c0 + wspan:stride] += dcols[:, :, ki, kj]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    if bias is None:
        return make_result(out, parents, lambda g: backward(g)[:2])
    return make_result(out, parents, backward)


def conv2d_dilated(x: Tensor, params: "ConvParams") -> Tensor:
    """Dilated convolution; with dilation 1 this is exactly :func:`conv2d`."""
    if params.dilation < 1:
        raise ValueError("dilation must be >= 1")
    return conv2d(x, params.weight, params.bias, params.stride, params.padding, params.dilation)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    training: bool = True

    @classmethod
    def create(cls, channels: int, dtype=np.float32, name: str = "bn") -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True, name=f"{name}.gamma"),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True, name=f"{name}.beta"),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )


def batchnorm2d(x: Tensor, state: BatchNormState, training: bool | None = None) -> Tensor:
    training = state.training if training is None else training
    n, c, h, w = x.shape
    if c != state.gamma.shape[0]:
        raise ValueError(f"batchnorm expects {state.gamma.shape[0]} channels, got {c}")
    count = n * h * w
    if count < 1:
        raise ValueError("batchnorm needs at least one value per channel")
    gamma = state.gamma.data.reshape(1, c, 1, 1)
    beta = state.beta.data.reshape(1, c, 1, 1)
    xd = x.data

    if training:
        mean = xd.mean(axis=(0, 2, 3), keepdims=True)
        centered = xd - mean
        var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = centered * inv
        m = state.momentum
        unbiased = var.ravel() * (count / (count - 1)) if count > 1 else var.ravel()
        state.running_mean[:] = (1 - m) * state.running_mean + m * mean.ravel()
        state.running_var[:] = (1 - m) * state.running_var + m * unbiased
    else:
        inv = 1.0 / np.sqrt(state.running_var.reshape(1, c, 1, 1) + state.eps)
        xhat = (xd - state.running_mean.reshape(1, c, 1, 1)) * inv
    out = (gamma * xhat + beta).astype(xd.dtype, copy=False)

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma
        if training:
            gx = inv / count * (count * dxhat - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        else:
            gx = dxhat * inv
        return gx.astype(g.dtype, copy=False), ggamma, gbeta

    return make_result(out, (x, state.gamma, state.beta), backward)


def maxpool2d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    """Max pooling with ``kernel == stride``; trailing rows/cols are dropped.

    Ties route the gradient to the first index in row-major window order.
    """
    if kernel != stride:
        raise ValueError("only non-overlapping pooling (kernel == stride) is supported")
    n, c, h, w = x.shape
    ho, wo = (h - kernel) // stride + 1, (w - kernel) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"maxpool window {kernel} larger than input {h}x{w}")
    k = kernel
    win = x.data[:, :, :ho * k, :wo * k].reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        onehot = np.zeros((n, c, ho, wo, k * k), dtype=g.dtype)
        np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
        full = np.zeros_like(x.data, dtype=g.dtype)
        full[:, :, :ho * k, :wo * k] = (
            onehot.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
        )
        return (full,)

    return make_result(np.ascontiguousarray(out), (x,), backward)


def _separable(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Apply ``rows @ X @ cols.T`` to every [H,W] plane of ``x``."""
    rows = rows.astype(x.dtype, copy=False)
    cols = cols.astype(x.dtype, copy=False)
    out = np.einsum("kh,nchw,lw->nckl", rows, x.data, cols, optimize=True)

    def backward(g):
        return (np.einsum("kh,nckl,lw->nchw", rows, g, cols, optimize=True),)

    return make_result(np.ascontiguousarray(out), (x,), backward)


def adaptive_avgpool2d(x: Tensor, size: int) -> Tensor:
    """Average-pool each plane to ``size x size`` bins [floor(iH/K), ceil((i+1)H/K))."""
    if size < 1:
        raise ValueError("pool size must be >= 1")
    _, _, h, w = x.shape
    return _separable(x, adaptive_pool_matrix(h, size), adaptive_pool_matrix(w, size))


def resize_bilinear(x: Tensor, height: int, width: int) -> Tensor:
    _, _, h, w = x.shape
    if (h, w) == (height, width):
        return x
    return _separable(x, resize_matrix(h, height), resize_matrix(w, width))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear dimension mismatch: x {x.shape}, weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ wd
        gw = g.T @ xd
        return (gx, gw) if bias is None else (gx, gw, g.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward)


def dropout(x: Tensor, ratio: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when not training or ``ratio == 0``."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"dropout ratio must lie in [0, 1), got {ratio}")
    if not training or ratio == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit random generator")
    keep = (rng.random(x.shape) >= ratio).astype(x.dtype) * np.asarray(1.0 / (1.0 - ratio), dtype=x.dtype)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    out = np.logaddexp(0.0, xd)
    sig = 1.0 / (1.0 + np.exp(-xd))
    return make_result(out, (x,), lambda g: (g * sig,))


def classwise_bce(probs: Tensor, onehot: np.ndarray, eps: float = PROB_EPS) -> Tensor:
    """Class-wise binary cross-entropy on softmax outputs, averaged over samples.

    Per sample: ``-sum_c [y_c log p_c + (1 - y_c) log(1 - p_c)]`` with ``p``
    clamped to ``[eps, 1 - eps]``; clamped entries pass no gradient.
    """
    p = probs.data
    y = np.asarray(onehot, dtype=p.dtype)
    if p.shape != y.shape or p.ndim != 2:
        raise ValueError(f"probabilities {p.shape} and labels {y.shape} must both be [N, C]")
    if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-5):
        raise ValueError("probability rows must sum to 1 within 1e-5")
    n = p.shape[0]
    pc = np.clip(p, eps, 1.0 - eps)
    inside = (p >= eps) & (p <= 1.0 - eps)
    per_sample = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)).sum(axis=1)
    out = np.asarray(per_sample.sum() / n, dtype=p.dtype)

    def backward(g):
        d = -(y / pc - (1.0 - y) / (1.0 - pc)) * inside / n
        return ((g * d).astype(p.dtype, copy=False),)

    return make_result(out, (probs,), backward)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Plain multinomial cross-entropy on logits (mean over samples)."""
    z = logits.data
    labels = np.asarray(labels)
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = np.asarray(-logp[np.arange(n), labels].mean(), dtype=z.dtype)

    def backward(g):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        return ((g * d / n).astype(z.dtype, copy=False),)

    return make_result(out, (logits,), backward)


def one_hot(labels, num_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out


def broadcast_mul(x: Tensor, m: Tensor) -> Tensor:
    """Multiply ``x`` [N,C,H,W] by ``m`` broadcastable to it (e.g. [N,1,H,W])."""
    xd, md = x.data, m.data
    return make_result(
        xd * md, (x, m), lambda g: (unbroadcast(g * md, xd.shape), unbroadcast(g * xd, md.shape))
    )


@dataclass
class ConvParams:
    """Weights and geometry of one convolution."""

    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    name: str = field(default="conv")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    @classmethod
    def init(cls, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator, dtype=np.float32,
             stride: int = 1, padding: int = 0, dilation: int = 1, name: str = "conv") -> "ConvParams":
        fan_in = in_ch * kernel * kernel
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(out_ch, in_ch, kernel, kernel)).astype(dtype)
        return cls(
            weight=Tensor(w, requires_grad=True, name=f"{name}.weight"),
            bias=Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True, name=f"{name}.bias"),
            stride=stride, padding=padding, dilation=dilation, name=name,
        )

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)
