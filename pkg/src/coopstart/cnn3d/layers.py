"""Batched numpy layer primitives with explicit backward passes.

Activations are laid out as ``(batch, channels, time, height, width)``.
Convolutions follow the flipped-kernel summation

    v[t, y, x] = b + sum_{j,n,m} I[t - j, y - n, x - m] * K[j + T, n + N, m + M]

with zero "same" padding, i.e. a cross-correlation with the reversed kernel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(a) for a in v)
    if len(t) != 3:
        raise ValueError(f"expected three extents, got {v}")
    return t  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class ConvLayer:
    """Kernel ``(out_ch, in_ch, 2T+1, 2N+1, 2M+1)`` ordered (time, height, width)."""

    kernel: np.ndarray
    bias: np.ndarray
    stride: tuple[int, int, int] = (1, 1, 1)

    def __post_init__(self) -> None:
        k = np.asarray(self.kernel)
        if k.ndim != 5 or any(e % 2 == 0 for e in k.shape[2:]):
            raise ValueError(f"kernel must be 5-d with odd extents, got {k.shape}")
        if np.asarray(self.bias).shape != (k.shape[0],):
            raise ValueError("one bias per output channel required")
        object.__setattr__(self, "stride", _triple(self.stride))


def conv_out_shape(shape: tuple[int, int, int], stride) -> tuple[int, int, int]:
    st = _triple(stride)
    return tuple((n - 1) // s + 1 for n, s in zip(shape, st))  # type: ignore[return-value]


def _im2col(x: np.ndarray, ksize, stride) -> tuple[np.ndarray, tuple]:
    kt, kh, kw = ksize
    pt, ph, pw = kt // 2, kh // 2, kw // 2
    B, C, T, H, W = x.shape
    To, Ho, Wo = conv_out_shape((T, H, W), stride)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    st, sh, sw = stride
    win = sliding_window_view(xp, (kt, kh, kw), axis=(2, 3, 4))
    win = win[:, :, : st * To : st, : sh * Ho : sh, : sw * Wo : sw]
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(B * To * Ho * Wo, C * kt * kh * kw)
    return cols, (B, C, T, H, W, To, Ho, Wo, xp.shape)


def conv3d_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, stride=(1, 1, 1)):
    """Batched convolution; returns the output and a cache for :func:`conv3d_backward`."""
    stride = _triple(stride)
    O, C = kernel.shape[:2]
    if x.ndim != 5 or x.shape[1] != C:
        raise ValueError(f"input {x.shape} does not match kernel {kernel.shape}")
    ksize = kernel.shape[2:]
    cols, dims = _im2col(x, ksize, stride)
    wmat = kernel[:, :, ::-1, ::-1, ::-1].reshape(O, -1).T
    B, _, _, _, _, To, Ho, Wo, _ = dims
    out = (cols @ wmat + bias).reshape(B, To, Ho, Wo, O).transpose(0, 4, 1, 2, 3)
    return np.ascontiguousarray(out), (cols, wmat, kernel.shape, stride, dims)


def conv3d_backward(dout: np.ndarray, cache):
    """Gradients (dx, dkernel, dbias) of a convolution."""
    cols, wmat, kshape, stride, dims = cache
    B, C, T, H, W, To, Ho, Wo, pshape = dims
    O, _, kt, kh, kw = kshape
    dmat = dout.transpose(0, 2, 3, 4, 1).reshape(-1, O)
    dflip = (cols.T @ dmat).T.reshape(kshape)
    dkernel = np.ascontiguousarray(dflip[:, :, ::-1, ::-1, ::-1])
    dbias = dmat.sum(axis=0)
    dcols = (dmat @ wmat.T).reshape(B, To, Ho, Wo, C, kt, kh, kw)
    dxp = np.zeros(pshape, dtype=dout.dtype)
    st, sh, sw = stride
    for a in range(kt):
        for b in range(kh):
            for c in range(kw):
                dxp[:, :, a : a + st * To : st, b : b + sh * Ho : sh, c : c + sw * Wo : sw] += dcols[
                    ..., a, b, c
                ].transpose(0, 4, 1, 2, 3)
    pt, ph, pw = kt // 2, kh // 2, kw // 2
    dx = dxp[:, :, pt : pt + T, ph : ph + H, pw : pw + W]
    return np.ascontiguousarray(dx), dkernel, dbias


def conv3d(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Convolve one ``(channels, time, height, width)`` tensor."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 4:
        raise ValueError(f"expected (C, T, H, W) input, got {x.shape}")
    out, _ = conv3d_forward(x[None], np.asarray(layer.kernel, float), np.asarray(layer.bias, float), layer.stride)
    return out[0]


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dout * (x > 0)


def maxpool_forward(x: np.ndarray, size):
    """Non-overlapping max pooling (kernel = stride); trailing remainders are dropped."""
    kt, kh, kw = _triple(size)
    B, C, T, H, W = x.shape
    To, Ho, Wo = max(T // kt, 1), max(H // kh, 1), max(W // kw, 1)
    kt, kh, kw = min(kt, T), min(kh, H), min(kw, W)
    xc = x[:, :, : To * kt, : Ho * kh, : Wo * kw]
    blocks = xc.reshape(B, C, To, kt, Ho, kh, Wo, kw).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    flat = blocks.reshape(B, C, To, Ho, Wo, kt * kh * kw)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, (kt, kh, kw), arg)


def maxpool_backward(dout: np.ndarray, cache) -> np.ndarray:
    shape, (kt, kh, kw), arg = cache
    B, C, T, H, W = shape
    To, Ho, Wo = arg.shape[2:]
    flat = np.zeros((B, C, To, Ho, Wo, kt * kh * kw), dtype=dout.dtype)
    np.put_along_axis(flat, arg[..., None], dout[..., None], axis=-1)
    blocks = flat.reshape(B, C, To, Ho, Wo, kt, kh, kw).transpose(0, 1, 2, 5, 3, 6, 4, 7)
    dx = np.zeros(shape, dtype=dout.dtype)
    dx[:, :, : To * kt, : Ho * kh, : Wo * kw] = blocks.reshape(B, C, To * kt, Ho * kh, Wo * kw)
    return dx


def batchnorm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    eps: float = BN_EPS,
):
    """Per-channel normalization over (batch, time, height, width).

    Training mode uses batch statistics and returns updated running
    statistics; inference mode uses the running statistics.
    """
    axes = (0, 2, 3, 4)
    shape = (1, -1, 1, 1, 1)
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        new_mean = BN_MOMENTUM * running_mean + (1.0 - BN_MOMENTUM) * mean
        new_var = BN_MOMENTUM * running_var + (1.0 - BN_MOMENTUM) * var
    else:
        mean, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(shape)) * inv.reshape(shape)
    out = gamma.reshape(shape) * xhat + beta.reshape(shape)
    return out, (xhat, inv, gamma, train), (new_mean, new_var)


def batchnorm_backward(dout: np.ndarray, cache):
    xhat, inv, gamma, train = cache
    axes = (0, 2, 3, 4)
    shape = (1, -1, 1, 1, 1)
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma.reshape(shape)
    if not train:
        return dxhat * inv.reshape(shape), dgamma, dbeta
    m = dout.size / dout.shape[1]
    dx = (
        inv.reshape(shape)
        / m
        * (m * dxhat - dxhat.sum(axis=axes).reshape(shape) - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape))
    )
    return dx, dgamma, dbeta


def global_avgpool_forward(x: np.ndarray):
    return x.mean(axis=(2, 3, 4)), x.shape


def global_avgpool_backward(dout: np.ndarray, shape) -> np.ndarray:
    n = shape[2] * shape[3] * shape[4]
    return np.broadcast_to((dout / n)[:, :, None, None, None], shape).copy()


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs: np.ndarray, targets: np.ndarray) -> float:
    """Mean negative log-likelihood of integer ``targets``."""
    p = probs[np.arange(targets.size), targets]
    return float(-np.mean(np.log(np.maximum(p, 1e-300))))
