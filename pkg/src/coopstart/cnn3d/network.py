"""Residual 3D CNN: layer graph, parameters, forward and backward passes.

Layer graph::

    input batch-norm -> initial conv -> ReLU -> max-pool -> 1x1x1 conv (base width) -> ReLU
    -> block 1 .. block n   (reduction layer in front of every block but the first)
    -> global average pool -> fully connected -> softmax

A block is ``layers_per_block`` bottleneck residual layers followed by a
batch-norm. Reduction layers are strided 1x1x1 convolutions that double the
channel count, so the full-size preset goes from 32 maps to 1024 after six
blocks.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from ..domain import ClassProbs
from . import layers as L


@dataclass(frozen=True)
class NetworkSpec:
    frames: int = 10
    height: int = 112
    width: int = 112
    in_channels: int = 1
    n_classes: int = 3
    init_width: int = 32
    init_kernel: tuple[int, int, int] = (3, 5, 5)
    init_stride: tuple[int, int, int] = (1, 2, 2)
    pool: tuple[int, int, int] = (1, 2, 2)
    base_width: int = 32
    n_blocks: int = 6
    layers_per_block: int = 3
    bottleneck: int = 4
    res_kernel: tuple[int, int, int] = (3, 3, 3)
    reduction_stride: tuple[int, int, int] = (1, 2, 2)
    width_factor: float = 1.0

    def __post_init__(self) -> None:
        for name in ("init_kernel", "init_stride", "pool", "res_kernel", "reduction_stride"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.n_blocks < 1 or self.layers_per_block < 1:
            raise ValueError("network needs at least one block with one layer")

    def scaled(self, w: int) -> int:
        return max(1, int(round(w * self.width_factor)))

    @property
    def init_channels(self) -> int:
        return self.scaled(self.init_width)

    def block_width(self, k: int) -> int:
        return self.scaled(self.base_width * 2**k)

    def inner_width(self, k: int) -> int:
        return max(1, self.block_width(k) // self.bottleneck)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def full_preset() -> NetworkSpec:
    return NetworkSpec()


def reduced_preset(size: int = 16, width_factor: float = 1 / 8, **kw) -> NetworkSpec:
    """Desk-scale network on ``size x size`` frames with every width scaled."""
    return NetworkSpec(height=size, width=size, width_factor=width_factor, **kw)


def micro_preset(**kw) -> NetworkSpec:
    """Tiny network used for gradient checks."""
    base = dict(
        height=8,
        width=8,
        init_width=4,
        base_width=4,
        n_blocks=3,
        layers_per_block=1,
        bottleneck=2,
        init_kernel=(3, 3, 3),
        reduction_stride=(1, 1, 1),
    )
    base.update(kw)
    return NetworkSpec(**base)


@dataclass(eq=False)
class NetworkWeights:
    """Trainable parameters and batch-norm running statistics, keyed by layer name."""

    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "NetworkWeights":
        return NetworkWeights(
            {k: v.copy() for k, v in self.params.items()}, {k: v.copy() for k, v in self.buffers.items()}
        )

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def astype(self, dtype) -> "NetworkWeights":
        return NetworkWeights(
            {k: v.astype(dtype) for k, v in self.params.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
        )


# -- residual layer ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ResidualWeights:
    reduce: L.ConvLayer
    mid: L.ConvLayer
    expand: L.ConvLayer
    shortcut: L.ConvLayer | None = None


def residual_forward(x: np.ndarray, w: ResidualWeights):
    """Bottleneck residual layer ``relu(F(x) + shortcut(x))`` on a batch."""
    c_out = w.expand.kernel.shape[0]
    if w.shortcut is None and x.shape[1] != c_out:
        raise ValueError("channel counts differ and no projection shortcut is given")
    a, ca = L.conv3d_forward(x, w.reduce.kernel, w.reduce.bias, w.reduce.stride)
    ra = L.relu(a)
    b, cb = L.conv3d_forward(ra, w.mid.kernel, w.mid.bias, w.mid.stride)
    rb = L.relu(b)
    c, cc = L.conv3d_forward(rb, w.expand.kernel, w.expand.bias, w.expand.stride)
    if w.shortcut is None:
        s, cs = x, None
    else:
        s, cs = L.conv3d_forward(x, w.shortcut.kernel, w.shortcut.bias, w.shortcut.stride)
    pre = c + s
    return L.relu(pre), (ca, a, cb, b, cc, cs, pre)


def residual_backward(dout: np.ndarray, cache):
    """Returns dx and gradients ordered (reduce, mid, expand, shortcut) as (dK, db) pairs."""
    ca, a, cb, b, cc, cs, pre = cache
    dpre = L.relu_backward(dout, pre)
    drb, dkc, dbc = L.conv3d_backward(dpre, cc)
    db_ = L.relu_backward(drb, b)
    dra, dkb, dbb = L.conv3d_backward(db_, cb)
    da = L.relu_backward(dra, a)
    dx, dka, dba = L.conv3d_backward(da, ca)
    if cs is None:
        dx = dx + dpre
        short = None
    else:
        dxs, dks, dbs = L.conv3d_backward(dpre, cs)
        dx = dx + dxs
        short = (dks, dbs)
    return dx, ((dka, dba), (dkb, dbb), (dkc, dbc), short)


def residual_block(x: np.ndarray, w: ResidualWeights) -> np.ndarray:
    """Residual layer on a single ``(C, T, H, W)`` tensor."""
    out, _ = residual_forward(np.asarray(x, dtype=float)[None], w)
    return out[0]


# -- parameters ---------------------------------------------------------------------


def _res_prefixes(spec: NetworkSpec):
    for k in range(spec.n_blocks):
        for j in range(spec.layers_per_block):
            yield k, j, f"b{k}.l{j}"


def init_weights(spec: NetworkSpec, seed: int = 0, dtype=np.float64) -> NetworkWeights:
    """He-normal kernels, zero biases, unit batch-norm scales."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}

    def conv(name: str, cout: int, cin: int, k) -> None:
        k = L._triple(k)
        fan_in = cin * k[0] * k[1] * k[2]
        params[f"{name}.kernel"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (cout, cin, *k)).astype(dtype)
        params[f"{name}.bias"] = np.zeros(cout, dtype=dtype)

    def bn(name: str, c: int) -> None:
        params[f"{name}.gamma"] = np.ones(c, dtype=dtype)
        params[f"{name}.beta"] = np.zeros(c, dtype=dtype)
        buffers[f"{name}.mean"] = np.zeros(c, dtype=dtype)
        buffers[f"{name}.var"] = np.ones(c, dtype=dtype)

    bn("bn_in", spec.in_channels)
    conv("init", spec.init_channels, spec.in_channels, spec.init_kernel)
    conv("proj", spec.block_width(0), spec.init_channels, 1)
    for k in range(spec.n_blocks):
        if k:
            conv(f"b{k}.red", spec.block_width(k), spec.block_width(k - 1), 1)
        c, m = spec.block_width(k), spec.inner_width(k)
        for j in range(spec.layers_per_block):
            p = f"b{k}.l{j}"
            conv(f"{p}.a", m, c, 1)
            conv(f"{p}.b", m, m, spec.res_kernel)
            conv(f"{p}.c", c, m, 1)
        bn(f"b{k}.bn", c)
    c_last = spec.block_width(spec.n_blocks - 1)
    params["fc.weight"] = rng.normal(0.0, np.sqrt(1.0 / c_last), (c_last, spec.n_classes)).astype(dtype)
    params["fc.bias"] = np.zeros(spec.n_classes, dtype=dtype)
    return NetworkWeights(params, buffers)


def _conv(params, name, stride=(1, 1, 1)) -> L.ConvLayer:
    return L.ConvLayer(params[f"{name}.kernel"], params[f"{name}.bias"], stride)


def _res_weights(params, prefix: str, res_kernel_stride=(1, 1, 1)) -> ResidualWeights:
    short = _conv(params, f"{prefix}.s") if f"{prefix}.s.kernel" in params else None
    return ResidualWeights(
        _conv(params, f"{prefix}.a"), _conv(params, f"{prefix}.b", res_kernel_stride), _conv(params, f"{prefix}.c"), short
    )


# -- forward / backward -------------------------------------------------------------


def forward_logits(spec: NetworkSpec, weights: NetworkWeights, x: np.ndarray, train: bool = False):
    """Batched forward pass to logits.

    Returns ``(logits, caches, new_buffers)``; ``new_buffers`` carries the
    running statistics updated by a training-mode pass.
    """
    if x.ndim != 5:
        raise ValueError(f"expected (B, C, T, H, W) batch, got shape {x.shape}")
    if x.shape[1] != spec.in_channels or x.shape[2] != spec.frames:
        raise ValueError(
            f"expected {spec.in_channels} channels and temporal depth {spec.frames}, got {x.shape[1:3]}"
        )
    P, Bf = weights.params, weights.buffers
    caches: list = []
    new_buf: dict[str, np.ndarray] = dict(Bf)

    def bn(h, name):
        out, cache, (m, v) = L.batchnorm_forward(
            h, P[f"{name}.gamma"], P[f"{name}.beta"], Bf[f"{name}.mean"], Bf[f"{name}.var"], train
        )
        new_buf[f"{name}.mean"], new_buf[f"{name}.var"] = m, v
        caches.append(("bn", name, cache))
        return out

    def conv(h, name, stride=(1, 1, 1)):
        out, cache = L.conv3d_forward(h, P[f"{name}.kernel"], P[f"{name}.bias"], stride)
        caches.append(("conv", name, cache))
        return out

    def relu(h):
        caches.append(("relu", None, h))
        return L.relu(h)

    h = bn(x, "bn_in")
    h = relu(conv(h, "init", spec.init_stride))
    h, pc = L.maxpool_forward(h, spec.pool)
    caches.append(("pool", None, pc))
    h = relu(conv(h, "proj"))
    for k in range(spec.n_blocks):
        if k:
            h = relu(conv(h, f"b{k}.red", spec.reduction_stride))
        for j in range(spec.layers_per_block):
            name = f"b{k}.l{j}"
            h, rc = residual_forward(h, _res_weights(P, name))
            caches.append(("res", name, rc))
        h = bn(h, f"b{k}.bn")
    h, shape = L.global_avgpool_forward(h)
    caches.append(("gap", None, shape))
    caches.append(("fc", None, h))
    logits = h @ P["fc.weight"] + P["fc.bias"]
    return logits, caches, new_buf


def backward_logits(weights: NetworkWeights, caches, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of every parameter given the gradient w.r.t. the logits."""
    P = weights.params
    grads: dict[str, np.ndarray] = {}
    d = dlogits
    for kind, name, cache in reversed(caches):
        if kind == "fc":
            grads["fc.weight"] = cache.T @ d
            grads["fc.bias"] = d.sum(axis=0)
            d = d @ P["fc.weight"].T
        elif kind == "gap":
            d = L.global_avgpool_backward(d, cache)
        elif kind == "bn":
            d, grads[f"{name}.gamma"], grads[f"{name}.beta"] = L.batchnorm_backward(d, cache)
        elif kind == "res":
            d, parts = residual_backward(d, cache)
            for sub, pair in zip("abcs", parts):
                if pair is not None:
                    grads[f"{name}.{sub}.kernel"], grads[f"{name}.{sub}.bias"] = pair
        elif kind == "relu":
            d = L.relu_backward(d, cache)
        elif kind == "conv":
            d, grads[f"{name}.kernel"], grads[f"{name}.bias"] = L.conv3d_backward(d, cache)
        elif kind == "pool":
            d = L.maxpool_backward(d, cache)
    return grads


def loss_and_grads(
    spec: NetworkSpec, weights: NetworkWeights, x: np.ndarray, targets: np.ndarray, train: bool = True
):
    """Mean cross-entropy of a batch, its parameter gradients and updated running stats."""
    targets = np.asarray(targets, dtype=np.int64)
    logits, caches, new_buf = forward_logits(spec, weights, x, train)
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    n = targets.size
    loss = float(np.mean(logsum - z[np.arange(n), targets]))
    dlogits = L.softmax(logits)
    dlogits[np.arange(n), targets] -= 1.0
    dlogits /= n
    return loss, backward_logits(weights, caches, dlogits), new_buf


def backward(
    spec: NetworkSpec, weights: NetworkWeights, x_seq: np.ndarray, target, train: bool = True
) -> dict[str, np.ndarray]:
    """Exact cross-entropy gradients for one sequence ``(C, T, H, W)`` or a batch."""
    x = np.asarray(x_seq)
    if x.ndim == 4:
        x = x[None]
    target = np.atleast_1d(np.asarray(target, dtype=np.int64))
    return loss_and_grads(spec, weights, x, target, train)[1]


def predict_batch(spec: NetworkSpec, weights: NetworkWeights, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Inference-mode class probabilities ``(B, n_classes)``, computed in fixed-size chunks."""
    out = []
    for i in range(0, x.shape[0], batch_size):
        logits, _, _ = forward_logits(spec, weights, x[i : i + batch_size], train=False)
        out.append(L.softmax(logits.astype(np.float64)))
    if not out:
        return np.zeros((0, spec.n_classes))
    return np.concatenate(out)


def forward(spec: NetworkSpec, weights: NetworkWeights, x_seq: np.ndarray) -> ClassProbs:
    """Class probabilities (waiting, starting, moving) of one input sequence."""
    x = np.asarray(x_seq, dtype=next(iter(weights.params.values())).dtype)
    if x.ndim != 4:
        raise ValueError(f"expected (C, T, H, W) sequence, got {x.shape}")
    if x.shape[1] != spec.frames:
        raise ValueError(f"expected temporal depth {spec.frames}, got {x.shape[1]}")
    p = predict_batch(spec, weights, x[None])[0]
    return ClassProbs(float(p[0]), float(p[1]), float(1.0 - p[0] - p[1]))


def feature_map_shapes(spec: NetworkSpec) -> list[tuple[str, tuple[int, ...]]]:
    """Shapes (C, T, H, W) after each stage, without running the network."""
    shapes = []
    t, h, w = spec.frames, spec.height, spec.width
    t, h, w = L.conv_out_shape((t, h, w), spec.init_stride)
    shapes.append(("init", (spec.init_channels, t, h, w)))
    kt, kh, kw = spec.pool
    t, h, w = max(t // kt, 1), max(h // kh, 1), max(w // kw, 1)
    shapes.append(("pool", (spec.init_channels, t, h, w)))
    shapes.append(("proj", (spec.block_width(0), t, h, w)))
    for k in range(spec.n_blocks):
        if k:
            t, h, w = L.conv_out_shape((t, h, w), spec.reduction_stride)
        shapes.append((f"block{k + 1}", (spec.block_width(k), t, h, w)))
    shapes.append(("fc", (spec.n_classes,)))
    return shapes


def activation_pattern(spec: NetworkSpec, weights: NetworkWeights, x: np.ndarray, train: bool = False) -> bytes:
    """Fingerprint of every ReLU on/off state and max-pool winner.

    Two parameter settings with equal fingerprints lie in the same linear
    region of the piecewise-smooth network.
    """
    _, caches, _ = forward_logits(spec, weights, x, train)
    parts: list[bytes] = []
    for kind, _name, cache in caches:
        if kind == "relu":
            parts.append(np.packbits(cache > 0).tobytes())
        elif kind == "pool":
            parts.append(cache[2].astype(np.int64).tobytes())
        elif kind == "res":
            ca, a, cb, b, cc, cs, pre = cache
            for h in (a, b, pre):
                parts.append(np.packbits(h > 0).tobytes())
    return b"".join(parts)
