"""Finite-difference checks of every layer type's backward pass.

Each check projects the layer output onto a random tensor ``R`` so the
scalar ``sum(out * R)`` has gradient ``R`` w.r.t. the output. Inputs are
kept away from ReLU and max-pool kinks so central differences are valid.
"""

from __future__ import annotations

import numpy as np

from coopstart.cnn3d import layers as L
from coopstart.cnn3d.gradcheck import numeric_grad, rel_error
from coopstart.cnn3d.network import ResidualWeights, residual_backward, residual_forward

KINK_MARGIN = 1e-3


def _away_from_zero(r: np.random.Generator, shape) -> np.ndarray:
    x = r.normal(size=shape)
    return np.where(np.abs(x) < 0.05, np.sign(x + 1e-12) * 0.05, x) if x.size else x


def check_conv(seed: int) -> dict[str, float]:
    r = np.random.default_rng(seed)
    x = r.normal(size=(2, 2, 3, 4, 5))
    k = r.normal(size=(3, 2, 3, 1, 3))
    b = r.normal(size=3)
    stride = (1, 2, 1) if seed % 2 else (1, 1, 1)
    out, cache = L.conv3d_forward(x, k, b, stride)
    R = r.normal(size=out.shape)
    dx, dk, db = L.conv3d_backward(R, cache)

    def f() -> float:
        return float(np.sum(L.conv3d_forward(x, k, b, stride)[0] * R))

    return {"x": rel_error(dx, numeric_grad(f, x)), "kernel": rel_error(dk, numeric_grad(f, k)),
            "bias": rel_error(db, numeric_grad(f, b))}


def check_relu(seed: int) -> dict[str, float]:
    r = np.random.default_rng(seed)
    x = _away_from_zero(r, (2, 2, 2, 3, 3))
    R = r.normal(size=x.shape)
    dx = L.relu_backward(R, x)
    return {"x": rel_error(dx, numeric_grad(lambda: float(np.sum(L.relu(x) * R)), x))}


def check_maxpool(seed: int) -> dict[str, float]:
    r = np.random.default_rng(seed)
    shape = (2, 2, 2, 5, 4)
    x = r.permutation(np.prod(shape)).reshape(shape) * 0.01 + r.normal(size=shape) * 1e-3
    out, cache = L.maxpool_forward(x, (1, 2, 2))
    R = r.normal(size=out.shape)
    dx = L.maxpool_backward(R, cache)
    return {"x": rel_error(dx, numeric_grad(lambda: float(np.sum(L.maxpool_forward(x, (1, 2, 2))[0] * R)), x))}


def check_batchnorm(seed: int, train: bool) -> dict[str, float]:
    r = np.random.default_rng(seed)
    x = r.normal(size=(3, 2, 2, 3, 3)) * 2.0 + 1.0
    gamma, beta = r.normal(size=2), r.normal(size=2)
    rm, rv = r.normal(size=2), r.uniform(0.5, 2.0, size=2)
    out, cache, _ = L.batchnorm_forward(x, gamma, beta, rm, rv, train)
    R = r.normal(size=out.shape)
    dx, dg, db = L.batchnorm_backward(R, cache)

    def f() -> float:
        return float(np.sum(L.batchnorm_forward(x, gamma, beta, rm, rv, train)[0] * R))

    return {"x": rel_error(dx, numeric_grad(f, x)), "gamma": rel_error(dg, numeric_grad(f, gamma)),
            "beta": rel_error(db, numeric_grad(f, beta))}


def check_avgpool(seed: int) -> dict[str, float]:
    r = np.random.default_rng(seed)
    x = r.normal(size=(2, 3, 2, 3, 4))
    out, shape = L.global_avgpool_forward(x)
    R = r.normal(size=out.shape)
    dx = L.global_avgpool_backward(R, shape)
    return {"x": rel_error(dx, numeric_grad(lambda: float(np.sum(L.global_avgpool_forward(x)[0] * R)), x))}


def check_dense_softmax(seed: int) -> dict[str, float]:
    """Fully connected layer followed by softmax cross-entropy."""
    r = np.random.default_rng(seed)
    h = r.normal(size=(4, 5))
    W, b = r.normal(size=(5, 3)), r.normal(size=3)
    y = r.integers(0, 3, 4)

    def f() -> float:
        return L.cross_entropy(L.softmax(h @ W + b), y)

    d = L.softmax(h @ W + b)
    d[np.arange(4), y] -= 1.0
    d /= 4
    return {"h": rel_error(d @ W.T, numeric_grad(f, h)), "W": rel_error(h.T @ d, numeric_grad(f, W)),
            "b": rel_error(d.sum(axis=0), numeric_grad(f, b))}


def _residual_case(r: np.random.Generator, projection: bool):
    cin, cout, mid = (2, 3, 2) if projection else (3, 3, 2)

    def conv(o, i, k):
        return L.ConvLayer(r.normal(size=(o, i, *k)) * 0.7, r.normal(size=o) * 0.3)

    w = ResidualWeights(conv(mid, cin, (1, 1, 1)), conv(mid, mid, (3, 3, 3)), conv(cout, mid, (1, 1, 1)),
                        conv(cout, cin, (1, 1, 1)) if projection else None)
    x = r.normal(size=(2, cin, 3, 3, 3))
    return w, x


def check_residual(seed: int, projection: bool) -> dict[str, float]:
    for attempt in range(50):
        r = np.random.default_rng([seed, attempt])
        w, x = _residual_case(r, projection)
        out, cache = residual_forward(x, w)
        _, a, _, b, _, _, pre = cache
        if min(np.abs(a).min(), np.abs(b).min(), np.abs(pre).min()) > KINK_MARGIN:
            break
    else:
        raise RuntimeError("no kink-free residual case found")
    R = r.normal(size=out.shape)
    dx, parts = residual_backward(R, cache)

    def f() -> float:
        return float(np.sum(residual_forward(x, w)[0] * R))

    errs = {"x": rel_error(dx, numeric_grad(f, x))}
    layers = [w.reduce, w.mid, w.expand, w.shortcut]
    for name, layer, pair in zip("abcs", layers, parts):
        if layer is None:
            continue
        errs[f"{name}.kernel"] = rel_error(pair[0], numeric_grad(f, layer.kernel))
        errs[f"{name}.bias"] = rel_error(pair[1], numeric_grad(f, layer.bias))
    return errs


LAYER_CHECKS = {
    "conv3d": check_conv,
    "relu": check_relu,
    "maxpool": check_maxpool,
    "batchnorm_train": lambda s: check_batchnorm(s, True),
    "batchnorm_eval": lambda s: check_batchnorm(s, False),
    "global_avgpool": check_avgpool,
    "dense_softmax": check_dense_softmax,
    "residual_identity": lambda s: check_residual(s, False),
    "residual_projection": lambda s: check_residual(s, True),
}
