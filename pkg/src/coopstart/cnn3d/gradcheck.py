"""Central finite-difference utilities for checking analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

FD_STEP = 1e-4
GRAD_FLOOR = 1e-6


def numeric_grad(f: Callable[[], float], v: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of the scalar ``f`` w.r.t. every entry of ``v`` (perturbed in place)."""
    grad = np.zeros_like(v, dtype=float)
    flat = v.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> float:
    """Norm-wise relative error ``|a - n| / max(|a| + |n|, floor)``.

    The floor keeps gradients that vanish analytically (for example a bias
    feeding a training-mode batch norm) from turning finite-difference
    round-off into a relative error of one.
    """
    a = np.asarray(analytic, dtype=float).ravel()
    n = np.asarray(numeric, dtype=float).ravel()
    denom = max(np.linalg.norm(a) + np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def check_network(spec, weights, x: np.ndarray, targets: np.ndarray, train: bool = True, h: float = FD_STEP):
    """Compare backprop with central differences for every parameter tensor.

    Returns ``(errors, smooth)`` where ``errors`` maps parameter names to
    :func:`rel_error` values and ``smooth`` tells whether every finite-difference
    stencil stayed inside one linear region of the ReLU/max-pool network
    (otherwise the stencil straddles a kink and differences are not meaningful).
    """
    from .network import activation_pattern, loss_and_grads

    _, grads, _ = loss_and_grads(spec, weights, x, targets, train)
    base = activation_pattern(spec, weights, x, train)
    smooth = True

    def f() -> float:
        nonlocal smooth
        loss, _, _ = loss_and_grads(spec, weights, x, targets, train)
        if smooth and activation_pattern(spec, weights, x, train) != base:
            smooth = False
        return loss

    errors = {k: rel_error(grads[k], numeric_grad(f, v, h)) for k, v in weights.params.items()}
    return errors, smooth


def micro_check(seed: int, train: bool = True, max_attempts: int = 10, h: float = FD_STEP):
    """Gradient check of a tiny three-block network at a smooth random point.

    Weights, inputs and targets are drawn from ``seed``; when a stencil
    crosses a ReLU or max-pool kink the point is redrawn (up to
    ``max_attempts`` times). Returns ``(errors, attempts)``.
    """
    from .network import init_weights, micro_preset

    spec = micro_preset(height=4, width=4, base_width=2, init_width=2)
    for attempt in range(max_attempts):
        rng = np.random.default_rng([seed, attempt])
        w = init_weights(spec, seed)
        for k, v in w.params.items():
            if not k.endswith("kernel") and k != "fc.weight":
                v += rng.normal(size=v.shape) * 0.1
        for v in w.buffers.values():
            v += np.abs(rng.normal(size=v.shape)) * 0.1
        x = rng.normal(size=(2, spec.in_channels, spec.frames, spec.height, spec.width))
        targets = rng.integers(0, spec.n_classes, 2)
        errors, smooth = check_network(spec, w, x, targets, train, h)
        if smooth:
            return errors, attempt + 1
    raise RuntimeError(f"no smooth point found for seed {seed} in {max_attempts} attempts")
