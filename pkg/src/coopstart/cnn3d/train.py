"""Minibatch SGD training for desk-scale networks and weight checkpoints."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..domain import decode_array, dumps_json, encode_array
from .network import NetworkSpec, NetworkWeights, loss_and_grads, predict_batch

CHECKPOINT_FORMAT = "coopstart.cnn/1"


class TrainingDiverged(RuntimeError):
    """The training loss became non-finite."""


@dataclass(frozen=True)
class SGDConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise ValueError("learning rate must be >= 0 and momentum in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch size must be positive and epochs non-negative")


@dataclass
class TrainResult:
    weights: NetworkWeights
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    best_epoch: int = -1
    initial_loss: float = float("nan")

    def report(self) -> dict:
        return {
            "initial_loss": self.initial_loss,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "val_accuracy": self.val_accuracy,
            "best_epoch": self.best_epoch,
        }


def evaluate(spec: NetworkSpec, weights: NetworkWeights, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Mean cross-entropy and accuracy in inference mode."""
    if x.shape[0] == 0:
        return float("nan"), float("nan")
    probs = predict_batch(spec, weights, x)
    y = np.asarray(y, dtype=np.int64)
    p = np.maximum(probs[np.arange(y.size), y], 1e-300)
    return float(-np.mean(np.log(p))), float(np.mean(probs.argmax(axis=1) == y))


def train_micro(
    spec: NetworkSpec,
    weights: NetworkWeights,
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_val: np.ndarray | None = None,
    y_val: np.ndarray | None = None,
    config: SGDConfig = SGDConfig(),
) -> TrainResult:
    """SGD with momentum; returns the weights of the epoch with the best validation loss.

    Without a validation set the final weights are returned. The input
    ``weights`` are not modified.
    """
    x_train = np.asarray(x_train)
    y_train = np.asarray(y_train, dtype=np.int64)
    if x_train.shape[0] != y_train.size or y_train.size == 0:
        raise ValueError("training inputs and targets must be non-empty and aligned")
    has_val = x_val is not None and y_val is not None and len(y_val) > 0
    rng = np.random.default_rng(config.seed)
    w = weights.copy()
    velocity = {k: np.zeros_like(v) for k, v in w.params.items()}
    result = TrainResult(weights=w.copy())
    result.initial_loss, _ = evaluate(spec, w, x_train, y_train)
    best = float("inf")
    n = y_train.size
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for i in range(0, n, config.batch_size):
            idx = order[i : i + config.batch_size]
            if idx.size < 2 and n >= 2:
                continue  # a single-sample batch has degenerate batch-norm statistics
            loss, grads, buffers = loss_and_grads(spec, w, x_train[idx], y_train[idx], train=True)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} in epoch {epoch}")
            total += loss * idx.size
            if config.learning_rate > 0:
                for k, g in grads.items():
                    v = velocity[k]
                    v *= config.momentum
                    v -= config.learning_rate * (g + config.weight_decay * w.params[k])
                    w.params[k] += v
                w.buffers = buffers
        result.train_loss.append(total / n)
        if has_val:
            vl, va = evaluate(spec, w, np.asarray(x_val), np.asarray(y_val))
            if not np.isfinite(vl):
                raise TrainingDiverged(f"validation loss became {vl} in epoch {epoch}")
            result.val_loss.append(vl)
            result.val_accuracy.append(va)
            if vl < best:
                best = vl
                result.best_epoch = epoch
                result.weights = w.copy()
        else:
            result.best_epoch = epoch
            result.weights = w.copy()
    return result


# -- checkpoints ----------------------------------------------------------------------


def checkpoint_dict(spec: NetworkSpec, weights: NetworkWeights) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "spec": spec.to_dict(),
        "spec_hash": spec.hash(),
        "params": {k: encode_array(v) for k, v in sorted(weights.params.items())},
        "buffers": {k: encode_array(v) for k, v in sorted(weights.buffers.items())},
    }


def checkpoint_from_dict(doc: dict) -> tuple[NetworkSpec, NetworkWeights]:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a network checkpoint: format {doc.get('format')!r}")
    spec = NetworkSpec.from_dict(doc["spec"])
    if spec.hash() != doc["spec_hash"]:
        raise ValueError("checkpoint spec hash mismatch")
    weights = NetworkWeights(
        {k: decode_array(v) for k, v in doc["params"].items()},
        {k: decode_array(v) for k, v in doc["buffers"].items()},
    )
    return spec, weights


def save_checkpoint(path: str | Path, spec: NetworkSpec, weights: NetworkWeights) -> None:
    Path(path).write_text(dumps_json(checkpoint_dict(spec, weights)))


def load_checkpoint(path: str | Path) -> tuple[NetworkSpec, NetworkWeights]:
    return checkpoint_from_dict(json.loads(Path(path).read_text()))


def config_dict(config: SGDConfig) -> dict:
    return asdict(config)
