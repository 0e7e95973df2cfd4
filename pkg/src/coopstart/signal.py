"""Inertial preprocessing: gravity estimation, leveling and orientation-invariant channels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import IMU_RATE, LabeledScene

GRAVITY = 9.81
DEFAULT_TIME_CONSTANT = 1.0
_DOWN = np.array([0.0, 0.0, -1.0])
_FLIP_X = np.diag([1.0, -1.0, -1.0])


@dataclass(frozen=True, eq=False)
class ChannelSet:
    """Four orientation-invariant scalar streams at 100 Hz."""

    acc_h: np.ndarray
    acc_v: np.ndarray
    gyro_h: np.ndarray
    gyro_v: np.ndarray

    NAMES = ("acc_h", "acc_v", "gyro_h", "gyro_v")

    def __len__(self) -> int:
        return self.acc_h.size

    def get(self, name: str) -> np.ndarray:
        if name not in self.NAMES:
            raise KeyError(name)
        return getattr(self, name)

    def stacked(self) -> np.ndarray:
        return np.stack([self.acc_h, self.acc_v, self.gyro_h, self.gyro_v])


def estimate_gravity(
    raw_acc: np.ndarray, time_constant: float = DEFAULT_TIME_CONSTANT, rate: float = IMU_RATE
) -> np.ndarray:
    """First-order exponential low-pass of the gravity-inclusive accelerometer.

    The filter state starts at the first sample. ``time_constant == 0``
    disables smoothing.
    """
    raw_acc = np.asarray(raw_acc, dtype=float)
    if raw_acc.ndim != 2 or raw_acc.shape[0] == 0 or raw_acc.shape[1] != 3:
        raise ValueError("gravity estimation needs a non-empty (n, 3) stream")
    if time_constant < 0:
        raise ValueError("time constant must be >= 0")
    if time_constant == 0:
        return raw_acc.copy()
    alpha = 1.0 - np.exp(-1.0 / (rate * time_constant))
    out = np.empty_like(raw_acc)
    g = raw_acc[0].copy()
    for i, x in enumerate(raw_acc):
        g += alpha * (x - g)
        out[i] = g
    return out


def leveling_rotation(g: np.ndarray) -> np.ndarray:
    """Minimal rotation taking the direction of ``g`` onto (0, 0, -1)."""
    g = np.asarray(g, dtype=float)
    norm = np.linalg.norm(g)
    if not norm > 0:
        raise ValueError("gravity vector must be non-zero")
    u = g / norm
    c = float(u @ _DOWN)
    if 1.0 + c < 1e-12:
        return _FLIP_X.copy()
    k = np.cross(u, _DOWN)
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + kx + kx @ kx / (1.0 + c)


def leveling_rotations(g: np.ndarray) -> np.ndarray:
    """Vectorized :func:`leveling_rotation` for an ``(n, 3)`` stream."""
    g = np.asarray(g, dtype=float)
    norm = np.linalg.norm(g, axis=1)
    if np.any(~(norm > 0)):
        raise ValueError("gravity vector must be non-zero")
    u = g / norm[:, None]
    c = -u[:, 2]
    k = np.cross(u, _DOWN)
    n = g.shape[0]
    kx = np.zeros((n, 3, 3))
    kx[:, 0, 1], kx[:, 0, 2] = -k[:, 2], k[:, 1]
    kx[:, 1, 0], kx[:, 1, 2] = k[:, 2], -k[:, 0]
    kx[:, 2, 0], kx[:, 2, 1] = -k[:, 1], k[:, 0]
    degenerate = 1.0 + c < 1e-12
    denom = np.where(degenerate, 1.0, 1.0 + c)
    rot = np.eye(3)[None] + kx + (kx @ kx) / denom[:, None, None]
    rot[degenerate] = _FLIP_X
    return rot


def to_local_frame(v: np.ndarray, g: np.ndarray) -> np.ndarray:
    return leveling_rotation(g) @ np.asarray(v, dtype=float)


def extract_channels(acc: np.ndarray, gyro: np.ndarray, gravity: np.ndarray) -> ChannelSet:
    """Horizontal magnitude and vertical projection of both sensors in the local frame."""
    acc = np.asarray(acc, dtype=float)
    gyro = np.asarray(gyro, dtype=float)
    gravity = np.asarray(gravity, dtype=float)
    if not (acc.shape == gyro.shape == gravity.shape) or acc.ndim != 2 or acc.shape[1] != 3:
        raise ValueError(
            f"aligned (n, 3) streams required, got {acc.shape}, {gyro.shape}, {gravity.shape}"
        )
    rot = leveling_rotations(gravity)
    a = np.einsum("nij,nj->ni", rot, acc)
    w = np.einsum("nij,nj->ni", rot, gyro)
    return ChannelSet(
        acc_h=np.hypot(a[:, 0], a[:, 1]),
        acc_v=a[:, 2].copy(),
        gyro_h=np.hypot(w[:, 0], w[:, 1]),
        gyro_v=w[:, 2].copy(),
    )


def scene_channels(scene: LabeledScene, time_constant: float = DEFAULT_TIME_CONSTANT) -> ChannelSet:
    """Preprocess a scene's inertial streams into the four feature channels.

    Without a gravity-inclusive channel the device is assumed to be leveled.
    """
    if scene.t_imu.size == 0:
        raise ValueError(f"scene {scene.scene_id} has no inertial stream")
    if scene.acc_raw is not None:
        gravity = estimate_gravity(scene.acc_raw, time_constant)
    else:
        gravity = np.tile(GRAVITY * _DOWN, (scene.t_imu.size, 1))
    return extract_channels(scene.acc, scene.gyro, gravity)
