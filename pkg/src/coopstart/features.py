"""Sliding-window feature extraction over the four inertial channels.

Every feature is computed on the trailing (causal) window that ends at the
current frame, inclusive. Energy is the mean of squares and the variance is
the population variance. DFT magnitudes are normalized by the root of the
total spectral energy of the window.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .domain import IMU_RATE
from .signal import ChannelSet

KINDS = ("mean", "variance", "energy", "poly", "dft")
STAT_KINDS = ("mean", "variance", "energy")

STAT_WINDOWS = (0.1, 0.5)
POLY_WINDOWS = (0.2, 0.8)
POLY_DEGREE = 3
DFT_WINDOW = 0.64
DFT_MAX_ORDER = 10


class NotClassifiable(ValueError):
    """Raised when a frame lacks the history required by the longest window."""


@dataclass(frozen=True, order=True)
class FeatureSpec:
    channel: str
    kind: str
    window: float
    order: int = 0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if self.window <= 0:
            raise ValueError("window length must be positive")

    @property
    def name(self) -> str:
        if self.kind in STAT_KINDS:
            return f"{self.channel}.{self.kind}@{self.window:g}"
        return f"{self.channel}.{self.kind}{self.order}@{self.window:g}"

    def samples(self, rate: float = IMU_RATE) -> int:
        return int(round(self.window * rate))


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray
    registry: tuple[FeatureSpec, ...]

    def __post_init__(self) -> None:
        if self.values.shape != (len(self.registry),):
            raise ValueError("feature vector length must equal registry length")

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.registry]


def default_registry(channels: Sequence[str] = ChannelSet.NAMES) -> tuple[FeatureSpec, ...]:
    """Channel-major, then kind, then window ordering (100 features)."""
    specs: list[FeatureSpec] = []
    for ch in channels:
        for kind in STAT_KINDS:
            specs += [FeatureSpec(ch, kind, w) for w in STAT_WINDOWS]
        for k in range(POLY_DEGREE + 1):
            specs += [FeatureSpec(ch, "poly", w, k) for w in POLY_WINDOWS]
        specs += [FeatureSpec(ch, "dft", DFT_WINDOW, k) for k in range(DFT_MAX_ORDER + 1)]
    return tuple(specs)


def registry_to_list(registry: Iterable[FeatureSpec]) -> list[dict]:
    return [asdict(f) for f in registry]


def registry_from_list(items: Iterable[dict]) -> tuple[FeatureSpec, ...]:
    return tuple(FeatureSpec(**d) for d in items)


def registry_hash(registry: Iterable[FeatureSpec]) -> str:
    text = json.dumps(registry_to_list(registry), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def warmup_samples(registry: Iterable[FeatureSpec], rate: float = IMU_RATE) -> int:
    """Index of the first classifiable frame (frames before it are not classified)."""
    return max(f.samples(rate) for f in registry)


# -- window primitives -----------------------------------------------------------


def window_stats(w: np.ndarray) -> tuple[float, float, float]:
    """(mean, population variance, mean of squares) of one window."""
    w = np.asarray(w, dtype=float)
    if w.size == 0:
        raise ValueError("empty window")
    mean, var, energy = _stats_rows(w[None, :])
    return float(mean[0]), float(var[0]), float(energy[0])


def _stats_rows(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = rows.shape[1]
    mean = rows.sum(axis=1) / n
    var = ((rows - mean[:, None]) ** 2).sum(axis=1) / n
    energy = (rows * rows).sum(axis=1) / n
    return mean, var, energy


@lru_cache(maxsize=64)
def gram_basis(n: int, degree: int = POLY_DEGREE) -> np.ndarray:
    """Orthonormal discrete polynomial basis on ``n`` uniform samples.

    Row ``k`` is the degree-``k`` Gram polynomial sampled on the grid and
    scaled to unit Euclidean norm, with positive leading coefficient.
    """
    if n < degree + 1:
        raise ValueError(f"window of {n} samples too short for degree {degree}")
    x = np.linspace(-1.0, 1.0, n)
    vander = np.vander(x, degree + 1, increasing=True)
    q, r = np.linalg.qr(vander)
    q = q * np.sign(np.diag(r))[None, :]
    basis = np.ascontiguousarray(q.T)
    basis.setflags(write=False)
    return basis


def ortho_poly_coeffs(w: np.ndarray, degree: int = POLY_DEGREE) -> np.ndarray:
    """Least-squares coefficients of ``w`` in the orthonormal Gram basis."""
    w = np.asarray(w, dtype=float)
    if w.ndim != 1 or w.size < degree + 1:
        raise ValueError(f"window of {w.size} samples too short for degree {degree}")
    return np.einsum("kn,n->k", gram_basis(w.size, degree), w)


def poly_reconstruct(coeffs: np.ndarray, n: int) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=float)
    return coeffs @ gram_basis(n, coeffs.size - 1)


def _dft_rows(rows: np.ndarray, max_order: int) -> np.ndarray:
    mags = np.abs(np.fft.fft(rows, axis=1))
    total = np.sqrt((mags * mags).sum(axis=1))
    out = np.zeros((rows.shape[0], max_order + 1))
    nz = total > 0
    out[nz] = mags[nz, : max_order + 1] / total[nz, None]
    return out


def dft_features(w: np.ndarray, max_order: int = DFT_MAX_ORDER, length: int = 64) -> np.ndarray:
    """Energy-normalized DFT magnitudes ``|C_0| .. |C_max_order|``.

    An identically zero window maps to all-zero features.
    """
    w = np.asarray(w, dtype=float)
    if w.shape != (length,):
        raise ValueError(f"DFT window must have {length} samples, got {w.shape}")
    return _dft_rows(w[None, :], max_order)[0]


# -- assembly -------------------------------------------------------------------


def _group(registry: Sequence[FeatureSpec]) -> dict[tuple[str, str, float], list[int]]:
    """Registry positions grouped by (channel, family, window) so each window is scanned once."""
    groups: dict[tuple[str, str, float], list[int]] = {}
    for pos, f in enumerate(registry):
        family = "stat" if f.kind in STAT_KINDS else f.kind
        groups.setdefault((f.channel, family, f.window), []).append(pos)
    return groups


def _fill(out: np.ndarray, rows: np.ndarray, specs: Sequence[FeatureSpec], positions: list[int]) -> None:
    kind0 = specs[positions[0]].kind
    if kind0 in STAT_KINDS:
        mean, var, energy = _stats_rows(rows)
        table = {"mean": mean, "variance": var, "energy": energy}
        for p in positions:
            out[:, p] = table[specs[p].kind]
    elif kind0 == "poly":
        degree = max(specs[p].order for p in positions)
        basis = gram_basis(rows.shape[1], max(degree, POLY_DEGREE))
        # einsum without BLAS keeps each row's result independent of the batch size
        coeffs = np.einsum("rn,kn->rk", rows, basis)
        for p in positions:
            out[:, p] = coeffs[:, specs[p].order]
    else:
        max_order = max(specs[p].order for p in positions)
        mags = _dft_rows(rows, max(max_order, DFT_MAX_ORDER))
        for p in positions:
            out[:, p] = mags[:, specs[p].order]


def feature_matrix(
    channels: ChannelSet,
    registry: Sequence[FeatureSpec],
    start: int | None = None,
    rate: float = IMU_RATE,
) -> np.ndarray:
    """Features of every frame from ``start`` (default: first classifiable frame) on.

    Row ``r`` belongs to frame index ``start + r``.
    """
    registry = tuple(registry)
    if not registry:
        raise ValueError("empty feature registry")
    warm = warmup_samples(registry, rate)
    start = warm if start is None else start
    if start < warm - 1:
        raise NotClassifiable(f"frame {start} precedes warm-up ({warm} samples)")
    n_frames = max(len(channels) - start, 0)
    out = np.empty((n_frames, len(registry)))
    if n_frames == 0:
        return out
    for (ch, _family, _window), positions in _group(registry).items():
        x = channels.get(ch)
        n = registry[positions[0]].samples(rate)
        if registry[positions[0]].kind == "dft" and n != 64:
            raise ValueError("DFT features require a 64-sample window")
        rows = sliding_window_view(x, n)[start - n + 1 :]
        _fill(out, rows, registry, positions)
    if not np.all(np.isfinite(out)):
        raise ValueError("non-finite feature values")
    return out


def assemble_features(
    channels: ChannelSet, t: float, registry: Sequence[FeatureSpec], rate: float = IMU_RATE
) -> FeatureVector:
    """Feature vector of the frame at time ``t`` (trailing windows ending at ``t``)."""
    registry = tuple(registry)
    idx = int(round(t * rate))
    if idx < warmup_samples(registry, rate):
        raise NotClassifiable(f"t={t} s precedes the feature warm-up")
    if idx >= len(channels):
        raise ValueError(f"t={t} s lies beyond the channel streams")
    values = np.empty((1, len(registry)))
    for (ch, _family, _window), positions in _group(registry).items():
        n = registry[positions[0]].samples(rate)
        rows = channels.get(ch)[idx - n + 1 : idx + 1][None, :]
        _fill(values, rows, registry, positions)
    return FeatureVector(values[0], registry)
