"""Single-agent detectors: the smart-device pipeline and the camera CNN wrapper.

Smart-device pipeline per 100 Hz frame::

    preprocessing -> trailing-window features -> boosted trees
    -> sigmoid calibration -> soft vote over the last 0.1 s

Training merges the starting class into moving. Feature subsets are chosen
by sequential forward selection with a score that combines the scene-wise
F1 and the mean detection time.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import evaluation as ev
from .cnn3d.network import NetworkSpec, NetworkWeights, predict_batch
from .domain import IMU_RATE, ClassProbs, LabeledScene, Source, binary_labels, dumps_json
from .features import (
    FeatureSpec,
    default_registry,
    feature_matrix,
    registry_from_list,
    registry_hash,
    registry_to_list,
    warmup_samples,
)
from .learners import (
    CalibrationModel,
    GBTParams,
    TreeEnsembleModel,
    fit_calibration,
    train_gbt,
)
from .signal import DEFAULT_TIME_CONSTANT, scene_channels

SELECTION_SCALE = 0.075
VOTE_WINDOW = 0.1
CNN_HISTORY = 10
BUNDLE_FORMAT = "coopstart.sd-bundle/1"


@dataclass(frozen=True, eq=False)
class DetectorOutput:
    """Class probabilities of one detector on one scene, one row per output timestamp."""

    t: np.ndarray
    probs: np.ndarray
    source: Source

    def __post_init__(self) -> None:
        if self.probs.shape != (self.t.size, 3):
            raise ValueError("probabilities must be (n, 3) and aligned with t")

    @property
    def p_moving(self) -> np.ndarray:
        return self.probs[:, 2]

    def class_probs(self, i: int) -> ClassProbs:
        w, s, m = self.probs[i]
        return ClassProbs(float(w), float(s), float(m))

    def __len__(self) -> int:
        return self.t.size

    def trace(self, scene: LabeledScene) -> ev.Trace:
        return ev.Trace(self.t, self.p_moving, scene.labels, scene.scene_id)


def binary_probs(p_moving: np.ndarray) -> np.ndarray:
    p = np.asarray(p_moving, dtype=float)
    return np.column_stack([1.0 - p, np.zeros_like(p), p])


# -- soft voting / scoring --------------------------------------------------------------


def soft_vote(values: Sequence[float], window: int = 10) -> float:
    """Mean of the (up to) ``window`` most recent values."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("soft vote needs at least one value")
    return float(soft_vote_stream(v[-window:], window)[-1])


def soft_vote_stream(p: np.ndarray, window: int = 10) -> np.ndarray:
    """Trailing mean over ``window`` frames; the first frames average what exists.

    Each output is summed in a fixed order from its own inputs only, so a
    prefix of the stream always yields the same prefix of outputs.
    """
    p = np.asarray(p, dtype=float)
    n = p.size
    out = np.zeros(n)
    count = np.zeros(n)
    for k in range(window):
        out[k:] += p[: n - k] if k else p
        count[k:] += 1.0
    return out / count


def selection_score(f1: float, t_d: float | None, scale: float = SELECTION_SCALE) -> float:
    """Harmonic mean of the F1-score and ``exp(-t_d^2 / scale)``; zero when ``f1`` is zero."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    if f1 <= 0 or t_d is None:
        return 0.0
    h = math.exp(-(t_d * t_d) / scale)
    return 2.0 * f1 * h / (f1 + h)


# -- smart-device detector ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SdDetector:
    registry: tuple[FeatureSpec, ...]
    model: TreeEnsembleModel
    calibration: CalibrationModel
    vote_window: float = VOTE_WINDOW
    time_constant: float = DEFAULT_TIME_CONSTANT
    report: dict = field(default_factory=dict)

    @property
    def vote_frames(self) -> int:
        return max(1, int(round(self.vote_window * IMU_RATE)))

    def to_dict(self) -> dict:
        return {
            "format": BUNDLE_FORMAT,
            "registry": registry_to_list(self.registry),
            "registry_hash": registry_hash(self.registry),
            "model": self.model.to_dict(),
            "calibration": self.calibration.to_dict(),
            "vote_window": self.vote_window,
            "time_constant": self.time_constant,
            "report": self.report,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SdDetector":
        if d.get("format") != BUNDLE_FORMAT:
            raise ValueError(f"not a smart-device detector bundle: {d.get('format')!r}")
        registry = registry_from_list(d["registry"])
        if registry_hash(registry) != d["registry_hash"]:
            raise ValueError("feature registry hash mismatch")
        return cls(
            registry=registry,
            model=TreeEnsembleModel.from_dict(d["model"]),
            calibration=CalibrationModel.from_dict(d["calibration"]),
            vote_window=d["vote_window"],
            time_constant=d["time_constant"],
            report=d.get("report", {}),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(dumps_json(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "SdDetector":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class SceneFeatures:
    """Feature table of one scene from the first classifiable frame on."""

    scene_id: str
    subject: str
    t: np.ndarray
    X: np.ndarray
    y: np.ndarray
    start: int


def scene_features(
    scene: LabeledScene,
    registry: Sequence[FeatureSpec],
    time_constant: float = DEFAULT_TIME_CONSTANT,
) -> SceneFeatures:
    if scene.t_imu.size == 0:
        raise ValueError(f"scene {scene.scene_id} has no inertial stream")
    registry = tuple(registry)
    ch = scene_channels(scene, time_constant)
    start = warmup_samples(registry)
    X = feature_matrix(ch, registry, start)
    t = scene.t_imu[start:]
    return SceneFeatures(scene.scene_id, scene.subject, t, X, binary_labels(t, scene.labels), start)


def select_columns(table: SceneFeatures, columns: Sequence[int]) -> SceneFeatures:
    cols = np.asarray(columns, dtype=np.int64)
    return SceneFeatures(table.scene_id, table.subject, table.t, table.X[:, cols], table.y, table.start)


def split_by_subject(subjects: Sequence[str], fraction: float, seed: int) -> tuple[set[str], set[str]]:
    """Deterministic split of a subject list into (fit, held-out) sets."""
    uniq = sorted(set(subjects))
    if len(uniq) < 2:
        raise ValueError("need at least two subjects to hold some out")
    rng = np.random.default_rng(seed)
    order = [uniq[i] for i in rng.permutation(len(uniq))]
    n_out = min(max(1, int(round(fraction * len(uniq)))), len(uniq) - 1)
    return set(order[n_out:]), set(order[:n_out])


def _stack(tables: Sequence[SceneFeatures], stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
    X = np.concatenate([tb.X[::stride] for tb in tables])
    y = np.concatenate([tb.y[::stride] for tb in tables])
    return X, y


def fit_scored_model(
    tables: Sequence[SceneFeatures],
    params: GBTParams,
    calib_fraction: float = 0.25,
    seed: int = 0,
    train_stride: int = 1,
) -> tuple[TreeEnsembleModel, CalibrationModel]:
    """Boosted trees on the fit subjects, sigmoid calibration on held-out subjects."""
    fit_subj, cal_subj = split_by_subject([tb.subject for tb in tables], calib_fraction, seed)
    fit = [tb for tb in tables if tb.subject in fit_subj]
    cal = [tb for tb in tables if tb.subject in cal_subj]
    X, y = _stack(fit, train_stride)
    model = train_gbt(X, y, params)
    Xc, yc = _stack(cal, 1)
    if yc.min() == yc.max():
        # the held-out subjects carry a single class; calibrate on the fit rows instead
        Xc, yc = X, y
    calibration = fit_calibration(model.predict_raw(Xc), yc)
    return model, calibration


def train_sd_detector(
    scenes: Sequence[LabeledScene] | None = None,
    registry: Sequence[FeatureSpec] | None = None,
    params: GBTParams = GBTParams(),
    seed: int = 0,
    calib_fraction: float = 0.25,
    train_stride: int = 1,
    tables: Sequence[SceneFeatures] | None = None,
    time_constant: float = DEFAULT_TIME_CONSTANT,
) -> SdDetector:
    """Train the frame classifier and its calibration on labeled scenes.

    Precomputed ``tables`` (whose columns must follow ``registry``) skip the
    feature extraction.
    """
    registry = tuple(registry) if registry is not None else default_registry()
    if tables is None:
        if not scenes:
            raise ValueError("no training scenes")
        tables = [scene_features(s, registry, time_constant) for s in scenes]
    if tables[0].X.shape[1] != len(registry):
        raise ValueError("feature tables do not match the registry")
    model, calibration = fit_scored_model(tables, params, calib_fraction, seed, train_stride)
    return SdDetector(registry, model, calibration, time_constant=time_constant)


def sd_probabilities(det: SdDetector, X: np.ndarray) -> np.ndarray:
    """Calibrated and soft-voted moving probabilities of consecutive frames."""
    return soft_vote_stream(det.calibration(det.model.predict_raw(X)), det.vote_frames)


def sd_detect(det: SdDetector, scene: LabeledScene, table: SceneFeatures | None = None) -> DetectorOutput:
    """Moving probability at every 100 Hz frame from the first classifiable frame on."""
    if table is None:
        if scene.t_imu.size == 0:
            raise ValueError(f"scene {scene.scene_id} has no inertial stream")
        table = scene_features(scene, det.registry, det.time_constant)
    p = sd_probabilities(det, table.X)
    return DetectorOutput(np.asarray(table.t, dtype=float).copy(), binary_probs(p), Source.SD)


# -- feature selection ---------------------------------------------------------------------


@dataclass(frozen=True)
class SelectionConfig:
    scale: float = SELECTION_SCALE
    threshold: float = 0.5
    params: GBTParams = GBTParams(n_rounds=30, max_depth=3, learning_rate=0.3)
    train_stride: int = 4
    max_features: int | None = None
    calib_fraction: float = 0.25
    seed: int = 0
    jobs: int = 1

    def __post_init__(self) -> None:
        if self.scale <= 0:
            raise ValueError("selection scale must be positive")


@dataclass
class SelectionResult:
    selected: list[int]
    scores: list[float]
    history: list[dict] = field(default_factory=list)


def subset_score(
    columns: Sequence[int],
    train: Sequence[SceneFeatures],
    val: Sequence[SceneFeatures],
    labels: Sequence,
    config: SelectionConfig,
) -> float:
    """Selection score of a detector retrained on the given feature columns."""
    tr = [select_columns(tb, columns) for tb in train]
    model, calibration = fit_scored_model(tr, config.params, config.calib_fraction, config.seed, config.train_stride)
    det = SdDetector((), model, calibration)
    outcomes = []
    for tb, lab in zip(val, labels):
        p = sd_probabilities(det, tb.X[:, list(columns)])
        outcomes.append(ev.evaluate_scene(tb.t, p, lab, config.threshold))
    agg = ev.aggregate(outcomes)
    return selection_score(agg.f1, agg.mean_dt, config.scale)


def _score_job(args) -> float:
    return subset_score(*args)


def sffs(
    candidates: Sequence[int],
    train: Sequence[SceneFeatures],
    val: Sequence[SceneFeatures],
    val_labels: Sequence,
    config: SelectionConfig = SelectionConfig(),
) -> SelectionResult:
    """Greedy forward selection over column indices of the feature tables.

    Each round adds the candidate with the highest score (lowest index on
    ties) and stops as soon as no candidate strictly improves the score.
    """
    candidates = sorted(set(int(c) for c in candidates))
    if not candidates:
        raise ValueError("empty candidate set")
    if {tb.scene_id for tb in train} & {tb.scene_id for tb in val}:
        raise ValueError("training and validation scenes overlap")
    selected: list[int] = []
    scores: list[float] = []
    history: list[dict] = []
    current = 0.0
    limit = config.max_features or len(candidates)
    executor = ProcessPoolExecutor(max_workers=config.jobs) if config.jobs > 1 else None
    try:
        while len(selected) < limit:
            pool = [c for c in candidates if c not in selected]
            if not pool:
                break
            jobs = [(selected + [c], train, val, val_labels, config) for c in pool]
            if executor is None:
                round_scores = [_score_job(j) for j in jobs]
            else:
                round_scores = list(executor.map(_score_job, jobs))
            best_i = int(np.argmax(round_scores))  # first maximum = lowest index
            history.append({"round": len(selected), "scores": dict(zip(pool, round_scores))})
            if not round_scores[best_i] > current:
                break
            current = round_scores[best_i]
            selected.append(pool[best_i])
            scores.append(current)
    finally:
        if executor is not None:
            executor.shutdown()
    return SelectionResult(selected, scores, history)


# -- camera detector ---------------------------------------------------------------------


def image_windows(images: np.ndarray, frames: int = CNN_HISTORY) -> np.ndarray:
    """Trailing ``frames``-long stacks ``(m - frames + 1, 1, frames, H, W)``."""
    images = np.asarray(images)
    m = images.shape[0]
    if m < frames:
        return np.zeros((0, 1, frames, *images.shape[1:]), dtype=images.dtype)
    win = np.lib.stride_tricks.sliding_window_view(images, frames, axis=0)  # (k, H, W, frames)
    return np.ascontiguousarray(np.moveaxis(win, -1, 1))[:, None]


def cnn_detect(
    scene: LabeledScene, spec: NetworkSpec, weights: NetworkWeights, batch_size: int = 64
) -> DetectorOutput:
    """Three-class probabilities for every camera frame with 10 frames of history."""
    if scene.images is None:
        raise ValueError(f"scene {scene.scene_id} has no image stream")
    if scene.images.shape[1:] != (spec.height, spec.width):
        raise ValueError(f"images {scene.images.shape[1:]} do not match network input {(spec.height, spec.width)}")
    dtype = next(iter(weights.params.values())).dtype
    x = image_windows(scene.images.astype(dtype), spec.frames)
    probs = predict_batch(spec, weights, x, batch_size) if x.shape[0] else np.zeros((0, 3))
    t = np.asarray(scene.t_cam[spec.frames - 1 :], dtype=float).copy()
    return DetectorOutput(t, probs, Source.CNN)
