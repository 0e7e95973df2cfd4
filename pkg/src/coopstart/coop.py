"""Cooperative stacking ensemble of the camera and smart-device detectors.

Agents exchange immutable messages over an in-process bus:

* the smart device sends, at 100 Hz, the magnitude of its horizontal
  acceleration and, once classifiable, its moving probability;
* the infrastructure camera sends, at camera rate and only while the
  cyclist is visible, the CNN class probabilities and the head position.

The receiver assembles a 28-value stacked feature vector at every 100 Hz
frame and feeds it to a boosted-tree combiner with sigmoid calibration.
While the cyclist is occluded, or while the camera history does not yet
cover the feature windows, the combiner is bypassed and the smart-device
probability is forwarded unchanged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .detectors import (
    DetectorOutput,
    SceneFeatures,
    SdDetector,
    binary_probs,
    fit_scored_model,
    scene_features,
    sd_detect,
    train_sd_detector,
)
from .domain import IMU_RATE, ClassProbs, LabeledScene, Source, binary_labels, dumps_json
from .features import NotClassifiable, gram_basis
from .learners import CalibrationModel, GBTParams, TreeEnsembleModel
from .signal import DEFAULT_TIME_CONSTANT, scene_channels

HISTORY = 3
POLY_WINDOWS = (0.2, 0.8)
POLY_DEGREE = 3
STACKED_SIZE = 3 * HISTORY + HISTORY + 2 * 2 * (POLY_DEGREE + 1)
COOP_FORMAT = "coopstart.coop/1"
LOG_FORMAT = "coopstart.msglog/1"
FLOAT_BYTES = 8


def stacked_names() -> tuple[str, ...]:
    names = []
    for lag in range(HISTORY - 1, -1, -1):
        names += [f"cnn.{c}[-{lag}]" for c in ("waiting", "starting", "moving")]
    names += [f"sd.moving[-{lag}]" for lag in range(HISTORY - 1, -1, -1)]
    for sig in ("acc_mag", "head_speed"):
        for w in POLY_WINDOWS:
            names += [f"{sig}.poly{k}@{w:g}" for k in range(POLY_DEGREE + 1)]
    return tuple(names)


STACKED_NAMES = stacked_names()


# -- messages ------------------------------------------------------------------------------


@dataclass(frozen=True)
class SdDetectionMsg:
    t: float
    acc_magnitude: float
    p_moving_sd: float | None = None

    kind = "sd"

    def payload_floats(self) -> int:
        return 1 + (self.p_moving_sd is not None)

    def to_record(self) -> dict:
        return {"kind": self.kind, "t": self.t, "acc": self.acc_magnitude, "p": self.p_moving_sd}


@dataclass(frozen=True)
class CameraDetectionMsg:
    t: float
    y_cnn: ClassProbs
    head_position: tuple[float, float, float]

    kind = "camera"

    def payload_floats(self) -> int:
        return 3 + 3

    def to_record(self) -> dict:
        return {
            "kind": self.kind,
            "t": self.t,
            "y": [self.y_cnn.p_waiting, self.y_cnn.p_starting, self.y_cnn.p_moving],
            "head": list(self.head_position),
        }


Message = SdDetectionMsg | CameraDetectionMsg


def message_from_record(rec: dict) -> Message:
    if rec["kind"] == "sd":
        return SdDetectionMsg(rec["t"], rec["acc"], rec["p"])
    if rec["kind"] == "camera":
        return CameraDetectionMsg(rec["t"], ClassProbs(*rec["y"]), tuple(rec["head"]))
    raise ValueError(f"unknown message kind {rec['kind']!r}")


class DeliveryPolicy(Protocol):
    def delivery_time(self, msg: Message) -> float | None:
        """Receive time of ``msg`` or None if it is lost."""


class ZeroDelay:
    """Idealized communication: every message arrives at its own timestamp."""

    def delivery_time(self, msg: Message) -> float | None:
        return msg.t


@dataclass
class MessageBus:
    """Append-only, timestamp-ordered message log with payload accounting."""

    policy: DeliveryPolicy = field(default_factory=ZeroDelay)
    log: list[Message] = field(default_factory=list)
    floats_sent: dict[str, int] = field(default_factory=lambda: {"sd": 0, "camera": 0})
    counts: dict[str, int] = field(default_factory=lambda: {"acc": 0, "sd_prob": 0, "camera": 0})

    def publish(self, msg: Message) -> None:
        if self.log and msg.t < self.log[-1].t and msg.kind == self.log[-1].kind:
            raise ValueError("messages of one stream must be published in timestamp order")
        self.log.append(msg)
        self.floats_sent[msg.kind] += msg.payload_floats()
        if isinstance(msg, SdDetectionMsg):
            self.counts["acc"] += 1
            self.counts["sd_prob"] += msg.p_moving_sd is not None
        else:
            self.counts["camera"] += 1

    @property
    def bytes_sent(self) -> int:
        return FLOAT_BYTES * sum(self.floats_sent.values())

    def delivered(self, until: float | None = None) -> list[Message]:
        """Messages received up to ``until`` in (receive time, stream, publish) order."""
        out = []
        for i, m in enumerate(self.log):
            rt = self.policy.delivery_time(m)
            if rt is None or (until is not None and rt > until):
                continue
            out.append((rt, 0 if m.kind == "sd" else 1, i, m))
        out.sort(key=lambda r: r[:3])
        return [r[3] for r in out]

    def dump(self, path: str | Path) -> None:
        """Write the log as JSON lines (header line first)."""
        lines = [json.dumps({"format": LOG_FORMAT}, sort_keys=True)]
        lines += [json.dumps(m.to_record(), sort_keys=True) for m in self.log]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def replay(cls, path: str | Path) -> "MessageBus":
        lines = Path(path).read_text().splitlines()
        if not lines or json.loads(lines[0]).get("format") != LOG_FORMAT:
            raise ValueError(f"{path} is not a message log")
        bus = cls()
        for line in lines[1:]:
            bus.publish(message_from_record(json.loads(line)))
        return bus


def acc_magnitude(scene: LabeledScene, time_constant: float = DEFAULT_TIME_CONSTANT) -> np.ndarray:
    """Horizontal acceleration magnitude in the leveled device frame at 100 Hz."""
    return scene_channels(scene, time_constant).acc_h


def publish_scene(
    scene: LabeledScene, sd_out: DetectorOutput, cnn_out: DetectorOutput | None, bus: MessageBus | None = None
) -> MessageBus:
    """Let both agents of a scene publish their streams on a bus."""
    bus = bus or MessageBus()
    acc = acc_magnitude(scene)
    p_sd = np.full(scene.t_imu.size, np.nan)
    start = scene.t_imu.size - sd_out.t.size
    p_sd[start:] = sd_out.p_moving
    cam_msgs: list[CameraDetectionMsg] = []
    if cnn_out is not None and cnn_out.t.size:
        first = scene.t_cam.size - cnn_out.t.size
        visible = ~scene.occluded(scene.t_cam)
        for j in range(cnn_out.t.size):
            k = first + j
            if visible[k]:
                cam_msgs.append(
                    CameraDetectionMsg(
                        float(scene.t_cam[k]), cnn_out.class_probs(j), tuple(float(v) for v in scene.head[k])
                    )
                )
    # interleave both streams in timestamp order (smart device first on ties)
    j = 0
    for i, t in enumerate(scene.t_imu):
        while j < len(cam_msgs) and cam_msgs[j].t < t:
            bus.publish(cam_msgs[j])
            j += 1
        p = None if np.isnan(p_sd[i]) else float(p_sd[i])
        bus.publish(SdDetectionMsg(float(t), float(acc[i]), p))
        while j < len(cam_msgs) and cam_msgs[j].t == t:
            bus.publish(cam_msgs[j])
            j += 1
    for m in cam_msgs[j:]:
        bus.publish(m)
    return bus


# -- receiver-side streams -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ReceivedStreams:
    """Arrays reconstructed by the receiver from the delivered messages."""

    t: np.ndarray  # 100 Hz frame times
    acc: np.ndarray  # acc magnitude per frame
    p_sd: np.ndarray  # smart-device probability per frame (nan before warm-up)
    cam_t: np.ndarray  # camera frame times on the camera grid
    cam_ok: np.ndarray  # frame received
    cam_probs: np.ndarray  # (m, 3)
    cam_head: np.ndarray  # (m, 3)
    camera_rate: float


def receive(messages: Iterable[Message], camera_rate: float, t_end: float | None = None) -> ReceivedStreams:
    sd = [m for m in messages if isinstance(m, SdDetectionMsg)]
    cam = [m for m in messages if isinstance(m, CameraDetectionMsg)]
    if not sd:
        raise ValueError("no smart-device messages")
    t = np.array([m.t for m in sd])
    acc = np.array([m.acc_magnitude for m in sd])
    p_sd = np.array([np.nan if m.p_moving_sd is None else m.p_moving_sd for m in sd])
    end = t[-1] if t_end is None else t_end
    m_frames = int(np.floor(end * camera_rate + 1e-9)) + 1
    cam_t = np.arange(m_frames) / camera_rate
    ok = np.zeros(m_frames, dtype=bool)
    probs = np.zeros((m_frames, 3))
    head = np.zeros((m_frames, 3))
    for msg in cam:
        k = int(round(msg.t * camera_rate))
        if k >= m_frames:
            continue
        ok[k] = True
        probs[k] = (msg.y_cnn.p_waiting, msg.y_cnn.p_starting, msg.y_cnn.p_moving)
        head[k] = msg.head_position
    return ReceivedStreams(t, acc, p_sd, cam_t, ok, probs, head, camera_rate)


def head_velocity(t_cam: np.ndarray, head: np.ndarray, t_out: np.ndarray) -> np.ndarray:
    """Head speed from central differences at camera rate, held constant between camera frames.

    End frames use one-sided differences. ``t_out`` is usually the 100 Hz grid.
    The receiver uses the causal variant :func:`head_speed` instead, which
    delays this stream by one camera frame so no future frame is needed.
    """
    t_cam = np.asarray(t_cam, dtype=float)
    head = np.asarray(head, dtype=float)
    if t_cam.size < 2:
        raise ValueError("head velocity needs at least two camera samples")
    # two-point differences keep a stationary head at exactly zero speed
    v = np.empty_like(head)
    v[1:-1] = (head[2:] - head[:-2]) / (t_cam[2:] - t_cam[:-2])[:, None]
    v[0] = (head[1] - head[0]) / (t_cam[1] - t_cam[0])
    v[-1] = (head[-1] - head[-2]) / (t_cam[-1] - t_cam[-2])
    speed = np.sqrt(np.sum(v * v, axis=1))
    k = np.searchsorted(t_cam, np.asarray(t_out, dtype=float) + 1e-9, side="right") - 1
    return speed[np.clip(k, 0, t_cam.size - 1)]


def head_speed(cam_head: np.ndarray, k_of: np.ndarray, camera_rate: float) -> np.ndarray:
    """Causal head speed at each 100 Hz frame.

    ``k_of`` is the latest received camera frame per output frame; the speed is
    the central difference around frame ``k - 1`` (frames ``k - 2`` and ``k``),
    so it never looks ahead. Frames with ``k < 2`` get zero.
    """
    cam_head = np.asarray(cam_head, dtype=float)
    k_of = np.asarray(k_of, dtype=np.int64)
    speed = np.zeros(k_of.size)
    ok = k_of >= 2
    d = cam_head[k_of[ok]] - cam_head[k_of[ok] - 2]
    speed[ok] = np.sqrt(np.sum(d * d, axis=1)) * camera_rate / 2.0
    return speed


def _poly_rows(x: np.ndarray, end_idx: np.ndarray, n: int) -> np.ndarray:
    """Gram-polynomial coefficients of the ``n`` samples ending at each index."""
    win = sliding_window_view(x, n)[end_idx - n + 1]
    return np.einsum("rn,kn->rk", win, gram_basis(n, POLY_DEGREE))


@dataclass(frozen=True, eq=False)
class StackedFeatures:
    values: np.ndarray

    def __post_init__(self) -> None:
        if self.values.shape != (STACKED_SIZE,):
            raise ValueError(f"stacked feature vector must have {STACKED_SIZE} values")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite stacked features")

    names = STACKED_NAMES


def _window_samples(w: float) -> int:
    return int(round(w * IMU_RATE))


def stacked_matrix(rx: ReceivedStreams) -> tuple[np.ndarray, np.ndarray]:
    """Stacked features of every 100 Hz frame plus a mask of frames where they are valid.

    A frame is valid when three smart-device probabilities exist and every
    camera frame needed by the CNN history and the head-speed windows has
    been received. Invalid rows are zero.
    """
    n = rx.t.size
    cr = rx.camera_rate
    long_n = _window_samples(max(POLY_WINDOWS))
    X = np.zeros((n, STACKED_SIZE))
    k_of = np.floor(rx.t * cr + 1e-9).astype(np.int64)  # latest camera frame at or before t
    k_of = np.minimum(k_of, rx.cam_t.size - 1)
    have_sd = np.zeros(n, dtype=bool)
    finite = np.isfinite(rx.p_sd)
    have_sd[HISTORY - 1 :] = sliding_window_view(finite, HISTORY).all(axis=1)
    # camera completeness over [k(t - window) - 2, k(t)]
    cum = np.concatenate([[0], np.cumsum(rx.cam_ok)])
    idx = np.arange(n)
    lo_frame = np.where(idx >= long_n - 1, k_of[np.maximum(idx - long_n + 1, 0)] - 2, -1)
    hi_frame = k_of
    span_ok = (lo_frame >= 0) & (cum[np.maximum(hi_frame + 1, 0)] - cum[np.maximum(lo_frame, 0)] == hi_frame - lo_frame + 1)
    valid = have_sd & span_ok & (idx >= long_n - 1)
    rows = np.flatnonzero(valid)
    if rows.size == 0:
        return X, valid
    k = k_of[rows]
    col = 0
    for lag in range(HISTORY - 1, -1, -1):
        X[rows, col : col + 3] = rx.cam_probs[k - lag]
        col += 3
    for lag in range(HISTORY - 1, -1, -1):
        X[rows, col] = rx.p_sd[rows - lag]
        col += 1
    speed = head_speed(rx.cam_head, k_of, cr)
    for sig in (rx.acc, speed):
        for w in POLY_WINDOWS:
            X[rows, col : col + POLY_DEGREE + 1] = _poly_rows(sig, rows, _window_samples(w))
            col += POLY_DEGREE + 1
    return X, valid


def assemble_stacked(
    t: float,
    cnn_history: Sequence[ClassProbs],
    sd_history: Sequence[float],
    acc_buffer: Sequence[float],
    head_speed_buffer: Sequence[float],
) -> StackedFeatures:
    """Stacked vector from the three latest predictions of each detector and 0.8 s signal buffers.

    Histories are ordered oldest first and must stem from instants ``<= t``;
    buffers end at the current frame.
    """
    long_n = _window_samples(max(POLY_WINDOWS))
    if len(cnn_history) < HISTORY or len(sd_history) < HISTORY:
        raise NotClassifiable("fewer than three predictions of a detector")
    if len(acc_buffer) < long_n or len(head_speed_buffer) < long_n:
        raise NotClassifiable("signal buffers shorter than the longest window")
    vals: list[float] = []
    for cp in list(cnn_history)[-HISTORY:]:
        vals += [cp.p_waiting, cp.p_starting, cp.p_moving]
    vals += [float(p) for p in list(sd_history)[-HISTORY:]]
    for buf in (acc_buffer, head_speed_buffer):
        x = np.asarray(buf, dtype=float)
        for w in POLY_WINDOWS:
            n = _window_samples(w)
            vals += list(np.einsum("rn,kn->rk", x[None, -n:], gram_basis(n, POLY_DEGREE))[0])
    return StackedFeatures(np.array(vals))


# -- combiner ------------------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CoopModel:
    model: TreeEnsembleModel
    calibration: CalibrationModel
    report: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "format": COOP_FORMAT,
            "features": list(STACKED_NAMES),
            "model": self.model.to_dict(),
            "calibration": self.calibration.to_dict(),
            "report": self.report,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CoopModel":
        if d.get("format") != COOP_FORMAT:
            raise ValueError(f"not a combiner bundle: {d.get('format')!r}")
        if tuple(d["features"]) != STACKED_NAMES:
            raise ValueError("stacked feature layout mismatch")
        return cls(TreeEnsembleModel.from_dict(d["model"]), CalibrationModel.from_dict(d["calibration"]), d.get("report", {}))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(dumps_json(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "CoopModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def coop_classify(features: StackedFeatures | np.ndarray, model: CoopModel) -> float | np.ndarray:
    """Calibrated cooperative moving probability of one vector or a matrix of rows."""
    x = features.values if isinstance(features, StackedFeatures) else np.asarray(features, dtype=float)
    if x.shape[-1] != STACKED_SIZE:
        raise ValueError(f"expected {STACKED_SIZE} stacked features, got {x.shape[-1]}")
    p = model.calibration(model.model.predict_raw(x))
    return float(p[0]) if x.ndim == 1 else p


@dataclass(frozen=True, eq=False)
class CoopOutput:
    t: np.ndarray
    p: np.ndarray
    bypassed: np.ndarray

    def as_detector_output(self) -> DetectorOutput:
        return DetectorOutput(self.t, binary_probs(self.p), Source.COOP)


def combine(
    messages: Iterable[Message],
    model: CoopModel,
    camera_rate: float,
    occlusions: Sequence[tuple[float, float]] = (),
) -> CoopOutput:
    """Receiver-side combination of a delivered message stream.

    Output frames are those with a smart-device probability. Inside
    occlusion intervals (closed) and wherever the stacked features are
    not yet valid, the smart-device probability is forwarded unchanged.
    """
    rx = receive(messages, camera_rate)
    X, valid = stacked_matrix(rx)
    has_p = np.isfinite(rx.p_sd)
    occluded = np.zeros(rx.t.size, dtype=bool)
    for a, b in occlusions:
        occluded |= (rx.t >= a) & (rx.t <= b)
    use = valid & ~occluded & has_p
    p = rx.p_sd.copy()
    if use.any():
        p[use] = coop_classify(X[use], model)
    return CoopOutput(rx.t[has_p].copy(), p[has_p], ~use[has_p])


def detect_with_bypass(
    scene: LabeledScene,
    model: CoopModel,
    sd: SdDetector | DetectorOutput,
    cnn_out: DetectorOutput | None,
    bus: MessageBus | None = None,
    sd_table: SceneFeatures | None = None,
) -> CoopOutput:
    """Cooperative moving probability at 100 Hz with the occlusion bypass.

    ``sd`` is either a trained detector or its precomputed output on the
    scene. Without camera output the result equals the smart-device output.
    """
    sd_out = sd if isinstance(sd, DetectorOutput) else sd_detect(sd, scene, sd_table)
    bus = publish_scene(scene, sd_out, cnn_out, bus)
    return combine(bus.delivered(), model, scene.camera_rate, scene.occlusions)


# -- training ----------------------------------------------------------------------------------


def stacking_rows(
    scene: LabeledScene, sd_out: DetectorOutput, cnn_out: DetectorOutput | None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stacked features, binary labels and frame times of a scene's valid, unoccluded frames."""
    bus = publish_scene(scene, sd_out, cnn_out)
    rx = receive(bus.delivered(), scene.camera_rate)
    X, valid = stacked_matrix(rx)
    keep = valid & ~scene.occluded(rx.t) & np.isfinite(rx.p_sd)
    t = rx.t[keep]
    return X[keep], binary_labels(t, scene.labels), t


@dataclass(frozen=True)
class CoopConfig:
    sd_params: GBTParams = GBTParams()
    coop_params: GBTParams = GBTParams()
    folds: int = 5
    calib_fraction: float = 0.25
    train_stride: int = 1
    coop_stride: int = 1
    seed: int = 0


def subject_folds(subjects: Sequence[str], k: int, seed: int) -> list[list[str]]:
    """Partition of the distinct subjects into ``k`` folds of near-equal size."""
    uniq = sorted(set(subjects))
    if len(uniq) < k:
        raise ValueError(f"need at least {k} subjects, got {len(uniq)}")
    order = [uniq[i] for i in np.random.default_rng(seed).permutation(len(uniq))]
    return [sorted(order[i::k]) for i in range(k)]


@dataclass
class NestedResult:
    coop: CoopModel
    sd: SdDetector
    folds: list[list[str]]
    rows_per_scene: dict[str, int]
    nested_sd: dict[str, DetectorOutput]


def nested_cv_train(
    scenes: Sequence[LabeledScene],
    cnn_outputs: dict[str, DetectorOutput],
    registry,
    config: CoopConfig = CoopConfig(),
    tables: dict[str, SceneFeatures] | None = None,
) -> NestedResult:
    """Train the final smart-device detector and the combiner on one training fold.

    Smart-device predictions used as stacking inputs come from nested
    subject-grouped folds so that no scene is scored by a model that saw it.
    """
    subjects = [s.subject for s in scenes]
    folds = subject_folds(subjects, config.folds, config.seed)
    registry = tuple(registry)
    tables = dict(tables or {})
    for s in scenes:
        if s.scene_id not in tables:
            tables[s.scene_id] = scene_features(s, registry)
    nested_sd: dict[str, DetectorOutput] = {}
    for f, held in enumerate(folds):
        held_set = set(held)
        train_tabs = [tables[s.scene_id] for s in scenes if s.subject not in held_set]
        det = train_sd_detector(
            registry=registry,
            tables=train_tabs,
            params=config.sd_params,
            seed=config.seed + f,
            calib_fraction=config.calib_fraction,
            train_stride=config.train_stride,
        )
        for s in scenes:
            if s.subject in held_set:
                nested_sd[s.scene_id] = sd_detect(det, s, tables[s.scene_id])
    Xs, ys, groups, rows_per_scene = [], [], [], {}
    for s in scenes:
        X, y, _ = stacking_rows(s, nested_sd[s.scene_id], cnn_outputs.get(s.scene_id))
        rows_per_scene[s.scene_id] = int(y.size)
        if y.size:
            Xs.append(X)
            ys.append(y)
            groups.append(s.subject)
    tabs = [
        SceneFeatures(sid, subj, np.zeros(len(y)), X, y, 0)
        for sid, subj, X, y in zip([s.scene_id for s in scenes if rows_per_scene[s.scene_id]], groups, Xs, ys)
    ]
    model, calibration = fit_scored_model(
        tabs, config.coop_params, config.calib_fraction, config.seed, config.coop_stride
    )
    final_sd = train_sd_detector(
        registry=registry,
        tables=[tables[s.scene_id] for s in scenes],
        params=config.sd_params,
        seed=config.seed,
        calib_fraction=config.calib_fraction,
        train_stride=config.train_stride,
    )
    report = {"folds": folds, "rows": int(sum(rows_per_scene.values()))}
    return NestedResult(CoopModel(model, calibration, report), final_sd, folds, rows_per_scene, nested_sd)
