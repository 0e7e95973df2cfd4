"""Core value types shared by every stage of the detection pipeline.

Scene time starts at the instant the cyclist comes to a stop. Smart-device
streams are sampled at 100 Hz, camera streams at ``camera_rate`` (50 Hz unless
stated otherwise in the scene metadata).
"""

from __future__ import annotations

import base64
import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

IMU_RATE = 100.0
DEFAULT_CAMERA_RATE = 50.0
PROB_TOL = 1e-9

SCENE_FORMAT = "coopstart.scene/1"


class MotionClass(enum.IntEnum):
    WAITING = 0
    STARTING = 1
    MOVING = 2


class Phase(enum.IntEnum):
    I = 1
    II = 2
    III = 3


class Source(str, enum.Enum):
    CNN = "cnn"
    SD = "sd"
    COOP = "coop"


@dataclass(frozen=True)
class ClassProbs:
    p_waiting: float
    p_starting: float
    p_moving: float

    def __post_init__(self) -> None:
        vals = (self.p_waiting, self.p_starting, self.p_moving)
        if any(not (0.0 <= v <= 1.0) for v in vals):
            raise ValueError(f"class probabilities must lie in [0, 1], got {vals}")
        if abs(sum(vals) - 1.0) > PROB_TOL:
            raise ValueError(f"class probabilities must sum to 1, got {sum(vals)!r}")

    @classmethod
    def binary(cls, p_moving: float) -> "ClassProbs":
        """Probability triple of a waiting-vs-moving detector."""
        return cls(1.0 - p_moving, 0.0, p_moving)

    def as_array(self) -> np.ndarray:
        return np.array([self.p_waiting, self.p_starting, self.p_moving])


def check_probs(probs: np.ndarray) -> None:
    """Validate an ``(n, 3)`` array of class probability triples."""
    probs = np.asarray(probs)
    if probs.ndim != 2 or probs.shape[1] != 3:
        raise ValueError(f"expected (n, 3) probabilities, got shape {probs.shape}")
    if np.any(probs < 0.0) or np.any(probs > 1.0):
        raise ValueError("class probabilities outside [0, 1]")
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > PROB_TOL):
        raise ValueError("class probabilities do not sum to 1")


@dataclass(frozen=True)
class PhaseLabels:
    """Labeled phase boundaries of one scene.

    ``t_start`` is the first visible movement leading to the start and
    ``t_moving`` the first wheel movement (onset of phase III).
    """

    t_start: float
    t_moving: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.t_start <= self.t_moving):
            raise ValueError(
                f"labels require 0 <= t_start <= t_moving, got {self.t_start}, {self.t_moving}"
            )


def phase_of(t: float, labels: PhaseLabels) -> Phase:
    # boundary instants belong to the later phase
    if t < 0:
        raise ValueError(f"negative scene time {t}")
    if t < labels.t_start:
        return Phase.I
    if t < labels.t_moving:
        return Phase.II
    return Phase.III


def phases_of(t: np.ndarray, labels: PhaseLabels) -> np.ndarray:
    """Vectorized :func:`phase_of` returning integer phase codes."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("negative scene time")
    out = np.full(t.shape, int(Phase.III), dtype=np.int64)
    out[t < labels.t_moving] = int(Phase.II)
    out[t < labels.t_start] = int(Phase.I)
    return out


def motion_class_of(t: np.ndarray, labels: PhaseLabels) -> np.ndarray:
    """Three-class frame labels (waiting / starting / moving)."""
    return phases_of(t, labels) - 1


def binary_labels(t: np.ndarray, labels: PhaseLabels) -> np.ndarray:
    """Waiting (0) vs moving (1) frame labels, starting merged into moving."""
    return (phases_of(t, labels) > int(Phase.I)).astype(np.int64)


@dataclass(frozen=True)
class InertialSample:
    t: float
    acc: tuple[float, float, float]
    gyro: tuple[float, float, float]

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.acc + self.gyro)) or not np.isfinite(self.t):
            raise ValueError("inertial sample has non-finite components")


@dataclass(frozen=True)
class SceneEvent:
    """Nuisance event recorded by the simulator (metadata only, labels unaffected)."""

    kind: str
    t_a: float
    t_b: float
    magnitude: float = 0.0


@dataclass(frozen=True)
class DetectionEvent:
    t_d: float
    threshold: float
    source: Source


def first_detection(
    times: np.ndarray, p_moving: np.ndarray, threshold: float, source: Source | str
) -> DetectionEvent | None:
    """First timestamp where ``p_moving`` reaches ``threshold`` or None."""
    p_moving = np.asarray(p_moving)
    hits = np.flatnonzero(p_moving >= threshold)
    if hits.size == 0:
        return None
    return DetectionEvent(float(times[hits[0]]), float(threshold), Source(source))


def _frozen(a: Any, dtype=float, ndim: int | None = None) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"expected {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class LabeledScene:
    """One waiting -> starting -> moving episode with all sensor streams.

    ``acc`` is gravity compensated, ``acc_raw`` (optional) is the parallel
    gravity-inclusive accelerometer channel in the device frame, using the
    convention that the gravity vector points towards the ground.
    """

    scene_id: str
    subject: str
    labels: PhaseLabels
    t_imu: np.ndarray
    acc: np.ndarray
    gyro: np.ndarray
    t_cam: np.ndarray
    head: np.ndarray
    acc_raw: np.ndarray | None = None
    images: np.ndarray | None = None
    occlusions: tuple[tuple[float, float], ...] = ()
    events: tuple[SceneEvent, ...] = ()
    camera_rate: float = DEFAULT_CAMERA_RATE
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("t_imu", _frozen(self.t_imu, ndim=1))
        set_("acc", _frozen(self.acc, ndim=2))
        set_("gyro", _frozen(self.gyro, ndim=2))
        set_("t_cam", _frozen(self.t_cam, ndim=1))
        set_("head", _frozen(self.head, ndim=2))
        if self.acc_raw is not None:
            set_("acc_raw", _frozen(self.acc_raw, ndim=2))
        if self.images is not None:
            set_("images", _frozen(self.images, dtype=np.asarray(self.images).dtype, ndim=3))
        set_("occlusions", tuple((float(a), float(b)) for a, b in self.occlusions))
        set_("events", tuple(self.events))
        self._validate()

    def _validate(self) -> None:
        n = self.t_imu.size
        if self.acc.shape != (n, 3) or self.gyro.shape != (n, 3):
            raise ValueError("inertial streams must be (n, 3) and aligned with t_imu")
        if self.acc_raw is not None and self.acc_raw.shape != (n, 3):
            raise ValueError("acc_raw must be aligned with t_imu")
        m = self.t_cam.size
        if self.head.shape != (m, 3):
            raise ValueError("head positions must be (m, 3) and aligned with t_cam")
        if self.images is not None and self.images.shape[0] != m:
            raise ValueError("images must be aligned with t_cam")
        for name in ("t_imu", "t_cam"):
            t = getattr(self, name)
            if t.size and (t[0] < 0 or np.any(np.diff(t) < 0)):
                raise ValueError(f"{name} must be non-negative and time-sorted")
        for arr in (self.acc, self.gyro, self.head):
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite sensor values")
        end = self.end_time
        if self.labels.t_moving > end:
            raise ValueError("phase III onset lies beyond the scene end")
        for a, b in self.occlusions:
            if not (0.0 <= a <= b <= end):
                raise ValueError(f"occlusion interval [{a}, {b}] outside scene [0, {end}]")

    @property
    def end_time(self) -> float:
        ends = [self.t_imu[-1] if self.t_imu.size else 0.0]
        if self.t_cam.size:
            ends.append(self.t_cam[-1])
        return float(max(ends))

    @property
    def has_images(self) -> bool:
        return self.images is not None

    def inertial_sample(self, i: int) -> InertialSample:
        return InertialSample(
            float(self.t_imu[i]), tuple(self.acc[i].tolist()), tuple(self.gyro[i].tolist())
        )

    def occluded(self, t: np.ndarray) -> np.ndarray:
        """Boolean mask of timestamps inside any (closed) occlusion interval."""
        t = np.asarray(t, dtype=float)
        mask = np.zeros(t.shape, dtype=bool)
        for a, b in self.occlusions:
            mask |= (t >= a) & (t <= b)
        return mask

    def has_event(self, kind: str) -> bool:
        return any(e.kind == kind for e in self.events)


# -- serialization -------------------------------------------------------------


def encode_array(a: np.ndarray) -> dict:
    """Bit-exact JSON-embeddable encoding of a numpy array (little endian)."""
    a = np.ascontiguousarray(a)
    le = a.astype(a.dtype.newbyteorder("<"), copy=False)
    return {
        "dtype": le.dtype.str,
        "shape": list(a.shape),
        "data": base64.b64encode(le.tobytes()).decode("ascii"),
    }


def decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    arr = np.frombuffer(raw, dtype=np.dtype(d["dtype"])).reshape(d["shape"])
    return arr.astype(arr.dtype.newbyteorder("="), copy=True)


def _stream_rows(t: np.ndarray, *cols: np.ndarray) -> list[list[float]]:
    mat = np.column_stack([t, *cols])
    return mat.tolist()


def scene_to_dict(scene: LabeledScene) -> dict:
    doc: dict[str, Any] = {
        "format": SCENE_FORMAT,
        "id": scene.scene_id,
        "subject": scene.subject,
        "seed": scene.seed,
        "camera_rate": scene.camera_rate,
        "labels": {"t_start": scene.labels.t_start, "t_moving": scene.labels.t_moving},
        "occlusions": [[a, b] for a, b in scene.occlusions],
        "events": [
            {"kind": e.kind, "t_a": e.t_a, "t_b": e.t_b, "magnitude": e.magnitude}
            for e in scene.events
        ],
        "meta": scene.meta,
        "streams": {
            "inertial": {
                "columns": ["t", "ax", "ay", "az", "gx", "gy", "gz"],
                "rows": _stream_rows(scene.t_imu, scene.acc, scene.gyro),
            },
            "head": {
                "columns": ["t", "x", "y", "z"],
                "rows": _stream_rows(scene.t_cam, scene.head),
            },
        },
    }
    if scene.acc_raw is not None:
        doc["streams"]["acc_raw"] = {
            "columns": ["t", "ax", "ay", "az"],
            "rows": _stream_rows(scene.t_imu, scene.acc_raw),
        }
    if scene.images is not None:
        doc["streams"]["images"] = encode_array(scene.images)
    return doc


def _rows(stream: dict, width: int) -> np.ndarray:
    rows = np.array(stream["rows"], dtype=float)
    return rows.reshape(-1, width)


def scene_from_dict(doc: dict) -> LabeledScene:
    validate_scene_doc(doc)
    streams = doc["streams"]
    inert = _rows(streams["inertial"], 7)
    head = _rows(streams["head"], 4)
    acc_raw = None
    if "acc_raw" in streams:
        acc_raw = _rows(streams["acc_raw"], 4)[:, 1:]
    images = decode_array(streams["images"]) if "images" in streams else None
    return LabeledScene(
        scene_id=doc["id"],
        subject=doc["subject"],
        labels=PhaseLabels(doc["labels"]["t_start"], doc["labels"]["t_moving"]),
        t_imu=inert[:, 0],
        acc=inert[:, 1:4],
        gyro=inert[:, 4:7],
        t_cam=head[:, 0],
        head=head[:, 1:4],
        acc_raw=acc_raw,
        images=images,
        occlusions=tuple(tuple(o) for o in doc["occlusions"]),
        events=tuple(SceneEvent(**e) for e in doc["events"]),
        camera_rate=doc["camera_rate"],
        seed=doc["seed"],
        meta=doc.get("meta", {}),
    )


_SCENE_SCHEMA: dict | None = None


def scene_schema() -> dict:
    global _SCENE_SCHEMA
    if _SCENE_SCHEMA is None:
        path = Path(__file__).with_name("schemas") / "scene.schema.json"
        _SCENE_SCHEMA = json.loads(path.read_text())
    return _SCENE_SCHEMA


def validate_scene_doc(doc: dict) -> None:
    import jsonschema

    jsonschema.validate(doc, scene_schema())


def dumps_json(doc: Any) -> str:
    """Canonical JSON text (sorted keys, repr floats) used by every file writer."""
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False)


def save_scene(scene: LabeledScene, path: str | Path) -> None:
    Path(path).write_text(dumps_json(scene_to_dict(scene)))


def load_scene(path: str | Path) -> LabeledScene:
    return scene_from_dict(json.loads(Path(path).read_text()))


def group_by_subject(scenes: Iterable[LabeledScene]) -> dict[str, list[LabeledScene]]:
    groups: dict[str, list[LabeledScene]] = {}
    for s in scenes:
        groups.setdefault(s.subject, []).append(s)
    return dict(sorted(groups.items()))


def subjects_of(scenes: Sequence[LabeledScene]) -> list[str]:
    return sorted({s.subject for s in scenes})
