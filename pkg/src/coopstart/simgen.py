"""Deterministic synthetic scenes of cyclists waiting at a stop and starting.

Each scene begins when the cyclist has come to a halt. The generator draws
the cyclist's kinematics in a world frame (x along the heading, z up), then
derives

* gravity-compensated and gravity-inclusive accelerometer and gyroscope
  streams at 100 Hz in an arbitrarily oriented device frame,
* the head trajectory at camera rate, and
* low-resolution grey-level camera frames showing a schematic cyclist
  (body, head, crank/leg texture) in front of a static background.

Nuisance events inject the typical failure situations of the single
detectors: background pedestrians and camera shake disturb the images,
seesawing and pedal preparation disturb the inertial signals, and
occlusions hide the cyclist from the camera.

Randomness: every random quantity is drawn from
``np.random.default_rng([seed, stream])`` with a fixed stream number per
purpose (see ``_STREAMS``), so adding or reordering generator code never
changes the draws of other streams.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .domain import (
    DEFAULT_CAMERA_RATE,
    IMU_RATE,
    LabeledScene,
    PhaseLabels,
    SceneEvent,
    dumps_json,
    save_scene,
)
from .signal import GRAVITY

EVENT_KINDS = ("pedestrian", "camera_shake", "seesaw", "pedal_prep", "device_handling", "occlusion")
MANIFEST_FORMAT = "coopstart.manifest/1"

_STREAMS = {
    "device": 1,
    "imu_noise": 2,
    "head_noise": 3,
    "image_noise": 4,
    "shake": 5,
    "layout": 6,
    "subjects": 7,
    "scenes": 8,
}


def _rng(seed: int, stream: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), _STREAMS[stream], *extra])


@dataclass(frozen=True)
class NoiseLevels:
    acc: float = 0.05  # m/s^2
    gyro: float = 0.02  # rad/s
    head: float = 0.004  # m
    image: float = 0.03  # grey levels

    def scaled(self, k: float) -> "NoiseLevels":
        return NoiseLevels(self.acc * k, self.gyro * k, self.head * k, self.image * k)


@dataclass(frozen=True)
class ScenarioConfig:
    """Parameters of one synthetic scene.

    ``lead`` is the duration of phase II (may be zero). ``vigor`` scales the
    moving-phase accelerations and ``lead_vigor`` the lead movement.
    """

    waiting: float = 3.0
    lead: float = 0.4
    moving: float = 2.0
    vigor: float = 1.0
    lead_vigor: float = 1.0
    cadence: float = 1.0
    noise: NoiseLevels = NoiseLevels()
    events: tuple[SceneEvent, ...] = ()
    camera_rate: float = DEFAULT_CAMERA_RATE
    image_size: int = 16
    render_images: bool = True
    random_device: bool = True
    seed: int = 0
    scene_id: str = "scene"
    subject: str = "s0"

    def __post_init__(self) -> None:
        if self.waiting <= 0 or self.moving <= 0 or self.lead < 0:
            raise ValueError("waiting and moving durations must be > 0 and lead >= 0")
        if self.vigor <= 0 or self.lead_vigor < 0 or self.cadence <= 0:
            raise ValueError("vigor and cadence must be positive")
        if self.camera_rate <= 0 or self.image_size < 8:
            raise ValueError("camera rate must be positive and images at least 8 px")
        end = self.end_time
        for e in self.events:
            if e.kind not in EVENT_KINDS:
                raise ValueError(f"unknown event kind {e.kind!r}")
            if not (0.0 <= e.t_a <= e.t_b <= end):
                raise ValueError(f"event {e.kind} [{e.t_a}, {e.t_b}] outside scene [0, {end}]")

    @property
    def t_start(self) -> float:
        return self.waiting

    @property
    def t_moving(self) -> float:
        return self.waiting + self.lead

    @property
    def end_time(self) -> float:
        """Timestamp of the last inertial sample."""
        return sampled_end(self.waiting + self.lead + self.moving)


def sampled_end(duration: float) -> float:
    return float(np.floor(duration * IMU_RATE + 1e-9) / IMU_RATE)


def _hann(t: np.ndarray, a: float, b: float) -> np.ndarray:
    """Raised-cosine window on [a, b], zero outside."""
    out = np.zeros_like(t)
    if b <= a:
        return out
    inside = (t >= a) & (t <= b)
    out[inside] = 0.5 - 0.5 * np.cos(2 * np.pi * (t[inside] - a) / (b - a))
    return out


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass
class _Kinematics:
    acc: np.ndarray  # world-frame acceleration, (n, 3)
    gyro: np.ndarray  # world-frame angular rate, (n, 3)
    forward: np.ndarray  # forward displacement along the heading, (n,)
    lateral: np.ndarray  # sideways displacement, (n,)
    crank: np.ndarray  # crank / leg angle used by the image texture, (n,)
    leg_amp: np.ndarray  # amplitude of the leg texture, (n,)


def _kinematics(cfg: ScenarioConfig, t: np.ndarray) -> _Kinematics:
    n = t.size
    acc = np.zeros((n, 3))
    gyro = np.zeros((n, 3))
    ts, tm = cfg.t_start, cfg.t_moving
    v, lv, fc = cfg.vigor, cfg.lead_vigor, cfg.cadence

    # phase II: rider shifts weight onto the pedal
    if cfg.lead > 0:
        tau = t - ts
        in2 = (t >= ts) & (t < tm)
        env = np.where(in2, tau / cfg.lead, 0.0)
        acc[:, 0] += 0.35 * lv * env * in2
        acc[:, 2] += 0.9 * lv * env * np.sin(2 * np.pi * 1.5 * tau) * in2
        gyro[:, 0] += 0.5 * lv * env * np.sin(2 * np.pi * 1.5 * tau + 0.3) * in2
        gyro[:, 1] += 0.25 * lv * env * in2

    # phase III: accelerating and pedaling
    tau = np.maximum(t - tm, 0.0)
    in3 = t >= tm
    ramp = 1.0 - np.exp(-tau / 0.2)
    pedal = np.sin(2 * np.pi * fc * tau)
    a_forward = in3 * v * 1.3 * ramp * np.exp(-tau / 3.0) * (1.0 + 0.3 * pedal)
    acc[:, 0] += a_forward
    acc[:, 1] += in3 * v * 0.45 * ramp * np.sin(np.pi * fc * tau)
    acc[:, 2] += in3 * v * 0.7 * ramp * pedal
    gyro[:, 0] += in3 * v * 0.35 * ramp * np.sin(np.pi * fc * tau + 0.5)
    gyro[:, 1] += in3 * v * 0.2 * ramp * pedal
    gyro[:, 2] += in3 * v * 0.15 * ramp * np.sin(np.pi * fc * tau)

    lateral_acc = np.zeros(n)
    rocking = np.zeros(n)
    leg_amp = np.zeros(n)
    crank = np.zeros(n)
    for e in cfg.events:
        w = _hann(t, e.t_a, e.t_b)
        if e.kind == "seesaw":
            # swaying from one leg to the other: lateral acceleration and roll
            s = t - e.t_a
            la = e.magnitude * 1.3 * np.sin(2 * np.pi * 0.9 * s) * w
            acc[:, 1] += la
            lateral_acc += la
            # rocking the bike back and forth: bounded displacement, its acceleration by differencing
            rock = e.magnitude * 0.05 * np.sin(2 * np.pi * 0.7 * s) * w
            rocking += rock
            acc[:, 0] += np.gradient(np.gradient(rock, t), t)
            acc[:, 2] += e.magnitude * 0.4 * np.sin(2 * np.pi * 1.8 * s + 1.0) * w
            gyro[:, 0] += e.magnitude * 0.5 * np.cos(2 * np.pi * 0.9 * s) * w
            gyro[:, 2] += e.magnitude * 0.15 * np.sin(2 * np.pi * 0.9 * s) * w
        elif e.kind == "pedal_prep":
            # the lead movement of a start followed by a pedal stroke, without rolling off
            s = t - e.t_a
            acc[:, 0] += e.magnitude * 0.7 * np.sin(np.pi * s / max(e.t_b - e.t_a, 1e-9)) * (w > 0)
            acc[:, 2] += e.magnitude * 0.9 * np.sin(2 * np.pi * 1.5 * s) * w
            acc[:, 1] += e.magnitude * 0.4 * np.sin(np.pi * 1.0 * s) * w
            gyro[:, 0] += e.magnitude * 0.5 * np.sin(2 * np.pi * 1.5 * s + 0.3) * w
            gyro[:, 1] += e.magnitude * 0.3 * np.sin(2 * np.pi * 1.0 * s) * w
            crank += 0.5 * e.magnitude * np.sin(2 * np.pi * 0.75 * s) * w
        elif e.kind == "device_handling":
            # the phone moves relative to the rider (pocket, mount): the device sees the
            # lead movement and the onset of a start while rider and bicycle stay put
            s = t - e.t_a
            lead = min(0.4, 0.3 * (e.t_b - e.t_a))
            inside = (t >= e.t_a) & (t <= e.t_b)
            in_lead = inside & (s < lead)
            ramp_l = np.clip(s / lead, 0.0, 1.0)
            acc[:, 0] += e.magnitude * lv * 0.35 * ramp_l * in_lead
            acc[:, 2] += e.magnitude * lv * 0.9 * ramp_l * np.sin(2 * np.pi * 1.5 * s) * in_lead
            gyro[:, 0] += e.magnitude * lv * 0.5 * ramp_l * np.sin(2 * np.pi * 1.5 * s + 0.3) * in_lead
            gyro[:, 1] += e.magnitude * lv * 0.25 * ramp_l * in_lead
            u = np.maximum(s - lead, 0.0)
            release = np.clip((e.t_b - t) / 0.25, 0.0, 1.0)
            env = inside * (s >= lead) * (1.0 - np.exp(-u / 0.2)) * release
            hp = np.sin(2 * np.pi * fc * u)
            acc[:, 0] += e.magnitude * v * 1.3 * env * (1.0 + 0.3 * hp)
            acc[:, 1] += e.magnitude * v * 0.45 * env * np.sin(np.pi * fc * u)
            acc[:, 2] += e.magnitude * v * 0.7 * env * hp
            gyro[:, 0] += e.magnitude * v * 0.35 * env * np.sin(np.pi * fc * u + 0.5)
            gyro[:, 1] += e.magnitude * v * 0.2 * env * hp
            gyro[:, 2] += e.magnitude * v * 0.15 * env * np.sin(np.pi * fc * u)

    dt = 1.0 / IMU_RATE
    # the wheels do not move before phase III
    forward = np.cumsum(np.cumsum(a_forward) * dt) * dt + rocking
    # phase II lean of the upper body, smooth and continuous into phase III
    if cfg.lead > 0:
        lean = np.clip((t - ts) / cfg.lead, 0.0, 1.0)
    else:
        lean = (t >= ts).astype(float)
    forward = forward + 0.06 * lv * lean**2
    lateral = np.cumsum(np.cumsum(lateral_acc) * dt) * dt

    if cfg.lead > 0:
        env2 = np.clip((t - ts) / cfg.lead, 0.0, 1.0)
        leg_amp += np.where(t < tm, env2 * 0.6 * lv, 0.0)
        crank += np.where((t >= ts) & (t < tm), 0.8 * np.sin(2 * np.pi * 1.5 * (t - ts)), 0.0)
    leg_amp += np.where(in3, 1.0, 0.0)
    crank += np.where(in3, 2 * np.pi * fc * tau, 0.0)
    for e in cfg.events:
        if e.kind == "pedal_prep":
            leg_amp += 0.25 * e.magnitude * _hann(t, e.t_a, e.t_b)
    return _Kinematics(acc, gyro, forward, lateral, crank, leg_amp)


def _render(
    cfg: ScenarioConfig, t_cam: np.ndarray, kin: _Kinematics, t_imu: np.ndarray
) -> np.ndarray:
    """Schematic camera frames ``(m, size, size)`` in float32."""
    size = cfg.image_size
    k = size / 16.0
    lay = _rng(cfg.seed, "layout")
    direction = 1.0 if lay.random() < 0.5 else -1.0
    cx0 = size / 2 - direction * 3.0 * k + lay.uniform(-0.5, 0.5) * k
    cy0 = size / 2 + lay.uniform(-0.5, 0.5) * k
    ppm = 2.5 * k  # pixels per metre
    freqs = lay.uniform(0.2, 0.9, size=(3, 2)) / k
    phases = lay.uniform(0, 2 * np.pi, size=3)
    amps = lay.uniform(0.03, 0.08, size=3)

    fwd = np.interp(t_cam, t_imu, kin.forward)
    lat = np.interp(t_cam, t_imu, kin.lateral)
    crank = np.interp(t_cam, t_imu, kin.crank)
    leg = np.interp(t_cam, t_imu, kin.leg_amp)
    m = t_cam.size
    dx = np.zeros(m)
    dy = np.zeros(m)
    for i, e in enumerate(cfg.events):
        if e.kind == "camera_shake":
            inside = (t_cam >= e.t_a) & (t_cam <= e.t_b)
            jit = _rng(cfg.seed, "shake", i).normal(size=(m, 2)) * e.magnitude * k
            dx += jit[:, 0] * inside
            dy += jit[:, 1] * inside

    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    X = xx[None] - dx[:, None, None]
    Y = yy[None] - dy[:, None, None]
    img = np.zeros((m, size, size))
    for a, (fx, fy), ph in zip(amps, freqs, phases):
        img += a * np.sin(fx * X + fy * Y + ph)
    img += 0.2

    def blob(cx, cy, sx, sy, amp):
        cx, cy, amp = (np.broadcast_to(np.asarray(v, dtype=float), (m,)) for v in (cx, cy, amp))
        return amp[:, None, None] * np.exp(
            -((X - cx[:, None, None]) ** 2) / (2 * sx * sx) - ((Y - cy[:, None, None]) ** 2) / (2 * sy * sy)
        )

    bx = cx0 + direction * fwd * ppm
    by = cy0 - 0.5 * lat * ppm  # sideways sway seen slightly foreshortened
    ones = np.ones(m)
    cyclist = blob(bx, by, 1.1 * k, 1.5 * k, 0.8 * ones)
    cyclist += blob(bx + direction * 0.4 * k, by - 2.6 * k, 0.7 * k, 0.7 * k, 0.7 * ones)
    for sign in (-1.0, 1.0):
        cyclist += blob(bx + sign * 2.0 * k, by + 2.3 * k, 0.9 * k, 0.9 * k, 0.45 * ones)
    legx = bx + direction * 0.9 * k * leg * np.sin(crank)
    legy = by + 1.6 * k + 0.9 * k * leg * np.cos(crank)
    cyclist += blob(legx, legy, 0.6 * k, 0.6 * k, 0.6 * ones)

    occluded = np.zeros(m, dtype=bool)
    for e in cfg.events:
        if e.kind == "occlusion":
            occluded |= (t_cam >= e.t_a) & (t_cam <= e.t_b)
    img += np.where(occluded[:, None, None], 0.0, cyclist)

    for e in cfg.events:
        if e.kind != "pedestrian":
            continue
        inside = (t_cam >= e.t_a) & (t_cam <= e.t_b)
        frac = np.clip((t_cam - e.t_a) / max(e.t_b - e.t_a, 1e-9), 0.0, 1.0)
        side = -direction
        px = np.where(side > 0, -3.0 * k + frac * (size + 6.0 * k), size + 3.0 * k - frac * (size + 6.0 * k))
        offset = (1.0 - float(np.clip(e.magnitude, 0.0, 1.0))) * 6.0 * k
        py = cy0 + 1.0 * k - offset
        step = np.sin(2 * np.pi * 1.8 * (t_cam - e.t_a))
        amp = 0.75 * inside
        img += blob(px, py, 0.8 * k, 1.8 * k, amp)
        img += blob(px + 0.7 * k * step, py + 2.2 * k, 0.5 * k, 0.6 * k, 0.5 * inside)
        img += blob(px - 0.7 * k * step, py + 2.2 * k, 0.5 * k, 0.6 * k, 0.5 * inside)

    if occluded.any():
        occ = np.abs(xx - cx0) <= 5.0 * k
        img = np.where(occluded[:, None, None] & occ[None], 0.55, img)

    img += _rng(cfg.seed, "image_noise").normal(size=img.shape) * cfg.noise.image
    return img.astype(np.float32)


def generate_scene(cfg: ScenarioConfig) -> LabeledScene:
    """Render one labeled scene; fully determined by ``cfg`` (including its seed)."""
    end = cfg.end_time
    n = int(round(end * IMU_RATE)) + 1
    t_imu = np.arange(n) / IMU_RATE
    mcount = int(np.floor(end * cfg.camera_rate + 1e-9)) + 1
    t_cam = np.arange(mcount) / cfg.camera_rate
    kin = _kinematics(cfg, t_imu)

    noise = _rng(cfg.seed, "imu_noise").normal(size=(2, n, 3))
    acc_w = kin.acc + noise[0] * cfg.noise.acc
    gyro_w = kin.gyro + noise[1] * cfg.noise.gyro
    rot = _random_rotation(_rng(cfg.seed, "device")) if cfg.random_device else np.eye(3)
    # device frame = rot^T * world frame
    acc = acc_w @ rot
    gyro = gyro_w @ rot
    acc_raw = (acc_w + np.array([0.0, 0.0, -GRAVITY])) @ rot

    lay = _rng(cfg.seed, "layout", 1)
    heading = lay.uniform(0, 2 * np.pi)
    hvec = np.array([np.cos(heading), np.sin(heading), 0.0])
    side = np.array([-np.sin(heading), np.cos(heading), 0.0])
    origin = np.array([lay.uniform(-5, 5), lay.uniform(-5, 5), 1.6])
    fwd = np.interp(t_cam, t_imu, kin.forward)
    lat = np.interp(t_cam, t_imu, kin.lateral)
    head = origin + fwd[:, None] * hvec + lat[:, None] * side
    head = head + _rng(cfg.seed, "head_noise").normal(size=head.shape) * cfg.noise.head
    for i, e in enumerate(cfg.events):
        if e.kind == "camera_shake":
            inside = (t_cam >= e.t_a) & (t_cam <= e.t_b)
            jit = _rng(cfg.seed, "shake", 100 + i).normal(size=head.shape) * 0.01 * e.magnitude
            head = head + jit * inside[:, None]

    images = _render(cfg, t_cam, kin, t_imu) if cfg.render_images else None
    occlusions = tuple((e.t_a, e.t_b) for e in cfg.events if e.kind == "occlusion")
    meta = {
        "waiting": cfg.waiting,
        "lead": cfg.lead,
        "moving": cfg.moving,
        "vigor": cfg.vigor,
        "lead_vigor": cfg.lead_vigor,
        "cadence": cfg.cadence,
        "image_size": cfg.image_size,
    }
    return LabeledScene(
        scene_id=cfg.scene_id,
        subject=cfg.subject,
        labels=PhaseLabels(cfg.t_start, cfg.t_moving),
        t_imu=t_imu,
        acc=acc,
        gyro=gyro,
        t_cam=t_cam,
        head=head,
        acc_raw=acc_raw,
        images=images,
        occlusions=occlusions,
        events=tuple(cfg.events),
        camera_rate=cfg.camera_rate,
        seed=cfg.seed,
        meta=meta,
    )


# -- datasets --------------------------------------------------------------------


@dataclass(frozen=True)
class EventRates:
    """Probability that a scene contains each nuisance event."""

    pedestrian: float = 0.0
    camera_shake: float = 0.0
    seesaw: float = 0.0
    pedal_prep: float = 0.0
    device_handling: float = 0.0
    occlusion: float = 0.0
    pedestrian_proximity: tuple[float, float] = (0.7, 1.0)
    # at most one event besides occlusion per scene; the rates are then category probabilities
    exclusive: bool = False

    def __post_init__(self) -> None:
        rates = [getattr(self, k) for k in EVENT_KINDS]
        if any(not 0.0 <= p <= 1.0 for p in rates):
            raise ValueError("event rates must lie in [0, 1]")
        if self.exclusive and sum(rates) - self.occlusion > 1.0 + 1e-12:
            raise ValueError("exclusive event rates must sum to at most 1")

    def any(self) -> bool:
        return any(getattr(self, k) > 0 for k in EVENT_KINDS)


NUISANCE = EventRates(
    pedestrian=0.2,
    camera_shake=0.2,
    seesaw=0.15,
    pedal_prep=0.15,
    device_handling=0.15,
    occlusion=0.15,
    exclusive=True,
)


@dataclass(frozen=True)
class DatasetConfig:
    n_subjects: int = 40
    scenes_per_subject: int = 2
    seed: int = 0
    events: EventRates = EventRates()
    noise: NoiseLevels = NoiseLevels()
    image_size: int = 16
    camera_rate: float = DEFAULT_CAMERA_RATE
    render_images: bool = True
    waiting_range: tuple[float, float] = (3.0, 4.5)
    moving_range: tuple[float, float] = (1.6, 2.2)
    prefix: str = "s"

    def __post_init__(self) -> None:
        if self.n_subjects < 1 or self.scenes_per_subject < 1:
            raise ValueError("a dataset needs at least one subject and one scene per subject")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        if "events" in d and isinstance(d["events"], dict):
            ev = dict(d["events"])
            if "pedestrian_proximity" in ev:
                ev["pedestrian_proximity"] = tuple(ev["pedestrian_proximity"])
            d["events"] = EventRates(**ev)
        if "noise" in d and isinstance(d["noise"], dict):
            d["noise"] = NoiseLevels(**d["noise"])
        for k in ("waiting_range", "moving_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class SubjectStyle:
    subject: str
    vigor: float
    lead_vigor: float
    lead_mean: float
    cadence: float
    noise_scale: float


def subject_styles(cfg: DatasetConfig) -> list[SubjectStyle]:
    styles = []
    for i in range(cfg.n_subjects):
        r = _rng(cfg.seed, "subjects", i)
        styles.append(
            SubjectStyle(
                subject=f"{cfg.prefix}{i:03d}",
                vigor=float(r.uniform(0.7, 1.3)),
                lead_vigor=float(r.uniform(0.6, 1.4)),
                lead_mean=float(r.uniform(0.0, 0.6)),
                cadence=float(r.uniform(0.8, 1.2)),
                noise_scale=float(r.uniform(0.7, 1.3)),
            )
        )
    return styles


_EXCLUSIVE_KINDS = ("pedestrian", "camera_shake", "seesaw", "pedal_prep", "device_handling")


def _draw_events(r: np.random.Generator, rates: EventRates, waiting: float, end: float) -> list[SceneEvent]:
    events: list[SceneEvent] = []
    u = r.random(6)
    if rates.exclusive:
        # one categorical draw decides the single nuisance kind of the scene
        edges = np.cumsum([getattr(rates, k) for k in _EXCLUSIVE_KINDS])
        pick = int(np.searchsorted(edges, u[0], side="right"))
        chosen = {_EXCLUSIVE_KINDS[pick]} if pick < len(_EXCLUSIVE_KINDS) else set()
        draw = {k: k in chosen for k in _EXCLUSIVE_KINDS}
    else:
        draw = {k: u[i] < getattr(rates, k) for i, k in zip((0, 1, 2, 3, 5), _EXCLUSIVE_KINDS)}
    if draw["pedestrian"]:
        dur = r.uniform(1.0, 1.6)
        t_a = r.uniform(0.9, max(waiting - dur, 0.95))
        prox = r.uniform(*rates.pedestrian_proximity)
        events.append(SceneEvent("pedestrian", float(t_a), float(min(t_a + dur, end)), float(prox)))
    if draw["camera_shake"]:
        t_a = r.uniform(0.0, 0.5)
        t_b = r.uniform(waiting + 0.3, end)
        events.append(SceneEvent("camera_shake", float(t_a), float(t_b), float(r.uniform(0.8, 1.5))))
    if draw["seesaw"]:
        dur = r.uniform(1.2, 2.2)
        t_a = r.uniform(0.9, max(waiting - dur - 0.1, 0.95))
        events.append(SceneEvent("seesaw", float(t_a), float(t_a + dur), float(r.uniform(0.8, 1.5))))
    if draw["pedal_prep"]:
        dur = r.uniform(0.9, 1.6)
        t_a = r.uniform(0.9, max(waiting - dur - 0.1, 0.95))
        events.append(SceneEvent("pedal_prep", float(t_a), float(t_a + dur), float(r.uniform(0.8, 1.5))))
    if draw["device_handling"]:
        dur = r.uniform(1.2, 2.6)
        t_a = r.uniform(0.9, max(waiting - dur - 0.1, 0.95))
        events.append(SceneEvent("device_handling", float(t_a), float(t_a + dur), float(r.uniform(0.8, 1.2))))
    if u[4] < rates.occlusion:
        if r.random() < 0.2:
            events.append(SceneEvent("occlusion", 0.0, float(end), 1.0))
        else:
            t_a = r.uniform(0.5, end - 0.6)
            events.append(SceneEvent("occlusion", float(t_a), float(min(t_a + r.uniform(0.5, 1.5), end)), 1.0))
    return events


def scenario_configs(cfg: DatasetConfig) -> list[ScenarioConfig]:
    """Per-scene configurations; scene ``j`` of subject ``i`` uses its own seed stream."""
    out = []
    for i, style in enumerate(subject_styles(cfg)):
        for j in range(cfg.scenes_per_subject):
            r = _rng(cfg.seed, "scenes", i, j)
            waiting = float(r.uniform(*cfg.waiting_range))
            lead = 0.0 if r.random() < 0.2 else float(np.clip(r.normal(style.lead_mean + 0.2, 0.15), 0.0, 0.8))
            moving = float(r.uniform(*cfg.moving_range))
            scene_seed = int(r.integers(0, 2**31 - 1))
            end = sampled_end(waiting + lead + moving)
            events = _draw_events(r, cfg.events, waiting, end) if cfg.events.any() else []
            out.append(
                ScenarioConfig(
                    waiting=waiting,
                    lead=lead,
                    moving=moving,
                    vigor=style.vigor,
                    lead_vigor=style.lead_vigor,
                    cadence=style.cadence,
                    noise=cfg.noise.scaled(style.noise_scale),
                    events=tuple(events),
                    camera_rate=cfg.camera_rate,
                    image_size=cfg.image_size,
                    render_images=cfg.render_images,
                    seed=scene_seed,
                    scene_id=f"{style.subject}-{j}",
                    subject=style.subject,
                )
            )
    return out


def generate_dataset(cfg: DatasetConfig, jobs: int = 1) -> list[LabeledScene]:
    """Scenes ordered by subject then scene index; identical for any ``jobs``."""
    configs = scenario_configs(cfg)
    if jobs <= 1:
        return [generate_scene(c) for c in configs]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(generate_scene, configs, chunksize=4))


def manifest(cfg: DatasetConfig, scenes: Sequence[LabeledScene], files: Sequence[str]) -> dict:
    return {
        "format": MANIFEST_FORMAT,
        "config": cfg.to_dict(),
        "scenes": [
            {
                "id": s.scene_id,
                "subject": s.subject,
                "seed": s.seed,
                "file": f,
                "events": sorted({e.kind for e in s.events}),
            }
            for s, f in zip(scenes, files)
        ],
    }


def write_dataset(cfg: DatasetConfig, out_dir: str | Path, jobs: int = 1) -> Path:
    """Write every scene plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenes = generate_dataset(cfg, jobs)
    files = []
    for s in scenes:
        name = f"{s.scene_id}.json"
        save_scene(s, out / name)
        files.append(name)
    path = out / "manifest.json"
    path.write_text(dumps_json(manifest(cfg, scenes, files)))
    return path


def read_manifest(path: str | Path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{path} is not a dataset manifest")
    return doc


def load_dataset(path: str | Path) -> list[LabeledScene]:
    """Load all scenes listed in a manifest (path to the manifest or its directory)."""
    from .domain import load_scene

    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    doc = read_manifest(p)
    return [load_scene(p.parent / e["file"]) for e in doc["scenes"]]


def scene_digest(scene: LabeledScene) -> str:
    """Hash of every stream of a scene (used to compare generator runs)."""
    h = hashlib.sha256()
    for arr in (scene.t_imu, scene.acc, scene.gyro, scene.t_cam, scene.head):
        h.update(np.ascontiguousarray(arr).tobytes())
    if scene.images is not None:
        h.update(np.ascontiguousarray(scene.images).tobytes())
    return h.hexdigest()


def with_events(cfg: ScenarioConfig, *events: SceneEvent) -> ScenarioConfig:
    return replace(cfg, events=tuple(cfg.events) + tuple(events))


__all__ = [
    "DatasetConfig",
    "EventRates",
    "NUISANCE",
    "NoiseLevels",
    "ScenarioConfig",
    "SubjectStyle",
    "generate_dataset",
    "generate_scene",
    "load_dataset",
    "manifest",
    "read_manifest",
    "scenario_configs",
    "scene_digest",
    "subject_styles",
    "with_events",
    "write_dataset",
]
