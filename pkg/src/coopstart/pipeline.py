"""Experiment orchestration: datasets, training, cross-validated evaluation.

The experiment uses two synthetic datasets. The camera dataset stands in
for uninstructed recordings and trains the CNN only. The instructed dataset
is split two-fold over subjects; on each training fold the smart-device
detector and the combiner are trained with nested subject-grouped
cross-validation, and all three detectors are scored on the other fold.
Test-fold outputs of both folds are pooled before the threshold sweep.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import evaluation as ev
from .cnn3d import network as net
from .cnn3d.train import SGDConfig, TrainResult, load_checkpoint, save_checkpoint, train_micro
from .coop import CoopConfig, CoopModel, detect_with_bypass, nested_cv_train
from .detectors import (
    DetectorOutput,
    SceneFeatures,
    SdDetector,
    SelectionConfig,
    cnn_detect,
    image_windows,
    scene_features,
    sd_detect,
    select_columns,
    sffs,
    split_by_subject,
    train_sd_detector,
)
from .domain import LabeledScene, Source, decode_array, dumps_json, encode_array, motion_class_of
from .features import FeatureSpec, default_registry
from .learners import GBTParams
from .simgen import NUISANCE, DatasetConfig, EventRates, load_dataset, write_dataset

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
TRACES_FORMAT = "coopstart.traces/1"
DETECTORS = ("sd", "cnn", "coop")

CAMERA_EVENTS = EventRates(pedestrian=0.3, seesaw=0.25, pedal_prep=0.25, pedestrian_proximity=(0.0, 0.4))


# -- configuration ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CnnConfig:
    preset: str = "reduced"
    width_factor: float = 1 / 8
    sgd: SGDConfig = SGDConfig(learning_rate=0.005, epochs=8)
    window_stride: int = 2
    val_fraction: float = 0.2
    batch_size: int = 64

    def spec(self, image_size: int) -> net.NetworkSpec:
        if self.preset == "reduced":
            return net.reduced_preset(size=image_size, width_factor=self.width_factor)
        if self.preset == "micro":
            return net.micro_preset(height=image_size, width=image_size)
        if self.preset == "full":
            return net.full_preset()
        raise ValueError(f"unknown CNN preset {self.preset!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines an experiment's output files."""

    version: int = CONFIG_VERSION
    seed: int = 0
    dataset_dir: str = "data"
    model_dir: str = "models"
    output_dir: str = "results"
    camera_data: DatasetConfig = DatasetConfig(n_subjects=24, events=CAMERA_EVENTS, seed=100, prefix="c")
    instructed_data: DatasetConfig = DatasetConfig(n_subjects=40, events=NUISANCE, seed=1, prefix="s")
    cnn: CnnConfig = CnnConfig()
    sd_params: GBTParams = GBTParams(n_rounds=30, max_depth=3, learning_rate=0.3)
    coop_params: GBTParams = GBTParams(n_rounds=100, max_depth=4, learning_rate=0.1, min_child_weight=5)
    train_stride: int = 4
    coop_stride: int = 2
    calib_fraction: float = 0.25
    outer_folds: int = 2
    nested_folds: int = 5
    feature_selection: bool = False
    selection_max_features: int | None = 12
    thresholds: int = 101

    def __post_init__(self) -> None:
        if self.version != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {self.version}")
        if self.outer_folds < 2 or self.nested_folds < 2:
            raise ValueError("cross-validation needs at least two folds")
        if self.thresholds < 2:
            raise ValueError("the threshold grid needs at least two points")

    @property
    def coop_config(self) -> CoopConfig:
        return CoopConfig(
            sd_params=self.sd_params,
            coop_params=self.coop_params,
            folds=self.nested_folds,
            calib_fraction=self.calib_fraction,
            train_stride=self.train_stride,
            coop_stride=self.coop_stride,
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        for k in ("camera_data", "instructed_data"):
            if k in d:
                d[k] = DatasetConfig.from_dict(d[k])
        if "cnn" in d:
            c = dict(d["cnn"])
            if "sgd" in c:
                c["sgd"] = SGDConfig(**c["sgd"])
            d["cnn"] = CnnConfig(**c)
        for k in ("sd_params", "coop_params"):
            if k in d:
                d[k] = GBTParams(**d[k])
        return cls(**d)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Shift every seed of the experiment by the same offset."""
        off = seed - self.seed
        return replace(
            self,
            seed=seed,
            camera_data=replace(self.camera_data, seed=self.camera_data.seed + off),
            instructed_data=replace(self.instructed_data, seed=self.instructed_data.seed + off),
            cnn=replace(self.cnn, sgd=replace(self.cnn.sgd, seed=self.cnn.sgd.seed + off)),
        )


@dataclass(frozen=True)
class Paths:
    root: Path
    config: ExperimentConfig

    def _p(self, sub: str) -> Path:
        p = Path(sub)
        return p if p.is_absolute() else self.root / p

    @property
    def camera(self) -> Path:
        return self._p(self.config.dataset_dir) / "camera"

    @property
    def instructed(self) -> Path:
        return self._p(self.config.dataset_dir) / "instructed"

    @property
    def models(self) -> Path:
        return self._p(self.config.model_dir)

    @property
    def output(self) -> Path:
        return self._p(self.config.output_dir)


class MissingArtifact(FileNotFoundError):
    """A dataset or model bundle required by a stage does not exist."""


def require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{what} not found at {path}")
    return path


# -- datasets -----------------------------------------------------------------------------------


def make_datasets(paths: Paths, jobs: int = 1) -> tuple[Path, Path]:
    cfg = paths.config
    cam = write_dataset(cfg.camera_data, paths.camera, jobs)
    ins = write_dataset(cfg.instructed_data, paths.instructed, jobs)
    return cam, ins


# -- CNN -------------------------------------------------------------------------------------------


def cnn_training_set(
    scenes: Sequence[LabeledScene], spec: net.NetworkSpec, stride: int = 1
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Trailing 10-frame windows of unoccluded frames labeled with the class of their last frame."""
    xs, ys, subj = [], [], []
    for s in scenes:
        if s.images is None:
            raise ValueError(f"scene {s.scene_id} has no images")
        x = image_windows(s.images.astype(np.float64), spec.frames)
        t = s.t_cam[spec.frames - 1 :]
        keep = ~s.occluded(t)
        keep[np.arange(t.size) % stride != 0] = False
        xs.append(x[keep])
        ys.append(motion_class_of(t[keep], s.labels))
        subj += [s.subject] * int(keep.sum())
    return np.concatenate(xs), np.concatenate(ys).astype(np.int64), subj


def train_cnn(scenes: Sequence[LabeledScene], cfg: CnnConfig, seed: int) -> tuple[net.NetworkSpec, TrainResult]:
    """Train the camera detector with a subject-grouped validation split."""
    spec = cfg.spec(int(scenes[0].images.shape[1]))
    x, y, subj = cnn_training_set(scenes, spec, cfg.window_stride)
    fit_s, val_s = split_by_subject(subj, cfg.val_fraction, seed)
    is_val = np.array([s in val_s for s in subj])
    weights = net.init_weights(spec, seed)
    res = train_micro(spec, weights, x[~is_val], y[~is_val], x[is_val], y[is_val], cfg.sgd)
    return spec, res


def cnn_outputs(
    scenes: Sequence[LabeledScene], spec: net.NetworkSpec, weights: net.NetworkWeights, batch_size: int = 64
) -> dict[str, DetectorOutput]:
    return {s.scene_id: cnn_detect(s, spec, weights, batch_size) for s in scenes}


# -- smart device with optional feature selection ----------------------------------------------


def select_features(
    scenes: Sequence[LabeledScene],
    tables: dict[str, SceneFeatures],
    cfg: ExperimentConfig,
    jobs: int = 1,
) -> list[int]:
    """Forward selection on a subject-grouped split of the training scenes."""
    subjects = [s.subject for s in scenes]
    fit_s, val_s = split_by_subject(subjects, 0.3, cfg.seed)
    train = [tables[s.scene_id] for s in scenes if s.subject in fit_s]
    val = [tables[s.scene_id] for s in scenes if s.subject in val_s]
    labels = [s.labels for s in scenes if s.subject in val_s]
    n = next(iter(tables.values())).X.shape[1]
    sel = SelectionConfig(
        params=cfg.sd_params,
        train_stride=cfg.train_stride,
        max_features=cfg.selection_max_features,
        calib_fraction=cfg.calib_fraction,
        seed=cfg.seed,
        jobs=jobs,
    )
    return sffs(range(n), train, val, labels, sel).selected


def restrict(registry: Sequence[FeatureSpec], tables: dict[str, SceneFeatures], columns: Sequence[int]):
    reg = tuple(registry[i] for i in columns)
    return reg, {k: select_columns(tb, columns) for k, tb in tables.items()}


def train_sd_bundle(
    scenes: Sequence[LabeledScene], cfg: ExperimentConfig, jobs: int = 1
) -> tuple[SdDetector, dict]:
    registry = default_registry()
    tables = {s.scene_id: scene_features(s, registry) for s in scenes}
    columns = list(range(len(registry)))
    if cfg.feature_selection:
        columns = select_features(scenes, tables, cfg, jobs)
        registry, tables = restrict(registry, tables, columns)
    det = train_sd_detector(
        registry=registry,
        tables=[tables[s.scene_id] for s in scenes],
        params=cfg.sd_params,
        seed=cfg.seed,
        calib_fraction=cfg.calib_fraction,
        train_stride=cfg.train_stride,
    )
    report = {"selected_features": [f.name for f in registry], "scenes": len(scenes)}
    return replace(det, report=report), report


# -- traces ---------------------------------------------------------------------------------------


def traces_doc(outputs: dict[str, DetectorOutput]) -> dict:
    return {
        "format": TRACES_FORMAT,
        "scenes": {
            sid: {"source": o.source.value, "t": encode_array(o.t), "probs": encode_array(o.probs)}
            for sid, o in sorted(outputs.items())
        },
    }


def traces_from_doc(doc: dict) -> dict[str, DetectorOutput]:
    if doc.get("format") != TRACES_FORMAT:
        raise ValueError("not a traces file")
    return {
        sid: DetectorOutput(decode_array(d["t"]), decode_array(d["probs"]), Source(d["source"]))
        for sid, d in doc["scenes"].items()
    }


def save_traces(outputs: dict[str, DetectorOutput], path: Path) -> None:
    path.write_text(dumps_json(traces_doc(outputs)))


def load_traces(path: Path) -> dict[str, DetectorOutput]:
    return traces_from_doc(json.loads(Path(path).read_text()))


# -- cross-validated experiment ------------------------------------------------------------------


def outer_folds(scenes: Sequence[LabeledScene], k: int, seed: int) -> list[set[str]]:
    subjects = sorted({s.subject for s in scenes})
    if len(subjects) < k:
        raise ValueError(f"need at least {k} subjects for {k}-fold cross-validation")
    order = [subjects[i] for i in np.random.default_rng([seed, 11]).permutation(len(subjects))]
    return [set(order[i::k]) for i in range(k)]


@dataclass
class ExperimentResult:
    outputs: dict[str, dict[str, DetectorOutput]]
    rows: dict[str, list[ev.SweepRow]]
    summary: dict
    fold_reports: list[dict] = field(default_factory=list)


def criterion_metrics(
    scenes: Sequence[LabeledScene], outputs: dict[str, dict[str, DetectorOutput]], threshold: float = 0.5
) -> dict:
    """Phase-I noise on camera-shake scenes and phase-I false positives on close-pedestrian scenes."""
    by_id = {s.scene_id: s for s in scenes}

    def mean_std(det: str, ids: list[str]) -> float | None:
        vals = [ev.phase_one_std(outputs[det][i].trace(by_id[i])) for i in ids]
        vals = [v for v in vals if np.isfinite(v)]
        return float(np.mean(vals)) if vals else None

    def fps(det: str, ids: list[str]) -> int:
        return sum(
            ev.evaluate_scene(outputs[det][i].t, outputs[det][i].p_moving, by_id[i].labels, threshold).verdict
            is ev.Verdict.FP
            for i in ids
        )

    shake = sorted(i for i, s in by_id.items() if s.has_event("camera_shake"))
    ped = sorted(i for i, s in by_id.items() if s.has_event("pedestrian"))
    return {
        "camera_shake": {"scenes": len(shake), **{f"{d}_phase1_std": mean_std(d, shake) for d in DETECTORS}},
        "pedestrian": {
            "scenes": len(ped),
            "threshold": threshold,
            **{f"{d}_phase1_fp": fps(d, ped) for d in DETECTORS},
        },
    }


def run_experiment(
    cfg: ExperimentConfig,
    instructed: Sequence[LabeledScene],
    cnn_spec: net.NetworkSpec,
    cnn_weights: net.NetworkWeights,
    jobs: int = 1,
) -> ExperimentResult:
    """Outer subject-grouped cross-validation of all three detectors."""
    registry = default_registry()
    cnn_out = cnn_outputs(instructed, cnn_spec, cnn_weights, cfg.cnn.batch_size)
    tables = {s.scene_id: scene_features(s, registry) for s in instructed}
    outputs: dict[str, dict[str, DetectorOutput]] = {d: {} for d in DETECTORS}
    reports = []
    for f, held in enumerate(outer_folds(instructed, cfg.outer_folds, cfg.seed)):
        train = [s for s in instructed if s.subject not in held]
        test = [s for s in instructed if s.subject in held]
        reg, tabs = registry, tables
        if cfg.feature_selection:
            cols = select_features(train, tables, cfg, jobs)
            reg, tabs = restrict(registry, tables, cols)
        log.info("outer fold %d: %d training and %d test scenes", f, len(train), len(test))
        res = nested_cv_train(train, cnn_out, reg, replace(cfg.coop_config, seed=cfg.seed + f), tabs)
        for s in test:
            sd_out = sd_detect(res.sd, s, tabs[s.scene_id])
            co = detect_with_bypass(s, res.coop, sd_out, cnn_out[s.scene_id])
            outputs["sd"][s.scene_id] = sd_out
            outputs["cnn"][s.scene_id] = cnn_out[s.scene_id]
            outputs["coop"][s.scene_id] = co.as_detector_output()
        reports.append(
            {
                "fold": f,
                "test_subjects": sorted(held),
                "selected_features": [x.name for x in reg],
                "nested_folds": res.folds,
                "stacking_rows": int(sum(res.rows_per_scene.values())),
            }
        )
    by_id = {s.scene_id: s for s in instructed}
    grid = ev.default_grid(cfg.thresholds)
    rows = {}
    for d in DETECTORS:
        traces = [outputs[d][sid].trace(by_id[sid]) for sid in sorted(outputs[d])]
        rows[d] = ev.threshold_sweep(traces, grid)
    summary = {
        "detectors": {d: ev.summary(rows[d]) for d in DETECTORS},
        "criteria": criterion_metrics(instructed, outputs),
        "folds": reports,
    }
    return ExperimentResult(outputs, rows, summary, reports)


def write_results(result: ExperimentResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for d in DETECTORS:
        ev.emit_curves(result.rows[d], out / f"curves_{d}.csv")
        save_traces(result.outputs[d], out / f"traces_{d}.json")
    (out / "summary.json").write_text(dumps_json(result.summary))


# -- stages used by the command-line interface ------------------------------------------------------


def stage_train_cnn(paths: Paths, jobs: int = 1) -> Path:
    cfg = paths.config
    scenes = load_dataset(require(paths.camera / "manifest.json", "camera dataset"))
    spec, res = train_cnn(scenes, cfg.cnn, cfg.seed)
    paths.models.mkdir(parents=True, exist_ok=True)
    out = paths.models / "cnn.json"
    save_checkpoint(out, spec, res.weights)
    (paths.models / "cnn_report.json").write_text(dumps_json({"training": res.report(), "sgd": asdict(cfg.cnn.sgd)}))
    return out


def stage_train_sd(paths: Paths, jobs: int = 1) -> Path:
    cfg = paths.config
    scenes = load_dataset(require(paths.instructed / "manifest.json", "instructed dataset"))
    det, report = train_sd_bundle(scenes, cfg, jobs)
    paths.models.mkdir(parents=True, exist_ok=True)
    out = paths.models / "sd.json"
    det.save(out)
    (paths.models / "sd_report.json").write_text(dumps_json(report))
    return out


def stage_train_coop(paths: Paths, jobs: int = 1) -> Path:
    cfg = paths.config
    scenes = load_dataset(require(paths.instructed / "manifest.json", "instructed dataset"))
    spec, weights = load_checkpoint(require(paths.models / "cnn.json", "CNN bundle"))
    cnn_out = cnn_outputs(scenes, spec, weights, cfg.cnn.batch_size)
    res = nested_cv_train(scenes, cnn_out, default_registry(), cfg.coop_config)
    paths.models.mkdir(parents=True, exist_ok=True)
    out = paths.models / "coop.json"
    res.coop.save(out)
    res.sd.save(paths.models / "coop_sd.json")
    report = {
        "nested_folds": res.folds,
        "rows_per_scene": res.rows_per_scene,
        "stacking_rows": int(sum(res.rows_per_scene.values())),
    }
    (paths.models / "coop_report.json").write_text(dumps_json(report))
    return out


def stage_detect(paths: Paths, which: Sequence[str], dataset: Path | None = None) -> list[Path]:
    """Apply trained bundles to a dataset and write one traces file per detector."""
    cfg = paths.config
    ds = dataset or paths.instructed
    scenes = load_dataset(require(ds / "manifest.json" if ds.is_dir() else ds, "dataset"))
    paths.output.mkdir(parents=True, exist_ok=True)
    written = []
    cnn_out = None
    if "cnn" in which or "coop" in which:
        spec, weights = load_checkpoint(require(paths.models / "cnn.json", "CNN bundle"))
        cnn_out = cnn_outputs(scenes, spec, weights, cfg.cnn.batch_size)
    for d in which:
        if d == "sd":
            det = SdDetector.load(require(paths.models / "sd.json", "SD bundle"))
            outs = {s.scene_id: sd_detect(det, s) for s in scenes}
        elif d == "cnn":
            outs = dict(cnn_out)
        elif d == "coop":
            model = CoopModel.load(require(paths.models / "coop.json", "combiner bundle"))
            det = SdDetector.load(require(paths.models / "coop_sd.json", "combiner SD bundle"))
            outs = {
                s.scene_id: detect_with_bypass(s, model, det, cnn_out[s.scene_id]).as_detector_output()
                for s in scenes
            }
        else:
            raise ValueError(f"unknown detector {d!r}")
        p = paths.output / f"detections_{d}.json"
        save_traces(outs, p)
        written.append(p)
    return written


def stage_sweep(paths: Paths, which: Sequence[str], thresholds: int, dataset: Path | None = None) -> list[Path]:
    """Threshold sweep over previously written detection traces."""
    ds = dataset or paths.instructed
    scenes = {s.scene_id: s for s in load_dataset(require(ds / "manifest.json" if ds.is_dir() else ds, "dataset"))}
    grid = ev.default_grid(thresholds)
    written = []
    summaries = {}
    for d in which:
        outs = load_traces(require(paths.output / f"detections_{d}.json", f"{d} detections"))
        missing = sorted(set(outs) - set(scenes))
        if missing:
            raise MissingArtifact(f"detections refer to unknown scenes: {missing[:3]}")
        rows = ev.threshold_sweep([outs[k].trace(scenes[k]) for k in sorted(outs)], grid)
        p = paths.output / f"sweep_{d}.csv"
        ev.emit_curves(rows, p)
        summaries[d] = ev.summary(rows)
        written.append(p)
    (paths.output / "sweep_summary.json").write_text(dumps_json(summaries))
    return written


def stage_eval(paths: Paths, jobs: int = 1) -> ExperimentResult:
    """Full cross-validated experiment using the trained CNN bundle."""
    cfg = paths.config
    instructed = load_dataset(require(paths.instructed / "manifest.json", "instructed dataset"))
    ckpt = require(paths.models / "cnn.json", "CNN bundle")
    spec, weights = load_checkpoint(ckpt)
    result = run_experiment(cfg, instructed, spec, weights, jobs)
    write_results(result, paths.output)
    return result


__all__ = [
    "CONFIG_VERSION",
    "CnnConfig",
    "ExperimentConfig",
    "ExperimentResult",
    "MissingArtifact",
    "Paths",
    "cnn_training_set",
    "criterion_metrics",
    "make_datasets",
    "run_experiment",
    "stage_detect",
    "stage_eval",
    "stage_sweep",
    "stage_train_cnn",
    "stage_train_coop",
    "stage_train_sd",
    "train_cnn",
    "train_sd_bundle",
    "write_results",
]
