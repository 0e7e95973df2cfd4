from __future__ import annotations

import numpy as np
import pytest

from coopstart import coop as C
from coopstart import detectors as DT
from coopstart import simgen
from coopstart.cnn3d import network as N
from coopstart.domain import ClassProbs, SceneEvent
from coopstart.features import NotClassifiable, default_registry, gram_basis
from coopstart.learners import GBTParams, IDENTITY_CALIBRATION, train_gbt

from .conftest import quiet_scenario

SPEC = N.micro_preset()
WEIGHTS = N.init_weights(SPEC, 0)
FAST = GBTParams(n_rounds=10, max_depth=2, learning_rate=0.3)


def _scene(*events, seed=3, **kw):
    cfg = quiet_scenario(image_size=8, noise=simgen.NoiseLevels(), seed=seed, **kw)
    return simgen.generate_scene(simgen.with_events(cfg, *events))


def _fake_sd(scene):
    """A smart-device output with a distinct, deterministic value per frame."""
    t = scene.t_imu[80:]
    p = 0.5 + 0.4 * np.sin(7.0 * t)
    return DT.DetectorOutput(t.copy(), DT.binary_probs(p), DT.Source.SD)


@pytest.fixture(scope="module")
def coop_model():
    r = np.random.default_rng(0)
    X = r.normal(size=(400, C.STACKED_SIZE))
    y = (X[:, 11] + X[:, 2] > 0).astype(int)
    return C.CoopModel(train_gbt(X, y, FAST), IDENTITY_CALIBRATION)


def _run(scene, model, cnn=True):
    sd_out = _fake_sd(scene)
    cnn_out = DT.cnn_detect(scene, SPEC, WEIGHTS) if cnn else None
    return sd_out, C.detect_with_bypass(scene, model, sd_out, cnn_out)


def test_stacked_layout():
    assert C.STACKED_SIZE == 28 == len(C.STACKED_NAMES) == len(set(C.STACKED_NAMES))


def test_bus_payload_accounting():
    scene = _scene(SceneEvent("occlusion", 1.0, 1.5, 1.0))
    sd_out = _fake_sd(scene)
    cnn_out = DT.cnn_detect(scene, SPEC, WEIGHTS)
    bus = C.publish_scene(scene, sd_out, cnn_out)
    visible = int((~scene.occluded(cnn_out.t)).sum())
    assert bus.counts == {"acc": scene.t_imu.size, "sd_prob": len(sd_out), "camera": visible}
    assert bus.bytes_sent == 8 * (scene.t_imu.size + len(sd_out) + 6 * visible)


def test_bus_ordering_and_replay(tmp_path, coop_model):
    scene = _scene()
    sd_out = _fake_sd(scene)
    bus = C.publish_scene(scene, sd_out, DT.cnn_detect(scene, SPEC, WEIGHTS))
    times = [m.t for m in bus.delivered()]
    assert times == sorted(times)
    bus.dump(tmp_path / "log.jsonl")
    back = C.MessageBus.replay(tmp_path / "log.jsonl")
    a = C.combine(bus.delivered(), coop_model, scene.camera_rate)
    b = C.combine(back.delivered(), coop_model, scene.camera_rate)
    assert a.p.tobytes() == b.p.tobytes()
    (tmp_path / "bad.jsonl").write_text('{"format": "other"}\n')
    with pytest.raises(ValueError):
        C.MessageBus.replay(tmp_path / "bad.jsonl")
    fresh = C.MessageBus()
    fresh.publish(C.SdDetectionMsg(1.0, 0.0, None))
    with pytest.raises(ValueError):
        fresh.publish(C.SdDetectionMsg(0.5, 0.0, None))


def test_lost_messages_fall_back_to_sd(coop_model):
    class DropCamera:
        def delivery_time(self, msg):
            return None if msg.kind == "camera" else msg.t

    scene = _scene()
    sd_out = _fake_sd(scene)
    bus = C.publish_scene(scene, sd_out, DT.cnn_detect(scene, SPEC, WEIGHTS), C.MessageBus(DropCamera()))
    out = C.combine(bus.delivered(), coop_model, scene.camera_rate)
    assert out.bypassed.all() and np.array_equal(out.p, sd_out.p_moving)


def test_head_velocity_examples():
    t = np.arange(50) / 50.0
    still = np.tile([1.0, 2.0, 1.6], (50, 1))
    assert not C.head_velocity(t, still, np.arange(100) / 100.0).any()
    d = np.array([0.6, 0.8, 0.0])
    moving = still + 1.5 * t[:, None] * d
    v = C.head_velocity(t, moving, np.arange(5, 95) / 100.0)
    assert np.max(np.abs(v - 1.5)) < 1e-9
    with pytest.raises(ValueError):
        C.head_velocity(t[:1], still[:1], t)


def test_causal_head_speed_on_linear_motion():
    cam = np.arange(20)[:, None] * np.array([0.03, 0.0, 0.0])  # 1.5 m/s at 50 Hz
    speed = C.head_speed(cam, np.arange(20), 50.0)
    assert speed[0] == speed[1] == 0.0
    assert np.allclose(speed[2:], 1.5, atol=1e-12)


def test_assemble_stacked_examples():
    hist = [ClassProbs(0.6, 0.1, 0.3)] * 3
    f = C.assemble_stacked(2.0, hist, [0.4] * 3, np.zeros(80), np.zeros(80))
    assert f.values[:9].tolist() == [0.6, 0.1, 0.3] * 3
    assert f.values[9:12].tolist() == [0.4] * 3
    assert not f.values[12:].any()
    c = 2.0
    f = C.assemble_stacked(2.0, hist, [0.4] * 3, np.full(80, c), np.zeros(80))
    assert f.values[12] == pytest.approx(c * np.sqrt(20), abs=1e-12)
    assert f.values[16] == pytest.approx(c * np.sqrt(80), abs=1e-12)
    assert np.allclose(f.values[[13, 14, 15, 17, 18, 19]], 0.0, atol=1e-12)
    with pytest.raises(NotClassifiable):
        C.assemble_stacked(2.0, hist[:2], [0.4] * 3, np.zeros(80), np.zeros(80))
    with pytest.raises(NotClassifiable):
        C.assemble_stacked(2.0, hist, [0.4] * 3, np.zeros(79), np.zeros(80))


def test_stacked_matrix_agrees_with_pointwise_assembly():
    scene = _scene()
    sd_out = _fake_sd(scene)
    bus = C.publish_scene(scene, sd_out, DT.cnn_detect(scene, SPEC, WEIGHTS))
    rx = C.receive(bus.delivered(), scene.camera_rate)
    X, valid = C.stacked_matrix(rx)
    rows = np.flatnonzero(valid)
    assert rows.size and not X[~valid].any()
    k_of = np.floor(rx.t * scene.camera_rate + 1e-9).astype(int)
    speed = C.head_speed(rx.cam_head, k_of, scene.camera_rate)
    for i in (rows[0], rows[rows.size // 2], rows[-1]):
        k = k_of[i]
        hist = [ClassProbs(*rx.cam_probs[j]) for j in (k - 2, k - 1, k)]
        f = C.assemble_stacked(rx.t[i], hist, rx.p_sd[i - 2 : i + 1], rx.acc[i - 79 : i + 1], speed[i - 79 : i + 1])
        assert np.allclose(f.values, X[i], atol=1e-12)


def test_coop_classify_contract(coop_model, rng):
    x = rng.normal(size=C.STACKED_SIZE)
    assert C.coop_classify(x, coop_model) == C.coop_classify(C.StackedFeatures(x), coop_model)
    with pytest.raises(ValueError):
        C.coop_classify(np.zeros(5), coop_model)
    with pytest.raises(ValueError):
        C.StackedFeatures(np.full(C.STACKED_SIZE, np.nan))


def test_coop_model_roundtrip(coop_model, tmp_path, rng):
    coop_model.save(tmp_path / "coop.json")
    back = C.CoopModel.load(tmp_path / "coop.json")
    X = rng.normal(size=(20, C.STACKED_SIZE))
    assert np.array_equal(C.coop_classify(X, back), C.coop_classify(X, coop_model))


def test_fully_occluded_scene_equals_sd(coop_model):
    scene = _scene(SceneEvent("occlusion", 0.0, quiet_scenario().end_time, 1.0))
    sd_out, out = _run(scene, coop_model)
    assert np.array_equal(out.t, sd_out.t)
    assert out.p.tobytes() == sd_out.p_moving.tobytes()


def test_partial_occlusion_matches_sd_inside_interval(coop_model):
    scene = _scene(SceneEvent("occlusion", 2.0, 3.0, 1.0), waiting=3.0, moving=2.0)
    sd_out, out = _run(scene, coop_model)
    inside = (out.t >= 2.0) & (out.t <= 3.0)
    assert inside.sum() == 101
    assert out.p[inside].tobytes() == sd_out.p_moving[inside].tobytes()
    assert out.bypassed[inside].all()
    # camera history is rebuilt after the occlusion before the combiner resumes
    after = out.t > 3.0
    assert out.bypassed[after & (out.t < 3.8)].all()
    assert not out.bypassed[after & (out.t > 4.0)].any()


def test_no_occlusion_bypasses_only_during_warm_up(coop_model):
    scene = _scene()
    sd_out, out = _run(scene, coop_model)
    assert not out.bypassed[out.t >= 1.6].any()
    assert out.bypassed[out.t < 0.98].all()


def test_without_camera_output_equals_sd(coop_model):
    scene = _scene()
    sd_out, out = _run(scene, coop_model, cnn=False)
    assert out.p.tobytes() == sd_out.p_moving.tobytes()


def test_combination_is_causal(coop_model):
    scene = _scene()
    sd_out = _fake_sd(scene)
    bus = C.publish_scene(scene, sd_out, DT.cnn_detect(scene, SPEC, WEIGHTS))
    full = C.combine(bus.delivered(), coop_model, scene.camera_rate)
    for cut in (1.234, 2.5, 4.01):
        part = C.combine(bus.delivered(until=cut), coop_model, scene.camera_rate)
        n = part.t.size
        assert np.array_equal(part.t, full.t[:n]) and part.t[-1] <= cut
        assert part.p.tobytes() == full.p[:n].tobytes()


def test_subject_folds_partition():
    subj = [f"s{i}" for i in range(12)]
    folds = C.subject_folds(subj, 5, 0)
    assert sorted(sum(folds, [])) == sorted(subj)
    assert all(len(f) in (2, 3) for f in folds)
    with pytest.raises(ValueError, match="at least 5 subjects"):
        C.subject_folds(subj[:4], 5, 0)


@pytest.fixture(scope="module")
def nested():
    cfg = simgen.DatasetConfig(
        n_subjects=5, scenes_per_subject=1, seed=9, image_size=8,
        events=simgen.EventRates(occlusion=1.0),
    )
    scenes = simgen.generate_dataset(cfg)
    cnn = {s.scene_id: DT.cnn_detect(s, SPEC, WEIGHTS) for s in scenes}
    res = C.nested_cv_train(scenes, cnn, default_registry(), C.CoopConfig(sd_params=FAST, coop_params=FAST, train_stride=4))
    return scenes, cnn, res


def test_nested_training_contract(nested):
    scenes, cnn, res = nested
    assert sorted(res.nested_sd) == sorted(s.scene_id for s in scenes)
    for held in res.folds:
        assert len(held) == 1
    assert res.coop.report["rows"] == sum(res.rows_per_scene.values())
    for s in scenes:
        X, y, t = C.stacking_rows(s, res.nested_sd[s.scene_id], cnn[s.scene_id])
        assert res.rows_per_scene[s.scene_id] == y.size > 0
        assert not s.occluded(t).any()
        # every classifiable, visible frame contributes exactly one row
        assert np.unique(t).size == t.size


def test_nested_training_rejects_four_subjects(nested):
    scenes, cnn, _ = nested
    with pytest.raises(ValueError, match="at least 5 subjects"):
        C.nested_cv_train(scenes[:4], cnn, default_registry(), C.CoopConfig(sd_params=FAST, coop_params=FAST))
