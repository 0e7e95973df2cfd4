from __future__ import annotations

import numpy as np
import pytest

from coopstart import simgen
from coopstart.domain import Phase, SceneEvent, group_by_subject, phases_of
from coopstart.signal import scene_channels

from .conftest import quiet_scenario


def test_same_config_gives_identical_scene():
    cfg = quiet_scenario(noise=simgen.NoiseLevels(), random_device=True, seed=11)
    a, b = simgen.generate_scene(cfg), simgen.generate_scene(cfg)
    assert simgen.scene_digest(a) == simgen.scene_digest(b)
    assert a.acc_raw.tobytes() == b.acc_raw.tobytes()
    other = simgen.generate_scene(quiet_scenario(noise=simgen.NoiseLevels(), random_device=True, seed=12))
    assert simgen.scene_digest(other) != simgen.scene_digest(a)


def test_noise_free_phase_one_is_silent():
    scene = simgen.generate_scene(quiet_scenario(render_images=False))
    ch = scene_channels(scene)
    phase1 = phases_of(scene.t_imu, scene.labels) == int(Phase.I)
    assert not ch.stacked()[:, phase1].any()
    moving = ~phase1
    assert np.abs(ch.acc_h[moving]).max() > 0.1


def test_sampled_streams_and_labels():
    cfg = quiet_scenario(render_images=True, image_size=8)
    scene = simgen.generate_scene(cfg)
    assert scene.labels.t_start == cfg.waiting
    assert scene.labels.t_moving == pytest.approx(cfg.waiting + cfg.lead)
    assert np.allclose(np.diff(scene.t_imu), 0.01)
    assert np.allclose(np.diff(scene.t_cam), 1 / 50)
    assert scene.images.shape == (scene.t_cam.size, 8, 8)


@pytest.mark.parametrize("kind", ["seesaw", "pedal_prep", "device_handling"])
def test_inertial_nuisance_in_phase_one_keeps_labels(kind):
    base = quiet_scenario(render_images=False, waiting=4.0)
    plain = simgen.generate_scene(base)
    noisy = simgen.generate_scene(simgen.with_events(base, SceneEvent(kind, 1.0, 2.5, 1.0)))
    assert noisy.labels == plain.labels
    ch = scene_channels(noisy)
    inside = (noisy.t_imu >= 1.0) & (noisy.t_imu <= 2.5)
    energy = ch.acc_h**2 + ch.gyro_h**2 + ch.gyro_v**2 + ch.acc_v**2
    assert energy[inside].max() > 0.01
    assert not scene_channels(plain).stacked()[:, inside].any()


def test_camera_events_leave_imu_untouched():
    base = quiet_scenario(image_size=8)
    plain = simgen.generate_scene(base)
    for ev in (SceneEvent("camera_shake", 0.2, 3.5, 1.2), SceneEvent("pedestrian", 1.0, 2.2, 0.9)):
        other = simgen.generate_scene(simgen.with_events(base, ev))
        assert other.acc.tobytes() == plain.acc.tobytes()
        assert other.images.tobytes() != plain.images.tobytes()


def test_occlusion_event_sets_intervals():
    scene = simgen.generate_scene(simgen.with_events(quiet_scenario(render_images=False), SceneEvent("occlusion", 1.0, 2.0)))
    assert scene.occlusions == ((1.0, 2.0),)


def test_invalid_configs_rejected():
    with pytest.raises(ValueError):
        quiet_scenario(waiting=0.0)
    with pytest.raises(ValueError):
        simgen.with_events(quiet_scenario(), SceneEvent("meteor", 0.0, 1.0))
    with pytest.raises(ValueError):
        simgen.with_events(quiet_scenario(), SceneEvent("seesaw", 1.0, 99.0))
    with pytest.raises(ValueError):
        simgen.EventRates(pedestrian=1.5)
    with pytest.raises(ValueError):
        simgen.EventRates(pedestrian=0.6, seesaw=0.6, exclusive=True)
    with pytest.raises(ValueError):
        simgen.DatasetConfig(n_subjects=0)


def test_dataset_shape_and_grouping():
    cfg = simgen.DatasetConfig(n_subjects=49, scenes_per_subject=2, seed=1, render_images=False)
    configs = simgen.scenario_configs(cfg)
    assert len(configs) == 98
    groups: dict[str, int] = {}
    for c in configs:
        groups[c.subject] = groups.get(c.subject, 0) + 1
    assert len(groups) == 49 and max(groups.values()) <= 2


def test_exclusive_events_at_most_one_nuisance():
    cfg = simgen.DatasetConfig(n_subjects=60, scenes_per_subject=2, seed=4, events=simgen.NUISANCE, render_images=False)
    kinds_seen = set()
    for c in simgen.scenario_configs(cfg):
        kinds = [e.kind for e in c.events if e.kind != "occlusion"]
        assert len(kinds) <= 1
        kinds_seen.update(e.kind for e in c.events)
    assert kinds_seen == set(simgen.EVENT_KINDS)


def test_dataset_independent_of_jobs(small_dataset):
    cfg = simgen.DatasetConfig(n_subjects=3, scenes_per_subject=1, seed=21, image_size=8)
    a = simgen.generate_dataset(cfg, jobs=1)
    b = simgen.generate_dataset(cfg, jobs=2)
    assert [simgen.scene_digest(s) for s in a] == [simgen.scene_digest(s) for s in b]
    assert sorted(group_by_subject(small_dataset)) == [f"s{i:03d}" for i in range(6)]


def test_written_dataset_is_reproducible(tmp_path):
    cfg = simgen.DatasetConfig(n_subjects=2, scenes_per_subject=1, seed=3, image_size=8, events=simgen.NUISANCE)
    m1 = simgen.write_dataset(cfg, tmp_path / "a")
    m2 = simgen.write_dataset(cfg, tmp_path / "b")
    assert m1.read_bytes() == m2.read_bytes()
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    loaded = simgen.load_dataset(tmp_path / "a")
    fresh = simgen.generate_dataset(cfg)
    assert [simgen.scene_digest(s) for s in loaded] == [simgen.scene_digest(s) for s in fresh]
    assert simgen.DatasetConfig.from_dict(simgen.read_manifest(m1)["config"]) == cfg
