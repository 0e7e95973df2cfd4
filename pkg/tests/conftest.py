from __future__ import annotations

import numpy as np
import pytest

from coopstart import simgen
from coopstart.domain import PhaseLabels
from coopstart.simgen import DatasetConfig, EventRates, NoiseLevels, ScenarioConfig


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def labels():
    return PhaseLabels(t_start=3.0, t_moving=3.4)


def quiet_scenario(**kw) -> ScenarioConfig:
    """Noise-free scenario without device rotation unless overridden."""
    base = dict(
        waiting=3.0,
        lead=0.4,
        moving=2.0,
        noise=NoiseLevels(0.0, 0.0, 0.0, 0.0),
        random_device=False,
        seed=7,
    )
    base.update(kw)
    return ScenarioConfig(**base)


@pytest.fixture(scope="session")
def small_dataset():
    """Twelve scenes of six subjects with images and a few nuisance events."""
    cfg = DatasetConfig(
        n_subjects=6,
        scenes_per_subject=2,
        seed=21,
        events=EventRates(pedestrian=0.2, camera_shake=0.2, device_handling=0.2, occlusion=0.3, exclusive=True),
    )
    return simgen.generate_dataset(cfg)
