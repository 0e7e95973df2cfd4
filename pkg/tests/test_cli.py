from __future__ import annotations

import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest
import yaml

from coopstart import cli
from coopstart import pipeline as pl

TINY = {
    "version": 1,
    "seed": 3,
    "camera_data": {"n_subjects": 3, "scenes_per_subject": 1, "seed": 50, "prefix": "c", "image_size": 8},
    "instructed_data": {
        "n_subjects": 10,
        "scenes_per_subject": 1,
        "seed": 5,
        "image_size": 8,
        "events": {"pedestrian": 0.3, "camera_shake": 0.3, "device_handling": 0.2, "occlusion": 0.2, "exclusive": True},
    },
    "cnn": {"preset": "micro", "sgd": {"epochs": 1, "learning_rate": 0.005}, "window_stride": 4},
    "sd_params": {"n_rounds": 5, "max_depth": 2, "learning_rate": 0.3},
    "coop_params": {"n_rounds": 5, "max_depth": 2, "learning_rate": 0.3},
}


def write_config(directory: Path, doc: dict = TINY, name: str = "exp.yaml") -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / name
    path.write_text(yaml.safe_dump(doc))
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A tiny experiment taken through every subcommand once."""
    root = tmp_path_factory.mktemp("cli")
    cfg = str(write_config(root))
    codes = {}
    for cmd in (["simgen"], ["train", "--which", "cnn-micro"], ["train", "--which", "sd"],
                ["train", "--which", "coop"], ["detect"], ["sweep"], ["eval"]):
        codes[" ".join(cmd)] = cli.main([*cmd, "--config", cfg])
    return root, cfg, codes


def test_every_stage_succeeds(workspace):
    root, _, codes = workspace
    assert set(codes.values()) == {cli.EXIT_OK}, codes
    for name in ("cnn.json", "sd.json", "coop.json", "coop_sd.json", "coop_report.json"):
        assert (root / "models" / name).exists()
    for d in pl.DETECTORS:
        assert (root / "results" / f"curves_{d}.csv").exists()
        assert len(pl.load_traces(root / "results" / f"detections_{d}.json")) == 10
    summary = json.loads((root / "results" / "summary.json").read_text())
    assert set(summary["detectors"]) == set(pl.DETECTORS)


def test_sweep_tables_parse(workspace):
    from coopstart.evaluation import read_curves

    root, _, _ = workspace
    rows = read_curves(root / "results" / "sweep_coop.csv")
    assert len(rows) == 101 and all(r.tp + r.fp + r.fn == 10 for r in rows)


def test_reruns_are_byte_identical(workspace):
    root, cfg, _ = workspace
    before = {p: (root / p).read_bytes() for p in ("data/instructed/manifest.json", "models/sd.json", "results/sweep_sd.csv")}
    assert cli.main(["simgen", "--config", cfg]) == 0
    assert cli.main(["train", "--which", "sd", "--config", cfg]) == 0
    assert cli.main(["sweep", "--which", "sd", "--config", cfg]) == 0
    for p, data in before.items():
        assert (root / p).read_bytes() == data, p


def test_sweep_threshold_count(workspace):
    root, cfg, _ = workspace
    assert cli.main(["sweep", "--which", "cnn", "--thresholds", "11", "--config", cfg]) == 0
    assert len((root / "results" / "sweep_cnn.csv").read_text().splitlines()) == 12
    assert cli.main(["sweep", "--which", "cnn", "--config", cfg]) == 0


def test_missing_artifacts_exit_3(tmp_path, capsys):
    cfg = str(write_config(tmp_path))
    assert cli.main(["eval", "--config", cfg]) == cli.EXIT_MISSING
    assert cli.main(["train", "--which", "sd", "--config", cfg]) == cli.EXIT_MISSING
    assert cli.main(["detect", "--which", "sd", "--config", cfg]) == cli.EXIT_MISSING
    assert "not found" in capsys.readouterr().err


def test_missing_model_bundle_exit_3(workspace, tmp_path):
    root, _, _ = workspace
    shutil.copytree(root / "data", tmp_path / "data")
    cfg = str(write_config(tmp_path))
    assert cli.main(["detect", "--which", "coop", "--config", cfg]) == cli.EXIT_MISSING


@pytest.mark.parametrize(
    "args",
    [
        ["--set", "nonexistent=1"],
        ["--set", "instructed_data.n_subjects=0"],
        ["--set", "version=2"],
        ["--set", "cnn.preset=huge"],
        ["--set", "cnn=3"],
        ["--set", "novalue"],
        ["--jobs", "0"],
    ],
)
def test_invalid_configuration_exit_2(tmp_path, args, capsys):
    cfg = str(write_config(tmp_path))
    assert cli.main(["simgen", "--config", cfg, *args]) == cli.EXIT_CONFIG
    assert capsys.readouterr().err


def test_unreadable_configs_exit_2(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("version: [1\n")
    assert cli.main(["simgen", "--config", str(bad)]) == cli.EXIT_CONFIG
    bad.write_text("- 1\n- 2\n")
    assert cli.main(["simgen", "--config", str(bad)]) == cli.EXIT_CONFIG
    assert cli.main(["simgen", "--config", str(tmp_path / "absent.yaml")]) == cli.EXIT_CONFIG


def test_coop_training_on_four_subjects_fails(tmp_path, capsys):
    doc = json.loads(json.dumps(TINY))
    doc["instructed_data"]["n_subjects"] = 4
    cfg = str(write_config(tmp_path, doc))
    assert cli.main(["simgen", "--config", cfg]) == 0
    assert cli.main(["train", "--which", "cnn-micro", "--config", cfg]) == 0
    assert cli.main(["train", "--which", "coop", "--config", cfg]) == cli.EXIT_RUNTIME
    assert "at least 5 subjects" in capsys.readouterr().err


def test_load_config_overrides_and_seed(tmp_path):
    cfg_path = write_config(tmp_path / "conf")
    cfg, base = cli.load_config(cfg_path, ["coop_stride=3", "instructed_data.seed=40"], seed=10)
    assert base == (tmp_path / "conf").resolve()
    assert cfg.coop_stride == 3
    assert cfg.seed == 10
    assert cfg.instructed_data.seed == 47  # 40 shifted by the same offset as the base seed
    assert cfg.camera_data.seed == 57
    paths = pl.Paths(base, cfg)
    assert paths.models == base / "models"


def test_defaults_without_config(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg, base = cli.load_config(None)
    assert cfg == pl.ExperimentConfig() and base == tmp_path


def test_schema_accepts_every_default_field():
    import jsonschema

    doc = json.loads(json.dumps(pl.ExperimentConfig().to_dict()))
    jsonschema.validate(doc, cli.config_schema())
    assert pl.ExperimentConfig.from_dict(json.loads(json.dumps(doc))) == pl.ExperimentConfig()


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "coopstart", "--help"], capture_output=True, text=True, check=True)
    for sub in ("simgen", "train", "detect", "eval", "sweep"):
        assert sub in out.stdout
