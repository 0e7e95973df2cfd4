"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v``; each test prints its
verdict line straight to the terminal (bypassing output capture) and then
asserts it. Criteria 8 and 9 share two complete command-line runs of the
default experiment.
"""

from __future__ import annotations

import filecmp
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
import yaml

from coopstart import cli, simgen
from coopstart import coop as C
from coopstart import pipeline as pl
from coopstart.cnn3d import layers as L
from coopstart.cnn3d.gradcheck import micro_check
from coopstart.cnn3d.train import load_checkpoint
from coopstart.detectors import SdDetector, cnn_detect, sd_detect, selection_score
from coopstart.domain import SceneEvent
from coopstart.evaluation import aggregate, evaluate_scene, threshold_sweep
from coopstart.features import dft_features, ortho_poly_coeffs, poly_reconstruct
from coopstart.learners import GBTParams, predict_proba, train_gbt

from . import handtraces as H
from .gradlayers import LAYER_CHECKS
from .oracles import conv3d_oracle, dft_oracle, random_conv_case

FULL_RUN_BUDGET = 30 * 60.0


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}")

    return emit


# -- criterion 1 ----------------------------------------------------------------------------------


def test_criterion_1_conv3d_oracle(report):
    cases = [random_conv_case(s) for s in range(200)]
    r = np.random.default_rng(7)
    cases.append((r.normal(size=(2, 5, 6, 6)), r.normal(size=(3, 2, 3, 3, 3)), r.normal(size=3), (1, 1, 1)))
    t0 = time.perf_counter()
    worst = 0.0
    for x, k, b, stride in cases:
        out = L.conv3d(x, L.ConvLayer(k, b, stride))
        worst = max(worst, float(np.max(np.abs(out - conv3d_oracle(x, k, b, stride)))))
    elapsed = time.perf_counter() - t0
    ok = len(cases) >= 100 and worst < 1e-12 and elapsed < 30.0
    report(1, ok, f"{len(cases)} cases, max abs error {worst:.2e}, {elapsed:.2f} s including the loop oracle")
    assert ok


# -- criterion 2 ----------------------------------------------------------------------------------


def test_criterion_2_gradient_checks(report):
    seeds = range(10)
    worst: dict[str, float] = {}
    for name, check in LAYER_CHECKS.items():
        worst[name] = max(max(check(s).values()) for s in seeds)
    redraws = 0
    net_worst = 0.0
    for s in seeds:
        errors, attempts = micro_check(s)
        redraws += attempts - 1
        net_worst = max(net_worst, max(errors.values()))
    worst["micro_network_3_blocks"] = net_worst
    name = max(worst, key=worst.get)
    ok = all(v < 1e-4 for v in worst.values())
    report(2, ok, f"{len(worst)} checks x 10 seeds (h=1e-4), worst {name} {worst[name]:.2e}, {redraws} kink redraws")
    assert ok


# -- criterion 3 ----------------------------------------------------------------------------------


def test_criterion_3_gbt(report):
    hand = GBTParams(n_rounds=1, learning_rate=1.0, max_depth=1, reg_lambda=1.0, min_child_weight=0.0, base_score=0.0)
    X = np.array([[0.0], [1.0]])
    m = train_gbt(X, np.array([0, 1]), hand)
    leaves = m.trees[0].value[m.trees[0].leaves(X)]
    hand_ok = abs(leaves[0] + 0.4) <= 1e-12 and abs(leaves[1] - 0.4) <= 1e-12
    hand_ok &= abs(predict_proba(m, np.array([1.0])) - 1 / (1 + math.exp(-0.4))) <= 1e-15
    mono = []
    for seed in range(5):
        r = np.random.default_rng(100 + seed)
        Xs = r.normal(size=(400, 6))
        y = (np.sin(2 * Xs[:, 0]) + Xs[:, 1] * Xs[:, 2] + r.normal(scale=0.5, size=400) > 0).astype(int)
        loss = train_gbt(Xs, y, GBTParams(n_rounds=60, learning_rate=0.3, max_depth=3)).train_loss
        mono.append(all(b <= a for a, b in zip(loss, loss[1:])))
    ok = hand_ok and all(mono)
    report(3, ok, f"leaves {leaves[0]:+.15f}/{leaves[1]:+.15f}; loss non-increasing on {sum(mono)}/5 datasets")
    assert ok


# -- criterion 4 ----------------------------------------------------------------------------------


def test_criterion_4_poly_and_dft(report):
    r = np.random.default_rng(4)
    poly_err = 0.0
    for _ in range(200):
        n = int(r.choice([4, 20, 80, 37]))
        deg = int(r.integers(0, 4))
        x = np.linspace(r.uniform(-3, 0), r.uniform(0.5, 3), n)
        w = np.polyval(r.normal(scale=3, size=deg + 1), x)
        poly_err = max(poly_err, float(np.max(np.abs(poly_reconstruct(ortho_poly_coeffs(w), n) - w))))
    dft_err = 0.0
    for s in range(50):
        w = np.random.default_rng(s).normal(size=64) * (1 + s)
        dft_err = max(dft_err, float(np.max(np.abs(dft_features(w) - dft_oracle(w, 10)))))
    cos3 = np.cos(2 * np.pi * 3 * np.arange(64) / 64)
    dft_err = max(dft_err, abs(dft_features(cos3)[3] - 1 / math.sqrt(2)))
    ok = poly_err < 1e-9 and dft_err < 1e-10
    report(4, ok, f"poly reconstruction max error {poly_err:.2e}; DFT vs direct summation max error {dft_err:.2e}")
    assert ok


# -- criterion 5 ----------------------------------------------------------------------------------


def test_criterion_5_selection_score(report):
    exact = selection_score(1.0, 0.0)
    h = math.exp(-(0.1**2) / 0.075)
    oracle = 2 * 0.8 * h / (0.8 + h)
    got = selection_score(0.8, 0.1)
    ok = exact == 1.0 and abs(got - oracle) <= 1e-5
    report(
        5,
        ok,
        f"score(1,0)={exact!r}; score(0.8,0.1)={got:.6f} vs direct formula evaluation {oracle:.6f} "
        f"(diff {abs(got - oracle):.1e}, tolerance 1e-5)",
    )
    assert ok


# -- criterion 6 ----------------------------------------------------------------------------------


def test_criterion_6_evaluation_protocol(report):
    traces = H.traces()
    verdicts_ok = True
    for tr, (_, _, _, verdict, t_d, dt) in zip(traces, H.CASES):
        out = evaluate_scene(tr.t, tr.p, tr.labels, H.THRESHOLD)
        verdicts_ok &= out.verdict.value == verdict and out.t_d == t_d and out.dt == dt
    agg = aggregate(evaluate_scene(tr.t, tr.p, tr.labels, H.THRESHOLD) for tr in traces)
    mean_ok = agg.mean_dt == H.EXPECTED_MEAN_DT and (agg.tp, agg.fp, agg.fn) == (12, 5, 3)
    rows = threshold_sweep(traces)
    total_ok = len(rows) == 101 and all(r.tp + r.fp + r.fn == len(traces) for r in rows)
    fp_ok = all(b.fp <= a.fp for a, b in zip(rows, rows[1:]))
    ok = verdicts_ok and mean_ok and total_ok and fp_ok
    report(
        6,
        ok,
        f"20 hand traces: verdicts {'match' if verdicts_ok else 'differ'}, mean dt {agg.mean_dt!r} "
        f"(hand {H.EXPECTED_MEAN_DT!r}); TP+FP+FN=20 at all 101 thresholds: {total_ok}; FP non-increasing: {fp_ok}",
    )
    assert ok


# -- full runs shared by criteria 7 to 9 ------------------------------------------------------------


def _cli_run(root: Path) -> float:
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "experiment.yaml"
    cfg.write_text(yaml.safe_dump({"version": 1, "seed": 0}))
    t0 = time.perf_counter()
    for cmd in (["simgen"], ["train", "--which", "cnn-micro"], ["train", "--which", "sd"],
                ["train", "--which", "coop"], ["eval"]):
        code = cli.main([*cmd, "--config", str(cfg)])
        if code != 0:
            raise RuntimeError(f"coopstart {' '.join(cmd)} exited with {code}")
    return time.perf_counter() - t0


@pytest.fixture(scope="module")
def full_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("acceptance")
    first = _cli_run(base / "run_a")
    second = _cli_run(base / "run_b")
    return base / "run_a", base / "run_b", first, second


# -- criterion 7 ----------------------------------------------------------------------------------


def test_criterion_7_occlusion_bypass(report, full_runs):
    root = full_runs[0]
    model = C.CoopModel.load(root / "models" / "coop.json")
    sd = SdDetector.load(root / "models" / "coop_sd.json")
    spec, weights = load_checkpoint(root / "models" / "cnn.json")
    cfg = pl.ExperimentConfig().instructed_data
    plain = simgen.scenario_configs(simgen.DatasetConfig(n_subjects=6, scenes_per_subject=1, seed=77, noise=cfg.noise))
    scenes = []
    for i, c in enumerate(plain):
        end = c.end_time
        occl = SceneEvent("occlusion", 0.0, end, 1.0) if i % 2 == 0 else SceneEvent("occlusion", 2.0, 3.0, 1.0)
        scenes.append(simgen.generate_scene(simgen.with_events(c, occl)))
    frames, mismatches = 0, 0
    for s in scenes:
        sd_out = sd_detect(sd, s)
        out = C.detect_with_bypass(s, model, sd_out, cnn_detect(s, spec, weights))
        assert np.array_equal(out.t, sd_out.t)
        inside = s.occluded(out.t)
        frames += int(inside.sum())
        mismatches += int(np.count_nonzero(out.p[inside].view(np.uint64) != sd_out.p_moving[inside].view(np.uint64)))
    ok = frames > 0 and mismatches == 0
    report(7, ok, f"{len(scenes)} scenes (3 fully, 3 partially occluded), {frames} occluded frames, {mismatches} bit mismatches")
    assert ok


# -- criterion 8 ----------------------------------------------------------------------------------


def test_criterion_8_qualitative_reproduction(report, full_runs):
    root, _, elapsed, _ = full_runs
    summary = json.loads((root / "results" / "summary.json").read_text())
    manifest = simgen.read_manifest(root / "data" / "instructed" / "manifest.json")
    n_subj = len({e["subject"] for e in manifest["scenes"]})
    n_scenes = len(manifest["scenes"])
    nuisance = simgen.EventRates(**{**manifest["config"]["events"], "pedestrian_proximity": (0.7, 1.0)}).any()
    best = {d: summary["detectors"][d]["best"]["f1"] for d in pl.DETECTORS}
    crit = summary["criteria"]
    std_cnn, std_coop = crit["camera_shake"]["cnn_phase1_std"], crit["camera_shake"]["coop_phase1_std"]
    fp_cnn, fp_coop = crit["pedestrian"]["cnn_phase1_fp"], crit["pedestrian"]["coop_phase1_fp"]
    a = best["coop"] >= best["sd"] and best["coop"] >= best["cnn"]
    b = crit["camera_shake"]["scenes"] > 0 and std_coop <= 0.5 * std_cnn
    c = crit["pedestrian"]["scenes"] > 0 and fp_coop <= fp_cnn
    data_ok = n_subj >= 40 and n_scenes >= 60 and nuisance
    ok = a and b and c and data_ok and elapsed < FULL_RUN_BUDGET
    report(
        8,
        ok,
        f"{n_subj} subjects/{n_scenes} scenes; (a) best F1 coop {best['coop']:.3f} sd {best['sd']:.3f} cnn {best['cnn']:.3f}; "
        f"(b) shake phase-I std coop {std_coop:.4f} vs cnn {std_cnn:.4f} (ratio {std_coop / std_cnn:.3f}); "
        f"(c) pedestrian FPs coop {fp_coop} vs cnn {fp_cnn}; full run {elapsed:.0f} s",
    )
    assert ok


# -- criterion 9 ----------------------------------------------------------------------------------


def test_criterion_9_determinism(report, full_runs):
    run_a, run_b, _, _ = full_runs
    files = sorted(p.relative_to(run_a) for p in (run_a / "models").glob("*.json"))
    files += sorted(p.relative_to(run_a) for p in (run_a / "results").glob("curves_*.csv"))
    files += [Path("results/summary.json")]
    differing = [str(f) for f in files if not filecmp.cmp(run_a / f, run_b / f, shallow=False)]
    ok = len(files) >= 9 and not differing
    report(9, ok, f"{len(files)} bundles and tables compared byte for byte, {len(differing)} differ {differing}")
    assert ok
