"""Scene-wise evaluation: first-crossing verdicts, F1/precision, mean detection time, sweeps.

Every scene yields exactly one verdict for a threshold ``s``. The detection
time is the first output timestamp whose moving probability reaches ``s``.
A detection in phase I is a false positive, one in phase II or III a true
positive, and a scene without detection a false negative. True negatives do
not exist in this protocol.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .domain import Phase, PhaseLabels, phase_of, phases_of

CURVE_HEADER = ("threshold", "f1", "precision", "mean_dt", "tp", "fp", "fn")


class Verdict(str, enum.Enum):
    TP = "TP"
    FP = "FP"
    FN = "FN"


@dataclass(frozen=True)
class SceneOutcome:
    verdict: Verdict
    t_d: float | None = None
    dt: float | None = None

    def __post_init__(self) -> None:
        if (self.t_d is None) != (self.verdict is Verdict.FN):
            raise ValueError("a detection time is present iff the verdict is not FN")
        if (self.dt is None) != (self.verdict is not Verdict.TP):
            raise ValueError("a time difference is present iff the verdict is TP")


@dataclass(frozen=True)
class Aggregate:
    f1: float
    precision: float
    recall: float
    mean_dt: float | None
    tp: int
    fp: int
    fn: int


@dataclass(frozen=True)
class SweepRow:
    threshold: float
    f1: float
    precision: float
    mean_dt: float | None
    tp: int
    fp: int
    fn: int


@dataclass(frozen=True)
class Trace:
    """Moving probability of one scene together with its labels."""

    t: np.ndarray
    p: np.ndarray
    labels: PhaseLabels
    scene_id: str = ""

    def __post_init__(self) -> None:
        if np.shape(self.t) != np.shape(self.p) or np.ndim(self.t) != 1:
            raise ValueError("trace times and probabilities must be aligned 1-d arrays")


def evaluate_scene(t: np.ndarray, p: np.ndarray, labels: PhaseLabels, s: float) -> SceneOutcome:
    t = np.asarray(t, dtype=float)
    p = np.asarray(p, dtype=float)
    if t.size == 0:
        raise ValueError("empty detector output")
    if t.shape != p.shape:
        raise ValueError("times and probabilities differ in length")
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"threshold {s} outside [0, 1]")
    hits = np.flatnonzero(p >= s)
    if hits.size == 0:
        return SceneOutcome(Verdict.FN)
    t_d = float(t[hits[0]])
    if phase_of(t_d, labels) is Phase.I:
        return SceneOutcome(Verdict.FP, t_d)
    return SceneOutcome(Verdict.TP, t_d, t_d - labels.t_moving)


def _scores(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    # equal to the harmonic mean of precision and recall, with a single rounding
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return f1, precision, recall


def aggregate(outcomes: Iterable[SceneOutcome]) -> Aggregate:
    outcomes = list(outcomes)
    if not outcomes:
        raise ValueError("no outcomes to aggregate")
    tp = sum(o.verdict is Verdict.TP for o in outcomes)
    fp = sum(o.verdict is Verdict.FP for o in outcomes)
    fn = sum(o.verdict is Verdict.FN for o in outcomes)
    f1, precision, recall = _scores(tp, fp, fn)
    dts = [o.dt for o in outcomes if o.verdict is Verdict.TP]
    mean_dt = math.fsum(dts) / len(dts) if dts else None
    return Aggregate(f1, precision, recall, mean_dt, tp, fp, fn)


def default_grid(n: int = 101) -> np.ndarray:
    return np.round(np.linspace(0.0, 1.0, n), 10)


def first_crossings(trace: Trace, grid: np.ndarray) -> np.ndarray:
    """Index of the first frame with ``p >= s`` for every threshold (``-1`` if none)."""
    runmax = np.maximum.accumulate(np.asarray(trace.p, dtype=float))
    idx = np.searchsorted(runmax, grid, side="left")
    return np.where(idx < runmax.size, idx, -1)


def scene_outcomes(trace: Trace, grid: np.ndarray) -> list[SceneOutcome]:
    out = []
    t = np.asarray(trace.t, dtype=float)
    idx = first_crossings(trace, grid)
    for k in idx:
        if k < 0:
            out.append(SceneOutcome(Verdict.FN))
            continue
        t_d = float(t[k])
        if phases_of(np.array([t_d]), trace.labels)[0] == int(Phase.I):
            out.append(SceneOutcome(Verdict.FP, t_d))
        else:
            out.append(SceneOutcome(Verdict.TP, t_d, t_d - trace.labels.t_moving))
    return out


def threshold_sweep(traces: Sequence[Trace], grid: Sequence[float] | None = None) -> list[SweepRow]:
    """One row per threshold; first crossings are found once per scene via a running maximum."""
    grid = default_grid() if grid is None else np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("empty threshold grid")
    if np.any(grid < 0) or np.any(grid > 1) or np.any(np.diff(grid) < 0):
        raise ValueError("threshold grid must be sorted and lie in [0, 1]")
    if not traces:
        raise ValueError("no scenes to evaluate")
    per_scene = [scene_outcomes(tr, grid) for tr in traces]
    rows = []
    for j, s in enumerate(grid):
        agg = aggregate(outs[j] for outs in per_scene)
        rows.append(SweepRow(float(s), agg.f1, agg.precision, agg.mean_dt, agg.tp, agg.fp, agg.fn))
    return rows


def best_row(rows: Sequence[SweepRow]) -> SweepRow:
    """Row with maximal F1; the lowest threshold wins ties."""
    best = rows[0]
    for r in rows[1:]:
        if r.f1 > best.f1:
            best = r
    return best


def row_at(rows: Sequence[SweepRow], s: float) -> SweepRow:
    for r in rows:
        if abs(r.threshold - s) < 1e-9:
            return r
    raise KeyError(f"threshold {s} not in sweep")


# -- curve tables ---------------------------------------------------------------------


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(float(x))


def emit_curves(rows: Sequence[SweepRow], path: str | Path) -> None:
    """Write a comma-separated curve table.

    Reals are written as shortest round-trip decimals so parsing reproduces
    every row exactly; an absent mean detection time is an empty field.
    """
    if not rows:
        raise ValueError("no rows to write")
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CURVE_HEADER)
            for r in rows:
                w.writerow([_fmt(r.threshold), _fmt(r.f1), _fmt(r.precision), _fmt(r.mean_dt), r.tp, r.fp, r.fn])
    except OSError as exc:
        raise OSError(f"cannot write curve table {path}: {exc}") from exc


def read_curves(path: str | Path) -> list[SweepRow]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CURVE_HEADER:
            raise ValueError(f"unexpected curve header {header}")
        rows = []
        for rec in reader:
            th, f1, pr, dt, tp, fp, fn = rec
            rows.append(
                SweepRow(float(th), float(f1), float(pr), float(dt) if dt else None, int(tp), int(fp), int(fn))
            )
    return rows


def summary(rows: Sequence[SweepRow], thresholds_of_interest: Sequence[float] = (0.5,)) -> dict:
    best = best_row(rows)
    doc = {
        "scenes": best.tp + best.fp + best.fn,
        "best": {
            "threshold": best.threshold,
            "f1": best.f1,
            "precision": best.precision,
            "mean_dt": best.mean_dt,
            "tp": best.tp,
            "fp": best.fp,
            "fn": best.fn,
        },
        "at": {},
    }
    for s in thresholds_of_interest:
        try:
            r = row_at(rows, s)
        except KeyError:
            continue
        doc["at"][f"{s:g}"] = {"f1": r.f1, "precision": r.precision, "mean_dt": r.mean_dt, "tp": r.tp, "fp": r.fp, "fn": r.fn}
    return doc


def phase_one_std(trace: Trace) -> float:
    """Standard deviation of the moving probability over phase I frames."""
    mask = phases_of(np.asarray(trace.t), trace.labels) == int(Phase.I)
    if not mask.any():
        return float("nan")
    return float(np.std(np.asarray(trace.p)[mask]))
