"""Gradient-boosted decision trees for binary classification, plus sigmoid calibration.

Trees are grown level by level with an exact greedy split search over the
sorted feature values, using first and second order gradients of the
logistic loss::

    leaf weight  w    = -G / (H + lambda)
    split gain        = 1/2 [G_L^2/(H_L+lambda) + G_R^2/(H_R+lambda) - G^2/(H+lambda)] - gamma

Rows with ``x < threshold`` go left; thresholds are midpoints between
consecutive distinct values. Ties in gain are broken by the lowest feature
index, then the lowest threshold.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def log_loss(y: np.ndarray, raw: np.ndarray) -> float:
    """Mean logistic loss of labels ``y`` against raw log-odds scores."""
    y = np.asarray(y, dtype=float)
    raw = np.asarray(raw, dtype=float)
    return float(np.mean(np.logaddexp(0.0, raw) - y * raw))


@dataclass(frozen=True)
class GBTParams:
    n_rounds: int = 100
    learning_rate: float = 0.1
    max_depth: int = 4
    reg_lambda: float = 1.0
    gamma: float = 0.0
    min_child_weight: float = 1.0
    # log-odds; None starts from the training prior
    base_score: float | None = None

    def __post_init__(self) -> None:
        if self.n_rounds < 0 or self.max_depth < 0:
            raise ValueError("n_rounds and max_depth must be non-negative")
        if not (0 <= self.learning_rate) or self.reg_lambda < 0 or self.min_child_weight < 0:
            raise ValueError("invalid boosting hyperparameters")


@dataclass(frozen=True, eq=False)
class Tree:
    """Flat binary tree; node ``i`` is a leaf when ``feature[i] < 0``."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    def depth(self) -> int:
        def rec(i: int) -> int:
            if self.feature[i] < 0:
                return 0
            return 1 + max(rec(self.left[i]), rec(self.right[i]))

        return rec(0)

    def leaves(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        for _ in range(self.depth()):
            f = self.feature[node]
            internal = f >= 0
            go_left = X[rows, np.maximum(f, 0)] < self.threshold[node]
            node = np.where(internal, np.where(go_left, self.left[node], self.right[node]), node)
        return node

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(
            np.array(d["feature"], dtype=np.int64),
            np.array(d["threshold"], dtype=float),
            np.array(d["left"], dtype=np.int64),
            np.array(d["right"], dtype=np.int64),
            np.array(d["value"], dtype=float),
        )


@dataclass(frozen=True, eq=False)
class TreeEnsembleModel:
    trees: tuple[Tree, ...]
    params: GBTParams
    base_score: float
    n_features: int
    train_loss: tuple[float, ...] = ()

    def predict_raw(self, X: np.ndarray) -> np.ndarray:
        X = _as_matrix(X)
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        raw = np.full(X.shape[0], self.base_score)
        eta = self.params.learning_rate
        for tree in self.trees:
            raw += eta * tree.value[tree.leaves(X)]
        return raw

    def to_dict(self) -> dict:
        return {
            "params": asdict(self.params),
            "base_score": self.base_score,
            "n_features": self.n_features,
            "train_loss": list(self.train_loss),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TreeEnsembleModel":
        return cls(
            trees=tuple(Tree.from_dict(t) for t in d["trees"]),
            params=GBTParams(**d["params"]),
            base_score=d["base_score"],
            n_features=d["n_features"],
            train_loss=tuple(d["train_loss"]),
        )


def predict_proba(model: TreeEnsembleModel, X: np.ndarray) -> np.ndarray | float:
    """Uncalibrated probability of the positive class (sigmoid of the raw score)."""
    single = np.asarray(X).ndim == 1
    p = sigmoid(model.predict_raw(X))
    return float(p[0]) if single else p


def _as_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise ValueError("feature matrix must be 2-d")
    return X


def _grow_tree(
    xs_t: np.ndarray, xv: np.ndarray, order: np.ndarray, g: np.ndarray, h: np.ndarray, p: GBTParams
) -> tuple[Tree, np.ndarray]:
    """Grow one tree level by level; returns the tree and the leaf of every row.

    ``order`` is (d, n): for every feature the row ids laid out so each live
    node occupies the same contiguous column range in every feature row, with
    rows sorted by that feature's value inside the range; it is permuted in
    place as nodes split. ``xs_t`` is the transposed feature matrix and
    ``xv`` its values in the initial ``order`` layout.
    """
    d, n = order.shape
    lam = p.reg_lambda
    feature, threshold, left, right = [-1], [0.0], [-1], [-1]
    node_of = np.zeros(n, dtype=np.int64)
    # (node id, first column, end column) of the nodes still allowed to split
    segments = [(0, 0, n)]
    for depth in range(p.max_depth):
        if depth:
            xv = np.take_along_axis(xs_t, order, axis=1)
        gs = g[order]
        hs = h[order]
        next_segments = []
        for node, a, b in segments:
            if b - a < 2:
                continue
            cg = np.cumsum(gs[:, a:b], axis=1)
            ch = np.cumsum(hs[:, a:b], axis=1)
            G = float(np.sum(g[order[0, a:b]]))
            H = float(np.sum(h[order[0, a:b]]))
            GL, HL = cg[:, :-1], ch[:, :-1]
            valid = xv[:, a + 1 : b] > xv[:, a : b - 1]
            valid &= HL >= p.min_child_weight
            valid &= (H - HL) >= p.min_child_weight
            if not valid.any():
                continue
            score = GL * GL / (HL + lam)
            GR = G - GL
            score += GR * GR / ((H + lam) - HL)
            score[~valid] = -np.inf
            # row-major argmax: lowest feature index, then lowest threshold
            f, i = np.unravel_index(int(np.argmax(score)), score.shape)
            gain = 0.5 * (
                GL[f, i] ** 2 / (HL[f, i] + lam) + GR[f, i] ** 2 / (H - HL[f, i] + lam) - G * G / (H + lam)
            ) - p.gamma
            if not gain > 0:
                continue
            thr = 0.5 * (xv[f, a + i] + xv[f, a + i + 1])
            if not thr > xv[f, a + i]:
                thr = xv[f, a + i + 1]
            lch, rch = len(feature), len(feature) + 1
            feature += [-1, -1]
            threshold += [0.0, 0.0]
            left += [-1, -1]
            right += [-1, -1]
            feature[node], threshold[node], left[node], right[node] = int(f), float(thr), lch, rch
            goes_left = np.zeros(n, dtype=bool)
            goes_left[order[f, a : a + i + 1]] = True
            mask = goes_left[order[:, a:b]]
            n_left = i + 1
            block = order[:, a:b]
            order[:, a:b] = np.concatenate(
                [block[mask].reshape(d, n_left), block[~mask].reshape(d, b - a - n_left)], axis=1
            )
            node_of[order[0, a : a + n_left]] = lch
            node_of[order[0, a + n_left : b]] = rch
            next_segments += [(lch, a, a + n_left), (rch, a + n_left, b)]
        segments = next_segments
        if not segments:
            break
    n_nodes = len(feature)
    G_leaf = np.bincount(node_of, weights=g, minlength=n_nodes)
    H_leaf = np.bincount(node_of, weights=h, minlength=n_nodes)
    feature_arr = np.array(feature, dtype=np.int64)
    value = np.where(feature_arr < 0, -G_leaf / (H_leaf + lam), 0.0)
    tree = Tree(
        feature=feature_arr,
        threshold=np.array(threshold, dtype=float),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        value=value,
    )
    return tree, node_of


def train_gbt(X: np.ndarray, y: np.ndarray, params: GBTParams | None = None) -> TreeEnsembleModel:
    """Fit a boosted tree ensemble to binary labels ``y`` in {0, 1}."""
    p = params or GBTParams()
    X = _as_matrix(X)
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size:
        raise ValueError("X and y disagree on the number of rows")
    if X.shape[0] < 2:
        raise ValueError("at least two training rows are required")
    if np.isnan(X).any():
        raise ValueError("NaN feature values are not supported")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be 0 or 1")
    pos = y.mean()
    if pos in (0.0, 1.0):
        raise ValueError("both classes must be present in the training labels")
    base = math.log(pos / (1.0 - pos)) if p.base_score is None else float(p.base_score)

    xs_t = np.ascontiguousarray(X.T)
    order0 = np.argsort(xs_t, axis=1, kind="stable")
    xv0 = np.take_along_axis(xs_t, order0, axis=1)
    raw = np.full(y.size, base)
    trees = []
    losses = [log_loss(y, raw)]
    for _ in range(p.n_rounds):
        prob = sigmoid(raw)
        g = prob - y
        h = prob * (1.0 - prob)
        tree, leaf_of = _grow_tree(xs_t, xv0, order0.copy(), g, h, p)
        raw = raw + p.learning_rate * tree.value[leaf_of]
        trees.append(tree)
        losses.append(log_loss(y, raw))
    return TreeEnsembleModel(tuple(trees), p, base, X.shape[1], tuple(losses))


# -- calibration ----------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationModel:
    """Sigmoid map ``1 / (1 + exp(A z + B))`` from raw scores to probabilities."""

    A: float
    B: float

    def __call__(self, z):
        return sigmoid(-(self.A * np.asarray(z, dtype=float) + self.B))

    def to_dict(self) -> dict:
        return {"A": self.A, "B": self.B}

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationModel":
        return cls(d["A"], d["B"])


IDENTITY_CALIBRATION = CalibrationModel(-1.0, 0.0)


def fit_calibration(
    raw_scores: np.ndarray, labels: np.ndarray, max_iter: int = 100, tol: float = 1e-10
) -> CalibrationModel:
    """Platt scaling with smoothed targets, fit by damped Newton iterations."""
    z = np.asarray(raw_scores, dtype=float).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if z.size != y.size:
        raise ValueError("scores and labels disagree in length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("calibration needs both classes")
    hi = (n_pos + 1.0) / (n_pos + 2.0)
    lo = 1.0 / (n_neg + 2.0)
    t = np.where(y, hi, lo)
    if np.ptp(z) == 0:
        # the slope is not identifiable; map every score to the smoothed base rate
        rate = float(t.mean())
        return CalibrationModel(0.0, math.log((1.0 - rate) / rate))

    def objective(A: float, B: float) -> float:
        f = A * z + B
        # -sum t log p + (1-t) log(1-p) with p = 1/(1+exp(f))
        return float(np.sum(t * f + np.logaddexp(0.0, -f)))

    A, B = 0.0, math.log((n_neg + 1.0) / (n_pos + 1.0))
    fval = objective(A, B)
    ridge = 1e-12
    for _ in range(max_iter):
        p = sigmoid(-(A * z + B))
        d1 = t - p
        d2 = p * (1.0 - p)
        gA, gB = float(np.sum(z * d1)), float(np.sum(d1))
        if math.hypot(gA, gB) < tol:
            break
        h11 = float(np.sum(z * z * d2)) + ridge
        h22 = float(np.sum(d2)) + ridge
        h21 = float(np.sum(z * d2))
        det = h11 * h22 - h21 * h21
        dA = -(h22 * gA - h21 * gB) / det
        dB = -(-h21 * gA + h11 * gB) / det
        gd = gA * dA + gB * dB
        step = 1.0
        while step >= 1e-10:
            nA, nB = A + step * dA, B + step * dB
            nf = objective(nA, nB)
            if nf < fval + 1e-4 * step * gd:
                A, B, fval = nA, nB, nf
                break
            step /= 2.0
        else:
            break
    return CalibrationModel(float(A), float(B))


def params_with(params: GBTParams, **kw) -> GBTParams:
    return replace(params, **kw)
