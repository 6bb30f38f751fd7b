"""Multiclass gradient-boosted trees for skill grading, plus the CV protocol."""

from __future__ import annotations

import enum
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import IO, Mapping, Optional, Sequence

import numpy as np
from sklearn.model_selection import StratifiedKFold, train_test_split

from . import features as feat

log = logging.getLogger(__name__)

MODEL_FORMAT = "microskill-gbdt"
MODEL_VERSION = 1


class SkillCategory(enum.IntEnum):
    POOR = 0
    MODERATE = 1
    GOOD = 2

    @property
    def label(self) -> str:
        return self.name.capitalize()

    @classmethod
    def parse(cls, token: str) -> "SkillCategory":
        try:
            return cls[token.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown skill category {token!r}") from None


N_CLASSES = len(SkillCategory)
LOW_THRESHOLD = 2.5
HIGH_THRESHOLD = 3.5


def regroup(score: float) -> SkillCategory:
    """Map a 1-5 rubric score to a category; boundary scores go to the upper class."""
    if not (1.0 <= score <= 5.0):
        raise ValueError(f"score {score} outside [1, 5]")
    if score < LOW_THRESHOLD:
        return SkillCategory.POOR
    if score < HIGH_THRESHOLD:
        return SkillCategory.MODERATE
    return SkillCategory.GOOD


# ---------------------------------------------------------------------------
# loss

def softmax(F: np.ndarray) -> np.ndarray:
    Z = F - F.max(axis=-1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=-1, keepdims=True)


def log_loss(F: np.ndarray, Y: np.ndarray, w: Optional[np.ndarray] = None) -> float:
    """Weighted mean multinomial log-loss of raw scores F against one-hot Y."""
    Z = F - F.max(axis=1, keepdims=True)
    logp = Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))
    per = -(Y * logp).sum(axis=1)
    if w is None:
        return float(per.mean())
    return float((w * per).sum() / w.sum())


def softmax_gradient(F: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """d(per-sample log-loss)/dF."""
    return softmax(F) - Y


# ---------------------------------------------------------------------------
# trees

@dataclass
class RegressionTree:
    feature: np.ndarray  # -1 at leaves
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def depth(self) -> int:
        def d(i):
            return 0 if self.feature[i] < 0 else 1 + max(d(self.left[i]), d(self.right[i]))
        return d(0)

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=int)
        rows = np.arange(len(X))
        while True:
            f = self.feature[node]
            internal = f >= 0
            if not internal.any():
                return self.value[node]
            go_left = X[rows, np.where(internal, f, 0)] <= self.threshold[node]
            node = np.where(internal, np.where(go_left, self.left[node], self.right[node]), node)

    def to_json(self, i: int = 0) -> dict:
        if self.feature[i] < 0:
            return {"leaf": float(self.value[i])}
        return {"feature": int(self.feature[i]), "threshold": float(self.threshold[i]),
                "left": self.to_json(int(self.left[i])), "right": self.to_json(int(self.right[i]))}

    @classmethod
    def from_json(cls, obj: dict) -> "RegressionTree":
        feature, threshold, left, right, value = [], [], [], [], []

        def add(node):
            i = len(feature)
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(0.0)
            if "leaf" in node:
                value[i] = float(node["leaf"])
            else:
                feature[i] = int(node["feature"])
                threshold[i] = float(node["threshold"])
                left[i] = add(node["left"])
                right[i] = add(node["right"])
            return i

        add(obj)
        return cls(np.array(feature), np.array(threshold), np.array(left), np.array(right), np.array(value))

    def scaled(self, factor: float) -> "RegressionTree":
        return RegressionTree(self.feature, self.threshold, self.left, self.right, self.value * factor)


def _build_tree(X: np.ndarray, g: np.ndarray, h: np.ndarray, max_depth: int, reg_lambda: float,
                min_child_weight: float, rank: Optional[np.ndarray] = None) -> RegressionTree:
    """Exact greedy tree on Newton statistics.

    Among splits of equal gain the widest gap between the two neighbouring
    values (in node standard deviations) wins, then the lowest `rank` (the
    feature's position in name order), then the lowest threshold. None of
    these depend on column order.
    """
    if rank is None:
        rank = np.arange(X.shape[1])
    feature, threshold, left, right, value = [], [], [], [], []

    def grow(idx: np.ndarray, depth: int) -> int:
        i = len(feature)
        G, H = float(g[idx].sum()), float(h[idx].sum())
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(-G / (H + reg_lambda))
        if depth >= max_depth or len(idx) < 2:
            return i
        Xs = X[idx]
        order = np.argsort(Xs, axis=0, kind="stable")
        xs = np.take_along_axis(Xs, order, axis=0)
        GL = np.cumsum(g[idx][order], axis=0)[:-1]
        HL = np.cumsum(h[idx][order], axis=0)[:-1]
        GR, HR = G - GL, H - HL
        gain = GL ** 2 / (HL + reg_lambda) + GR ** 2 / (HR + reg_lambda) - G ** 2 / (H + reg_lambda)
        ok = (xs[1:] > xs[:-1]) & (HL >= min_child_weight) & (HR >= min_child_weight)
        gain = np.where(ok, gain, -np.inf).T  # (features, positions)
        top = float(gain.max()) if gain.size else -np.inf
        if not top > 1e-12:
            return i
        # equal-gain splits are common on small samples
        sd = Xs.std(axis=0)
        gap = (xs[1:] - xs[:-1]).T / np.where(sd > 0, sd, 1.0)[:, None]
        gap = np.where(gain >= top - 1e-9 * top, gap, -np.inf)
        widest = gap.max()
        cand = np.argwhere(gap >= widest - 1e-12 * abs(widest))
        j, pos = min(cand.tolist(), key=lambda c: (rank[c[0]], c[1]))
        lo, hi = xs[pos, j], xs[pos + 1, j]
        thr = 0.5 * (lo + hi)
        if not lo <= thr < hi:
            thr = lo
        mask = X[idx, j] <= thr
        feature[i] = j
        threshold[i] = float(thr)
        left[i] = grow(idx[mask], depth + 1)
        right[i] = grow(idx[~mask], depth + 1)
        return i

    grow(np.arange(len(X)), 0)
    return RegressionTree(np.array(feature), np.array(threshold), np.array(left), np.array(right),
                          np.array(value))


# ---------------------------------------------------------------------------
# model

@dataclass(frozen=True)
class BoostParams:
    n_trees: int = 200
    max_depth: int = 3
    learning_rate: float = 0.1
    subsample: float = 1.0
    seed: int = 0
    reg_lambda: float = 1.0
    min_child_weight: float = 1e-3
    balanced_weights: bool = True

    def __post_init__(self):
        if self.n_trees < 0 or self.max_depth < 1:
            raise ValueError("n_trees must be >= 0 and max_depth >= 1")
        if not 0 < self.learning_rate <= 1 or not 0 < self.subsample <= 1:
            raise ValueError("learning_rate and subsample must lie in (0, 1]")


@dataclass
class SkillModel:
    feature_names: tuple[str, ...]
    params: BoostParams
    trees: list[list[RegressionTree]] = field(default_factory=list)  # per round, one per class
    train_loss: list[float] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def raw_scores(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        F = np.zeros((len(X), N_CLASSES))
        for round_trees in self.trees:
            for k, tree in enumerate(round_trees):
                F[:, k] += tree.predict(X)
        return F

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return softmax(self.raw_scores(X))

    def to_json(self) -> dict:
        return {"format": MODEL_FORMAT, "version": MODEL_VERSION,
                "classes": [c.label for c in SkillCategory],
                "feature_names": list(self.feature_names), "params": asdict(self.params),
                "metadata": self.metadata, "train_loss": self.train_loss,
                "trees": [[t.to_json() for t in rt] for rt in self.trees]}

    @classmethod
    def from_json(cls, obj: dict) -> "SkillModel":
        if obj.get("format") != MODEL_FORMAT or obj.get("version") != MODEL_VERSION:
            raise ValueError("not a supported skill model file")
        return cls(tuple(obj["feature_names"]), BoostParams(**obj["params"]),
                   [[RegressionTree.from_json(t) for t in rt] for rt in obj["trees"]],
                   list(obj.get("train_loss", [])), dict(obj.get("metadata", {})))


def save_model(fh: IO[str], model: SkillModel) -> None:
    json.dump(model.to_json(), fh, indent=1)
    fh.write("\n")


def load_model(fh: IO[str]) -> SkillModel:
    return SkillModel.from_json(json.load(fh))


def class_weights(y: np.ndarray) -> np.ndarray:
    counts = np.bincount(y, minlength=N_CLASSES).astype(float)
    present = counts > 0
    w_class = np.zeros(N_CLASSES)
    w_class[present] = len(y) / (present.sum() * counts[present])
    w = w_class[y]
    return w / w.mean()


def fit(X: np.ndarray, y: Sequence[int], params: BoostParams = BoostParams(),
        feature_names: Optional[Sequence[str]] = None) -> SkillModel:
    """Multinomial boosting with Newton leaves and a backtracking step per round.

    The step of each round is halved (up to 20 times, then dropped) until the
    weighted training log-loss does not increase, so the loss curve is
    monotone by construction.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("X must be 2-D with one row per label")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite feature values")
    if len(np.unique(y)) < 2:
        raise ValueError("need at least two classes to train")
    names = tuple(feature_names) if feature_names is not None else tuple(f"f{j}" for j in range(X.shape[1]))
    if len(names) != X.shape[1]:
        raise ValueError("feature_names length does not match X")
    rank = np.argsort(np.argsort(np.array(names), kind="stable"), kind="stable")
    Y = np.eye(N_CLASSES)[y]
    w = class_weights(y) if params.balanced_weights else np.ones(len(y))
    rng = np.random.default_rng(params.seed)
    F = np.zeros((len(y), N_CLASSES))
    loss = log_loss(F, Y, w)
    model = SkillModel(names, params, train_loss=[loss], metadata={"seed": params.seed})
    n_sub = max(2, int(round(params.subsample * len(y))))
    for _ in range(params.n_trees):
        P = softmax(F)
        G = w[:, None] * (P - Y)
        Hs = w[:, None] * np.maximum(P * (1 - P), 1e-12)
        rows = np.sort(rng.choice(len(y), n_sub, replace=False)) if n_sub < len(y) else np.arange(len(y))
        trees = [_build_tree(X[rows], G[rows, k], Hs[rows, k], params.max_depth, params.reg_lambda,
                             params.min_child_weight, rank) for k in range(N_CLASSES)]
        step = np.column_stack([t.predict(X) for t in trees])
        scale = params.learning_rate
        for _halving in range(21):
            trial = log_loss(F + scale * step, Y, w)
            if trial <= loss:
                break
            scale *= 0.5
        else:
            scale = 0.0
            trial = loss
        F = F + scale * step
        loss = trial
        model.trees.append([t.scaled(scale) for t in trees])
        model.train_loss.append(loss)
    return model


def _align(model: SkillModel, x) -> np.ndarray:
    if isinstance(x, feat.FeatureVector):
        x = x.as_dict()
    if isinstance(x, Mapping):
        missing = [n for n in model.feature_names if n not in x]
        if missing:
            raise ValueError(f"feature vector lacks model features: {missing[:5]}")
        return np.array([[float(x[n]) for n in model.feature_names]])
    arr = np.atleast_2d(np.asarray(x, dtype=float))
    if arr.shape[1] != len(model.feature_names):
        raise ValueError(f"expected {len(model.feature_names)} features, got {arr.shape[1]}")
    return arr


def predict(model: SkillModel, x) -> tuple[SkillCategory, np.ndarray]:
    """Category and class probabilities; exact ties go to the lower category."""
    proba = model.predict_proba(_align(model, x))[0]
    k = int(np.argmax(proba))
    if np.sum(proba == proba[k]) > 1:
        log.info("probability tie %s resolved to %s", proba.tolist(), SkillCategory(k).label)
    return SkillCategory(k), proba


# ---------------------------------------------------------------------------
# training protocol with feature selection

@dataclass
class TrainedClassifier:
    model: SkillModel
    selection: feat.SelectionResult

    def predict_full(self, x) -> tuple[SkillCategory, np.ndarray]:
        return predict(self.model, x)


FALLBACK_TOP_K = 10


def select_and_fit(X: np.ndarray, y: Sequence[int], names: Sequence[str], params: BoostParams = BoostParams(),
                   q: float = 0.05) -> TrainedClassifier:
    """Kruskal-Wallis + BH selection on the training rows, then boosting on the survivors.

    If nothing survives BH, the FALLBACK_TOP_K lowest p-values are used.
    """
    y = np.asarray(y, dtype=int)
    sel = feat.select(X, y, q, names)
    keep = np.flatnonzero(sel.selected)
    if len(keep) == 0:
        order = sorted(range(len(names)), key=lambda j: (sel.p_values[j], names[j]))
        keep = np.array(sorted(order[:FALLBACK_TOP_K]))
        log.warning("no feature passed BH at q=%g; using the %d lowest p-values", q, len(keep))
    kept_names = [names[j] for j in keep]
    model = fit(np.asarray(X, dtype=float)[:, keep], y, params, kept_names)
    model.metadata["selection_q"] = q
    return TrainedClassifier(model, sel)


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class EvalSummary:
    accuracy: float
    confusion: np.ndarray
    per_class: dict[str, ClassMetrics]

    def to_json(self) -> dict:
        return {"accuracy": self.accuracy, "confusion": self.confusion.tolist(),
                "per_class": {k: asdict(v) for k, v in self.per_class.items()}}


def summarize(y_true: Sequence[int], y_pred: Sequence[int]) -> EvalSummary:
    C = np.zeros((N_CLASSES, N_CLASSES), dtype=int)
    for t, p in zip(y_true, y_pred):
        C[t, p] += 1
    per = {}
    for c in SkillCategory:
        tp = C[c, c]
        col, row = C[:, c].sum(), C[c, :].sum()
        prec = tp / col if col else 0.0
        rec = tp / row if row else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
        per[c.label] = ClassMetrics(float(prec), float(rec), float(f1), int(row))
    total = C.sum()
    return EvalSummary(float(np.trace(C) / total) if total else 0.0, C, per)


@dataclass
class CvReport:
    k: int
    folds: list[EvalSummary]
    pooled: EvalSummary
    predictions: list[int]
    holdout: Optional[EvalSummary] = None

    def to_json(self) -> dict:
        out = {"k": self.k, "pooled": self.pooled.to_json(), "folds": [f.to_json() for f in self.folds],
               "predictions": self.predictions}
        if self.holdout is not None:
            out["holdout"] = self.holdout.to_json()
        return out

    def table(self) -> str:
        return render_table(self.pooled, "Pooled cross-validation")


def render_table(summary: EvalSummary, title: str) -> str:
    lines = [f"{title} (accuracy {summary.accuracy:.3f})",
             f"{'Level':<10}{'Precision':>11}{'Recall':>9}{'F1-score':>10}{'Support':>9}"]
    for name, m in summary.per_class.items():
        lines.append(f"{name:<10}{m.precision:>11.2f}{m.recall:>9.2f}{m.f1:>10.2f}{m.support:>9d}")
    return "\n".join(lines)


def cross_validate(X: np.ndarray, y: Sequence[int], params: BoostParams = BoostParams(), k: int = 5,
                   names: Optional[Sequence[str]] = None, q: Optional[float] = 0.05) -> CvReport:
    """Stratified k-fold CV; each fold selects features and fits on its own training rows."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if len(y) < k:
        raise ValueError(f"{len(y)} samples cannot be split into {k} folds")
    smallest = np.bincount(y)[np.bincount(y) > 0].min()
    if smallest < k:
        warnings.warn(f"smallest class has {smallest} members; reducing folds from {k} to {max(2, smallest)}")
        k = max(2, int(smallest))
    names = list(names) if names is not None else [f"f{j}" for j in range(X.shape[1])]
    skf = StratifiedKFold(n_splits=k, shuffle=True, random_state=params.seed)
    pred = np.full(len(y), -1)
    folds = []
    for train, test in skf.split(X, y):
        if q is None:
            m = fit(X[train], y[train], params, names)
            yp = [int(predict(m, X[i])[0]) for i in test]
        else:
            tc = select_and_fit(X[train], y[train], names, params, q)
            idx = [names.index(n) for n in tc.model.feature_names]
            yp = [int(predict(tc.model, X[i, idx])[0]) for i in test]
        pred[test] = yp
        folds.append(summarize(y[test], yp))
    return CvReport(k, folds, summarize(y, pred), pred.tolist())


def holdout_protocol(X: np.ndarray, y: Sequence[int], params: BoostParams = BoostParams(), k: int = 5,
                     names: Optional[Sequence[str]] = None, q: Optional[float] = 0.05,
                     test_size: float = 0.2) -> CvReport:
    """80/20 stratified split: CV on the training part, then a single test-set evaluation."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    names = list(names) if names is not None else [f"f{j}" for j in range(X.shape[1])]
    tr, te = train_test_split(np.arange(len(y)), test_size=test_size, stratify=y, random_state=params.seed)
    tr, te = np.sort(tr), np.sort(te)
    report = cross_validate(X[tr], y[tr], params, k, names, q)
    if q is None:
        model = fit(X[tr], y[tr], params, names)
    else:
        model = select_and_fit(X[tr], y[tr], names, params, q).model
    idx = [names.index(n) for n in model.feature_names]
    yp = [int(predict(model, X[i, idx])[0]) for i in te]
    report.holdout = summarize(y[te], yp)
    return report


def feature_usage(model: SkillModel) -> dict[str, int]:
    """Number of splits per manifest feature across all trees."""
    counts = np.zeros(len(model.feature_names), dtype=int)
    for round_trees in model.trees:
        for tree in round_trees:
            used = tree.feature[tree.feature >= 0]
            counts += np.bincount(used, minlength=len(counts))
    return {n: int(c) for n, c in zip(model.feature_names, counts)}
