"""Detection and tracking evaluation against ground truth.

Precision/recall/AP follow the usual greedy confidence-ordered matching and
101-point interpolated AP. Recovery rate counts detector-missed ground-truth
instances that the tracker covers with a coasted box; correction rate counts
detector label errors that the tracker output fixes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .tracker import DETECTED, PREDICTED, Track
from .types import ALL_CLASSES, BBox, Detection, InstrumentClass, iou

log = logging.getLogger(__name__)

N_RECALL_POINTS = 101
COVER_IOU = 0.5


@dataclass(frozen=True)
class GTBox:
    frame_index: int
    cls: InstrumentClass
    box: BBox


@dataclass(frozen=True)
class MatchConfig:
    iou_thresholds: tuple[float, ...] = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))

    def __post_init__(self):
        t = self.iou_thresholds
        if not t or any(not 0 < v <= 1 for v in t) or any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError("iou_thresholds must be strictly increasing within (0, 1]")


@dataclass
class Rate:
    numerator: int
    denominator: int

    @property
    def value(self) -> float:
        return self.numerator / self.denominator if self.denominator else 1.0

    @property
    def vacuous(self) -> bool:
        return self.denominator == 0

    def __float__(self) -> float:
        return self.value


@dataclass
class MatchResult:
    tp: list[tuple[int, int]]  # (prediction index, gt index)
    fp: list[int]
    fn: list[int]

    def is_tp(self, n_pred: int) -> np.ndarray:
        flags = np.zeros(n_pred, dtype=bool)
        for p, _ in self.tp:
            flags[p] = True
        return flags


def _by_frame_class(items, key):
    out: dict = {}
    for i, it in enumerate(items):
        out.setdefault(key(it), []).append(i)
    return out


def match_greedy(predictions: Sequence[Detection], ground_truth: Sequence[GTBox], iou_t: float) -> MatchResult:
    """Per frame and class, confidence-descending greedy matching to the best free GT box."""
    gts = _by_frame_class(ground_truth, lambda g: (g.frame_index, g.cls))
    preds = _by_frame_class(predictions, lambda d: (d.frame_index, d.cls))
    tp, fp = [], []
    used: set[int] = set()
    for key, pidx in preds.items():
        cand = gts.get(key, [])
        for p in sorted(pidx, key=lambda i: -predictions[i].confidence):
            best, best_iou = None, iou_t
            for g in cand:
                if g in used:
                    continue
                v = iou(predictions[p].box, ground_truth[g].box)
                if v >= best_iou and (best is None or v > best_iou):
                    best, best_iou = g, v
            if best is None:
                fp.append(p)
            else:
                used.add(best)
                tp.append((p, best))
    fn = [g for g in range(len(ground_truth)) if g not in used]
    return MatchResult(sorted(tp), sorted(fp), fn)


def average_precision(is_tp: Sequence[bool], confidences: Sequence[float], total_gt: int) -> float:
    """101-point interpolated AP from per-prediction TP flags."""
    if total_gt <= 0:
        raise ValueError("average precision needs at least one ground-truth instance")
    flags = np.asarray(is_tp, dtype=bool)
    if flags.size == 0:
        return 0.0
    order = np.argsort(-np.asarray(confidences, dtype=float), kind="stable")
    flags = flags[order]
    ctp = np.cumsum(flags)
    cfp = np.cumsum(~flags)
    precision = ctp / (ctp + cfp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    # recall >= k/100 decided in integers; float grid points miss exact hits such as 7/10
    k = np.arange(N_RECALL_POINTS)
    idx = np.searchsorted(ctp * (N_RECALL_POINTS - 1), k * total_gt, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def _tracker_states_by_frame(tracks: Iterable[Track]) -> dict[int, list]:
    out: dict[int, list] = {}
    for trk in tracks:
        for st in trk.states:
            out.setdefault(st.frame_index, []).append((trk, st))
    return out


def _best_iou(box: BBox, boxes: Iterable[BBox]) -> float:
    return max((iou(box, b) for b in boxes), default=0.0)


def recovery_rate(tracks: Iterable[Track], ground_truth: Sequence[GTBox], detections: Sequence[Detection],
                  classes: Optional[set] = None) -> Rate:
    """Share of detector-missed GT instances covered by a coasted tracker box (IoU >= 0.5)."""
    dets = _by_frame_class(detections, lambda d: d.frame_index)
    states = _tracker_states_by_frame(tracks)
    num = den = 0
    for g in ground_truth:
        if classes is not None and g.cls not in classes:
            continue
        if _best_iou(g.box, (detections[i].box for i in dets.get(g.frame_index, []))) >= COVER_IOU:
            continue
        den += 1
        coasted = (st.box for _, st in states.get(g.frame_index, []) if st.source == PREDICTED)
        if _best_iou(g.box, coasted) >= COVER_IOU:
            num += 1
    return Rate(num, den)


def correction_rate(tracks: Iterable[Track], ground_truth: Sequence[GTBox], detections: Sequence[Detection],
                    classes: Optional[set] = None) -> Rate:
    """Share of wrong-class detector hits whose tracker-output class equals the GT class."""
    gts = _by_frame_class(ground_truth, lambda g: g.frame_index)
    states = _tracker_states_by_frame(tracks)
    num = den = 0
    for det in detections:
        cands = [ground_truth[i] for i in gts.get(det.frame_index, [])]
        if not cands:
            continue
        best = max(cands, key=lambda g: iou(det.box, g.box))
        if iou(det.box, best.box) < COVER_IOU or best.cls == det.cls:
            continue
        if classes is not None and best.cls not in classes:
            continue
        den += 1
        tracked = [(trk, st) for trk, st in states.get(det.frame_index, []) if st.source == DETECTED]
        if tracked:
            trk, st = max(tracked, key=lambda ts: iou(det.box, ts[1].box))
            if iou(det.box, st.box) >= COVER_IOU and trk.cls == best.cls:
                num += 1
    return Rate(num, den)


@dataclass
class ClassEval:
    n_images: int
    n_instances: int
    precision: float
    recall: float
    ap: dict[float, float]
    mAP50: float
    mAP50_95: float
    recovery: Rate
    correction: Rate
    flags: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"images": self.n_images, "instances": self.n_instances, "precision": self.precision,
                "recall": self.recall, "ap": {f"{k:.2f}": v for k, v in self.ap.items()},
                "mAP50": self.mAP50, "mAP50_95": self.mAP50_95,
                "recovery_rate": self.recovery.value, "recovery_counts": [self.recovery.numerator,
                                                                          self.recovery.denominator],
                "correction_rate": self.correction.value,
                "correction_counts": [self.correction.numerator, self.correction.denominator],
                "flags": self.flags}


@dataclass
class EvalReport:
    overall: ClassEval
    per_class: dict[str, ClassEval]
    confusion_labels: list[str]
    confusion: np.ndarray

    def to_json(self) -> dict:
        return {"overall": self.overall.to_json(),
                "per_class": {k: v.to_json() for k, v in self.per_class.items()},
                "confusion": {"labels": self.confusion_labels, "matrix": self.confusion.tolist()}}

    def table(self) -> str:
        head = (f"{'Class':<17}{'Images':>8}{'Instances':>10}{'Precision':>10}{'Recall':>8}{'mAP50':>8}"
                f"{'mAP50-95':>10}{'Recovery':>10}{'Correction':>11}")
        rows = [head]
        for name, ce in [("all", self.overall), *self.per_class.items()]:
            rows.append(f"{name:<17}{ce.n_images:>8d}{ce.n_instances:>10d}{ce.precision:>10.3f}"
                        f"{ce.recall:>8.3f}{ce.mAP50:>8.3f}{ce.mAP50_95:>10.3f}{ce.recovery.value:>10.3f}"
                        f"{ce.correction.value:>11.3f}")
        return "\n".join(rows)


def confusion_matrix(predictions: Sequence[Detection], ground_truth: Sequence[GTBox],
                     iou_t: float = COVER_IOU) -> tuple[list[str], np.ndarray]:
    """Rows = GT class (+ background), columns = predicted class (+ background); class-agnostic matching."""
    labels = [c.value for c in ALL_CLASSES] + ["background"]
    index = {c: i for i, c in enumerate(ALL_CLASSES)}
    bg = len(ALL_CLASSES)
    M = np.zeros((bg + 1, bg + 1), dtype=int)
    gts = _by_frame_class(ground_truth, lambda g: g.frame_index)
    preds = _by_frame_class(predictions, lambda d: d.frame_index)
    for frame in sorted(set(gts) | set(preds)):
        free = list(gts.get(frame, []))
        for p in sorted(preds.get(frame, []), key=lambda i: -predictions[i].confidence):
            best, best_iou = None, iou_t
            for g in free:
                v = iou(predictions[p].box, ground_truth[g].box)
                if v >= best_iou and (best is None or v > best_iou):
                    best, best_iou = g, v
            if best is None:
                M[bg, index[predictions[p].cls]] += 1
            else:
                free.remove(best)
                M[index[ground_truth[best].cls], index[predictions[p].cls]] += 1
        for g in free:
            M[index[ground_truth[g].cls], bg] += 1
    return labels, M


def _class_eval(preds: Sequence[Detection], gts: Sequence[GTBox], tracks, detections, all_gt: Sequence[GTBox],
                cfg: MatchConfig, classes: Optional[set]) -> ClassEval:
    flags = []
    ap = {}
    n_inst = len(gts)
    base = match_greedy(preds, gts, COVER_IOU)
    n_tp = len(base.tp)
    if preds:
        precision = n_tp / len(preds)
    else:
        precision = 0.0
        flags.append("precision_vacuous")
    recall = n_tp / n_inst if n_inst else 0.0
    conf = [d.confidence for d in preds]
    present = sorted({g.cls for g in gts}, key=lambda c: c.value)
    for t in cfg.iou_thresholds:
        m = match_greedy(preds, gts, t)
        flags_tp = m.is_tp(len(preds))
        per_cls = []
        for c in present:
            idx = [i for i, d in enumerate(preds) if d.cls == c]
            per_cls.append(average_precision(flags_tp[idx], [conf[i] for i in idx],
                                             sum(1 for g in gts if g.cls == c)))
        ap[t] = float(np.mean(per_cls)) if per_cls else 0.0
    mAP50 = ap.get(0.5, ap[cfg.iou_thresholds[0]])
    mAP50_95 = float(np.mean(list(ap.values())))
    if mAP50_95 > mAP50 + 1e-12:
        log.warning("mAP50-95 %.6f exceeds mAP50 %.6f: matcher inconsistency", mAP50_95, mAP50)
        flags.append("map_order_violation")
    rec = recovery_rate(tracks, all_gt, detections, classes) if tracks is not None else Rate(0, 0)
    cor = correction_rate(tracks, all_gt, detections, classes) if tracks is not None else Rate(0, 0)
    if rec.vacuous:
        flags.append("recovery_vacuous")
    if cor.vacuous:
        flags.append("correction_vacuous")
    return ClassEval(len({g.frame_index for g in gts}), n_inst, precision, recall, ap, mAP50, mAP50_95,
                     rec, cor, flags)


def evaluate(predictions: Sequence[Detection], ground_truth: Sequence[GTBox],
             tracks: Optional[Sequence[Track]] = None, cfg: MatchConfig = MatchConfig()) -> EvalReport:
    """Table-style report: detection metrics of `predictions`, tracker rates when tracks are given."""
    overall = _class_eval(predictions, ground_truth, tracks, predictions, ground_truth, cfg, None)
    per = {}
    for c in ALL_CLASSES:
        gts = [g for g in ground_truth if g.cls == c]
        if not gts:
            continue
        preds = [d for d in predictions if d.cls == c]
        # rates are attributed to the GT class, so they see every detection and GT box
        ce = _class_eval(preds, gts, tracks, predictions, ground_truth, cfg, {c})
        per[c.value] = ce
    labels, M = confusion_matrix(predictions, ground_truth)
    return EvalReport(overall, per, labels, M)
