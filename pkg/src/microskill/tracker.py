"""Identity-stable tracking-by-detection.

Constant-velocity Kalman filter on (cx, cy, aspect, height), Hungarian
assignment on an IoU/class cost, and three rules on top of plain SORT:

* a matched detector box is stored verbatim and re-centres the filter;
* an unmatched detection of a class that already owns a track (live or closed)
  re-uses that track's object id instead of minting a new one;
* a short-lived detector label disagreement is voted down by the track's
  recent label history.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import IO, Iterable, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .types import BBox, Detection, InstrumentClass, group_by_frame, iou

log = logging.getLogger(__name__)

DETECTED = "detected"
PREDICTED = "predicted"
_INADMISSIBLE = 1e6


@dataclass(frozen=True)
class TrackerConfig:
    max_age: int = 30
    iou_weight: float = 0.6
    gate_cost: float = 0.8
    correction_window: int = 15
    std_weight_position: float = 1.0 / 20
    std_weight_velocity: float = 1.0 / 160
    revive_window: Optional[int] = None  # frames a closed track stays revivable; None = forever

    def __post_init__(self):
        if self.max_age < 1:
            raise ValueError("max_age must be >= 1")
        if not 0.0 <= self.iou_weight <= 1.0:
            raise ValueError("iou_weight must lie in [0, 1]")
        if self.correction_window < 1:
            raise ValueError("correction_window must be >= 1")


@dataclass(frozen=True)
class FilterState:
    mean: np.ndarray
    covariance: np.ndarray


def box_to_xyah(box: BBox) -> np.ndarray:
    h = max(box.height, 1e-6)
    return np.array([0.5 * (box.x_min + box.x_max), 0.5 * (box.y_min + box.y_max),
                     max(box.width, 1e-6) / h, h])


def xyah_to_box(m: np.ndarray) -> BBox:
    cx, cy, a, h = float(m[0]), float(m[1]), float(m[2]), float(m[3])
    w = a * h
    return BBox(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)


class KalmanFilter:
    """8-state constant-velocity filter, one frame per step."""

    def __init__(self, std_weight_position: float = 1.0 / 20, std_weight_velocity: float = 1.0 / 160):
        self.F = np.eye(8)
        self.F[:4, 4:] = np.eye(4)
        self.H = np.eye(4, 8)
        self.wp = std_weight_position
        self.wv = std_weight_velocity

    def initiate(self, z: np.ndarray) -> FilterState:
        h = z[3]
        mean = np.concatenate([z, np.zeros(4)])
        std = np.array([2 * self.wp * h, 2 * self.wp * h, 1e-2, 2 * self.wp * h,
                        10 * self.wv * h, 10 * self.wv * h, 1e-5, 10 * self.wv * h])
        return FilterState(mean, np.diag(std ** 2))

    def predict(self, state: FilterState) -> FilterState:
        h = state.mean[3]
        std = np.array([self.wp * h, self.wp * h, 1e-2, self.wp * h,
                        self.wv * h, self.wv * h, 1e-5, self.wv * h])
        mean = self.F @ state.mean
        mean[2] = max(mean[2], 1e-6)
        mean[3] = max(mean[3], 1e-6)
        cov = self.F @ state.covariance @ self.F.T + np.diag(std ** 2)
        return FilterState(mean, 0.5 * (cov + cov.T))

    def update(self, state: FilterState, z: np.ndarray) -> FilterState:
        h = state.mean[3]
        r = np.array([self.wp * h, self.wp * h, 1e-1, self.wp * h]) ** 2
        S = state.covariance[:4, :4] + np.diag(r)
        PHt = state.covariance[:, :4]
        K = np.linalg.solve(S, PHt.T).T
        mean = state.mean + K @ (z - state.mean[:4])
        cov = state.covariance - K @ S @ K.T
        cov = 0.5 * (cov + cov.T)
        # detector priority: the position part is the measurement itself
        mean[:4] = z
        return FilterState(mean, cov)


@dataclass
class TrackState:
    frame_index: int
    box: BBox
    source: str
    class_as_reported: Optional[InstrumentClass]
    interpolated: bool = False


@dataclass
class Track:
    object_id: int
    cls: InstrumentClass
    states: list[TrackState]
    filter_state: FilterState
    frames_since_detection: int = 0
    closed_at: Optional[int] = None

    @property
    def last_frame(self) -> int:
        return self.states[-1].frame_index

    def reported_history(self, window: int) -> list[InstrumentClass]:
        out = []
        for st in reversed(self.states):
            if st.source == DETECTED:
                out.append(st.class_as_reported)
                if len(out) == window:
                    break
        return out


@dataclass
class TrackerReport:
    recovered_detections: int = 0
    corrected_labels: int = 0
    new_ids_suppressed: int = 0
    per_frame: list = field(default_factory=list)  # (frame, recovered, corrected, suppressed), cumulative
    per_class: dict = field(default_factory=dict)
    relabel_events: list = field(default_factory=list)

    def _bump(self, counter: str, cls: InstrumentClass) -> None:
        setattr(self, counter, getattr(self, counter) + 1)
        slot = self.per_class.setdefault(cls.value, {"recovered_detections": 0, "corrected_labels": 0,
                                                     "new_ids_suppressed": 0})
        slot[counter] += 1

    def close_frame(self, frame: int) -> None:
        self.per_frame.append((frame, self.recovered_detections, self.corrected_labels,
                               self.new_ids_suppressed))

    def to_json(self) -> dict:
        return {
            "recovered_detections": self.recovered_detections,
            "corrected_labels": self.corrected_labels,
            "new_ids_suppressed": self.new_ids_suppressed,
            "per_class": {k: self.per_class[k] for k in sorted(self.per_class)},
            "relabel_events": self.relabel_events,
        }


def predict(track: Track, kf: KalmanFilter) -> FilterState:
    return kf.predict(track.filter_state)


def association_cost(track_box: BBox, track_cls: InstrumentClass, det: Detection, cfg: TrackerConfig) -> float:
    mismatch = 0.0 if det.cls == track_cls else 1.0
    return cfg.iou_weight * (1.0 - iou(track_box, det.box)) + (1.0 - cfg.iou_weight) * mismatch


def associate(tracks: Sequence[Track], predicted_boxes: Sequence[BBox], detections: Sequence[Detection],
              cfg: TrackerConfig) -> tuple[list[tuple[int, int]], list[int], list[int]]:
    """Globally optimal gated assignment; returns index pairs (track, detection)."""
    nt, nd = len(tracks), len(detections)
    if nt == 0 or nd == 0:
        return [], list(range(nt)), list(range(nd))
    cost = np.empty((nt, nd))
    for i, (trk, box) in enumerate(zip(tracks, predicted_boxes)):
        for j, det in enumerate(detections):
            cost[i, j] = association_cost(box, trk.cls, det, cfg)
    gated = np.where(cost > cfg.gate_cost, _INADMISSIBLE, cost)
    rows, cols = linear_sum_assignment(gated)
    matches = [(int(r), int(c)) for r, c in zip(rows, cols) if cost[r, c] <= cfg.gate_cost]
    mt = {r for r, _ in matches}
    md = {c for _, c in matches}
    return (matches, [i for i in range(nt) if i not in mt], [j for j in range(nd) if j not in md])


def correct_class(det: Detection, track: Track, cfg: TrackerConfig, report: TrackerReport,
                  live_classes: Iterable[InstrumentClass] = ()) -> Detection:
    """Reconcile a matched detection's label with the track's label history.

    The incumbent class wins ties. If the detector's class wins the vote over
    the recent window (current detection included) the whole track is
    re-labelled, unless another live track already owns that class.
    """
    if det.cls == track.cls:
        return det
    history = track.reported_history(cfg.correction_window - 1) + [det.cls]
    n_new = sum(1 for c in history if c == det.cls)
    n_old = sum(1 for c in history if c == track.cls)
    if n_new > n_old and det.cls not in set(live_classes):
        report.relabel_events.append({"frame": det.frame_index, "object_id": track.object_id,
                                      "from": track.cls.value, "to": det.cls.value})
        log.info("track %d relabelled %s -> %s at frame %d", track.object_id, track.cls, det.cls,
                 det.frame_index)
        track.cls = det.cls
        return det
    report._bump("corrected_labels", track.cls)
    return Detection(det.frame_index, track.cls, det.confidence, det.box, det.contour)


def preserve_id(candidate: Detection, tracks: Sequence[Track], frame: int, cfg: TrackerConfig
                ) -> Optional[Track]:
    """Pick the same-class track a new detection should re-use, or None for a fresh id.

    Among eligible tracks the most recently seen one wins.
    """
    best = None
    for trk in tracks:
        if trk.cls != candidate.cls:
            continue
        if trk.closed_at is not None and cfg.revive_window is not None \
                and frame - trk.closed_at > cfg.revive_window:
            continue
        if best is None or trk.last_frame > best.last_frame:
            best = trk
    return best


def _interpolate_gap(track: Track, box: BBox, frame: int) -> None:
    k = len(track.states)
    while k > 0 and track.states[k - 1].source == PREDICTED:
        k -= 1
    if k == len(track.states) or k == 0:
        return
    anchor = track.states[k - 1]
    a = np.array(anchor.box.as_tuple())
    b = np.array(box.as_tuple())
    span = frame - anchor.frame_index
    for st in track.states[k:]:
        t = (st.frame_index - anchor.frame_index) / span
        st.box = BBox(*(a + t * (b - a)).tolist())
        st.interpolated = True


class Tracker:
    """Sequential tracking state machine; feed frames in increasing order."""

    def __init__(self, cfg: TrackerConfig = TrackerConfig()):
        self.cfg = cfg
        self.kf = KalmanFilter(cfg.std_weight_position, cfg.std_weight_velocity)
        self.live: list[Track] = []
        self.closed: list[Track] = []
        self.report = TrackerReport()
        self._next_id = 1

    @property
    def tracks(self) -> list[Track]:
        return sorted(self.live + self.closed, key=lambda t: t.object_id)

    def _attach(self, track: Track, det: Detection, reported: InstrumentClass, fs: FilterState) -> None:
        _interpolate_gap(track, det.box, det.frame_index)
        track.filter_state = fs
        track.states.append(TrackState(det.frame_index, det.box, DETECTED, reported))
        track.frames_since_detection = 0

    def step(self, frame: int, detections: Sequence[Detection]) -> list[Track]:
        cfg = self.cfg
        preds = [self.kf.predict(t.filter_state) for t in self.live]
        boxes = [xyah_to_box(p.mean) for p in preds]
        matches, un_t, un_d = associate(self.live, boxes, detections, cfg)

        for ti, di in matches:
            trk, det = self.live[ti], detections[di]
            others = [t.cls for t in self.live if t is not trk]
            fixed = correct_class(det, trk, cfg, self.report, others)
            fs = self.kf.update(preds[ti], box_to_xyah(det.box))
            self._attach(trk, fixed, det.cls, fs)

        still_unmatched = set(un_t)
        for di in un_d:
            det = detections[di]
            z = box_to_xyah(det.box)
            pool = [self.live[i] for i in sorted(still_unmatched)] + self.closed
            owner = preserve_id(det, pool, frame, cfg)
            if owner is None:
                trk = Track(self._next_id, det.cls, [], self.kf.initiate(z))
                self._next_id += 1
                trk.states.append(TrackState(frame, det.box, DETECTED, det.cls))
                self.live.append(trk)
                continue
            self.report._bump("new_ids_suppressed", owner.cls)
            if owner.closed_at is not None:
                self.closed.remove(owner)
                owner.closed_at = None
                self.live.append(owner)
            else:
                still_unmatched.discard(self.live.index(owner))
            self._attach(owner, det, det.cls, self.kf.initiate(z))

        survivors = []
        for i, trk in enumerate(self.live):
            if trk.last_frame == frame:
                survivors.append(trk)
            elif i in still_unmatched and trk.frames_since_detection < cfg.max_age:
                trk.filter_state = preds[i]
                trk.states.append(TrackState(frame, boxes[i], PREDICTED, None))
                trk.frames_since_detection += 1
                self.report._bump("recovered_detections", trk.cls)
                survivors.append(trk)
            else:
                trk.closed_at = frame
                self.closed.append(trk)
        self.live = survivors
        self.report.close_frame(frame)
        return self.live

    def run(self, detections: Iterable[Detection], frame_range: Optional[range] = None) -> list[Track]:
        frames = group_by_frame(detections)
        if frame_range is None:
            if not frames:
                return []
            frame_range = range(min(frames), max(frames) + 1)
        for f in frame_range:
            self.step(f, frames.get(f, []))
        return self.tracks


# ---------------------------------------------------------------------------
# CSV I/O

TRACK_COLUMNS = ["object_id", "class", "frame", "x_min", "y_min", "x_max", "y_max", "source",
                 "class_as_reported", "interpolated"]


def track_rows(tracks: Iterable[Track]) -> list[dict]:
    rows = []
    for trk in sorted(tracks, key=lambda t: t.object_id):
        for st in trk.states:
            rows.append({"object_id": trk.object_id, "class": trk.cls.value, "frame": st.frame_index,
                         "x_min": st.box.x_min, "y_min": st.box.y_min, "x_max": st.box.x_max,
                         "y_max": st.box.y_max, "source": st.source,
                         "class_as_reported": st.class_as_reported.value if st.class_as_reported else "",
                         "interpolated": int(st.interpolated)})
    return rows


def write_tracks_csv(fh: IO[str], tracks: Iterable[Track], comment: Optional[str] = None) -> None:
    if comment:
        fh.write(f"# {comment}\n")
    w = csv.DictWriter(fh, TRACK_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in track_rows(tracks):
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def read_tracks_csv(fh: IO[str]) -> list[Track]:
    """Rebuild tracks (without filter state) from the CSV form."""
    tracks: dict[int, Track] = {}
    reader = csv.DictReader(line for line in fh if not line.startswith("#"))
    for row in reader:
        oid = int(row["object_id"])
        trk = tracks.get(oid)
        if trk is None:
            trk = tracks[oid] = Track(oid, InstrumentClass.parse(row["class"]), [],
                                      FilterState(np.zeros(8), np.eye(8)))
        rep = row["class_as_reported"]
        trk.states.append(TrackState(int(row["frame"]),
                                     BBox(*(float(row[k]) for k in ("x_min", "y_min", "x_max", "y_max"))),
                                     row["source"], InstrumentClass.parse(rep) if rep else None,
                                     bool(int(row["interpolated"]))))
    return [tracks[k] for k in sorted(tracks)]
