"""Per-procedure chaining of the stages: fuse, track, tips, kinematics, features."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .config import PipelineConfig
from .features import FeatureVector, extract
from .fusion import fuse_stream
from .kinematics import KinematicSeries, build_series
from .simulator import Procedure
from .tips import PriorEntry, TipPoint, locate_tips
from .tracker import Track, Tracker, TrackerReport
from .types import Detection, InstrumentClass, StreamHeader


@dataclass
class ProcedureResult:
    fused: list[Detection]
    tracks: list[Track]
    report: TrackerReport
    tips: list[TipPoint]
    series: list[KinematicSeries]
    features: FeatureVector


def process(header: StreamHeader, detections: Sequence[Detection],
            prior: Mapping[InstrumentClass, PriorEntry], cfg: PipelineConfig = PipelineConfig(),
            n_frames: Optional[int] = None) -> ProcedureResult:
    fused = fuse_stream(detections, cfg.fusion)
    tracker = Tracker(cfg.tracker)
    tracks = tracker.run(fused, range(n_frames) if n_frames is not None else None)
    tips = locate_tips(tracks, fused, prior)
    series = build_series(tips, header, cfg.kinematics.smoothing_window, skip_short=True)
    return ProcedureResult(fused, tracks, tracker.report, tips, series, extract(series))


def feature_matrix(procedures: Sequence[Procedure], prior: Mapping[InstrumentClass, PriorEntry],
                   cfg: PipelineConfig = PipelineConfig()) -> tuple[list[str], np.ndarray, np.ndarray]:
    """(procedure ids, feature matrix, integer labels) for a labelled procedure set."""
    rows, labels, ids = [], [], []
    names = None
    for proc in procedures:
        fv = process(proc.header, proc.detections, prior, cfg).features
        names = names or fv.names
        rows.append(fv.values)
        labels.append(int(proc.ground_truth.label))
        ids.append(proc.pid)
    return ids, np.array(rows, dtype=float).reshape(len(rows), -1), np.array(labels, dtype=int)
