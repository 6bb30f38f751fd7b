"""Per-frame duplicate-class resolution.

Two same-class boxes that overlap strongly are the two branches of one
instrument and get merged into their enclosing box; otherwise only the more
confident box survives. More than two boxes are reduced pairwise, highest-IoU
pair first.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Literal, Sequence

from .types import Detection, envelope, iou


@dataclass(frozen=True)
class FusionConfig:
    tau_merge: float = 0.7
    merged_confidence_rule: Literal["max", "mean"] = "max"

    def __post_init__(self):
        if not 0.0 < self.tau_merge < 1.0:
            raise ValueError(f"tau_merge must lie in (0, 1), got {self.tau_merge}")
        if self.merged_confidence_rule not in ("max", "mean"):
            raise ValueError(f"unknown merged_confidence_rule {self.merged_confidence_rule!r}")


def _rank_key(det: Detection):
    # confidence desc, then area desc, then x_min asc, then y_min asc
    return (-det.confidence, -det.box.area, det.box.x_min, det.box.y_min,
            det.box.x_max, det.box.y_max)


def merge_pair(a: Detection, b: Detection, cfg: FusionConfig) -> Detection:
    """Apply the pairwise rule to two same-class detections."""
    first, second = sorted((a, b), key=_rank_key)
    if iou(a.box, b.box) > cfg.tau_merge:
        if cfg.merged_confidence_rule == "max":
            conf = first.confidence
        else:
            conf = 0.5 * (a.confidence + b.confidence)
        # the winning branch keeps its contour; the envelope box covers both
        return replace(first, box=envelope(a.box, b.box), confidence=conf)
    return first


def fuse_chain(dets: Sequence[Detection], cfg: FusionConfig) -> Detection:
    """Reduce any number of same-class detections to one."""
    pool = sorted(dets, key=_rank_key)
    while len(pool) > 1:
        best = (-1.0, 0, 1)
        for i in range(len(pool)):
            for j in range(i + 1, len(pool)):
                v = iou(pool[i].box, pool[j].box)
                if v > best[0]:
                    best = (v, i, j)
        _, i, j = best
        merged = merge_pair(pool[i], pool[j], cfg)
        pool = [d for k, d in enumerate(pool) if k not in (i, j)]
        pool.append(merged)
        pool.sort(key=_rank_key)
    return pool[0]


def resolve_duplicates(frame_detections: Iterable[Detection], cfg: FusionConfig = FusionConfig()
                       ) -> list[Detection]:
    """At most one detection per class; output ordered by first appearance of each class."""
    by_class: dict = {}
    for det in frame_detections:
        by_class.setdefault(det.cls, []).append(det)
    out = []
    for group in by_class.values():
        out.append(group[0] if len(group) == 1 else fuse_chain(group, cfg))
    return out


def fuse_stream(detections: Iterable[Detection], cfg: FusionConfig = FusionConfig()) -> list[Detection]:
    """Fuse a whole frame-ordered stream."""
    out: list[Detection] = []
    frame: list[Detection] = []
    for det in detections:
        if frame and det.frame_index != frame[0].frame_index:
            out.extend(resolve_duplicates(frame, cfg))
            frame = []
        frame.append(det)
    if frame:
        out.extend(resolve_duplicates(frame, cfg))
    return out
