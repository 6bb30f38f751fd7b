"""Shared domain vocabulary: instrument classes, boxes, detections, stream I/O."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Optional, Sequence

Point = tuple[float, float]


class StreamFormatError(ValueError):
    """Raised for malformed detection-stream input; carries the 1-based line number."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class InstrumentClass(str, enum.Enum):
    SCISSORS_C = "scissors_c"
    SCISSORS_S = "scissors_s"
    NEEDLE_DRIVER_C = "needle_driver_c"
    NEEDLE_DRIVER_S = "needle_driver_s"
    NEEDLE = "needle"

    @classmethod
    def parse(cls, token: str) -> "InstrumentClass":
        try:
            return cls(token)
        except ValueError:
            raise ValueError(f"unknown instrument class {token!r}") from None

    def __str__(self) -> str:
        return self.value


ALL_CLASSES: tuple[InstrumentClass, ...] = tuple(InstrumentClass)


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        for name in ("x_min", "y_min", "x_max", "y_max"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.x_min <= self.x_max and self.y_min <= self.y_max):
            raise ValueError(f"invalid box {self.as_tuple()}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @property
    def center(self) -> Point:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def contains(self, other: "BBox") -> bool:
        return (self.x_min <= other.x_min and self.y_min <= other.y_min
                and self.x_max >= other.x_max and self.y_max >= other.y_max)

    def contains_point(self, p: Point, margin: float = 0.0) -> bool:
        return (self.x_min - margin <= p[0] <= self.x_max + margin
                and self.y_min - margin <= p[1] <= self.y_max + margin)

    @classmethod
    def from_points(cls, points: Iterable[Point]) -> "BBox":
        xs, ys = zip(*points)
        return cls(float(min(xs)), float(min(ys)), float(max(xs)), float(max(ys)))


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = iw * ih if iw > 0 and ih > 0 else 0.0
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def envelope(a: BBox, b: BBox) -> BBox:
    """Smallest axis-aligned box containing both inputs."""
    return BBox(min(a.x_min, b.x_min), min(a.y_min, b.y_min),
                max(a.x_max, b.x_max), max(a.y_max, b.y_max))


@dataclass(frozen=True)
class Detection:
    frame_index: int
    cls: InstrumentClass
    confidence: float
    box: BBox
    contour: Optional[tuple[Point, ...]] = None

    def __post_init__(self):
        if self.frame_index < 0:
            raise ValueError(f"negative frame index {self.frame_index}")
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if self.contour is not None and len(self.contour) < 3:
            raise ValueError("contour needs at least 3 vertices")

    def contour_within(self, margin: float) -> bool:
        if self.contour is None:
            return True
        return all(self.box.contains_point(p, margin) for p in self.contour)


@dataclass(frozen=True)
class StreamHeader:
    frame_rate: float
    frame_width: int
    frame_height: int
    class_list: tuple[InstrumentClass, ...] = field(default=ALL_CLASSES)

    def __post_init__(self):
        if not (self.frame_rate > 0 and math.isfinite(self.frame_rate)):
            raise ValueError(f"frame_rate must be positive, got {self.frame_rate}")
        if self.frame_width <= 0 or self.frame_height <= 0:
            raise ValueError("frame width and height must be positive")

    @property
    def dt(self) -> float:
        return 1.0 / self.frame_rate


def group_by_frame(detections: Iterable[Detection]) -> dict[int, list[Detection]]:
    frames: dict[int, list[Detection]] = {}
    for det in detections:
        frames.setdefault(det.frame_index, []).append(det)
    return frames


# ---------------------------------------------------------------------------
# JSON-lines detection stream

def _header_from_obj(obj) -> StreamHeader:
    if not isinstance(obj, dict):
        raise StreamFormatError("header must be a JSON object", 1)
    missing = {"frame_rate", "width", "height"} - obj.keys()
    if missing:
        raise StreamFormatError(f"header missing {sorted(missing)}", 1)
    try:
        classes = tuple(InstrumentClass.parse(c) for c in obj.get("classes", [c.value for c in ALL_CLASSES]))
        return StreamHeader(float(obj["frame_rate"]), int(obj["width"]), int(obj["height"]), classes)
    except (TypeError, ValueError) as exc:
        raise StreamFormatError(str(exc), 1) from None


def _detection_from_obj(obj, lineno: int, contour_margin: Optional[float]) -> Detection:
    if not isinstance(obj, dict):
        raise StreamFormatError("detection must be a JSON object", lineno)
    try:
        frame = obj["frame"]
        if not isinstance(frame, int) or isinstance(frame, bool):
            raise ValueError(f"frame must be an integer, got {frame!r}")
        box = obj["box"]
        if len(box) != 4:
            raise ValueError("box must have 4 coordinates")
        contour = obj.get("contour")
        if contour is not None:
            contour = tuple((float(x), float(y)) for x, y in contour)
        det = Detection(frame, InstrumentClass.parse(obj["class"]), float(obj["conf"]),
                        BBox(*(float(v) for v in box)), contour)
    except KeyError as exc:
        raise StreamFormatError(f"missing field {exc.args[0]!r}", lineno) from None
    except (TypeError, ValueError) as exc:
        raise StreamFormatError(str(exc), lineno) from None
    if contour_margin is not None and not det.contour_within(contour_margin):
        raise StreamFormatError(f"contour leaves box by more than {contour_margin} px", lineno)
    return det


def parse_detection_stream(reader: IO, contour_margin: Optional[float] = 10.0
                           ) -> tuple[StreamHeader, list[Detection]]:
    """Parse a JSON-lines detection stream (bytes or text).

    Detections come back ordered by frame index; the order within a frame is
    the file order.
    """
    header = None
    detections: list[Detection] = []
    for lineno, raw in enumerate(reader, start=1):
        line = raw.decode("utf-8") if isinstance(raw, bytes) else raw
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise StreamFormatError(f"invalid JSON ({exc.msg})", lineno) from None
        if header is None:
            header = _header_from_obj(obj)
            continue
        detections.append(_detection_from_obj(obj, lineno, contour_margin))
    if header is None:
        raise StreamFormatError("missing header line")
    detections.sort(key=lambda d: d.frame_index)  # stable
    return header, detections


def detection_to_obj(det: Detection) -> dict:
    obj = {"frame": det.frame_index, "class": det.cls.value, "conf": det.confidence,
           "box": list(det.box.as_tuple())}
    if det.contour is not None:
        obj["contour"] = [[x, y] for x, y in det.contour]
    return obj


def header_to_obj(header: StreamHeader) -> dict:
    return {"frame_rate": header.frame_rate, "width": header.frame_width,
            "height": header.frame_height, "classes": [c.value for c in header.class_list]}


def write_detection_stream(writer: IO[str], header: StreamHeader, detections: Sequence[Detection],
                           meta: Optional[dict] = None) -> None:
    obj = header_to_obj(header)
    if meta:
        obj["meta"] = meta
    writer.write(json.dumps(obj) + "\n")
    for det in detections:
        writer.write(json.dumps(detection_to_obj(det)) + "\n")
