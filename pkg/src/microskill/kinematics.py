"""Tip trajectories to uniformly sampled position, velocity, acceleration and jerk."""

from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass
from typing import IO, Iterable, Optional, Sequence

import numpy as np

from .tips import TipPoint
from .types import InstrumentClass, StreamHeader

log = logging.getLogger(__name__)


def differentiate(f, dt: float) -> np.ndarray:
    """Central differences inside, first-order one-sided differences at both ends."""
    f = np.asarray(f, dtype=float)
    if f.shape[0] < 3:
        raise ValueError("need at least 3 samples to differentiate")
    if not dt > 0:
        raise ValueError("dt must be positive")
    out = np.empty_like(f)
    out[1:-1] = (f[2:] - f[:-2]) / (2 * dt)
    out[0] = (f[1] - f[0]) / dt
    out[-1] = (f[-1] - f[-2]) / dt
    return out


def smooth(f, window: int) -> np.ndarray:
    """Centred boxcar; near the ends the window shrinks symmetrically."""
    if window < 1 or window % 2 == 0:
        raise ValueError("smoothing window must be odd and >= 1")
    f = np.asarray(f, dtype=float)
    if window == 1:
        return f.copy()
    n = f.shape[0]
    half = window // 2
    c = np.concatenate([np.zeros((1,) + f.shape[1:]), np.cumsum(f, axis=0)])
    idx = np.arange(n)
    h = np.minimum(np.minimum(idx, n - 1 - idx), half)
    sums = c[idx + h + 1] - c[idx - h]
    return sums / (2 * h + 1).reshape((-1,) + (1,) * (f.ndim - 1))


@dataclass
class KinematicSeries:
    object_id: int
    cls: InstrumentClass
    dt: float
    frames: np.ndarray
    position: np.ndarray  # (n, 2) px
    velocity: np.ndarray  # px/s
    acceleration: np.ndarray  # px/s^2
    jerk: np.ndarray  # px/s^3
    valid: np.ndarray  # bool

    @property
    def speed(self) -> np.ndarray:
        return np.hypot(self.velocity[:, 0], self.velocity[:, 1])

    @property
    def accel_magnitude(self) -> np.ndarray:
        return np.hypot(self.acceleration[:, 0], self.acceleration[:, 1])

    @property
    def jerk_magnitude(self) -> np.ndarray:
        return np.hypot(self.jerk[:, 0], self.jerk[:, 1])

    def __len__(self) -> int:
        return len(self.frames)


def series_from_positions(position, dt: float, smoothing_window: int = 5, valid=None,
                          object_id: int = 0, cls: InstrumentClass = InstrumentClass.NEEDLE_DRIVER_S,
                          frames=None) -> KinematicSeries:
    pos = smooth(np.asarray(position, dtype=float), smoothing_window)
    vel = differentiate(pos, dt)
    acc = differentiate(vel, dt)
    jerk = differentiate(acc, dt)
    n = len(pos)
    if valid is None:
        valid = np.ones(n, dtype=bool)
    if frames is None:
        frames = np.arange(n)
    return KinematicSeries(object_id, cls, dt, np.asarray(frames), pos, vel, acc, jerk,
                           np.asarray(valid, dtype=bool))


def _erode(mask: np.ndarray, reach: int) -> np.ndarray:
    if reach <= 0 or mask.all():
        return mask.copy()
    bad = ~mask
    out = bad.copy()
    for k in range(1, reach + 1):
        out[k:] |= bad[:-k]
        out[:-k] |= bad[k:]
    return ~out


def build_series(tips: Iterable[TipPoint], header: StreamHeader, smoothing_window: int = 5,
                 skip_short: bool = False) -> list[KinematicSeries]:
    """One series per object id over its full frame span.

    Frames without a measured tip (missing or interpolated) are linearly
    filled and masked invalid; the mask is widened by the reach of the
    smoothing + triple-difference stencil so valid samples never depend on
    filled ones. Tracks too short to differentiate raise, or are dropped with
    a warning when skip_short is set.
    """
    by_id: dict[int, list[TipPoint]] = {}
    for t in tips:
        by_id.setdefault(t.object_id, []).append(t)
    reach = smoothing_window // 2 + 3
    out = []
    for oid in sorted(by_id):
        pts = sorted(by_id[oid], key=lambda t: t.frame_index)
        f0, f1 = pts[0].frame_index, pts[-1].frame_index
        n = f1 - f0 + 1
        if n < smoothing_window + 4:
            if skip_short:
                log.warning("dropping track %d: %d samples, need at least %d", oid, n, smoothing_window + 4)
                continue
            raise ValueError(f"track {oid} has {n} samples, need at least {smoothing_window + 4}")
        frames = np.arange(f0, f1 + 1)
        known_f = np.array([t.frame_index for t in pts])
        xs = np.interp(frames, known_f, [t.x for t in pts])
        ys = np.interp(frames, known_f, [t.y for t in pts])
        measured = np.zeros(n, dtype=bool)
        measured[[t.frame_index - f0 for t in pts if not t.interpolated]] = True
        s = series_from_positions(np.column_stack([xs, ys]), header.dt, smoothing_window,
                                  _erode(measured, reach), oid, pts[0].cls, frames)
        out.append(s)
    return out


KINEMATIC_COLUMNS = ["object_id", "class", "frame", "t", "x", "y", "vx", "vy", "speed", "ax", "ay", "amag",
                     "jx", "jy", "jmag", "valid"]


def write_kinematics_csv(fh: IO[str], series: Sequence[KinematicSeries], comment: Optional[str] = None
                         ) -> None:
    if comment:
        fh.write(f"# {comment}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(KINEMATIC_COLUMNS)
    for s in series:
        sp, am, jm = s.speed, s.accel_magnitude, s.jerk_magnitude
        for i in range(len(s)):
            w.writerow([s.object_id, s.cls.value, int(s.frames[i]), repr(float(s.frames[i] * s.dt)),
                        repr(float(s.position[i, 0])), repr(float(s.position[i, 1])),
                        repr(float(s.velocity[i, 0])), repr(float(s.velocity[i, 1])), repr(float(sp[i])),
                        repr(float(s.acceleration[i, 0])), repr(float(s.acceleration[i, 1])),
                        repr(float(am[i])), repr(float(s.jerk[i, 0])), repr(float(s.jerk[i, 1])),
                        repr(float(jm[i])), int(s.valid[i])])


def read_kinematics_csv(fh: IO[str], dt: Optional[float] = None) -> list[KinematicSeries]:
    """Read series back; dt comes from the argument, a ``frame_rate=`` comment token, or the t column."""
    lines = fh.readlines()
    if dt is None:
        for line in lines:
            m = re.search(r"frame_rate=([0-9.eE+-]+)", line) if line.startswith("#") else None
            if m:
                dt = 1.0 / float(m.group(1))
                break
    rows: dict[int, list[dict]] = {}
    cls_of: dict[int, InstrumentClass] = {}
    for r in csv.DictReader(line for line in lines if not line.startswith("#")):
        oid = int(r["object_id"])
        rows.setdefault(oid, []).append(r)
        cls_of[oid] = InstrumentClass.parse(r["class"])
    out = []
    for oid in sorted(rows):
        rs = rows[oid]
        col = lambda *keys: np.array([[float(r[k]) for k in keys] for r in rs])
        frames = np.array([int(r["frame"]) for r in rs])
        step = dt
        if step is None:
            t = col("t")[:, 0]
            step = float(t[1] - t[0]) / float(frames[1] - frames[0]) if len(t) > 1 else 1.0
        out.append(KinematicSeries(oid, cls_of[oid], step, frames, col("x", "y"), col("vx", "vy"),
                                   col("ax", "ay"), col("jx", "jy"),
                                   np.array([bool(int(r["valid"])) for r in rs])))
    return out
