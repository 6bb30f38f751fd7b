"""Instrument tip localisation by shape-descriptor matching.

Candidate points are sampled at equal arc length along the detection contour.
Each candidate gets a 32-dim descriptor (16 perimeter-normalised radial
distances + 16-bin (linearly interpolated) histogram of absolute tangent direction over the nearby
half of the contour). The candidate whose descriptor is most cosine-similar to
the class reference descriptor is the tip.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import IO, Iterable, Mapping, Optional, Sequence

import numpy as np

from .tracker import DETECTED, Track
from .types import BBox, Detection, InstrumentClass, Point

N_CANDIDATES = 64
N_RADIAL = 16
N_ANGLE_BINS = 16
DESCRIPTOR_DIM = N_RADIAL + N_ANGLE_BINS
WINDOW_FRACTION = 0.25  # local window radius as a fraction of the perimeter


class MissingPriorError(KeyError):
    pass


@dataclass(frozen=True)
class _Polygon:
    verts: np.ndarray  # (M, 2), screen-clockwise
    seg: np.ndarray  # (M, 2) edge vectors, closing edge included
    lengths: np.ndarray  # (M,)
    cum: np.ndarray  # (M,) arc length at each vertex
    perimeter: float
    bin_lo: np.ndarray  # (M,) lower direction bin of each edge
    w_hi: np.ndarray  # (M,) share of the edge length going to bin_lo + 1


def _polygon(contour, start: Optional[Point] = None) -> _Polygon:
    v = np.asarray(contour, dtype=float)
    if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
        raise ValueError("contour needs at least 3 vertices")
    nxt = np.concatenate([v[1:], v[:1]])
    # shoelace > 0 with y pointing down is clockwise on screen
    if np.sum(v[:, 0] * nxt[:, 1] - nxt[:, 0] * v[:, 1]) < 0:
        v = v[::-1]
    if start is not None:
        d = np.hypot(v[:, 0] - start[0], v[:, 1] - start[1])
        v = np.roll(v, -int(np.argmin(d)), axis=0)
    seg = np.concatenate([v[1:], v[:1]]) - v
    lengths = np.hypot(seg[:, 0], seg[:, 1])
    perimeter = float(lengths.sum())
    if not perimeter > 0:
        raise ValueError("degenerate contour (zero perimeter)")
    cum = np.concatenate([[0.0], np.cumsum(lengths)[:-1]])
    # soft binning on the circle: bin centres at -pi + (k + 0.5) * width
    ang = np.arctan2(seg[:, 1], seg[:, 0])
    pos = (ang + math.pi) / (2 * math.pi) * N_ANGLE_BINS - 0.5
    lo = np.floor(pos)
    return _Polygon(v, seg, lengths, cum, perimeter, lo.astype(int) % N_ANGLE_BINS, pos - lo)


def _points_at(poly: _Polygon, s: np.ndarray) -> np.ndarray:
    s = np.mod(s, poly.perimeter)
    idx = np.searchsorted(poly.cum, s, side="right") - 1
    idx = np.clip(idx, 0, len(poly.cum) - 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(poly.lengths[idx] > 0, (s - poly.cum[idx]) / poly.lengths[idx], 0.0)
    return poly.verts[idx] + t[..., None] * poly.seg[idx]


def _arc_position(poly: _Polygon, p: Point) -> float:
    """Arc length of the contour point closest to p."""
    d = np.asarray(p, dtype=float) - poly.verts
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.clip(np.einsum("ij,ij->i", d, poly.seg) / poly.lengths ** 2, 0.0, 1.0)
    t = np.nan_to_num(t)
    proj = poly.verts + t[:, None] * poly.seg
    k = int(np.argmin(np.hypot(*(proj - np.asarray(p)).T)))
    return float(poly.cum[k] + t[k] * poly.lengths[k])


def _radial_and_window(poly: _Polygon, s0: np.ndarray, p0: np.ndarray, pts: np.ndarray) -> np.ndarray:
    P = poly.perimeter
    d = pts - p0[:, None, :]
    radial = np.sqrt(d[..., 0] ** 2 + d[..., 1] ** 2) / P

    r = WINDOW_FRACTION * P
    a = (s0 - r)[:, None]
    b = (s0 + r)[:, None]
    c = poly.cum[None, :]
    e = (poly.cum + poly.lengths)[None, :]
    overlap = np.zeros((len(s0), len(poly.cum)))
    for shift in (-P, 0.0, P):
        overlap += np.maximum(np.minimum(b + shift, e) - np.maximum(a + shift, c), 0.0)
    onehot = np.zeros((len(poly.cum), N_ANGLE_BINS))
    rows = np.arange(len(poly.cum))
    onehot[rows, poly.bin_lo] = 1.0 - poly.w_hi
    onehot[rows, (poly.bin_lo + 1) % N_ANGLE_BINS] = poly.w_hi
    hist = overlap @ onehot / (2 * r)

    desc = np.concatenate([radial, hist], axis=1)
    norms = np.sqrt(np.einsum("ij,ij->i", desc, desc))[:, None]
    return np.divide(desc, norms, out=np.zeros_like(desc), where=norms > 0)


def _descriptors(poly: _Polygon, s0: np.ndarray) -> np.ndarray:
    """Descriptors at arbitrary arc-length positions."""
    s0 = np.asarray(s0, dtype=float)
    offsets = (np.arange(N_RADIAL) + 0.5) * (poly.perimeter / N_RADIAL)
    return _radial_and_window(poly, s0, _points_at(poly, s0), _points_at(poly, s0[:, None] + offsets[None, :]))


def _sample_descriptors(poly: _Polygon, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Points and descriptors at the n equal-arc-length samples.

    When the radial offsets land on sample positions the radial points are
    looked up instead of re-interpolated.
    """
    s = _sample_positions(poly, n)
    pts = _points_at(poly, s)
    step, rem = divmod(n, N_RADIAL)
    if rem == 0 and step % 2 == 0:
        idx = (np.arange(n)[:, None] + step * np.arange(N_RADIAL)[None, :] + step // 2) % n
        return pts, _radial_and_window(poly, s, pts, pts[idx])
    return pts, _descriptors(poly, s)


def _sample_positions(poly: _Polygon, n: int = N_CANDIDATES) -> np.ndarray:
    return np.arange(n) * (poly.perimeter / n)


def to_local(p, box: BBox) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    w = max(box.width, 1e-12)
    h = max(box.height, 1e-12)
    return np.stack([(p[..., 0] - box.x_min) / w, (p[..., 1] - box.y_min) / h], axis=-1)


def to_scene(local, box: BBox) -> np.ndarray:
    u = np.asarray(local, dtype=float)
    return np.stack([box.x_min + u[..., 0] * box.width, box.y_min + u[..., 1] * box.height], axis=-1)


def extract_candidates(contour, box: BBox, n: int = N_CANDIDATES) -> np.ndarray:
    """Box-local candidate points, (n, 2), clipped to the unit square."""
    poly = _polygon(contour, start=(box.x_min, box.y_min))
    return np.clip(to_local(_points_at(poly, _sample_positions(poly, n)), box), 0.0, 1.0)


def candidate_descriptors(contour, box: BBox, n: int = N_CANDIDATES) -> tuple[np.ndarray, np.ndarray]:
    """(local candidate points, descriptors) for one box."""
    poly = _polygon(contour, start=(box.x_min, box.y_min))
    pts, desc = _sample_descriptors(poly, n)
    return np.clip(to_local(pts, box), 0.0, 1.0), desc


def describe(contour, candidate: Point) -> np.ndarray:
    """Unit descriptor at the contour point nearest to candidate."""
    poly = _polygon(contour)
    return _descriptors(poly, np.array([_arc_position(poly, candidate)]))[0]


# ---------------------------------------------------------------------------
# priors

@dataclass(frozen=True)
class PriorEntry:
    d_ref: np.ndarray
    sample_count: int


ShapePrior = dict  # InstrumentClass -> PriorEntry


def learn_prior(labeled: Sequence[tuple[Sequence[Point], Point]], cls: Optional[InstrumentClass] = None
                ) -> PriorEntry:
    """Reference descriptor = normalised mean of the descriptors at labelled tips."""
    if not labeled:
        raise ValueError(f"no labelled samples{' for ' + cls.value if cls else ''}")
    total = np.zeros(DESCRIPTOR_DIM)
    for contour, tip in labeled:
        total += describe(contour, tip)
    norm = np.linalg.norm(total)
    if norm == 0:
        raise ValueError("labelled samples produce a zero mean descriptor")
    return PriorEntry(total / norm, len(labeled))


def write_prior(fh: IO[str], prior: Mapping[InstrumentClass, PriorEntry]) -> None:
    obj = {c.value: {"d_ref": prior[c].d_ref.tolist(), "sample_count": prior[c].sample_count}
           for c in sorted(prior, key=lambda c: c.value)}
    json.dump(obj, fh, indent=1)
    fh.write("\n")


def read_prior(fh: IO[str]) -> dict:
    obj = json.load(fh)
    prior = {}
    for key, entry in obj.items():
        if key.startswith("_"):
            continue
        d = np.asarray(entry["d_ref"], dtype=float)
        if d.shape != (DESCRIPTOR_DIM,):
            raise ValueError(f"prior for {key} must have {DESCRIPTOR_DIM} values")
        prior[InstrumentClass.parse(key)] = PriorEntry(d, int(entry["sample_count"]))
    return prior


# ---------------------------------------------------------------------------
# matching

def match_tip(descriptors: np.ndarray, d_ref: np.ndarray) -> tuple[int, float]:
    """Index and cosine similarity of the best candidate; lowest index wins ties."""
    D = np.asarray(descriptors, dtype=float)
    norms = np.linalg.norm(D, axis=1)
    if not np.any(norms > 0):
        raise ValueError("all candidate descriptors are zero")
    ref = np.asarray(d_ref, dtype=float)
    sims = np.full(len(D), -np.inf)
    ok = norms > 0
    sims[ok] = (D[ok] @ ref) / (norms[ok] * np.linalg.norm(ref))
    i = int(np.argmax(sims))
    return i, float(np.clip(sims[i], -1.0, 1.0))


@dataclass(frozen=True)
class TipPoint:
    object_id: int
    cls: InstrumentClass
    frame_index: int
    x: float
    y: float
    similarity: float
    interpolated: bool = False


def locate_box_tip(contour, box: BBox, d_ref: np.ndarray) -> tuple[float, float, float]:
    local, desc = candidate_descriptors(contour, box)
    i, sim = match_tip(desc, d_ref)
    x, y = to_scene(local[i], box)
    return float(x), float(y), sim


def _batch_locate(contours: np.ndarray, boxes: np.ndarray, d_ref: np.ndarray
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised locate_box_tip over B contours sharing a vertex count.

    contours (B, M, 2), boxes (B, 4) -> scene tips (B, 2), similarities (B,).
    """
    v = np.asarray(contours, dtype=float)
    B, M, _ = v.shape
    nxt = np.roll(v, -1, axis=1)
    area = np.sum(v[..., 0] * nxt[..., 1] - nxt[..., 0] * v[..., 1], axis=1)
    v = np.where((area < 0)[:, None, None], v[:, ::-1], v)
    d = np.hypot(v[..., 0] - boxes[:, :1], v[..., 1] - boxes[:, 1:2])
    order = (np.argmin(d, axis=1)[:, None] + np.arange(M)[None, :]) % M
    v = np.take_along_axis(v, order[..., None], axis=1)
    seg = np.roll(v, -1, axis=1) - v
    lengths = np.hypot(seg[..., 0], seg[..., 1])
    P = lengths.sum(axis=1)
    if not np.all(P > 0):
        raise ValueError("degenerate contour (zero perimeter)")
    cum = np.concatenate([np.zeros((B, 1)), np.cumsum(lengths, axis=1)[:, :-1]], axis=1)
    ang = np.arctan2(seg[..., 1], seg[..., 0])
    pos = (ang + math.pi) / (2 * math.pi) * N_ANGLE_BINS - 0.5
    lo = np.floor(pos)
    w_hi = pos - lo
    lo = lo.astype(int) % N_ANGLE_BINS

    n = N_CANDIDATES
    s = np.arange(n)[None, :] * (P / n)[:, None]
    idx = np.maximum(np.sum(cum[:, None, :] <= s[:, :, None], axis=2) - 1, 0)
    L = np.take_along_axis(lengths, idx, axis=1)
    C = np.take_along_axis(cum, idx, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(L > 0, (s - C) / L, 0.0)
    pts = (np.take_along_axis(v, idx[..., None], axis=1)
           + t[..., None] * np.take_along_axis(seg, idx[..., None], axis=1))

    step = n // N_RADIAL
    ridx = (np.arange(n)[:, None] + step * np.arange(N_RADIAL)[None, :] + step // 2) % n
    dr = pts[:, ridx, :] - pts[:, :, None, :]
    radial = np.sqrt(dr[..., 0] ** 2 + dr[..., 1] ** 2) / P[:, None, None]

    r = WINDOW_FRACTION * P
    a = (s - r[:, None])[..., None]
    b = (s + r[:, None])[..., None]
    c = cum[:, None, :]
    e = (cum + lengths)[:, None, :]
    Pb = P[:, None, None]
    overlap = np.zeros((B, n, M))
    for shift in (-Pb, 0.0, Pb):
        overlap += np.maximum(np.minimum(b + shift, e) - np.maximum(a + shift, c), 0.0)
    onehot = np.zeros((B, M, N_ANGLE_BINS))
    bi, mi = np.meshgrid(np.arange(B), np.arange(M), indexing="ij")
    onehot[bi, mi, lo] = 1.0 - w_hi
    onehot[bi, mi, (lo + 1) % N_ANGLE_BINS] = w_hi
    hist = np.einsum("bnm,bmk->bnk", overlap, onehot) / (2 * r)[:, None, None]

    desc = np.concatenate([radial, hist], axis=2)
    norms = np.sqrt(np.einsum("bnk,bnk->bn", desc, desc))
    if not np.all(np.any(norms > 0, axis=1)):
        raise ValueError("all candidate descriptors are zero")
    ref = np.asarray(d_ref, dtype=float)
    with np.errstate(invalid="ignore", divide="ignore"):
        sims = np.where(norms > 0, (desc @ ref) / (norms * np.linalg.norm(ref)), -np.inf)
    best = np.argmax(sims, axis=1)
    rows = np.arange(B)
    w = np.maximum(boxes[:, 2] - boxes[:, 0], 1e-12)
    h = np.maximum(boxes[:, 3] - boxes[:, 1], 1e-12)
    p = pts[rows, best]
    u = np.clip((p[:, 0] - boxes[:, 0]) / w, 0.0, 1.0)
    q = np.clip((p[:, 1] - boxes[:, 1]) / h, 0.0, 1.0)
    xy = np.stack([boxes[:, 0] + u * (boxes[:, 2] - boxes[:, 0]),
                   boxes[:, 1] + q * (boxes[:, 3] - boxes[:, 1])], axis=1)
    return xy, np.clip(sims[rows, best], -1.0, 1.0)


def locate_tips(tracks: Iterable[Track], detections: Iterable[Detection],
                prior: Mapping[InstrumentClass, PriorEntry]) -> list[TipPoint]:
    """Tips for every tracked frame that has a contour, plus linear fill-ins inside gaps.

    Contours are joined to track states by (frame, class as reported by the
    detector); the prior used is the track's own (corrected) class.
    """
    by_key = {(d.frame_index, d.cls): d for d in detections if d.contour is not None}
    out: list[TipPoint] = []
    for trk in sorted(tracks, key=lambda t: t.object_id):
        if trk.cls not in prior:
            raise MissingPriorError(f"no shape prior for class {trk.cls.value}")
        d_ref = prior[trk.cls].d_ref
        found: list[Optional[tuple[float, float, float]]] = [None] * len(trk.states)
        batches: dict[int, list[tuple[int, Detection]]] = {}
        for k, st in enumerate(trk.states):
            det = by_key.get((st.frame_index, st.class_as_reported)) if st.source == DETECTED else None
            if det is not None:
                batches.setdefault(len(det.contour), []).append((k, det))
        for items in batches.values():
            boxes = np.array([trk.states[k].box.as_tuple() for k, _ in items])
            xy, sims = _batch_locate(np.array([d.contour for _, d in items], dtype=float), boxes, d_ref)
            for (k, _), (x, y), sim in zip(items, xy.tolist(), sims.tolist()):
                found[k] = (x, y, sim)
        known = [i for i, f in enumerate(found) if f is not None]
        for a, b in zip(known, known[1:]):
            fa, fb = trk.states[a].frame_index, trk.states[b].frame_index
            for k in range(a + 1, b):
                t = (trk.states[k].frame_index - fa) / (fb - fa)
                found[k] = tuple(pa + t * (pb - pa) for pa, pb in zip(found[a], found[b]))
        known_set = set(known)
        for k, (st, f) in enumerate(zip(trk.states, found)):
            if f is not None:
                out.append(TipPoint(trk.object_id, trk.cls, st.frame_index, f[0], f[1], f[2],
                                    k not in known_set))
    return out


TIP_COLUMNS = ["object_id", "class", "frame", "x", "y", "similarity", "interpolated"]


def write_tips_csv(fh: IO[str], tips: Iterable[TipPoint], comment: Optional[str] = None) -> None:
    if comment:
        fh.write(f"# {comment}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(TIP_COLUMNS)
    for t in tips:
        w.writerow([t.object_id, t.cls.value, t.frame_index, repr(t.x), repr(t.y), repr(t.similarity),
                    int(t.interpolated)])


def read_tips_csv(fh: IO[str]) -> list[TipPoint]:
    reader = csv.DictReader(line for line in fh if not line.startswith("#"))
    return [TipPoint(int(r["object_id"]), InstrumentClass.parse(r["class"]), int(r["frame"]),
                     float(r["x"]), float(r["y"]), float(r["similarity"]), bool(int(r["interpolated"])))
            for r in reader]
