"""Ground-truthed synthetic microanastomosis procedures.

A procedure is a scripted sequence of 3 cutting phases and 8 stitching phases.
The left hand holds a straight needle driver throughout; the right hand holds
scissors while cutting and a curved needle driver while stitching, and is
withdrawn briefly at every phase boundary. A needle is visible for the middle
part of each stitch. Tip paths are smooth splines modulated by a skill
archetype (tremor, wiggle, pauses, detours); each instrument is a rigid
class-shaped polygon whose apex is the tip.

The detector model adds box jitter, dropout gaps, short class flips and
occasional duplicate boxes, and every injected event is recorded.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import IO, Optional, Sequence, Union

import numpy as np
from scipy.interpolate import CubicSpline

from .classifier import SkillCategory, regroup
from .metrics import GTBox
from .tips import PriorEntry, learn_prior
from .types import ALL_CLASSES, BBox, Detection, InstrumentClass, StreamHeader

IC = InstrumentClass

# tip at the origin, instrument body along +x
TEMPLATES: dict[InstrumentClass, np.ndarray] = {
    IC.NEEDLE_DRIVER_S: np.array([(0, 0), (30, -7), (110, -14), (110, 14), (30, 7)], float),
    IC.NEEDLE_DRIVER_C: np.array([(0, 0), (10, -7), (28, -11), (110, -15), (110, 13), (30, 5), (12, 1)], float),
    IC.SCISSORS_S: np.array([(0, 0), (48, -6), (60, -4), (66, -11), (110, -15), (110, 15), (66, 11), (60, 4),
                             (48, 6)], float),
    IC.SCISSORS_C: np.array([(0, 0), (8, -8), (24, -12), (52, -10), (110, -15), (110, 15), (52, 10), (24, 2),
                             (8, -2)], float),
}


def _needle_template() -> np.ndarray:
    # crescent: sharp point at the origin, blunt swaged end at the other side
    r_out, r_in = 24.0, 21.0
    a = np.linspace(0.0, math.pi, 12)
    outer = np.column_stack([r_out * np.cos(a), -r_out * np.sin(a)])
    b = np.linspace(math.pi, 0.25, 10)
    inner = np.column_stack([r_in * np.cos(b), -r_in * np.sin(b)])
    pts = np.vstack([outer, inner])
    return pts - outer[0]


TEMPLATES[IC.NEEDLE] = _needle_template()

# mean orientation of the +x body axis on screen (radians, y down)
BASE_ORIENTATION = {
    IC.NEEDLE_DRIVER_S: math.radians(140),
    IC.NEEDLE_DRIVER_C: math.radians(40),
    IC.SCISSORS_S: math.radians(40),
    IC.SCISSORS_C: math.radians(40),
    IC.NEEDLE: math.radians(-20),
}
ORIENTATION_SPREAD = math.radians(8)
WIGGLE_REF_HZ = 2.0


@dataclass(frozen=True)
class SkillArchetype:
    label: SkillCategory
    tremor_amplitude: float  # px
    jerk_scale: float
    pause_rate: float  # pauses per minute
    path_inefficiency: float  # detour factor >= 1
    tremor_band: tuple[float, float] = (6.0, 12.0)

    def __post_init__(self):
        if min(self.tremor_amplitude, self.jerk_scale, self.pause_rate) <= 0 or self.path_inefficiency < 1:
            raise ValueError("archetype parameters must be positive, detour factor >= 1")

    def jittered(self, rng: np.random.Generator, spread: float) -> "SkillArchetype":
        if spread <= 0:
            return self
        f = np.exp(rng.normal(0.0, spread, 4))
        return replace(self, tremor_amplitude=self.tremor_amplitude * f[0], jerk_scale=self.jerk_scale * f[1],
                       pause_rate=self.pause_rate * f[2],
                       path_inefficiency=1.0 + (self.path_inefficiency - 1.0) * f[3])


ARCHETYPES: dict[SkillCategory, SkillArchetype] = {
    SkillCategory.POOR: SkillArchetype(SkillCategory.POOR, 5.0, 2.5, 8.0, 1.6),
    SkillCategory.MODERATE: SkillArchetype(SkillCategory.MODERATE, 2.0, 1.6, 4.0, 1.3),
    SkillCategory.GOOD: SkillArchetype(SkillCategory.GOOD, 0.3, 1.0, 1.5, 1.05),
}

SCORE_RANGES = {SkillCategory.POOR: (1.5, 2.5), SkillCategory.MODERATE: (2.5, 3.5),
                SkillCategory.GOOD: (3.5, 4.8)}


@dataclass(frozen=True)
class NoiseConfig:
    dropout_prob: float = 0.05
    dropout_max_gap: int = 1
    misclass_prob: float = 0.01
    misclass_max_persistence: int = 2
    box_jitter_std: float = 1.0
    confidence_range: tuple[float, float] = (0.80, 0.99)
    duplicate_prob: float = 0.01

    def __post_init__(self):
        for name in ("dropout_prob", "misclass_prob", "duplicate_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.dropout_max_gap < 1 or self.misclass_max_persistence < 1:
            raise ValueError("gap and persistence lengths must be >= 1")
        lo, hi = self.confidence_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError("confidence_range must be an ordered pair within [0, 1]")

    @classmethod
    def zero(cls) -> "NoiseConfig":
        return cls(0.0, 1, 0.0, 1, 0.0, (0.9, 0.9), 0.0)


@dataclass(frozen=True)
class SceneConfig:
    duration_s: float = 40.0
    frame_rate: float = 30.0
    width: int = 1280
    height: int = 720
    n_cut: int = 3
    n_stitch: int = 8
    exchange_gap_s: float = 1.2
    needle_visible_fraction: float = 0.6


@dataclass
class GroundTruth:
    header: StreamHeader
    label: SkillCategory
    score: float
    archetype: SkillArchetype
    seed: int
    n_frames: int
    boxes: list[GTBox]
    tips: list[tuple[int, InstrumentClass, float, float]]  # frame, class, x, y
    events: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        arch = asdict(self.archetype)
        arch["label"] = self.archetype.label.label
        return {
            "label": self.label.label, "score": self.score, "seed": self.seed, "n_frames": self.n_frames,
            "frame_rate": self.header.frame_rate, "width": self.header.frame_width,
            "height": self.header.frame_height, "archetype": arch,
            "objects": [[g.frame_index, g.cls.value, *g.box.as_tuple(), t[2], t[3]]
                        for g, t in zip(self.boxes, self.tips)],
            "events": self.events,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GroundTruth":
        header = StreamHeader(float(obj["frame_rate"]), int(obj["width"]), int(obj["height"]))
        arch = dict(obj["archetype"])
        arch["label"] = SkillCategory.parse(arch["label"])
        arch["tremor_band"] = tuple(arch["tremor_band"])
        boxes, tips = [], []
        for f, c, x0, y0, x1, y1, tx, ty in obj["objects"]:
            boxes.append(GTBox(int(f), IC.parse(c), BBox(x0, y0, x1, y1)))
            tips.append((int(f), IC.parse(c), float(tx), float(ty)))
        return cls(header, SkillCategory.parse(obj["label"]), float(obj["score"]), SkillArchetype(**arch),
                   int(obj["seed"]), int(obj["n_frames"]), boxes, tips, list(obj.get("events", [])))


def write_ground_truth(fh: IO[str], gt: GroundTruth) -> None:
    json.dump(gt.to_json(), fh)
    fh.write("\n")


def read_ground_truth(fh: IO[str]) -> GroundTruth:
    return GroundTruth.from_json(json.load(fh))


# ---------------------------------------------------------------------------
# geometry

def pose_contour(cls: InstrumentClass, tip: np.ndarray, angle) -> np.ndarray:
    """Template of cls rotated by angle and translated so its apex sits at tip.

    Vectorised over leading dimensions of tip (..., 2) and angle (...).
    """
    t = TEMPLATES[cls]
    c, s = np.cos(angle)[..., None], np.sin(angle)[..., None]
    x = t[:, 0] * c - t[:, 1] * s
    y = t[:, 0] * s + t[:, 1] * c
    return np.stack([x, y], axis=-1) + np.asarray(tip)[..., None, :]


def labeled_tip_samples(cls: InstrumentClass, n: int, seed: int = 0) -> list[tuple[np.ndarray, tuple]]:
    """(contour, tip) pairs at random poses drawn from the class's orientation range."""
    rng = np.random.default_rng([seed, ALL_CLASSES.index(cls), 17])
    out = []
    for _ in range(n):
        tip = rng.uniform([300, 200], [900, 500])
        ang = BASE_ORIENTATION[cls] + rng.uniform(-1.5, 1.5) * ORIENTATION_SPREAD
        out.append((pose_contour(cls, tip, ang), (float(tip[0]), float(tip[1]))))
    return out


def default_prior(n_samples: int = 40, seed: int = 0) -> dict[InstrumentClass, PriorEntry]:
    return {c: learn_prior(labeled_tip_samples(c, n_samples, seed), c) for c in ALL_CLASSES}


# ---------------------------------------------------------------------------
# motion

def _time_warp(t: np.ndarray, pause_rate: float, rng: np.random.Generator) -> np.ndarray:
    """Progress variable that stalls smoothly during randomly placed pauses."""
    dt = t[1] - t[0]
    rate = np.ones_like(t)
    duration = t[-1] + dt
    # stratified placement keeps the pause count close to rate * duration
    expected = pause_rate * duration / 60.0
    n_pauses = int(expected + rng.random())
    ramp = 0.2
    slots = (np.arange(n_pauses) + rng.uniform(0.1, 0.9, n_pauses)) * (duration / max(n_pauses, 1))
    for start in slots:
        hold = rng.uniform(0.6, 1.2)
        a, b = start, start + 2 * ramp + hold
        u = np.clip((t - a) / ramp, 0, 1)
        v = np.clip((b - t) / ramp, 0, 1)
        dip = 0.5 * (1 - np.cos(np.pi * np.minimum(u, v)))  # 0 outside, 1 on the hold
        rate = np.minimum(rate, 1 - dip)
    return np.concatenate([[0.0], np.cumsum(rate[:-1]) * dt])


def tip_path(t: np.ndarray, arch: SkillArchetype, region: tuple, rng: np.random.Generator) -> np.ndarray:
    """Tip positions (n, 2) at times t for one hand."""
    tau = _time_warp(t, arch.pause_rate, rng)
    span = tau[-1] + 2.0
    step = 1.5
    knots = np.arange(0.0, span + step, step)
    (x0, y0), (x1, y1) = region
    way = rng.uniform([x0, y0], [x1, y1], size=(len(knots), 2))
    # detours: displace a midpoint sideways in proportion to the inefficiency
    mids_t = knots[:-1] + step / 2
    seg = way[1:] - way[:-1]
    normal = np.column_stack([-seg[:, 1], seg[:, 0]])
    side = rng.choice([-1.0, 1.0], size=len(mids_t))[:, None]
    mids = 0.5 * (way[1:] + way[:-1]) + side * 0.5 * (arch.path_inefficiency - 1.0) * normal
    kt = np.concatenate([knots, mids_t])
    kp = np.vstack([way, mids])
    order = np.argsort(kt)
    base = CubicSpline(kt[order], kp[order], axis=0)(tau)

    wiggle = np.zeros_like(base)
    for _ in range(2):
        f = rng.uniform(1.0, 3.0)
        d = rng.normal(size=2)
        # amplitude ~ f^-3 so the jerk of the wiggle depends on jerk_scale only
        amp = 1.5 * arch.jerk_scale * (WIGGLE_REF_HZ / f) ** 3
        wiggle += amp * np.sin(2 * np.pi * f * tau + rng.uniform(0, 2 * np.pi))[:, None] \
            * (d / np.linalg.norm(d))
    # elliptical tremor: some component always lies along the direction of motion
    f_tr = rng.uniform(*arch.tremor_band)
    phase = 2 * np.pi * f_tr * t + rng.uniform(0, 2 * np.pi)
    minor = rng.uniform(0.6, 1.0)
    rot = rng.uniform(0, np.pi)
    ex, ey = np.cos(phase), minor * np.sin(phase)
    tremor = arch.tremor_amplitude * np.column_stack([ex * np.cos(rot) - ey * np.sin(rot),
                                                      ex * np.sin(rot) + ey * np.cos(rot)])
    return base + wiggle + tremor


def _orientation(t: np.ndarray, cls: InstrumentClass, rng: np.random.Generator) -> np.ndarray:
    f = rng.uniform(0.05, 0.2)
    return BASE_ORIENTATION[cls] + ORIENTATION_SPREAD * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))


def _schedule(n: int, fps: float, scene: SceneConfig):
    """Visibility masks per role: left, right-cut, right-stitch, needle."""
    n_phases = scene.n_cut + scene.n_stitch
    bounds = np.linspace(0, n, n_phases + 1).round().astype(int)
    gap = int(round(scene.exchange_gap_s * fps))
    right_cut = np.zeros(n, bool)
    right_stitch = np.zeros(n, bool)
    needle = np.zeros(n, bool)
    for p in range(n_phases):
        a, b = bounds[p], bounds[p + 1]
        a_vis = a + (gap if p > 0 else 0)
        if p < scene.n_cut:
            right_cut[a_vis:b] = True
        else:
            right_stitch[a_vis:b] = True
            length = b - a_vis
            margin = int(length * (1 - scene.needle_visible_fraction) / 2)
            needle[a_vis + margin:b - margin] = True
    return np.ones(n, bool), right_cut, right_stitch, needle


# ---------------------------------------------------------------------------
# detector model

def _gap_start_prob(p: float, max_gap: int) -> float:
    m = (1 + max_gap) / 2
    return p / (m * (1 - p) + p) if p < 1 else 1.0


def _map_contour(contour: np.ndarray, src: BBox, dst: BBox) -> np.ndarray:
    sx = dst.width / src.width if src.width > 0 else 1.0
    sy = dst.height / src.height if src.height > 0 else 1.0
    out = np.empty_like(contour)
    out[:, 0] = dst.x_min + (contour[:, 0] - src.x_min) * sx
    out[:, 1] = dst.y_min + (contour[:, 1] - src.y_min) * sy
    return out


@dataclass
class Procedure:
    pid: str
    header: StreamHeader
    ground_truth: GroundTruth
    detections: list[Detection]


def generate(archetype: SkillArchetype, noise: NoiseConfig = NoiseConfig(), duration_s: float = 40.0,
             frame_rate: float = 30.0, seed: int = 0, scene: Optional[SceneConfig] = None,
             score: Optional[float] = None) -> tuple[GroundTruth, list[Detection]]:
    """Simulate one procedure; fully determined by the arguments."""
    if not duration_s > 0:
        raise ValueError("duration must be positive")
    scene = replace(scene or SceneConfig(), duration_s=duration_s, frame_rate=frame_rate)
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * frame_rate))
    t = np.arange(n) / frame_rate
    header = StreamHeader(frame_rate, scene.width, scene.height)
    scissors = IC.SCISSORS_C if rng.random() < 0.5 else IC.SCISSORS_S
    if score is None:
        lo, hi = SCORE_RANGES[archetype.label]
        score = float(rng.uniform(lo, hi))
    if regroup(score) != archetype.label:
        raise ValueError(f"score {score} does not belong to {archetype.label.label}")

    W, H = scene.width, scene.height
    left = tip_path(t, archetype, ((0.30 * W, 0.35 * H), (0.48 * W, 0.65 * H)), rng)
    right = tip_path(t, archetype, ((0.50 * W, 0.30 * H), (0.68 * W, 0.60 * H)), rng)
    hold = rng.uniform(-1, 1, 2) * 4.0 + np.array([12.0, -22.0])
    needle = right + hold
    vis_left, vis_cut, vis_stitch, vis_needle = _schedule(n, frame_rate, scene)

    roles = [(IC.NEEDLE_DRIVER_S, left, vis_left), (scissors, right, vis_cut),
             (IC.NEEDLE_DRIVER_C, right, vis_stitch), (IC.NEEDLE, needle, vis_needle)]
    per_frame: list[list[tuple[InstrumentClass, BBox, np.ndarray, tuple]]] = [[] for _ in range(n)]
    for cls, path, vis in roles:
        ang = _orientation(t, cls, rng)
        contours = pose_contour(cls, path, ang)
        lo = contours.min(axis=1)
        hi = contours.max(axis=1)
        for f in np.flatnonzero(vis):
            box = BBox(float(lo[f, 0]), float(lo[f, 1]), float(hi[f, 0]), float(hi[f, 1]))
            per_frame[f].append((cls, box, contours[f], (float(path[f, 0]), float(path[f, 1]))))

    boxes: list[GTBox] = []
    tips = []
    events: list[dict] = []
    detections: list[Detection] = []
    drop_left = {c: 0 for c in ALL_CLASSES}
    flip_left = {c: 0 for c in ALL_CLASSES}
    flip_to = {c: c for c in ALL_CLASSES}
    last_flip = {c: -2 for c in ALL_CLASSES}
    start_p = _gap_start_prob(noise.dropout_prob, noise.dropout_max_gap)
    noise_rng = np.random.default_rng([seed, 1])
    for f in range(n):
        present = {obj[0] for obj in per_frame[f]}
        frame_dets = []
        for cls, box, contour, tip in sorted(per_frame[f], key=lambda o: o[0].value):
            boxes.append(GTBox(f, cls, box))
            tips.append((f, cls, tip[0], tip[1]))
            # draws happen unconditionally so the random stream does not depend on noise settings
            u_drop, u_gap, u_flip, u_len, u_dup, u_kind = noise_rng.random(6)
            conf = float(noise_rng.uniform(*noise.confidence_range))
            jit = np.clip(noise_rng.normal(0.0, 1.0, 4), -3.0, 3.0)  # truncated at 3 sigma
            if drop_left[cls] == 0 and u_drop < start_p:
                drop_left[cls] = 1 + int(u_gap * noise.dropout_max_gap)
            if drop_left[cls] > 0:
                drop_left[cls] -= 1
                events.append({"type": "dropout", "frame": f, "class": cls.value})
                continue
            # one clean frame between events so runs never exceed the persistence bound
            if flip_left[cls] == 0 and u_flip < noise.misclass_prob and last_flip[cls] < f - 1:
                absent = [c for c in ALL_CLASSES if c not in present]
                if absent:
                    flip_left[cls] = 1 + int(u_len * noise.misclass_max_persistence)
                    flip_to[cls] = absent[int(u_kind * len(absent))]
            reported = cls
            if flip_left[cls] > 0:
                flip_left[cls] -= 1
                if flip_to[cls] not in present:
                    reported = flip_to[cls]
                    last_flip[cls] = f
                    events.append({"type": "flip", "frame": f, "class": cls.value, "reported": reported.value})
            if noise.box_jitter_std > 0:
                v = np.array(box.as_tuple()) + noise.box_jitter_std * jit
                dbox = BBox(min(v[0], v[2]), min(v[1], v[3]), max(v[0], v[2]), max(v[1], v[3]))
                dcontour = _map_contour(contour, box, dbox)
            else:
                dbox, dcontour = box, contour
            frame_dets.append(Detection(f, reported, conf, dbox, tuple(map(tuple, dcontour.tolist()))))
            if u_dup < noise.duplicate_prob:
                if u_kind < 0.5:
                    shrink = 0.06 * min(dbox.width, dbox.height)
                    dup = BBox(dbox.x_min + shrink, dbox.y_min, dbox.x_max, dbox.y_max - shrink)
                    kind = "branch"
                else:
                    dx = dbox.width * 1.5 + 10
                    dup = BBox(dbox.x_min - dx, dbox.y_min, dbox.x_max - dx, dbox.y_max)
                    kind = "shadow"
                frame_dets.append(Detection(f, reported, round(conf * 0.7, 6), dup, None))
                events.append({"type": "duplicate", "kind": kind, "frame": f, "class": cls.value})
        detections.extend(frame_dets)

    gt = GroundTruth(header, archetype.label, score, archetype, seed, n, boxes, tips, events)
    return gt, detections


def simulate_procedure(label: SkillCategory, seed: int, noise: NoiseConfig = NoiseConfig(),
                       duration_s: float = 40.0, frame_rate: float = 30.0, archetype_spread: float = 0.0,
                       pid: Optional[str] = None) -> Procedure:
    rng = np.random.default_rng([seed, 99])
    arch = ARCHETYPES[label].jittered(rng, archetype_spread)
    gt, dets = generate(arch, noise, duration_s, frame_rate, seed)
    return Procedure(pid or f"{label.label.lower()}_{seed}", gt.header, gt, dets)


PAPER_CLASS_SIZES = {SkillCategory.POOR: 28, SkillCategory.MODERATE: 16, SkillCategory.GOOD: 14}


def benchmark_suite(n_per_class: Union[int, dict] = 1, seed: int = 0, noise: NoiseConfig = NoiseConfig(),
                    duration_s: float = 40.0, frame_rate: float = 30.0, archetype_spread: float = 0.25
                    ) -> list[Procedure]:
    """Labelled procedures; pass PAPER_CLASS_SIZES (or "paper") for the 28/16/14 benchmark."""
    if n_per_class == "paper":
        n_per_class = PAPER_CLASS_SIZES
    sizes = n_per_class if isinstance(n_per_class, dict) else {c: int(n_per_class) for c in SkillCategory}
    if any(v < 1 for v in sizes.values()):
        raise ValueError("n_per_class must be >= 1")
    out = []
    for c in SkillCategory:
        for i in range(sizes.get(c, 0)):
            s = int(np.random.default_rng([seed, int(c), i]).integers(2 ** 31))
            out.append(simulate_procedure(c, s, noise, duration_s, frame_rate, archetype_spread,
                                          pid=f"{c.label.lower()}_{i:02d}"))
    return out
