"""Frames per second for fuse + track + tip localisation on a simulated stream."""
import argparse
import time

from microskill.fusion import fuse_stream
from microskill.simulator import ARCHETYPES, NoiseConfig, SkillCategory, default_prior, generate
from microskill.tips import locate_tips
from microskill.tracker import Tracker
from microskill.types import InstrumentClass


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--duration", type=float, default=120.0)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--with-needle", action="store_true", help="keep the needle (three objects per frame)")
    args = ap.parse_args()

    gt, dets = generate(ARCHETYPES[SkillCategory.MODERATE], NoiseConfig(), args.duration, 30.0, 0)
    if not args.with_needle:
        dets = [d for d in dets if d.cls != InstrumentClass.NEEDLE]
    prior = default_prior()
    stages = {"fuse": 0.0, "track": 0.0, "tips": 0.0}
    for _ in range(args.repeats):
        t0 = time.perf_counter()
        fused = fuse_stream(dets)
        t1 = time.perf_counter()
        tracks = Tracker().run(fused, range(gt.n_frames))
        t2 = time.perf_counter()
        locate_tips(tracks, fused, prior)
        t3 = time.perf_counter()
        for k, dt in zip(stages, (t1 - t0, t2 - t1, t3 - t2)):
            stages[k] += dt / args.repeats
    total = sum(stages.values())
    for k, dt in stages.items():
        print(f"{k:<6} {dt * 1000:8.1f} ms")
    print(f"{gt.n_frames} frames, {len(dets)} detections: {gt.n_frames / total:.0f} frames/s")


if __name__ == "__main__":
    main()
