"""Detection and tracking metrics on simulated streams as dropout and flip rates vary.

    python scripts/tracking_eval.py --max-gap 1 5 15 30
"""
import argparse

from microskill.fusion import fuse_stream
from microskill.metrics import evaluate
from microskill.simulator import ARCHETYPES, NoiseConfig, SkillCategory, generate
from microskill.tracker import Tracker


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--archetype", default="moderate", choices=["poor", "moderate", "good"])
    ap.add_argument("--duration", type=float, default=120.0)
    ap.add_argument("--dropout", type=float, default=0.08)
    ap.add_argument("--max-gap", type=int, nargs="+", default=[1, 5, 15, 30])
    ap.add_argument("--flip", type=float, default=0.02)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    arch = ARCHETYPES[SkillCategory.parse(args.archetype)]
    print(f"{'max gap':>8} {'recovery':>9} {'n':>6} {'correction':>11} {'n':>5} {'mAP50':>6} {'mAP50-95':>9}")
    for gap in args.max_gap:
        noise = NoiseConfig(dropout_prob=args.dropout, dropout_max_gap=gap, misclass_prob=args.flip)
        gt, dets = generate(arch, noise, args.duration, 30.0, args.seed)
        fused = fuse_stream(dets)
        tracks = Tracker().run(fused, range(gt.n_frames))
        o = evaluate(fused, gt.boxes, tracks).overall
        print(f"{gap:>8} {o.recovery.value:>9.3f} {o.recovery.denominator:>6} {o.correction.value:>11.3f} "
              f"{o.correction.denominator:>5} {o.mAP50:>6.3f} {o.mAP50_95:>9.3f}")


if __name__ == "__main__":
    main()
