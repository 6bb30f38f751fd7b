import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from shapely.geometry import box as shp_box

from microskill.fusion import FusionConfig, fuse_chain, fuse_stream, merge_pair, resolve_duplicates
from microskill.types import ALL_CLASSES, BBox, Detection, InstrumentClass, envelope, iou

from oracles import all_merge_orders, ref_chain, ref_iou, ref_pair

IC = InstrumentClass
CFG = FusionConfig()


def det(cls, conf, box, frame=0):
    return Detection(frame, cls, conf, BBox(*box))


def test_config_validation():
    for bad in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            FusionConfig(tau_merge=bad)
    with pytest.raises(ValueError):
        FusionConfig(merged_confidence_rule="min")


def test_merge_branch():
    # IoU 0.8: (0,0,10,10) vs (0,0,10,8) -> 80 / 100
    a = det(IC.NEEDLE_DRIVER_C, 0.9, (0, 0, 10, 10))
    b = det(IC.NEEDLE_DRIVER_C, 0.7, (0, 0, 10, 8))
    assert iou(a.box, b.box) == pytest.approx(0.8)
    out = resolve_duplicates([a, b], CFG)
    assert len(out) == 1
    assert out[0].box == envelope(a.box, b.box)
    assert out[0].confidence == 0.9


def test_merge_branch_mean_rule():
    a = det(IC.NEEDLE_DRIVER_C, 0.9, (0, 0, 10, 10))
    b = det(IC.NEEDLE_DRIVER_C, 0.7, (0, 0, 10, 8))
    out = resolve_duplicates([a, b], FusionConfig(merged_confidence_rule="mean"))
    assert out[0].confidence == pytest.approx(0.8)


def test_argmax_branch():
    a = det(IC.SCISSORS_C, 0.6, (0, 0, 10, 10))
    b = det(IC.SCISSORS_C, 0.9, (6, 0, 16, 10))  # IoU 4/16 = 0.25
    assert iou(a.box, b.box) < 0.7
    assert resolve_duplicates([a, b], CFG) == [b]


def test_single_per_class_passes_through():
    dets = [det(c, 0.5 + 0.1 * i, (i, i, i + 5, i + 5)) for i, c in enumerate(ALL_CLASSES)]
    assert resolve_duplicates(dets, CFG) == dets


def test_empty_frame():
    assert resolve_duplicates([], CFG) == []
    assert fuse_stream([], CFG) == []


def test_iou_exactly_tau_is_not_merged():
    a = det(IC.NEEDLE, 0.9, (0, 0, 10, 10))
    b = det(IC.NEEDLE, 0.8, (0, 0, 10, 7))  # IoU 0.7 exactly
    assert iou(a.box, b.box) == 0.7
    assert resolve_duplicates([a, b], CFG) == [a]


def test_three_collinear_boxes_merge_to_one_envelope():
    boxes = [(0, 0, 10, 10), (0.5, 0, 10.5, 10), (1.0, 0, 11.0, 10)]
    dets = [det(IC.NEEDLE, c, b) for c, b in zip((0.8, 0.9, 0.7), boxes)]
    out = fuse_chain(dets, CFG)
    assert out.box == BBox(0, 0, 11.0, 10)
    assert out.confidence == 0.9
    orders = all_merge_orders([(d.confidence, d.box.as_tuple()) for d in dets], CFG.tau_merge)
    assert orders == {(0.9, (0, 0, 11.0, 10))}


def test_three_disjoint_keep_highest():
    dets = [det(IC.NEEDLE, c, (30 * i, 0, 30 * i + 10, 10)) for i, c in enumerate((0.5, 0.7, 0.9))]
    assert fuse_chain(dets, CFG) is dets[2]


def test_confidence_tie_breaks_by_area_then_x():
    a = det(IC.NEEDLE, 0.8, (0, 0, 10, 10))
    b = det(IC.NEEDLE, 0.8, (50, 0, 62, 12))
    c = det(IC.NEEDLE, 0.8, (100, 0, 112, 12))
    assert fuse_chain([a, b, c], CFG) is b
    assert fuse_chain([c, b, a], CFG) is b


def test_merged_detection_keeps_winner_contour():
    a = Detection(0, IC.NEEDLE, 0.9, BBox(0, 0, 10, 10), ((0, 0), (10, 0), (5, 10)))
    b = Detection(0, IC.NEEDLE, 0.6, BBox(0, 0, 10, 9))
    assert merge_pair(a, b, CFG).contour == a.contour
    assert merge_pair(b, a, CFG).contour == a.contour


def test_iou_matches_polygon_library(rng):
    for _ in range(500):
        x0, y0 = rng.uniform(0, 50, 2)
        a = BBox(x0, y0, x0 + rng.uniform(1, 30), y0 + rng.uniform(1, 30))
        x1, y1 = rng.uniform(0, 50, 2)
        b = BBox(x1, y1, x1 + rng.uniform(1, 30), y1 + rng.uniform(1, 30))
        pa, pb = shp_box(*a.as_tuple()), shp_box(*b.as_tuple())
        expect = pa.intersection(pb).area / pa.union(pb).area
        assert iou(a, b) == pytest.approx(expect, abs=1e-12)


def random_frame(rng, frame=0):
    """Clusters of same-class boxes whose IoUs straddle the merge threshold."""
    dets = []
    for cls in rng.choice(ALL_CLASSES, size=rng.integers(0, 4), replace=False):
        cx, cy = rng.uniform(100, 1000), rng.uniform(100, 600)
        w, h = rng.uniform(20, 150, 2)
        for _ in range(rng.integers(1, 5)):
            s = rng.uniform(0.0, 0.35, 4) * np.array([w, h, w, h]) * rng.choice([-1, 1], 4)
            box = BBox(cx - w / 2 + min(s[0], 0), cy - h / 2 + min(s[1], 0),
                       cx + w / 2 + max(s[2], 0), cy + h / 2 + max(s[3], 0))
            if rng.random() < 0.2:
                box = BBox(box.x_min + 3 * w, box.y_min, box.x_max + 3 * w, box.y_max)
            conf = float(rng.choice([0.5, 0.7, 0.9])) if rng.random() < 0.2 else float(rng.uniform(0.3, 1))
            dets.append(Detection(frame, IC(cls), conf, box))
    order = rng.permutation(len(dets))
    return [dets[i] for i in order]


def check_frame(frame_dets, cfg):
    """Compare one fused frame against the oracle; returns the number of pairs checked."""
    out = resolve_duplicates(frame_dets, cfg)
    classes = [d.cls for d in out]
    assert len(classes) == len(set(classes))
    pairs = 0
    for o in out:
        group = [(d.confidence, d.box.as_tuple()) for d in frame_dets if d.cls == o.cls]
        if len(group) == 2:
            expect = ref_pair(group[0], group[1], cfg.tau_merge)
            pairs += 1
        else:
            expect = ref_chain(group, cfg.tau_merge)
        assert (o.confidence, o.box.as_tuple()) == expect
    assert {d.cls for d in frame_dets} == set(classes)
    return pairs


def test_random_frames_match_reference(rng):
    for f in range(500):
        check_frame(random_frame(rng, f), CFG)


@given(st.integers(0, 2 ** 32 - 1), st.floats(0.05, 0.95))
def test_fusion_properties(seed, tau):
    rng = np.random.default_rng(seed)
    cfg = FusionConfig(tau_merge=tau)
    frame = random_frame(rng)
    out = resolve_duplicates(frame, cfg)
    assert resolve_duplicates(out, cfg) == out
    for o in out:
        group = [d for d in frame if d.cls == o.cls]
        assert o.confidence == max(d.confidence for d in group)
        assert any(o.box.contains(d.box) for d in group)
        if not any(o.box == d.box for d in group):
            # a merged box is the envelope of at least two inputs
            inside = [d for d in group if o.box.contains(d.box)]
            assert len(inside) >= 2
            env = inside[0].box
            for d in inside[1:]:
                env = envelope(env, d.box)
            assert env == o.box


def test_fuse_stream_is_per_frame(rng):
    frames = [random_frame(rng, f) for f in range(30)]
    flat = [d for fr in frames for d in fr]
    out = fuse_stream(flat, CFG)
    expect = [d for fr in frames for d in resolve_duplicates(fr, CFG)]
    assert out == expect
