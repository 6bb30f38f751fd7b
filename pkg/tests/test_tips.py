import io
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from microskill.fusion import fuse_stream
from microskill.simulator import (ARCHETYPES, NoiseConfig, SkillCategory, default_prior, generate,
                                  labeled_tip_samples, pose_contour)
from microskill.tips import (DESCRIPTOR_DIM, MissingPriorError, N_CANDIDATES, _batch_locate, _polygon,
                             candidate_descriptors, describe, extract_candidates, learn_prior,
                             locate_box_tip, locate_tips, match_tip, read_prior, read_tips_csv, to_local,
                             to_scene, write_prior, write_tips_csv)
from microskill.tracker import Tracker
from microskill.types import BBox, Detection, InstrumentClass as IC

from oracles import ref_descriptor

SQUARE = [(10, 10), (110, 10), (110, 110), (10, 110)]
# long thin wedge with its apex at the origin
WEDGE = [(0.0, 0.0), (120.0, -14.0), (120.0, 14.0)]
_PRIOR = default_prior(10)


def bbox_of(contour):
    c = np.asarray(contour, dtype=float)
    return BBox(*c.min(axis=0), *c.max(axis=0))


def test_square_sixteen_per_side():
    pts = extract_candidates(SQUARE, bbox_of(SQUARE))
    assert pts.shape == (N_CANDIDATES, 2)
    # the corners count toward the side whose edge starts there
    top = np.sum((np.isclose(pts[:, 1], 0)) & (pts[:, 0] < 1))
    right = np.sum((np.isclose(pts[:, 0], 1)) & (pts[:, 1] < 1))
    bottom = np.sum((np.isclose(pts[:, 1], 1)) & (pts[:, 0] > 0))
    left = np.sum((np.isclose(pts[:, 0], 0)) & (pts[:, 1] > 0))
    for n in (top, right, bottom, left):
        assert abs(n - 16) <= 1
    np.testing.assert_allclose(pts[0], [0, 0])  # starts at the top-left vertex
    assert pts[1, 1] == pytest.approx(0) and pts[1, 0] > 0  # then moves clockwise (+x on screen)


def test_equally_spaced_contour_returned_verbatim():
    a = 2 * math.pi * np.arange(64) / 64
    circle = np.column_stack([200 + 50 * np.cos(a), 100 + 50 * np.sin(a)])
    box = bbox_of(circle)
    pts = to_scene(extract_candidates(circle, box), box)
    got = sorted(map(tuple, np.round(pts, 9)))
    want = sorted(map(tuple, np.round(circle, 9)))
    np.testing.assert_allclose(got, want, atol=1e-9)


def test_two_vertices_rejected():
    with pytest.raises(ValueError):
        extract_candidates([(0, 0), (1, 1)], BBox(0, 0, 1, 1))


def test_zero_perimeter_rejected():
    with pytest.raises(ValueError, match="perimeter"):
        extract_candidates([(5, 5), (5, 5), (5, 5)], BBox(0, 0, 10, 10))


def test_descriptor_matches_edge_by_edge_oracle(rng):
    for _ in range(20):
        k = rng.integers(3, 12)
        ang = np.sort(rng.uniform(0, 2 * math.pi, k))
        rad = rng.uniform(20, 80, k)
        contour = np.column_stack([300 + rad * np.cos(ang), 200 + rad * np.sin(ang)])
        poly = _polygon(contour)
        for s0 in rng.uniform(0, poly.perimeter, 5):
            want = ref_descriptor(poly.verts, s0)
            got = describe(poly.verts, _walk(poly.verts, s0))
            np.testing.assert_allclose(got, want, atol=1e-9)


def _walk(verts, s0):
    s = 0.0
    for i in range(len(verts)):
        a, b = np.asarray(verts[i]), np.asarray(verts[(i + 1) % len(verts)])
        L = float(np.hypot(*(b - a)))
        if s0 <= s + L:
            return tuple(a + (s0 - s) / L * (b - a))
        s += L
    return tuple(verts[0])


def test_candidate_descriptors_match_describe():
    contour = pose_contour(IC.SCISSORS_C, np.array([400.0, 300.0]), 0.7)
    box = bbox_of(contour)
    local, desc = candidate_descriptors(contour, box)
    assert desc.shape == (N_CANDIDATES, DESCRIPTOR_DIM)
    scene = to_scene(local, box)
    for i in range(0, N_CANDIDATES, 7):
        np.testing.assert_allclose(desc[i], describe(contour, scene[i]), atol=1e-9)
    np.testing.assert_allclose(np.linalg.norm(desc, axis=1), 1.0, atol=1e-9)


def test_translation_invariance():
    c = np.asarray(WEDGE)
    box = bbox_of(c)
    _, d1 = candidate_descriptors(c, box)
    shifted = c + [100, 50]
    _, d2 = candidate_descriptors(shifted, bbox_of(shifted))
    np.testing.assert_allclose(d1, d2, atol=1e-12)


@given(st.floats(0.05, 20.0), st.floats(-500, 500), st.floats(-500, 500))
def test_scale_and_translation_invariance(scale, dx, dy):
    c = np.asarray(WEDGE)
    _, d1 = candidate_descriptors(c, bbox_of(c))
    moved = c * scale + [dx, dy]
    _, d2 = candidate_descriptors(moved, bbox_of(moved))
    np.testing.assert_allclose(d1, d2, atol=1e-9)


def test_distinct_candidates_distinct_descriptors():
    _, desc = candidate_descriptors(WEDGE, bbox_of(WEDGE))
    for i in range(N_CANDIDATES):
        for j in range(i + 1, N_CANDIDATES):
            assert np.max(np.abs(desc[i] - desc[j])) > 1e-6


def test_learn_prior_examples():
    c = np.asarray(WEDGE)
    d = describe(c, (0.0, 0.0))
    one = learn_prior([(c, (0.0, 0.0))])
    np.testing.assert_allclose(one.d_ref, d, atol=1e-12)
    assert one.sample_count == 1
    two = learn_prior([(c, (0.0, 0.0)), (c, (0.0, 0.0))])
    np.testing.assert_allclose(two.d_ref, d, atol=1e-12)
    other = (c, (120.0, 0.0))
    d2 = describe(*other)
    mixed = learn_prior([(c, (0.0, 0.0)), other])
    want = (d + d2) / np.linalg.norm(d + d2)
    np.testing.assert_allclose(mixed.d_ref, want, atol=1e-12)
    with pytest.raises(ValueError):
        learn_prior([], IC.NEEDLE)


def test_match_tip_exact_candidate(rng):
    D = rng.normal(size=(64, DESCRIPTOR_DIM))
    ref = D[23] / np.linalg.norm(D[23])
    i, sim = match_tip(D, ref)
    assert i == 23 and sim == pytest.approx(1.0)


def test_match_tip_orthogonal():
    D = np.zeros((5, 4))
    D[:, 1:] = np.arange(15).reshape(5, 3) + 1
    i, sim = match_tip(D, np.array([1.0, 0, 0, 0]))
    assert i == 0 and sim == 0.0  # every candidate ties at 0, lowest index wins


def test_match_tip_all_zero():
    with pytest.raises(ValueError):
        match_tip(np.zeros((3, 4)), np.ones(4) / 2)


def _rot(ang):
    return np.array([[math.cos(ang), -math.sin(ang)], [math.sin(ang), math.cos(ang)]])


def test_wedge_apex_found_by_exhaustive_sweep(rng):
    prior = learn_prior([(np.asarray(WEDGE) * s, (0.0, 0.0)) for s in (0.5, 2.0)])
    for _ in range(20):
        apex = rng.uniform(100, 500, 2)
        # the descriptor is orientation-aware; poses stay near the prior's orientation
        c = np.asarray(WEDGE) * rng.uniform(0.3, 3.0) @ _rot(rng.uniform(-0.2, 0.2)).T + apex
        box = bbox_of(c)
        local, _ = candidate_descriptors(c, box)
        scene = to_scene(local, box)
        sims = [float(describe(c, p) @ prior.d_ref) for p in scene]
        best = int(np.argmax(sims))
        x, y, sim = locate_box_tip(c, box, prior.d_ref)
        np.testing.assert_allclose((x, y), scene[best], atol=1e-9)
        assert sim == pytest.approx(max(sims), abs=1e-9)
        assert math.hypot(x - apex[0], y - apex[1]) < 1e-6


def test_to_scene_examples():
    box = BBox(10, 20, 50, 100)
    np.testing.assert_allclose(to_scene((0, 0), box), (10, 20))
    np.testing.assert_allclose(to_scene((1, 1), box), (50, 100))
    p = np.array([[17.5, 33.25], [49.0, 21.0]])
    np.testing.assert_allclose(to_scene(to_local(p, box), box), p, atol=1e-9)


def test_batched_path_equals_single_path(rng):
    prior = default_prior(10)
    for cls in (IC.NEEDLE_DRIVER_S, IC.NEEDLE, IC.SCISSORS_C):
        contours, boxes = [], []
        for _ in range(12):
            c = pose_contour(cls, rng.uniform(200, 800, 2), rng.uniform(-math.pi, math.pi))
            c = c + rng.normal(0, 0.5, c.shape)
            b = bbox_of(c)
            pad = rng.uniform(-2, 6, 4)
            contours.append(c)
            boxes.append(BBox(b.x_min - pad[0], b.y_min - pad[1], b.x_max + pad[2], b.y_max + pad[3]))
        xy, sims = _batch_locate(np.array(contours), np.array([b.as_tuple() for b in boxes]),
                                 prior[cls].d_ref)
        for c, b, p, s in zip(contours, boxes, xy, sims):
            x, y, sim = locate_box_tip(c, b, prior[cls].d_ref)
            np.testing.assert_allclose(p, (x, y), atol=1e-9)
            assert s == pytest.approx(sim, abs=1e-9)


@given(st.integers(0, 2**32 - 1), st.sampled_from(list(IC)))
def test_tip_inside_expanded_box(seed, cls):
    rng = np.random.default_rng(seed)
    c = pose_contour(cls, rng.uniform(0, 1000, 2), rng.uniform(-math.pi, math.pi))
    c = c + rng.normal(0, 1.0, c.shape)
    b = bbox_of(c)
    pad = rng.uniform(-3, 3, 4)
    box = BBox(b.x_min - pad[0], b.y_min - pad[1], b.x_max + pad[2], b.y_max + pad[3])
    x, y, sim = locate_box_tip(c, box, _PRIOR[cls].d_ref)
    assert box.x_min - 2 <= x <= box.x_max + 2
    assert box.y_min - 2 <= y <= box.y_max + 2
    assert -1.0 <= sim <= 1.0


def test_clean_stream_tip_error():
    prior = default_prior()
    gt, dets = generate(ARCHETYPES[SkillCategory.POOR], NoiseConfig.zero(), 15.0, 30.0, 3)
    tips = locate_tips(Tracker().run(fuse_stream(dets)), dets, prior)
    truth = {(f, c): (x, y) for f, c, x, y in gt.tips}
    errs = [math.hypot(t.x - truth[t.frame_index, t.cls][0], t.y - truth[t.frame_index, t.cls][1])
            for t in tips if not t.interpolated]
    assert len(errs) == len(gt.tips)
    assert max(errs) <= 3.0


def _wedge_stream(frames):
    out = []
    for f in frames:
        apex = np.array([100.0 + 4 * f, 200.0 + 2 * f])
        c = np.asarray(WEDGE) + apex
        out.append(Detection(f, IC.SCISSORS_S, 0.9, bbox_of(c), tuple(map(tuple, c))))
    return out


def test_gap_tip_is_interpolated():
    prior = {IC.SCISSORS_S: learn_prior([(np.asarray(WEDGE), (0.0, 0.0))])}
    dets = _wedge_stream([f for f in range(12) if f not in (5, 6, 7)])
    tips = locate_tips(Tracker().run(dets), dets, prior)
    assert [t.frame_index for t in tips] == list(range(12))
    by_f = {t.frame_index: t for t in tips}
    for f in (5, 6, 7):
        t = by_f[f]
        assert t.interpolated
        w = (f - 4) / 4
        assert t.x == pytest.approx(by_f[4].x + w * (by_f[8].x - by_f[4].x))
        assert t.y == pytest.approx(by_f[4].y + w * (by_f[8].y - by_f[4].y))
        # constant-velocity target: interpolation recovers the true apex
        assert t.x == pytest.approx(100 + 4 * f, abs=1e-6)
    assert not any(by_f[f].interpolated for f in (0, 4, 8, 11))


def test_missing_prior_names_class():
    dets = _wedge_stream(range(3))
    with pytest.raises(MissingPriorError, match="scissors_s"):
        locate_tips(Tracker().run(dets), dets, {IC.NEEDLE: _PRIOR[IC.NEEDLE]})


def test_prior_and_tips_round_trip():
    buf = io.StringIO()
    write_prior(buf, _PRIOR)
    back = read_prior(io.StringIO(buf.getvalue()))
    assert set(back) == set(_PRIOR)
    for c in back:
        np.testing.assert_array_equal(back[c].d_ref, _PRIOR[c].d_ref)
    prior = {IC.SCISSORS_S: learn_prior(labeled_tip_samples(IC.SCISSORS_S, 3))}
    dets = _wedge_stream(range(4))
    tips = locate_tips(Tracker().run(dets), dets, prior)
    buf = io.StringIO()
    write_tips_csv(buf, tips, comment="# x")
    assert read_tips_csv(io.StringIO(buf.getvalue())) == tips
