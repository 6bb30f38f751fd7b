import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from microskill.simulator import ARCHETYPES, NoiseConfig, SkillCategory, generate
from microskill.tracker import (DETECTED, PREDICTED, FilterState, KalmanFilter, Track, Tracker, TrackerConfig,
                                TrackerReport, TrackState, associate, box_to_xyah, correct_class, predict,
                                preserve_id, read_tracks_csv, write_tracks_csv, xyah_to_box)
from microskill.fusion import fuse_stream
from microskill.types import BBox, Detection, InstrumentClass

from oracles import brute_force_assignment

IC = InstrumentClass
CFG = TrackerConfig()
KF = KalmanFilter()


def moving(cls, frames, x0=100.0, vx=2.0, y=200.0, w=40.0, h=30.0, conf=0.9):
    return [Detection(f, cls, conf, BBox(x0 + vx * f, y, x0 + vx * f + w, y + h)) for f in frames]


def track_with(cls, boxes, oid=1):
    fs = KF.initiate(box_to_xyah(boxes[0]))
    states = [TrackState(i, b, DETECTED, cls) for i, b in enumerate(boxes)]
    return Track(oid, cls, states, fs)


# --- motion model -----------------------------------------------------------

def test_predict_zero_velocity_grows_covariance():
    fs = KF.initiate(np.array([10.0, 10.0, 1.0, 50.0]))
    trk = Track(1, IC.NEEDLE, [TrackState(0, xyah_to_box(fs.mean), DETECTED, IC.NEEDLE)], fs)
    p = predict(trk, KF)
    assert np.allclose(p.mean[:4], fs.mean[:4])
    assert np.trace(p.covariance) > np.trace(fs.covariance)


def test_predict_constant_velocity():
    mean = np.array([10.0, 10.0, 1.0, 50.0, 2.0, 0.0, 0.0, 0.0])
    p = KF.predict(FilterState(mean, np.eye(8)))
    assert p.mean[:2].tolist() == [12.0, 10.0]


@given(st.lists(st.floats(-50, 50), min_size=4, max_size=4), st.floats(5, 200))
def test_two_predicts_equal_double_step(vel, h):
    mean = np.array([100.0, 80.0, 0.7, h, *vel])
    mean[6] = abs(mean[6]) * 0.01  # keep aspect and height positive (the filter floors them)
    mean[7] = abs(mean[7]) * 0.01
    fs = FilterState(mean, np.eye(8))
    twice = KF.predict(KF.predict(fs)).mean
    F2 = KF.F @ KF.F
    assert np.allclose(twice, F2 @ mean, rtol=0, atol=1e-9)


@given(st.lists(st.tuples(st.floats(0, 500), st.floats(0, 500), st.floats(5, 100), st.floats(5, 100)),
                min_size=1, max_size=25))
def test_filter_covariance_stays_psd(measurements):
    fs = KF.initiate(np.array([50.0, 50.0, 1.0, 20.0]))
    for cx, cy, w, h in measurements:
        fs = KF.predict(fs)
        assert np.linalg.eigvalsh(fs.covariance).min() >= -1e-9
        fs = KF.update(fs, np.array([cx, cy, w / h, h]))
        assert np.allclose(fs.covariance, fs.covariance.T)
        assert np.linalg.eigvalsh(fs.covariance).min() >= -1e-9
        assert fs.mean[2] > 0 and fs.mean[3] > 0


def test_update_recentres_on_measurement():
    fs = KF.predict(KF.initiate(np.array([50.0, 50.0, 1.0, 20.0])))
    z = np.array([55.0, 48.0, 1.2, 22.0])
    assert KF.update(fs, z).mean[:4].tolist() == z.tolist()


def test_tracker_config_validation():
    with pytest.raises(ValueError):
        TrackerConfig(max_age=0)
    with pytest.raises(ValueError):
        TrackerConfig(iou_weight=1.5)


# --- association ------------------------------------------------------------

def test_associate_identity_pair():
    b = BBox(0, 0, 10, 10)
    trk = track_with(IC.NEEDLE, [b])
    m, ut, ud = associate([trk], [b], [Detection(0, IC.NEEDLE, 0.9, b)], CFG)
    assert m == [(0, 0)] and ut == [] and ud == []


def test_associate_crossed_costs(monkeypatch):
    import microskill.tracker as tr
    table = {(0, 0): 0.1, (0, 1): 0.9, (1, 0): 0.9, (1, 1): 0.1}
    monkeypatch.setattr(tr, "association_cost", lambda box, cls, det, cfg: table[(int(box.x_min), det.frame_index)])
    tracks = [track_with(IC.NEEDLE, [BBox(0, 0, 1, 1)]), track_with(IC.SCISSORS_C, [BBox(1, 0, 2, 1)])]
    dets = [Detection(0, IC.NEEDLE, 0.9, BBox(0, 0, 1, 1)), Detection(1, IC.NEEDLE, 0.9, BBox(0, 0, 1, 1))]
    m, _, _ = tr.associate(tracks, [BBox(0, 0, 1, 1), BBox(1, 0, 2, 1)], dets, CFG)
    assert sorted(m) == [(0, 0), (1, 1)]
    best, arg = brute_force_assignment([[0.1, 0.9], [0.9, 0.1]])
    assert best == pytest.approx(0.2) and arg == [(0, 0), (1, 1)]


def test_associate_gates_expensive_pair():
    trk = track_with(IC.NEEDLE, [BBox(0, 0, 10, 10)])
    # different class and no overlap: cost = 0.6 * 1 + 0.4 * 1 = 1.0 > 0.8
    det = Detection(0, IC.SCISSORS_S, 0.9, BBox(100, 100, 110, 110))
    m, ut, ud = associate([trk], [trk.states[0].box], [det], CFG)
    assert m == [] and ut == [0] and ud == [0]


def test_associate_matches_brute_force(rng):
    classes = list(IC)
    for _ in range(200):
        nt, nd = rng.integers(1, 5), rng.integers(1, 5)
        boxes = []
        for _ in range(nt):
            x, y = rng.uniform(0, 60, 2)
            boxes.append(BBox(x, y, x + rng.uniform(10, 40), y + rng.uniform(10, 40)))
        tracks = [track_with(classes[rng.integers(5)], [b]) for b in boxes]
        dets = []
        for _ in range(nd):
            x, y = rng.uniform(0, 60, 2)
            dets.append(Detection(0, classes[rng.integers(5)], 0.9,
                                  BBox(x, y, x + rng.uniform(10, 40), y + rng.uniform(10, 40))))
        cfg = TrackerConfig(gate_cost=10.0)  # gating off: pure optimal assignment
        m, _, _ = associate(tracks, boxes, dets, cfg)
        from microskill.tracker import association_cost
        cost = np.array([[association_cost(b, t.cls, d, cfg) for d in dets] for t, b in zip(tracks, boxes)])
        best, _ = brute_force_assignment(cost)
        assert sum(cost[i, j] for i, j in m) == pytest.approx(best, abs=1e-12)
        assert len({i for i, _ in m}) == len(m) == len({j for _, j in m})


# --- step / lifecycle -------------------------------------------------------

def test_detector_priority_every_frame():
    dets = moving(IC.NEEDLE_DRIVER_S, range(50))
    tracks = Tracker().run(dets)
    assert len(tracks) == 1
    assert all(s.source == DETECTED for s in tracks[0].states)
    assert [s.box for s in tracks[0].states] == [d.box for d in dets]


def test_short_dropout_recovered():
    frames = [f for f in range(40) if f not in (20, 21, 22)]
    tracker = Tracker()
    tracks = tracker.run(moving(IC.SCISSORS_C, frames), range(40))
    assert len(tracks) == 1
    gap = [s for s in tracks[0].states if s.frame_index in (20, 21, 22)]
    assert [s.source for s in gap] == [PREDICTED] * 3
    assert all(s.interpolated for s in gap)
    assert tracker.report.recovered_detections == 3
    # interpolation of a constant-velocity box is exact
    for s in gap:
        expect = moving(IC.SCISSORS_C, [s.frame_index])[0].box
        assert np.allclose(s.box.as_tuple(), expect.as_tuple(), atol=1e-9)


def test_track_closed_after_max_age():
    cfg = TrackerConfig(max_age=5)
    tracker = Tracker(cfg)
    tracks = tracker.run(moving(IC.NEEDLE, range(10)), range(30))
    assert len(tracks) == 1
    trk = tracks[0]
    assert sum(s.source == PREDICTED for s in trk.states) == 5
    assert trk.closed_at == 15
    assert tracker.live == []


def test_reappearance_across_scene_keeps_id():
    # gap shorter than max_age: the coasting track absorbs the detection (same class, gated cost 0.6)
    dets = moving(IC.SCISSORS_C, range(10)) + moving(IC.SCISSORS_C, range(15, 25), x0=900.0)
    tracker = Tracker()
    assert [t.object_id for t in tracker.run(dets)] == [1]
    # gap longer than max_age: the closed track is revived through preserve_id
    dets = moving(IC.SCISSORS_C, range(10)) + moving(IC.SCISSORS_C, range(60, 70), x0=900.0)
    tracker = Tracker()
    tracks = tracker.run(dets)
    assert [t.object_id for t in tracks] == [1]
    assert tracker.report.new_ids_suppressed == 1


def test_preserve_id_rules():
    nd_c = track_with(IC.NEEDLE_DRIVER_C, [BBox(0, 0, 10, 10)], 1)
    nd_s = track_with(IC.NEEDLE_DRIVER_S, [BBox(50, 0, 60, 10)], 2)
    cand = Detection(3, IC.SCISSORS_S, 0.9, BBox(0, 0, 5, 5))
    assert preserve_id(cand, [nd_c, nd_s], 3, CFG) is None
    assert preserve_id(Detection(3, IC.NEEDLE, 0.9, BBox(0, 0, 5, 5)), [], 3, CFG) is None
    assert preserve_id(Detection(3, IC.NEEDLE_DRIVER_S, 0.9, BBox(0, 0, 5, 5)), [nd_c, nd_s], 3, CFG) is nd_s


def test_revive_window_limits_reuse():
    cfg = TrackerConfig(max_age=2, revive_window=10)
    dets = moving(IC.NEEDLE, range(5)) + moving(IC.NEEDLE, range(40, 45))
    tracks = Tracker(cfg).run(dets)
    assert [t.object_id for t in tracks] == [1, 2]


def test_new_instrument_gets_new_id():
    dets = moving(IC.NEEDLE_DRIVER_S, range(20)) + moving(IC.NEEDLE, range(5, 20), y=400)
    tracks = Tracker().run(sorted(dets, key=lambda d: d.frame_index))
    assert [(t.object_id, t.cls) for t in tracks] == [(1, IC.NEEDLE_DRIVER_S), (2, IC.NEEDLE)]


# --- class correction -------------------------------------------------------

def test_single_flip_is_corrected():
    dets = moving(IC.SCISSORS_C, range(30))
    dets[12] = Detection(12, IC.NEEDLE_DRIVER_C, 0.9, dets[12].box)
    tracker = Tracker()
    tracks = tracker.run(dets)
    assert len(tracks) == 1 and tracks[0].cls == IC.SCISSORS_C
    assert tracker.report.corrected_labels == 1
    st12 = tracks[0].states[12]
    assert st12.class_as_reported == IC.NEEDLE_DRIVER_C and st12.source == DETECTED


def test_matching_class_unchanged():
    trk = track_with(IC.NEEDLE, [BBox(0, 0, 10, 10)])
    rep = TrackerReport()
    d = Detection(1, IC.NEEDLE, 0.9, BBox(0, 0, 10, 10))
    assert correct_class(d, trk, CFG, rep) is d
    assert rep.corrected_labels == 0


def test_persistent_new_class_relabels_once():
    dets = moving(IC.SCISSORS_S, range(5)) + moving(IC.NEEDLE_DRIVER_C, range(5, 25))
    tracker = Tracker()
    tracks = tracker.run(dets)
    assert len(tracks) == 1
    assert tracks[0].cls == IC.NEEDLE_DRIVER_C
    assert len(tracker.report.relabel_events) == 1
    ev = tracker.report.relabel_events[0]
    assert (ev["from"], ev["to"]) == ("scissors_s", "needle_driver_c")
    # votes: 5 old vs k new; the 6th new detection wins
    assert ev["frame"] == 10


def test_relabel_blocked_when_class_owned():
    trk = track_with(IC.SCISSORS_S, [BBox(0, 0, 10, 10)] * 2)
    for st_ in trk.states:
        st_.class_as_reported = IC.NEEDLE
    rep = TrackerReport()
    out = correct_class(Detection(2, IC.NEEDLE, 0.9, BBox(0, 0, 10, 10)), trk, CFG, rep, [IC.NEEDLE])
    assert out.cls == IC.SCISSORS_S and trk.cls == IC.SCISSORS_S


# --- simulator-driven invariants ---------------------------------------------

@pytest.fixture(scope="module")
def noisy_run():
    gt, dets = generate(ARCHETYPES[SkillCategory.MODERATE], NoiseConfig(dropout_prob=0.05, dropout_max_gap=8),
                        duration_s=20, seed=3)
    fused = fuse_stream(dets)
    tracker = Tracker()
    tracks = tracker.run(fused, range(gt.n_frames))
    return gt, fused, tracker, tracks


def test_at_most_one_live_track_per_class(noisy_run):
    _, _, _, tracks = noisy_run
    seen = {}
    for t in tracks:
        for s in t.states:
            key = (s.frame_index, t.cls)
            assert key not in seen, key
            seen[key] = t.object_id


def test_detected_states_are_fused_boxes(noisy_run):
    _, fused, _, tracks = noisy_run
    boxes = {(d.frame_index, d.box) for d in fused}
    for t in tracks:
        for s in t.states:
            if s.source == DETECTED:
                assert (s.frame_index, s.box) in boxes


def test_states_strictly_increasing(noisy_run):
    for t in noisy_run[3]:
        f = [s.frame_index for s in t.states]
        assert all(b > a for a, b in zip(f, f[1:]))


def test_report_counters_monotone(noisy_run):
    per_frame = np.array([row[1:] for row in noisy_run[2].report.per_frame])
    assert (per_frame >= 0).all()
    assert (np.diff(per_frame, axis=0) >= 0).all()


def test_every_dropout_gap_filled_by_prediction(noisy_run):
    gt, _, _, tracks = noisy_run
    drops = {(e["frame"], e["class"]) for e in gt.events if e["type"] == "dropout"}
    assert drops
    by_class = {}
    for t in tracks:
        for s in t.states:
            by_class[(s.frame_index, t.cls.value)] = s
    # interior gaps (instrument visible on both sides) are coasted on the same id
    visible = {(g.frame_index, g.cls.value) for g in gt.boxes}
    for f, c in drops:
        before = next((k for k in range(f - 1, -1, -1) if (k, c) not in drops), None)
        after = next((k for k in range(f + 1, gt.n_frames) if (k, c) not in drops), None)
        if before is None or after is None or (before, c) not in visible or (after, c) not in visible:
            continue
        s = by_class.get((f, c))
        assert s is not None and s.source == PREDICTED


def test_tracks_csv_round_trip(noisy_run):
    tracks = noisy_run[3]
    buf = io.StringIO()
    write_tracks_csv(buf, tracks, "seed=3")
    buf.seek(0)
    back = read_tracks_csv(buf)
    assert [(t.object_id, t.cls) for t in back] == [(t.object_id, t.cls) for t in tracks]
    for a, b in zip(back, tracks):
        assert a.states == b.states


def test_report_json_keys(noisy_run):
    rep = noisy_run[2].report.to_json()
    assert {"recovered_detections", "corrected_labels", "new_ids_suppressed", "per_class"} <= rep.keys()
