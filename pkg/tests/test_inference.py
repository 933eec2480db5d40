import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weakloc.evaluation import average_precision, match
from weakloc.geometry import st_iou
from weakloc.inference import (GRID_SIZE, NMS_THRESHOLD, SMOOTHING_WINDOW, ThresholdSet,
                               calibrate_thresholds, detect, extract_subtracks, median_filter,
                               nms, score_track, smoothed_scores)
from weakloc.model import ActionInstance, Dataset, DetectionRecord, Track, Video
from weakloc.objective import Classifier, build_cache, recover_classifier

BOX = (0.0, 0.0, 10.0, 20.0)


def det(start, length, score, video="v", k=1, box=BOX):
    return DetectionRecord(video, k, start, np.tile(box, (length, 1)), score)


def test_localization_constants():
    assert SMOOTHING_WINDOW == 25
    assert NMS_THRESHOLD == 0.2
    assert GRID_SIZE == 101


# -- scoring -------------------------------------------------------------------

def scalar_dataset():
    video = Video("v", 24)
    track = Track("v", "t", 0, np.tile(BOX, (24, 1)))
    return Dataset([video], [track], [], num_actions=1)


def test_score_track_scalar_products():
    ds = scalar_dataset()
    track = Track("v", "t", 0, np.tile(BOX, (3, 1)), descriptor_indices=np.arange(3))
    table = np.array([[1.0], [2.0], [3.0]])
    clf = Classifier(np.array([[0.0, 2.0]]), 1e-4)
    s = score_track(ds, track, np.zeros((3, 1)), clf, descriptor_table=table)
    assert s[:, 1].tolist() == [2.0, 4.0, 6.0]


def test_score_track_reuses_tracklet_descriptor_and_zero_w():
    ds = scalar_dataset()
    feats = np.array([[1.0], [5.0], [-2.0]])
    clf = Classifier(np.array([[0.0, 1.0]]), 1e-4)
    s = score_track(ds, ds.tracks[0], feats, clf)
    assert s.shape == (24, 2)
    assert s[:, 1].tolist() == [1.0] * 8 + [5.0] * 8 + [-2.0] * 8
    zero = score_track(ds, ds.tracks[0], feats, Classifier(np.zeros((1, 2)), 1e-4))
    assert not zero.any()


def test_missing_descriptors_raise():
    from weakloc.model import DataError
    ds = scalar_dataset()
    with pytest.raises(DataError):
        score_track(ds, ds.tracks[0], np.zeros((2, 1)), Classifier(np.zeros((1, 2)), 1e-4))


# -- median filter -------------------------------------------------------------

def test_median_impulse_is_removed():
    x = np.zeros(51)
    x[25] = 9.0
    assert not median_filter(x, 25).any()


def test_median_constant_and_identity_cases():
    assert median_filter(np.full(30, 2.5), 25).tolist() == [2.5] * 30
    assert median_filter([7.0], 25).tolist() == [7.0]
    assert median_filter([1.0, 5.0, 2.0], 1).tolist() == [1.0, 5.0, 2.0]


def test_median_shrinks_symmetrically_at_borders():
    x = np.array([5.0, 1.0, 3.0, 9.0, 0.0])
    out = median_filter(x, 25)
    # windows: [0], [0..2], [0..4], [2..4], [4]
    assert out.tolist() == [5.0, 3.0, 3.0, 3.0, 0.0]


def test_median_filters_columns_independently(rng):
    x = rng.normal(size=(40, 3))
    out = median_filter(x, 5)
    for k in range(3):
        assert np.array_equal(out[:, k], median_filter(x[:, k], 5))


def test_median_window_validation():
    with pytest.raises(ValueError):
        median_filter(np.zeros(5), 4)
    with pytest.raises(ValueError):
        median_filter(np.zeros(5), 0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=80),
       st.sampled_from([1, 3, 5, 25]))
def test_median_bounded_and_drawn_from_odd_windows(xs, window):
    x = np.array(xs)
    out = median_filter(x, window)
    assert out.shape == x.shape
    assert out.min() >= x.min() and out.max() <= x.max()
    # odd windows everywhere, so every output is one of the inputs
    assert np.isin(out, x).all()


# -- subtracks -----------------------------------------------------------------

def test_runs_example():
    assert extract_subtracks([1, 1, 0, 1], 0.5) == [(0, 2, 1.0), (3, 4, 1.0)]


def test_runs_all_below_and_all_above():
    assert extract_subtracks([0.1, 0.2, 0.3], 0.5) == []
    assert extract_subtracks([1.0, 2.0, 3.0], 0.5) == [(0, 3, 2.0)]


def test_runs_use_strict_inequality():
    assert extract_subtracks([0.5, 0.5, 0.6], 0.5) == [(2, 3, 0.6)]


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=60), st.floats(-5, 5))
def test_runs_are_disjoint_and_maximal(xs, theta):
    s = np.array(xs)
    runs = extract_subtracks(s, theta)
    covered = np.zeros(len(s), dtype=bool)
    for a, b, score in runs:
        assert a < b and not covered[a:b].any()
        covered[a:b] = True
        assert (s[a:b] > theta).all()
        assert a == 0 or s[a - 1] <= theta
        assert b == len(s) or s[b] <= theta
        assert score == pytest.approx(s[a:b].mean())
    assert np.array_equal(covered, s > theta)


# -- nms -----------------------------------------------------------------------

def test_nms_identical_keeps_higher():
    kept = nms([det(0, 10, 0.8), det(0, 10, 0.9)])
    assert [d.score for d in kept] == [0.9]


def test_nms_disjoint_keeps_both():
    assert len(nms([det(0, 10, 0.8), det(20, 10, 0.9)])) == 2


def test_nms_three_detection_trace():
    d1, d2, d3 = det(0, 30, 0.9), det(10, 30, 0.8), det(100, 20, 0.7)
    assert st_iou(d1, d2) == pytest.approx(0.5)
    assert nms([d1, d2, d3]) == [d1, d3]


def test_nms_is_class_and_video_wise():
    a, b = det(0, 10, 0.9, k=1), det(0, 10, 0.8, k=2)
    c = det(0, 10, 0.7, video="w")
    assert len(nms([a, b, c])) == 3


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 60), st.integers(1, 30), st.floats(0, 1),
                          st.integers(0, 8)), min_size=0, max_size=12))
def test_nms_idempotent_and_pairwise_below_threshold(specs):
    dets = [det(s, n, sc, box=(x, 0.0, x + 10.0, 20.0)) for s, n, sc, x in specs]
    kept = nms(dets)
    assert nms(kept) == kept
    for i in range(len(kept)):
        for j in range(i + 1, len(kept)):
            assert st_iou(kept[i], kept[j]) <= NMS_THRESHOLD


# -- calibration and detection -------------------------------------------------

def separated_dataset():
    """Two videos, one track each; class 1 on frames [16, 40) of each."""
    videos = [Video("a", 48), Video("b", 48)]
    tracks = [Track(v, "t", 0, np.tile(BOX, (48, 1))) for v in ("a", "b")]
    inst = [ActionInstance(v, f"{v}/i", 1, 16, 40, boxes=np.tile(BOX, (24, 1)))
            for v in ("a", "b")]
    ds = Dataset(videos, tracks, inst, num_actions=1)
    x = np.zeros((12, 2))
    labels = np.array([0, 0, 1, 1, 1, 0] * 2)
    x[np.arange(12), labels] = 1.0
    return ds, x, Classifier(np.eye(2), 1e-4)


def test_calibration_perfectly_separated_picks_largest_good_quantile():
    ds, x, clf = separated_dataset()
    th = calibrate_thresholds(ds, x, clf, ["a"])
    scored = smoothed_scores(ds, x, clf, ["a"])
    all_scores = scored[0][1][:, 1]
    assert th[1] < all_scores.max()
    dets = detect(ds, x, clf, th, ["a"])
    res = match(dets, ds.instances_of("a"), 0.5)
    assert average_precision(res, 1) == 1.0
    # any larger grid point no longer detects the instance
    grid = np.quantile(all_scores, np.linspace(0, 1, GRID_SIZE))
    assert not (grid[grid > th[1]] < all_scores.max()).any()


def test_calibration_rejects_empty_split():
    from weakloc.model import DataError
    ds, x, clf = separated_dataset()
    with pytest.raises(DataError):
        calibrate_thresholds(ds, x, clf, [])


def test_threshold_set_dict():
    th = ThresholdSet(np.array([0.0, 0.3]), np.array([np.nan, 0.9]))
    assert th.to_dict() == {"thresholds": [0.0, 0.3], "levels": [None, 0.9]}


def supervised_classifier(result):
    cache = build_cache(result.features, 1e-4)
    Y = np.zeros((result.dataset.M, result.dataset.num_classes))
    Y[np.arange(len(Y)), result.labels] = 1.0
    return recover_classifier(cache, Y)


def test_calibrated_threshold_beats_other_grid_points(small_synth):
    ds, x = small_synth.dataset, small_synth.features
    clf = supervised_classifier(small_synth)
    calib = ds.split_ids("train")[-3:]
    th = calibrate_thresholds(ds, x, clf, calib)
    gt = [i for i in ds.instances if i.video_id in calib]
    scored = smoothed_scores(ds, x, clf, calib)
    for k in sorted({i.class_id for i in gt}):
        gt_k = [i for i in gt if i.class_id == k]
        best = average_precision(match(detect(ds, x, clf, th, calib), gt_k, 0.5), k)
        scores = np.concatenate([s[:, k] for _, s in scored])
        for theta in (scores.min() - 1, np.median(scores), scores.max() + 1, th[k] * 0.5):
            alt = ThresholdSet(np.where(np.arange(len(th.thresholds)) == k, theta,
                                        th.thresholds), th.levels)
            ap = average_precision(match(detect(ds, x, clf, alt, calib), gt_k, 0.5), k)
            assert ap <= best + 1e-12


def test_uncalibrated_class_uses_mean_level(small_synth):
    ds, x = small_synth.dataset, small_synth.features
    clf = supervised_classifier(small_synth)
    calib = [ds.split_ids("train")[0]]
    present = {i.class_id for i in ds.instances_of(calib[0])}
    th = calibrate_thresholds(ds, x, clf, calib)
    missing = [k for k in range(1, ds.num_classes) if k not in present]
    assert missing
    for k in missing:
        assert np.isnan(th.levels[k])
    level = np.nanmean(th.levels[1:])
    scored = smoothed_scores(ds, x, clf, calib)
    for k in missing:
        scores = np.concatenate([s[:, k] for _, s in scored])
        assert th[k] == pytest.approx(np.quantile(scores, level))


def test_detection_is_score_scale_covariant(small_synth):
    ds, x = small_synth.dataset, small_synth.features
    clf = supervised_classifier(small_synth)
    calib, test = ds.split_ids("train")[-3:], ds.split_ids("test")
    scaled = Classifier(3.0 * clf.W, clf.lam)
    a = detect(ds, x, clf, calibrate_thresholds(ds, x, clf, calib), test)
    b = detect(ds, x, scaled, calibrate_thresholds(ds, x, scaled, calib), test)
    assert [(d.video_id, d.track_id, d.class_id, d.interval) for d in a] == \
        [(d.video_id, d.track_id, d.class_id, d.interval) for d in b]
    assert np.allclose([3 * d.score for d in a], [d.score for d in b])


def test_detections_use_track_boxes(small_synth):
    ds, x = small_synth.dataset, small_synth.features
    clf = supervised_classifier(small_synth)
    th = calibrate_thresholds(ds, x, clf, ds.split_ids("train")[-3:])
    tracks = {(t.video_id, t.track_id): t for t in ds.tracks}
    dets = detect(ds, x, clf, th, ds.split_ids("test"))
    assert dets
    for d in dets:
        t = tracks[(d.video_id, d.track_id)]
        assert np.array_equal(d.boxes, t.boxes[d.start - t.start:d.end - t.start])
        assert d.class_id >= 1
