import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weakloc.evaluation import average_precision, match, mean_ap, video_map
from weakloc.geometry import st_iou
from weakloc.model import ActionInstance, BoundingBox, DataError, DetectionRecord

BOX = (0.0, 0.0, 10.0, 20.0)


def inst(video, iid, k, start, end, box=BOX):
    return ActionInstance(video, iid, k, start, end, boxes=np.tile(box, (end - start, 1)),
                          keyframes=((start, BoundingBox(*box)),))


def det(video, k, start, end, score, box=BOX):
    return DetectionRecord(video, k, start, np.tile(box, (end - start, 1)), score)


def hand_scenario():
    """Identical boxes everywhere, so ST-IoU is the temporal IoU."""
    gt = [inst("v1", "A", 1, 0, 100), inst("v2", "B", 1, 0, 100), inst("v1", "C", 2, 0, 100)]
    dets = [
        det("v1", 1, 0, 100, 0.9),   # A, IoU 1
        det("v1", 1, 0, 100, 0.8),   # duplicate of A
        det("v2", 1, 0, 40, 0.7),    # B, IoU 0.4
        det("v1", 2, 60, 100, 0.95),  # C, IoU 0.4
        det("v1", 2, 0, 100, 0.5),   # C, IoU 1
    ]
    return gt, dets


def test_hand_scenario_ious():
    gt, dets = hand_scenario()
    assert st_iou(dets[0], gt[0]) == 1.0
    assert st_iou(dets[2], gt[1]) == pytest.approx(0.4)
    assert st_iou(dets[3], gt[2]) == pytest.approx(0.4)


def test_hand_scenario_at_02():
    gt, dets = hand_scenario()
    res = match(dets, gt, 0.2)
    # class 1: TP, FP (duplicate), TP; precision envelope 1 up to recall 1/2, then 2/3
    assert average_precision(res, 1) == pytest.approx(0.5 * 1.0 + 0.5 * (2 / 3))
    # class 2: the 0.95 detection takes C; the exact one is then a duplicate
    assert average_precision(res, 2) == 1.0
    assert video_map(dets, gt, (0.2,))["map"]["0.2"] == pytest.approx((5 / 6 + 1) / 2)


def test_hand_scenario_at_05():
    gt, dets = hand_scenario()
    res = match(dets, gt, 0.5)
    assert average_precision(res, 1) == 0.5
    # class 2: FP then TP
    assert average_precision(res, 2) == 0.5
    report = video_map(dets, gt)
    assert report["map"]["0.5"] == 0.5
    assert report["map"]["0.5"] <= report["map"]["0.2"]


def test_single_exact_detection():
    gt = [inst("v", "i", 1, 10, 50)]
    res = match([det("v", 1, 10, 50, 0.3)], gt, 0.5)
    assert res.tp == [True] and res.matched == ["i"]
    assert average_precision(res, 1) == 1.0


def test_duplicate_is_false_positive():
    gt = [inst("v", "i", 1, 10, 50)]
    res = match([det("v", 1, 10, 50, 0.3), det("v", 1, 10, 50, 0.2)], gt, 0.5)
    assert res.tp == [True, False]


def test_fp_before_tp_gives_half():
    gt = [inst("v", "i", 1, 10, 50)]
    res = match([det("v", 1, 60, 90, 0.9), det("v", 1, 10, 50, 0.8)], gt, 0.5)
    assert average_precision(res, 1) == 0.5


def test_one_of_two_instances_gives_half():
    gt = [inst("v", "i", 1, 10, 50), inst("v", "j", 1, 60, 90)]
    res = match([det("v", 1, 10, 50, 0.9)], gt, 0.5)
    assert average_precision(res, 1) == 0.5


def test_iou_just_below_threshold_is_fp():
    gt = [inst("v", "i", 1, 0, 100)]
    d = det("v", 1, 0, 19, 0.9)
    assert st_iou(d, gt[0]) == pytest.approx(0.19)
    assert match([d], gt, 0.2).tp == [False]
    assert match([det("v", 1, 0, 20, 0.9)], gt, 0.2).tp == [True]


def test_detection_matches_highest_iou_instance():
    gt = [inst("v", "i", 1, 0, 50), inst("v", "j", 1, 20, 60)]
    res = match([det("v", 1, 20, 58, 0.9)], gt, 0.2)
    assert res.matched == ["j"]


def test_class_and_video_must_agree():
    gt = [inst("v", "i", 1, 0, 50)]
    assert match([det("v", 2, 0, 50, 0.9)], gt, 0.2, classes=[1, 2]).tp == [False]
    assert match([det("w", 1, 0, 50, 0.9)], gt, 0.2).tp == [False]


def test_unknown_class_rejected():
    gt = [inst("v", "i", 1, 0, 50)]
    with pytest.raises(DataError):
        match([det("v", 7, 0, 50, 0.9)], gt, 0.2, classes=[1, 2])
    with pytest.raises(DataError):
        video_map([det("v", 7, 0, 50, 0.9)], gt, num_actions=2)


def test_equal_scores_keep_input_order():
    gt = [inst("v", "i", 1, 0, 50)]
    res = match([det("v", 1, 0, 40, 0.5), det("v", 1, 0, 50, 0.5)], gt, 0.2)
    assert res.order == [0, 1] and res.tp == [True, False]


def test_map_examples():
    assert mean_ap([1.0, 0.5]) == 0.75
    gt = [inst("v", "i", 1, 0, 50), inst("v", "j", 2, 0, 50)]
    report = video_map([], gt)
    assert report["map"] == {"0.2": 0.0, "0.5": 0.0}
    perfect = video_map([det("v", 1, 0, 50, 1.0), det("v", 2, 0, 50, 1.0)], gt)
    assert perfect["map"] == {"0.2": 1.0, "0.5": 1.0}
    assert perfect["counts"] == {"detections": 2, "instances": 2,
                                 "instances_per_class": {"1": 1, "2": 1}}


def test_ap_undefined_without_instances():
    res = match([], [inst("v", "i", 1, 0, 50)], 0.5)
    with pytest.raises(ValueError):
        average_precision(res, 2)
    with pytest.raises(DataError):
        video_map([], [])


def test_classes_without_instances_leave_the_mean():
    gt = [inst("v", "i", 1, 0, 50)]
    report = video_map([det("v", 1, 0, 50, 1.0), det("v", 2, 0, 50, 1.0)], gt,
                       num_actions=3)
    assert report["per_class_ap"]["0.2"] == {"1": 1.0}


def test_keyframe_mode():
    box = BoundingBox(*BOX)
    g = ActionInstance("v", "i", 1, 0, 100, keyframes=((10, box), (90, box)))
    far = (50.0, 50.0, 60.0, 70.0)
    d = DetectionRecord("v", 1, 0, np.tile(BOX, (100, 1)), 1.0)
    assert match([d], [g], 0.5, mode="keyframe").tp == [True]
    moved = DetectionRecord("v", 1, 0, np.tile(far, (100, 1)), 1.0)
    assert match([moved], [g], 0.2, mode="keyframe").tp == [False]
    with pytest.raises(DataError):
        match([d], [g], 0.5, mode="full")
    with pytest.raises(ValueError):
        match([d], [g], 0.5, mode="frame")


def random_scenario(rng):
    n_vid = int(rng.integers(1, 4))
    K = int(rng.integers(1, 4))
    gt = []
    for v in range(n_vid):
        for j in range(int(rng.integers(1, 4))):
            s = int(rng.integers(0, 150))
            x = float(rng.uniform(0, 30))
            gt.append(inst(f"v{v}", f"v{v}/{j}", int(rng.integers(1, K + 1)), s,
                           s + int(rng.integers(10, 80)), (x, 0.0, x + 20.0, 40.0)))
    dets = []
    for _ in range(int(rng.integers(0, 15))):
        s = int(rng.integers(0, 150))
        x = float(rng.uniform(0, 30))
        dets.append(det(f"v{int(rng.integers(n_vid))}", int(rng.integers(1, K + 1)), s,
                        s + int(rng.integers(5, 90)), float(rng.random()),
                        (x, 0.0, x + 20.0, 40.0)))
    return gt, dets


@pytest.mark.parametrize("seed", range(100))
def test_map_at_05_never_exceeds_map_at_02(seed):
    gt, dets = random_scenario(np.random.default_rng(seed))
    report = video_map(dets, gt)
    assert report["map"]["0.5"] <= report["map"]["0.2"] + 1e-12
    for thr in ("0.2", "0.5"):
        assert 0.0 <= report["map"][thr] <= 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_map_invariant_to_monotone_score_transform(seed):
    gt, dets = random_scenario(np.random.default_rng(seed))
    moved = [DetectionRecord(d.video_id, d.class_id, d.start, d.boxes, np.exp(3 * d.score) - 7)
             for d in dets]
    assert video_map(dets, gt)["map"] == video_map(moved, gt)["map"]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_each_instance_matched_at_most_once(seed):
    gt, dets = random_scenario(np.random.default_rng(seed))
    res = match(dets, gt, 0.2)
    ids = [m for m in res.matched if m is not None]
    assert len(ids) == len(set(ids))
    assert [m is not None for m in res.matched] == res.tp
