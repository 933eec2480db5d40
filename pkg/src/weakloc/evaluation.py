"""Video-mAP protocol: greedy ST-IoU matching and all-point AP."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import st_iou, st_iou_keyframe
from .model import ActionInstance, DataError, DetectionRecord

MODES = ("full", "keyframe")


@dataclass
class MatchResult:
    """Per-detection outcome, in the score order used for matching."""

    order: List[int]
    tp: List[bool]
    matched: List[Optional[str]]
    scores: List[float]
    classes: List[int]
    num_gt: Dict[int, int] = field(default_factory=dict)

    def class_outcomes(self, class_id: int) -> Tuple[np.ndarray, np.ndarray]:
        sel = [i for i, c in enumerate(self.classes) if c == class_id]
        return (np.array([self.scores[i] for i in sel], dtype=np.float64),
                np.array([self.tp[i] for i in sel], dtype=bool))


def _iou_fn(mode: str):
    if mode == "full":
        return st_iou
    if mode == "keyframe":
        return st_iou_keyframe
    raise ValueError(f"unknown IoU mode {mode!r}")


def _check_gt(ground_truth: Sequence[ActionInstance], mode: str):
    for inst in ground_truth:
        if mode == "full" and inst.boxes is None:
            raise DataError(f"instance {inst.instance_id} has no per-frame boxes")
        if mode == "keyframe" and not inst.keyframes:
            raise DataError(f"instance {inst.instance_id} has no keyframes")


def match(detections: Sequence[DetectionRecord], ground_truth: Sequence[ActionInstance],
          iou_threshold: float, mode: str = "full",
          classes: Optional[Sequence[int]] = None) -> MatchResult:
    """Greedy matching in descending score order, per class.

    A detection is a true positive when its ST-IoU with a not yet matched
    instance of its class in its video reaches ``iou_threshold``; it takes
    the highest-IoU such instance. Duplicates are false positives. Equal
    scores keep input order.
    """
    iou = _iou_fn(mode)
    _check_gt(ground_truth, mode)
    known = set(classes) if classes is not None else None
    gt_by: Dict[Tuple[str, int], List[ActionInstance]] = {}
    num_gt: Dict[int, int] = {}
    for inst in ground_truth:
        gt_by.setdefault((inst.video_id, inst.class_id), []).append(inst)
        num_gt[inst.class_id] = num_gt.get(inst.class_id, 0) + 1
    for d in detections:
        if known is not None and d.class_id not in known:
            raise DataError(f"detection with unknown class {d.class_id}")
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    used = set()
    tp, matched = [], []
    for i in order:
        d = detections[i]
        best, best_id = -1.0, None
        for inst in gt_by.get((d.video_id, d.class_id), ()):
            if inst.instance_id in used:
                continue
            v = iou(d, inst)
            if v >= iou_threshold and v > best:
                best, best_id = v, inst.instance_id
        if best_id is not None:
            used.add(best_id)
        tp.append(best_id is not None)
        matched.append(best_id)
    return MatchResult(order, tp, matched, [detections[i].score for i in order],
                       [detections[i].class_id for i in order], num_gt)


def average_precision(result: MatchResult, class_id: int) -> float:
    """Area under the precision envelope; recall is over all class instances."""
    npos = result.num_gt.get(class_id, 0)
    if npos == 0:
        raise ValueError(f"class {class_id} has no ground-truth instances")
    _, tp = result.class_outcomes(class_id)
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / npos
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mpre[idx]))


def precision_recall(result: MatchResult, class_id: int) -> Tuple[np.ndarray, np.ndarray]:
    npos = result.num_gt.get(class_id, 0)
    _, tp = result.class_outcomes(class_id)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    return ctp / max(npos, 1), ctp / np.maximum(ctp + cfp, 1)


def video_map(detections: Sequence[DetectionRecord], ground_truth: Sequence[ActionInstance],
              thresholds: Sequence[float] = (0.2, 0.5), mode: str = "full",
              num_actions: Optional[int] = None) -> dict:
    """Per-class AP and their mean, at each threshold.

    Classes without ground truth are left out of the mean.
    """
    if not ground_truth:
        raise DataError("no ground-truth instances to evaluate against")
    classes = sorted({g.class_id for g in ground_truth})
    valid = range(1, num_actions + 1) if num_actions is not None else None
    per_class, maps = {}, {}
    for thr in thresholds:
        res = match(detections, ground_truth, thr, mode, classes=valid)
        aps = {str(k): average_precision(res, k) for k in classes}
        key = _thr_key(thr)
        per_class[key] = aps
        maps[key] = float(np.mean(list(aps.values())))
    return {
        "mode": mode,
        "thresholds": [float(t) for t in thresholds],
        "map": maps,
        "per_class_ap": per_class,
        "counts": {
            "detections": len(detections),
            "instances": len(ground_truth),
            "instances_per_class": {str(k): sum(g.class_id == k for g in ground_truth)
                                    for k in classes},
        },
    }


def _thr_key(thr: float) -> str:
    return f"{float(thr):g}"


def mean_ap(aps: Sequence[float]) -> float:
    return float(np.mean(aps))
