"""From a classifier to trimmed, scored spatio-temporal detections."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .evaluation import average_precision, match
from .geometry import st_iou
from .model import DataError, Dataset, DetectionRecord, Track
from .objective import Classifier

SMOOTHING_WINDOW = 25
NMS_THRESHOLD = 0.2
GRID_SIZE = 101


@dataclass(frozen=True)
class ThresholdSet:
    """Per-class thresholds; index 0 (background) is unused.

    ``levels[k]`` records which quantile of class k's score distribution
    the threshold was taken at (``nan`` if it was not calibrated directly).
    """

    thresholds: np.ndarray
    levels: np.ndarray

    def __getitem__(self, k: int) -> float:
        return float(self.thresholds[k])

    def to_dict(self) -> dict:
        return {"thresholds": [float(t) for t in self.thresholds],
                "levels": [None if np.isnan(q) else float(q) for q in self.levels]}


def detection_descriptors(dataset: Dataset, track: Track, features: np.ndarray,
                          descriptor_table: Optional[np.ndarray] = None) -> np.ndarray:
    """One descriptor per detection of ``track``.

    Per-detection descriptors are used when the track points into
    ``descriptor_table``; otherwise each detection reuses its tracklet's row.
    """
    if descriptor_table is not None and track.descriptor_indices is not None:
        idx = track.descriptor_indices
        if np.any(idx < 0):
            raise DataError(f"track {track.track_id}: missing per-detection descriptors")
        return descriptor_table[idx]
    a, b = dataset.rows_of_track(track.video_id, track.track_id)
    if b > len(features):
        raise DataError(f"track {track.track_id}: no descriptor rows for its tracklets")
    offsets = np.arange(len(track)) // dataset.unit
    return features[a + offsets]


def score_track(dataset: Dataset, track: Track, features: np.ndarray, classifier: Classifier,
                descriptor_table: Optional[np.ndarray] = None) -> np.ndarray:
    """``(T, K)`` raw scores, one row per detection."""
    return detection_descriptors(dataset, track, features, descriptor_table) @ classifier.W


def median_filter(series, window: int = SMOOTHING_WINDOW) -> np.ndarray:
    """Centered running median; the window shrinks symmetrically at the borders.

    Works along axis 0, so a ``(T, K)`` array is filtered column by column.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be odd and >= 1")
    x = np.asarray(series, dtype=np.float64)
    T = x.shape[0]
    half = window // 2
    out = np.empty_like(x)
    if T > 2 * half:
        out[half:T - half] = np.median(sliding_window_view(x, window, axis=0), axis=-1)
    for t in list(range(min(half, T))) + list(range(max(T - half, half), T)):
        h = min(half, t, T - 1 - t)
        out[t] = np.median(x[t - h:t + h + 1], axis=0)
    return out


def extract_subtracks(series, theta: float) -> List[Tuple[int, int, float]]:
    """Maximal runs with score strictly above ``theta``: ``(start, end, mean)``."""
    s = np.asarray(series, dtype=np.float64)
    above = np.concatenate([[False], s > theta, [False]])
    edges = np.flatnonzero(above[1:] != above[:-1])
    return [(int(a), int(b), float(np.mean(s[a:b]))) for a, b in zip(edges[::2], edges[1::2])]


def nms(detections: Sequence[DetectionRecord],
        iou_threshold: float = NMS_THRESHOLD) -> List[DetectionRecord]:
    """Greedy class-wise suppression by ST-IoU, highest score first.

    The survivors are returned in descending score order.
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    kept: Dict[Tuple[str, int], List[DetectionRecord]] = {}
    out = []
    for i in order:
        d = detections[i]
        group = kept.setdefault((d.video_id, d.class_id), [])
        if all(st_iou(d, k) <= iou_threshold for k in group):
            group.append(d)
            out.append(d)
    return out


def smoothed_scores(dataset: Dataset, features: np.ndarray, classifier: Classifier,
                    video_ids: Optional[Sequence[str]] = None, window: int = SMOOTHING_WINDOW,
                    descriptor_table: Optional[np.ndarray] = None) -> List[Tuple[Track, np.ndarray]]:
    ids = dataset.video_ids if video_ids is None else video_ids
    out = []
    for vid in ids:
        for track in dataset.tracks_of(vid):
            raw = score_track(dataset, track, features, classifier, descriptor_table)
            out.append((track, median_filter(raw, window)))
    return out


def _class_detections(scored: Sequence[Tuple[Track, np.ndarray]], k: int,
                      theta: float) -> List[DetectionRecord]:
    dets = []
    for track, s in scored:
        for a, b, sc in extract_subtracks(s[:, k], theta):
            dets.append(DetectionRecord(track.video_id, k, track.start + a,
                                        track.boxes[a:b], sc, track.track_id))
    return dets


def detect(dataset: Dataset, features: np.ndarray, classifier: Classifier,
           thresholds: ThresholdSet, video_ids: Optional[Sequence[str]] = None,
           window: int = SMOOTHING_WINDOW, nms_threshold: float = NMS_THRESHOLD,
           descriptor_table: Optional[np.ndarray] = None) -> List[DetectionRecord]:
    """Score, smooth, threshold and suppress every track of ``video_ids``."""
    scored = smoothed_scores(dataset, features, classifier, video_ids, window, descriptor_table)
    dets = []
    for k in range(1, dataset.num_classes):
        dets.extend(_class_detections(scored, k, thresholds[k]))
    return nms(dets, nms_threshold)


def calibrate_thresholds(dataset: Dataset, features: np.ndarray, classifier: Classifier,
                         video_ids: Sequence[str], window: int = SMOOTHING_WINDOW,
                         nms_threshold: float = NMS_THRESHOLD, iou_threshold: float = 0.5,
                         mode: str = "full", grid: int = GRID_SIZE,
                         descriptor_table: Optional[np.ndarray] = None) -> ThresholdSet:
    """Pick each class threshold from a quantile grid by AP on held-out videos.

    The grid holds ``grid`` evenly spaced quantiles of the class's smoothed
    detection scores on the held-out videos; ties go to the larger
    threshold. Classes with no held-out instance use the mean quantile
    level of the calibrated classes (0.5 if there are none).
    """
    if not video_ids:
        raise DataError("calibration split is empty")
    scored = smoothed_scores(dataset, features, classifier, video_ids, window, descriptor_table)
    keep = set(video_ids)
    gt = [i for i in dataset.instances if i.video_id in keep]
    K = dataset.num_classes
    thresholds = np.zeros(K)
    levels = np.full(K, np.nan)
    qs = np.linspace(0.0, 1.0, grid)
    pending = []
    for k in range(1, K):
        gt_k = [i for i in gt if i.class_id == k]
        all_scores = np.concatenate([s[:, k] for _, s in scored])
        grid_vals = np.quantile(all_scores, qs)
        if not gt_k:
            pending.append((k, all_scores))
            continue
        best_ap, best_j = -1.0, 0
        for j, theta in enumerate(grid_vals):
            dets = nms(_class_detections(scored, k, float(theta)), nms_threshold)
            ap = average_precision(match(dets, gt_k, iou_threshold, mode), k)
            if ap >= best_ap:
                best_ap, best_j = ap, j
        thresholds[k] = grid_vals[best_j]
        levels[k] = qs[best_j]
    fallback = float(np.nanmean(levels[1:])) if np.any(~np.isnan(levels[1:])) else 0.5
    for k, all_scores in pending:
        thresholds[k] = float(np.quantile(all_scores, fallback))
    return ThresholdSet(thresholds, levels)
