"""IoU computations and box scaling."""

from __future__ import annotations

from typing import Tuple

import numpy as np

from .model import ActionInstance, BoundingBox, DataError


def spatial_iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Element-wise IoU of two broadcastable ``(..., 4)`` box arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def temporal_iou(a: Tuple[int, int], b: Tuple[int, int]) -> float:
    inter = min(a[1], b[1]) - max(a[0], b[0])
    if inter <= 0:
        return 0.0
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def st_iou(a, b) -> float:
    """Temporal IoU times the mean spatial IoU over the shared frames.

    ``a`` and ``b`` are boxed segments: objects with ``start``, ``end`` and a
    ``(end - start, 4)`` ``boxes`` array. Segments of different videos (when
    both carry a ``video_id``) never overlap.
    """
    va, vb = getattr(a, "video_id", None), getattr(b, "video_id", None)
    if va is not None and vb is not None and va != vb:
        return 0.0
    lo, hi = max(a.start, b.start), min(a.end, b.end)
    if hi <= lo:
        return 0.0
    tiou = temporal_iou((a.start, a.end), (b.start, b.end))
    sa = a.boxes[lo - a.start:hi - a.start]
    sb = b.boxes[lo - b.start:hi - b.start]
    return tiou * float(np.mean(box_iou(sa, sb)))


def st_iou_keyframe(candidate, instance: ActionInstance) -> float:
    """Temporal IoU times the mean spatial IoU at the instance keyframes.

    Keyframes outside the candidate span contribute a spatial IoU of 0.
    """
    if not instance.keyframes:
        raise DataError(f"instance {instance.instance_id} has no keyframes")
    vc = getattr(candidate, "video_id", None)
    if vc is not None and vc != instance.video_id:
        return 0.0
    tiou = temporal_iou((candidate.start, candidate.end), (instance.start, instance.end))
    if tiou == 0.0:
        return 0.0
    ious = []
    for frame, box in instance.keyframes:
        if candidate.start <= frame < candidate.end:
            ious.append(float(box_iou(candidate.boxes[frame - candidate.start],
                                      np.array(box.as_tuple()))))
        else:
            ious.append(0.0)
    return tiou * float(np.mean(ious))


def scale_box(b: BoundingBox, factor: float) -> BoundingBox:
    """Scale width and height by ``factor`` about the box center."""
    if factor <= 0:
        raise ValueError("scale factor must be positive")
    cx, cy = b.center
    hw, hh = 0.5 * b.width * factor, 0.5 * b.height * factor
    return BoundingBox(cx - hw, cy - hh, cx + hw, cy + hh)


def scale_boxes(boxes: np.ndarray, factor: float) -> np.ndarray:
    """Vectorized :func:`scale_box` over a ``(T, 4)`` array."""
    if factor <= 0:
        raise ValueError("scale factor must be positive")
    boxes = np.asarray(boxes, dtype=np.float64)
    c = 0.5 * (boxes[:, :2] + boxes[:, 2:])
    half = 0.5 * (boxes[:, 2:] - boxes[:, :2]) * factor
    return np.hstack([c - half, c + half])
