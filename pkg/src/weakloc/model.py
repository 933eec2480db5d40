"""Domain types: boxes, tracks, tracklets, ground-truth instances, datasets.

Frame intervals are half-open ``[start, end)`` and 0-based everywhere.
Per-frame box sequences are stored as ``(T, 4)`` float arrays in
``x1, y1, x2, y2`` order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

BACKGROUND = 0
DEFAULT_UNIT = 8


class DataError(ValueError):
    """Raised when input records are inconsistent or malformed."""


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixel coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 <= self.x2 and self.y1 <= self.y2):
            raise DataError(f"invalid box {self.as_tuple()}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> Tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @classmethod
    def from_array(cls, a) -> "BoundingBox":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


def _as_box_array(boxes) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise DataError(f"expected (T, 4) box array, got shape {arr.shape}")
    if np.any(arr[:, 0] > arr[:, 2]) or np.any(arr[:, 1] > arr[:, 3]):
        raise DataError("box array contains boxes with x1 > x2 or y1 > y2")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Detection:
    frame: int
    box: BoundingBox
    descriptor_index: Optional[int] = None

    def __post_init__(self):
        if self.frame < 0:
            raise DataError(f"negative frame index {self.frame}")


@dataclass(frozen=True, eq=False)
class Tube:
    """A contiguous run of per-frame boxes starting at ``start``.

    Anything with ``start``, ``end`` and ``boxes`` can be compared with the
    spatio-temporal IoU functions; this is the minimal such object.
    """

    start: int
    boxes: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "boxes", _as_box_array(self.boxes))
        if len(self.boxes) == 0:
            raise DataError("empty tube")

    @property
    def end(self) -> int:
        return self.start + len(self.boxes)

    def __eq__(self, other):
        return (isinstance(other, Tube) and self.start == other.start
                and np.array_equal(self.boxes, other.boxes))


@dataclass(frozen=True, eq=False)
class Track:
    """A person track: one box per consecutive frame.

    ``descriptor_indices`` optionally maps each frame to a row of a
    per-detection descriptor table (-1 when absent).
    """

    video_id: str
    track_id: str
    start: int
    boxes: np.ndarray
    descriptor_indices: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "boxes", _as_box_array(self.boxes))
        if self.start < 0:
            raise DataError(f"track {self.track_id}: negative start frame")
        if len(self.boxes) == 0:
            raise DataError(f"track {self.track_id} has no detections")
        if self.descriptor_indices is not None:
            idx = np.asarray(self.descriptor_indices, dtype=np.int64)
            if idx.shape != (len(self.boxes),):
                raise DataError(f"track {self.track_id}: descriptor index length mismatch")
            idx.setflags(write=False)
            object.__setattr__(self, "descriptor_indices", idx)

    @classmethod
    def from_detections(cls, video_id: str, track_id: str,
                        detections: Sequence[Detection]) -> "Track":
        if not detections:
            raise DataError(f"track {track_id} has no detections")
        frames = [d.frame for d in detections]
        if any(b - a != 1 for a, b in zip(frames, frames[1:])):
            raise DataError(f"track {track_id}: detection frames are not consecutive")
        boxes = [d.box.as_tuple() for d in detections]
        desc = None
        if any(d.descriptor_index is not None for d in detections):
            desc = [(-1 if d.descriptor_index is None else d.descriptor_index)
                    for d in detections]
        return cls(video_id, track_id, frames[0], boxes, desc)

    @property
    def end(self) -> int:
        return self.start + len(self.boxes)

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def detections(self) -> List[Detection]:
        out = []
        for i, b in enumerate(self.boxes):
            di = None
            if self.descriptor_indices is not None and self.descriptor_indices[i] >= 0:
                di = int(self.descriptor_indices[i])
            out.append(Detection(self.start + i, BoundingBox.from_array(b), di))
        return out

    def covers(self, frame: int) -> bool:
        return self.start <= frame < self.end

    def box_at(self, frame: int) -> np.ndarray:
        return self.boxes[frame - self.start]

    def __eq__(self, other):
        if not isinstance(other, Track):
            return NotImplemented
        same_desc = (
            (self.descriptor_indices is None and other.descriptor_indices is None)
            or (self.descriptor_indices is not None and other.descriptor_indices is not None
                and np.array_equal(self.descriptor_indices, other.descriptor_indices)))
        return (self.video_id == other.video_id and self.track_id == other.track_id
                and self.start == other.start and np.array_equal(self.boxes, other.boxes)
                and same_desc)

    __hash__ = object.__hash__


@dataclass(frozen=True)
class Tracklet:
    video_id: str
    track_id: str
    tracklet_index: int
    start: int
    end: int
    row: int

    @property
    def span(self) -> Tuple[int, int]:
        return (self.start, self.end)


@dataclass(frozen=True, eq=False)
class ActionInstance:
    """Ground-truth action instance.

    ``boxes`` is the optional dense annotation (one box per frame of
    ``[start, end)``); ``keyframes`` the sparse one.
    """

    video_id: str
    instance_id: str
    class_id: int
    start: int
    end: int
    keyframes: Tuple[Tuple[int, BoundingBox], ...] = ()
    boxes: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.start < self.end:
            raise DataError(f"instance {self.instance_id}: empty interval")
        if self.class_id < 1:
            raise DataError(f"instance {self.instance_id}: class id must be >= 1")
        kf = tuple(sorted(((int(f), b) for f, b in self.keyframes), key=lambda p: p[0]))
        for f, _ in kf:
            if not self.start <= f < self.end:
                raise DataError(f"instance {self.instance_id}: keyframe {f} outside interval")
        object.__setattr__(self, "keyframes", kf)
        if self.boxes is not None:
            arr = _as_box_array(self.boxes)
            if len(arr) != self.end - self.start:
                raise DataError(f"instance {self.instance_id}: box count != interval length")
            object.__setattr__(self, "boxes", arr)

    @property
    def interval(self) -> Tuple[int, int]:
        return (self.start, self.end)

    def __eq__(self, other):
        if not isinstance(other, ActionInstance):
            return NotImplemented
        boxes_eq = ((self.boxes is None and other.boxes is None)
                    or (self.boxes is not None and other.boxes is not None
                        and np.array_equal(self.boxes, other.boxes)))
        return (self.video_id == other.video_id and self.instance_id == other.instance_id
                and self.class_id == other.class_id and self.start == other.start
                and self.end == other.end and self.keyframes == other.keyframes and boxes_eq)

    __hash__ = object.__hash__


@dataclass(frozen=True, eq=False)
class DetectionRecord:
    """A scored, temporally trimmed subtrack: the unit of evaluation."""

    video_id: str
    class_id: int
    start: int
    boxes: np.ndarray
    score: float
    track_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "boxes", _as_box_array(self.boxes))
        if len(self.boxes) == 0:
            raise DataError("detection with an empty interval")
        object.__setattr__(self, "score", float(self.score))

    @property
    def end(self) -> int:
        return self.start + len(self.boxes)

    @property
    def interval(self) -> Tuple[int, int]:
        return (self.start, self.end)

    def __eq__(self, other):
        if not isinstance(other, DetectionRecord):
            return NotImplemented
        return (self.video_id == other.video_id and self.class_id == other.class_id
                and self.start == other.start and self.score == other.score
                and self.track_id == other.track_id and np.array_equal(self.boxes, other.boxes))

    __hash__ = object.__hash__


@dataclass(frozen=True)
class Video:
    video_id: str
    num_frames: int
    shots: Tuple[Tuple[int, int], ...] = ()
    split: str = "train"

    def __post_init__(self):
        if self.num_frames < 1:
            raise DataError(f"video {self.video_id}: num_frames must be >= 1")
        object.__setattr__(self, "shots", tuple((int(a), int(b)) for a, b in self.shots))


def subdivide_track(track: Track, unit: int = DEFAULT_UNIT, first_row: int = 0) -> List[Tracklet]:
    """Cut a track into consecutive ``unit``-frame tracklets.

    A trailing remainder shorter than ``unit`` becomes a final, shorter
    tracklet so that every frame of the track is covered.
    """
    if unit < 1:
        raise ValueError("unit must be >= 1")
    out = []
    for i, s in enumerate(range(track.start, track.end, unit)):
        out.append(Tracklet(track.video_id, track.track_id, i, s,
                            min(s + unit, track.end), first_row + i))
    return out


@dataclass
class Dataset:
    """Videos, tracks, their tracklets and ground truth.

    Tracklet rows are numbered video by video (in ``videos`` order), then
    track by track, so each video owns a contiguous row range.
    """

    videos: List[Video]
    tracks: List[Track]
    instances: List[ActionInstance]
    num_actions: int
    unit: int = DEFAULT_UNIT
    tracklets: List[Tracklet] = field(init=False)

    def __post_init__(self):
        if not self.videos:
            raise DataError("dataset has no videos")
        if self.num_actions < 1:
            raise DataError("num_actions must be >= 1")
        self._video = {v.video_id: v for v in self.videos}
        if len(self._video) != len(self.videos):
            raise DataError("duplicate video ids")
        by_video: Dict[str, List[Track]] = {v.video_id: [] for v in self.videos}
        seen = set()
        for t in self.tracks:
            if t.video_id not in by_video:
                raise DataError(f"track {t.track_id}: unknown video {t.video_id}")
            if (t.video_id, t.track_id) in seen:
                raise DataError(f"duplicate track id {t.track_id} in video {t.video_id}")
            seen.add((t.video_id, t.track_id))
            if t.end > self._video[t.video_id].num_frames:
                raise DataError(f"track {t.track_id} extends past the end of {t.video_id}")
            by_video[t.video_id].append(t)
        self._instances: Dict[str, List[ActionInstance]] = {v.video_id: [] for v in self.videos}
        for inst in self.instances:
            if inst.video_id not in self._instances:
                raise DataError(f"instance {inst.instance_id}: unknown video {inst.video_id}")
            if inst.class_id > self.num_actions:
                raise DataError(f"instance {inst.instance_id}: class {inst.class_id} out of range")
            self._instances[inst.video_id].append(inst)
        # canonical order: videos as given, tracks in input order within a video
        self.tracks = [t for v in self.videos for t in by_video[v.video_id]]
        self._tracks = by_video
        self.tracklets = []
        self._rows: Dict[str, Tuple[int, int]] = {}
        self._track_rows: Dict[Tuple[str, str], Tuple[int, int]] = {}
        for v in self.videos:
            begin = len(self.tracklets)
            for t in by_video[v.video_id]:
                first = len(self.tracklets)
                self.tracklets.extend(subdivide_track(t, self.unit, first))
                self._track_rows[(v.video_id, t.track_id)] = (first, len(self.tracklets))
            self._rows[v.video_id] = (begin, len(self.tracklets))

    @property
    def num_classes(self) -> int:
        """Label columns including background (column 0)."""
        return self.num_actions + 1

    @property
    def M(self) -> int:
        return len(self.tracklets)

    @property
    def video_ids(self) -> List[str]:
        return [v.video_id for v in self.videos]

    def video(self, video_id: str) -> Video:
        return self._video[video_id]

    def tracks_of(self, video_id: str) -> List[Track]:
        return self._tracks[video_id]

    def instances_of(self, video_id: str) -> List[ActionInstance]:
        return self._instances[video_id]

    def rows_of(self, video_id: str) -> Tuple[int, int]:
        """Half-open global row range of a video's tracklets."""
        return self._rows[video_id]

    def rows_of_track(self, video_id: str, track_id: str) -> Tuple[int, int]:
        return self._track_rows[(video_id, track_id)]

    def tracklets_of(self, video_id: str) -> List[Tracklet]:
        a, b = self._rows[video_id]
        return self.tracklets[a:b]

    def iter_video_tracklets(self) -> Iterator[Tuple[Video, List[Tracklet]]]:
        for v in self.videos:
            yield v, self.tracklets_of(v.video_id)

    def subset(self, video_ids: Sequence[str]) -> Tuple["Dataset", np.ndarray]:
        """Restrict to ``video_ids`` (kept in the given order).

        Returns the new dataset and the array of old row indices, so that
        ``features[old_rows]`` aligns with the new rows.
        """
        keep = list(video_ids)
        missing = [v for v in keep if v not in self._video]
        if missing:
            raise DataError(f"unknown videos {missing}")
        ks = set(keep)
        sub = Dataset(
            videos=[self._video[v] for v in keep],
            tracks=[t for v in keep for t in self._tracks[v]],
            instances=[i for i in self.instances if i.video_id in ks],
            num_actions=self.num_actions,
            unit=self.unit,
        )
        old_rows = np.concatenate(
            [np.arange(*self._rows[v]) for v in keep]) if keep else np.zeros(0, np.int64)
        return sub, old_rows.astype(np.int64)

    def split_ids(self, split: str) -> List[str]:
        return [v.video_id for v in self.videos if v.split == split]


def time_units(start: int, end: int, unit: int = DEFAULT_UNIT) -> List[Tuple[int, int]]:
    """Split ``[start, end)`` into ``unit``-frame bins; the last may be shorter."""
    return [(s, min(s + unit, end)) for s in range(start, end, unit)]
