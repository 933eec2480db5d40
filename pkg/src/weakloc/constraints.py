"""Per-video constraint sets for every supervision level.

A constraint set for one video holds

* ``fixed_one``: ``(row, class)`` pairs forced to 1,
* ``fixed_zero``: ``(row, class)`` pairs forced to 0,
* ``bags``: groups of rows of which at least one must take the bag class.

Rows are global tracklet rows of the :class:`~weakloc.model.Dataset`;
column 0 is the background class.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .geometry import box_iou
from .model import BACKGROUND, BoundingBox, DataError, Dataset, Track, time_units

TAGS = ("video", "shot", "point", "one-bb", "temporal", "temporal-kbb",
        "spatial-points", "full")

# fields each level's annotations must carry, beyond video_id and class_id
_REQUIRED = {
    "video": (),
    "shot": ("shot",),
    "point": ("point",),
    "one-bb": ("point", "keyframes"),
    "temporal": ("interval",),
    "temporal-kbb": ("interval", "keyframes"),
    "spatial-points": ("interval", "points"),
    "full": ("interval", "boxes"),
}


class ConstraintError(DataError):
    pass


@dataclass(frozen=True)
class SupervisionLevel:
    tag: str
    k: int = 1
    window: int = 50
    unit: int = 8
    iou_gate: float = 0.3

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ValueError(f"unknown supervision level {self.tag!r}")
        if self.k < 1 or self.window < 1 or self.unit < 1 or not self.iou_gate > 0:
            raise ValueError("supervision level parameters must be positive")

    @property
    def name(self) -> str:
        if self.tag == "temporal-kbb":
            return f"temporal+{self.k}bb"
        return self.tag

    @classmethod
    def parse(cls, text: str) -> "SupervisionLevel":
        """Parse names such as ``video``, ``point``, ``1bb``, ``temporal+3bb``."""
        t = text.strip().lower()
        aliases = {"video-level": "video", "shot-level": "shot",
                   "temporal-point": "point", "1bb": "one-bb", "onebb": "one-bb",
                   "fully": "full", "points": "spatial-points",
                   "temporal+points": "spatial-points"}
        t = aliases.get(t, t)
        m = re.fullmatch(r"temporal(?:\+|-)(\d+)bb", t)
        if m:
            return cls("temporal-kbb", k=int(m.group(1)))
        if t == "temporal-kbb":
            return cls("temporal-kbb")
        return cls(t)


@dataclass(frozen=True, eq=False)
class Annotation:
    """What an annotator provides for one action instance.

    Only the fields permitted by the supervision level are populated.
    ``points`` and ``boxes`` are dense over ``interval`` (one per frame).
    """

    video_id: str
    class_id: int
    instance_id: str = ""
    shot: Optional[int] = None
    point: Optional[int] = None
    interval: Optional[Tuple[int, int]] = None
    keyframes: Tuple[Tuple[int, BoundingBox], ...] = ()
    points: Optional[np.ndarray] = None
    boxes: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.class_id < 1:
            raise DataError(f"annotation {self.instance_id}: class must be >= 1")
        if self.interval is not None:
            a, b = int(self.interval[0]), int(self.interval[1])
            if not a < b:
                raise DataError(f"annotation {self.instance_id}: empty interval")
            object.__setattr__(self, "interval", (a, b))
        for name, width in (("points", 2), ("boxes", 4)):
            v = getattr(self, name)
            if v is not None:
                arr = np.asarray(v, dtype=np.float64).reshape(-1, width)
                if self.interval is None or len(arr) != self.interval[1] - self.interval[0]:
                    raise DataError(f"annotation {self.instance_id}: {name} must cover the interval")
                object.__setattr__(self, name, arr)

    def has(self, name: str) -> bool:
        v = getattr(self, name)
        if name == "keyframes":
            return len(v) > 0
        return v is not None

    def __eq__(self, other):
        if not isinstance(other, Annotation):
            return NotImplemented

        def arr_eq(a, b):
            return (a is None and b is None) or (
                a is not None and b is not None and np.array_equal(a, b))

        return (self.video_id == other.video_id and self.class_id == other.class_id
                and self.instance_id == other.instance_id and self.shot == other.shot
                and self.point == other.point and self.interval == other.interval
                and self.keyframes == other.keyframes
                and arr_eq(self.points, other.points) and arr_eq(self.boxes, other.boxes))

    __hash__ = object.__hash__


@dataclass(frozen=True, eq=False)
class Bag:
    class_id: int
    rows: np.ndarray
    source: str = ""

    def __post_init__(self):
        rows = np.unique(np.asarray(self.rows, dtype=np.int64))
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    def __eq__(self, other):
        return (isinstance(other, Bag) and self.class_id == other.class_id
                and np.array_equal(self.rows, other.rows))

    __hash__ = object.__hash__


def _pairs(pairs) -> np.ndarray:
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(arr) > 1:
        width = int(arr[:, 1].max()) + 1
        key = arr[:, 0] * width + arr[:, 1]
        if not np.all(np.diff(key) > 0):
            key = np.unique(key)
            arr = np.stack([key // width, key % width], axis=1)
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class VideoConstraintSet:
    """Constraints of one video over its contiguous row range ``[row_start, row_end)``.

    ``fixed_one`` and ``fixed_zero`` are ``(n, 2)`` integer arrays of
    ``(row, class)`` pairs, sorted by row then class.
    """

    video_id: str
    row_start: int
    row_end: int
    num_classes: int
    fixed_one: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), np.int64))
    fixed_zero: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), np.int64))
    bags: Tuple[Bag, ...] = ()
    level: str = ""

    def __post_init__(self):
        object.__setattr__(self, "fixed_one", _pairs(self.fixed_one))
        object.__setattr__(self, "fixed_zero", _pairs(self.fixed_zero))
        bags = sorted(self.bags, key=lambda b: (int(b.rows[0]) if len(b.rows) else -1,
                                                b.class_id, tuple(b.rows.tolist())))
        object.__setattr__(self, "bags", tuple(bags))

    @property
    def num_rows(self) -> int:
        return self.row_end - self.row_start

    def __eq__(self, other):
        return (isinstance(other, VideoConstraintSet) and self.video_id == other.video_id
                and self.row_start == other.row_start and self.row_end == other.row_end
                and self.num_classes == other.num_classes
                and np.array_equal(self.fixed_one, other.fixed_one)
                and np.array_equal(self.fixed_zero, other.fixed_zero)
                and self.bags == other.bags)

    __hash__ = object.__hash__

    def compile(self) -> "LocalBlock":
        return LocalBlock.from_set(self)


@dataclass(frozen=True, eq=False)
class LocalBlock:
    """A constraint set in video-local row indices, ready for the oracle.

    ``forced[i]`` is the class row ``i`` is fixed to (-1 if free);
    ``allowed[i, k]`` is False where the entry is fixed to zero or where the
    row is fixed to another class.
    """

    video_id: str
    allowed: np.ndarray
    forced: np.ndarray
    bag_classes: np.ndarray
    bag_rows: Tuple[np.ndarray, ...]

    @property
    def num_rows(self) -> int:
        return self.allowed.shape[0]

    @property
    def num_classes(self) -> int:
        return self.allowed.shape[1]

    @classmethod
    def from_set(cls, s: VideoConstraintSet) -> "LocalBlock":
        n, K = s.num_rows, s.num_classes
        allowed = np.ones((n, K), dtype=bool)
        forced = np.full(n, -1, dtype=np.int64)
        if len(s.fixed_zero):
            allowed[s.fixed_zero[:, 0] - s.row_start, s.fixed_zero[:, 1]] = False
        if len(s.fixed_one):
            r = s.fixed_one[:, 0] - s.row_start
            forced[r] = s.fixed_one[:, 1]
            allowed[r] = False
            allowed[r, s.fixed_one[:, 1]] = True
        return cls(s.video_id, allowed, forced,
                   np.array([b.class_id for b in s.bags], dtype=np.int64),
                   tuple(b.rows - s.row_start for b in s.bags))


# ---------------------------------------------------------------------------
# validation and feasibility


def validate(s: VideoConstraintSet) -> List[str]:
    """Return a list of violated invariants (empty when the set is valid)."""
    out = []
    lo, hi, K = s.row_start, s.row_end, s.num_classes
    for name, arr in (("fixed_one", s.fixed_one), ("fixed_zero", s.fixed_zero)):
        if len(arr) and (arr[:, 0].min() < lo or arr[:, 0].max() >= hi):
            out.append(f"{s.video_id}: {name} row outside video rows [{lo}, {hi})")
        if len(arr) and (arr[:, 1].min() < 0 or arr[:, 1].max() >= K):
            out.append(f"{s.video_id}: {name} class out of range")
    if out:
        return out
    ones = {(int(m), int(k)) for m, k in s.fixed_one}
    zeros = {(int(m), int(k)) for m, k in s.fixed_zero}
    for m, k in sorted(ones & zeros):
        out.append(f"{s.video_id}: row {m} class {k} is fixed to both 1 and 0")
    rows, counts = np.unique(s.fixed_one[:, 0], return_counts=True)
    for m in rows[counts > 1]:
        out.append(f"{s.video_id}: row {m} is fixed to more than one class")
    if len(s.fixed_zero):
        if np.any(s.fixed_zero[:, 1] == BACKGROUND):
            out.append(f"{s.video_id}: background class is forbidden for some row")
        zr, zc = np.unique(s.fixed_zero[:, 0], return_counts=True)
        for m in zr[zc >= K]:
            out.append(f"{s.video_id}: row {m} has every class forbidden")
    forced = {int(m): int(k) for m, k in s.fixed_one}
    for i, bag in enumerate(s.bags):
        if bag.class_id == BACKGROUND or not 0 < bag.class_id < K:
            out.append(f"{s.video_id}: bag {i} has invalid class {bag.class_id}")
            continue
        if len(bag.rows) == 0:
            out.append(f"{s.video_id}: bag {i} is empty")
            continue
        if bag.rows.min() < lo or bag.rows.max() >= hi:
            out.append(f"{s.video_id}: bag {i} has rows outside the video")
            continue
        ok = any(forced.get(int(m), bag.class_id) == bag.class_id
                 and (int(m), bag.class_id) not in zeros for m in bag.rows)
        if not ok:
            out.append(f"{s.video_id}: unsatisfiable bag {i} ({bag.source or 'class %d' % bag.class_id})")
    return out


def is_feasible_integer(s: VideoConstraintSet, Y_video) -> bool:
    """Check a one-hot block assignment against fixings and bags."""
    Y = np.asarray(Y_video)
    if Y.shape != (s.num_rows, s.num_classes):
        raise ValueError(f"expected block of shape {(s.num_rows, s.num_classes)}, got {Y.shape}")
    labels = np.argmax(Y, axis=1)
    lo = s.row_start
    if len(s.fixed_one) and np.any(labels[s.fixed_one[:, 0] - lo] != s.fixed_one[:, 1]):
        return False
    if len(s.fixed_zero) and np.any(labels[s.fixed_zero[:, 0] - lo] == s.fixed_zero[:, 1]):
        return False
    return all(np.any(labels[b.rows - lo] == b.class_id) for b in s.bags)


# ---------------------------------------------------------------------------
# builders


class _VideoContext:
    """Per-video arrays used by all builders."""

    def __init__(self, dataset: Dataset, video_id: str):
        self.video = dataset.video(video_id)
        self.tracks: List[Track] = dataset.tracks_of(video_id)
        self.lo, self.hi = dataset.rows_of(video_id)
        tls = dataset.tracklets_of(video_id)
        self.starts = np.array([t.start for t in tls], dtype=np.int64)
        self.ends = np.array([t.end for t in tls], dtype=np.int64)
        tid = {t.track_id: i for i, t in enumerate(self.tracks)}
        self.track_of = np.array([tid[t.track_id] for t in tls], dtype=np.int64)
        self.K = dataset.num_classes

    @property
    def rows(self) -> np.ndarray:
        return np.arange(self.lo, self.hi)

    def overlapping(self, a: int, b: int) -> np.ndarray:
        sel = (self.starts < b) & (self.ends > a)
        return np.flatnonzero(sel) + self.lo

    def track_rows(self, ti: int) -> np.ndarray:
        return np.flatnonzero(self.track_of == ti)


def _require(level: SupervisionLevel, annots: Sequence[Annotation]):
    for a in annots:
        for f in _REQUIRED[level.tag]:
            if not a.has(f):
                raise ConstraintError(
                    f"level {level.name} needs '{f}' for annotation "
                    f"{a.instance_id or a.class_id} of video {a.video_id}")


def _absent_zero(ctx: _VideoContext, present: Iterable[int]) -> np.ndarray:
    forbid = np.zeros((ctx.hi - ctx.lo, ctx.K), dtype=bool)
    forbid[:, 1:] = True
    forbid[:, list(present)] = False
    return forbid


def _unit_bags(ctx: _VideoContext, a: Annotation, span: Tuple[int, int], unit: int,
               what: str) -> List[Bag]:
    bags = []
    for j, (u0, u1) in enumerate(time_units(span[0], span[1], unit)):
        bags.append(Bag(a.class_id, ctx.overlapping(u0, u1),
                        f"{what} unit {j} of instance {a.instance_id or '?'}"))
    return bags


def _window(point: int, window: int, num_frames: int) -> Tuple[int, int]:
    a = point - window // 2
    b = a + window
    return max(a, 0), min(b, num_frames)


def _keyframe_fixing(ctx: _VideoContext, annots: Sequence[Annotation],
                     regions: Sequence[Tuple[int, int]], gate: float) -> Dict[int, int]:
    """Fix tracklets of tracks that cover annotated keyframes.

    A track's match score with an annotation is the minimum IoU over that
    annotation's keyframes (uncovered keyframes count as 0). Tracks whose
    scores are all below ``gate`` go entirely to background; otherwise their
    tracklets lying inside an annotation's region take the class of the best
    matching annotation.
    """
    order = sorted(range(len(annots)), key=lambda i: (regions[i][0], i))
    fixed: Dict[int, int] = {}
    for ti, track in enumerate(ctx.tracks):
        scores = {}
        for i in order:
            kfs = annots[i].keyframes
            if not any(track.covers(f) for f, _ in kfs):
                continue
            ious = [float(box_iou(track.box_at(f), np.array(b.as_tuple())))
                    if track.covers(f) else 0.0 for f, b in kfs]
            scores[i] = min(ious)
        if not scores:
            continue
        rows = ctx.track_rows(ti)
        if all(v < gate for v in scores.values()):
            for r in rows:
                fixed[int(r) + ctx.lo] = BACKGROUND
            continue
        for r in rows:
            best, best_i = -1.0, None
            for i in order:
                if i in scores and scores[i] >= gate:
                    a, b = regions[i]
                    if ctx.starts[r] >= a and ctx.ends[r] <= b and scores[i] > best:
                        best, best_i = scores[i], i
            if best_i is not None:
                fixed[int(r) + ctx.lo] = annots[best_i].class_id
    return fixed


def _tracklet_mean_iou(ctx: _VideoContext, ti: int, a: Annotation) -> np.ndarray:
    """Mean per-frame IoU of each tracklet of track ``ti`` with ``a.boxes``.

    Frames where the annotation has no box contribute 0.
    """
    track = ctx.tracks[ti]
    rows = ctx.track_rows(ti)
    per_frame = np.zeros(len(track))
    lo, hi = max(track.start, a.interval[0]), min(track.end, a.interval[1])
    if hi > lo:
        per_frame[lo - track.start:hi - track.start] = box_iou(
            track.boxes[lo - track.start:hi - track.start],
            a.boxes[lo - a.interval[0]:hi - a.interval[0]])
    offsets = ctx.starts[rows] - track.start
    sums = np.add.reduceat(per_frame, offsets)
    return sums / (ctx.ends[rows] - ctx.starts[rows])


def _point_match(ctx: _VideoContext, ti: int, a: Annotation) -> np.ndarray:
    """Mean point-to-center distance per tracklet, ``inf`` when not a candidate."""
    track = ctx.tracks[ti]
    rows = ctx.track_rows(ti)
    out = np.full(len(rows), np.inf)
    for j, r in enumerate(rows):
        lo = max(ctx.starts[r], a.interval[0])
        hi = min(ctx.ends[r], a.interval[1])
        if hi <= lo:
            continue
        boxes = track.boxes[lo - track.start:hi - track.start]
        pts = a.points[lo - a.interval[0]:hi - a.interval[0]]
        inside = ((pts[:, 0] >= boxes[:, 0]) & (pts[:, 0] <= boxes[:, 2])
                  & (pts[:, 1] >= boxes[:, 1]) & (pts[:, 1] <= boxes[:, 3]))
        if inside.all():
            centers = 0.5 * (boxes[:, :2] + boxes[:, 2:])
            out[j] = float(np.mean(np.linalg.norm(pts - centers, axis=1)))
    return out


def _hard_assignment(ctx: _VideoContext, annots: Sequence[Annotation],
                     level: SupervisionLevel) -> Dict[int, int]:
    order = sorted(range(len(annots)), key=lambda i: (annots[i].interval[0], i))
    fixed = {}
    for ti in range(len(ctx.tracks)):
        rows = ctx.track_rows(ti)
        if level.tag == "full":
            best = np.full(len(rows), -np.inf)
            pick = np.full(len(rows), BACKGROUND)
            for i in order:
                iou = _tracklet_mean_iou(ctx, ti, annots[i])
                upd = (iou >= level.iou_gate) & (iou > best)
                best[upd], pick[upd] = iou[upd], annots[i].class_id
        else:
            best = np.full(len(rows), np.inf)
            pick = np.full(len(rows), BACKGROUND)
            for i in order:
                dist = _point_match(ctx, ti, annots[i])
                upd = dist < best
                best[upd], pick[upd] = dist[upd], annots[i].class_id
        for r, k in zip(rows, pick):
            fixed[int(r) + ctx.lo] = int(k)
    return fixed


def _finish(ctx: _VideoContext, level: SupervisionLevel, fixed: Mapping[int, int],
            forbid: Optional[np.ndarray], bags: Sequence[Bag]) -> VideoConstraintSet:
    n = ctx.hi - ctx.lo
    if forbid is None:
        forbid = np.zeros((n, ctx.K), dtype=bool)
    forced = np.full(n, -1, dtype=np.int64)
    if fixed:
        idx = np.fromiter(fixed.keys(), dtype=np.int64, count=len(fixed)) - ctx.lo
        forced[idx] = np.fromiter(fixed.values(), dtype=np.int64, count=len(fixed))
    # rows fixed elsewhere, or forbidden for the bag class, cannot serve a bag
    pruned = []
    for bag in bags:
        loc = bag.rows - ctx.lo
        ok = ((forced[loc] == -1) | (forced[loc] == bag.class_id)) & ~forbid[loc, bag.class_id]
        if not ok.any():
            raise ConstraintError(
                f"video {ctx.video.video_id}: empty bag after construction ({bag.source})")
        pruned.append(Bag(bag.class_id, bag.rows[ok], bag.source))
    forbid = forbid & (forced == -1)[:, None]
    zr, zc = np.nonzero(forbid)
    fr = np.flatnonzero(forced >= 0)
    return VideoConstraintSet(
        ctx.video.video_id, ctx.lo, ctx.hi, ctx.K,
        fixed_one=np.stack([fr + ctx.lo, forced[fr]], axis=1),
        fixed_zero=np.stack([zr + ctx.lo, zc], axis=1), bags=tuple(pruned),
        level=level.name)


def build_video_constraints(dataset: Dataset, video_id: str, level: SupervisionLevel,
                            annotations: Sequence[Annotation]) -> VideoConstraintSet:
    """Constraint set of one video for ``level`` given that video's annotations."""
    annots = [a for a in annotations if a.video_id == video_id]
    _require(level, annots)
    for a in annots:
        if a.class_id >= dataset.num_classes:
            raise ConstraintError(f"annotation {a.instance_id}: class {a.class_id} out of range")
    ctx = _VideoContext(dataset, video_id)
    nf = ctx.video.num_frames
    present = sorted({a.class_id for a in annots})
    tag = level.tag
    fixed: Dict[int, int] = {}
    bags: List[Bag] = []
    zero: Optional[np.ndarray] = None

    if tag == "video":
        zero = _absent_zero(ctx, present)
        bags = [Bag(k, ctx.rows, f"class {k}") for k in present]
    elif tag == "shot":
        shots = ctx.video.shots
        if not shots:
            raise ConstraintError(f"video {video_id}: shot-level supervision needs shot boundaries")
        per_shot: Dict[int, set] = {}
        for a in annots:
            if not 0 <= a.shot < len(shots):
                raise ConstraintError(f"annotation {a.instance_id}: shot {a.shot} out of range")
            per_shot.setdefault(a.shot, set()).add(a.class_id)
        zero = np.zeros((ctx.hi - ctx.lo, ctx.K), dtype=bool)
        zero[:, 1:] = True
        for si, (s0, s1) in enumerate(shots):
            classes = sorted(per_shot.get(si, set()))
            rows = ctx.overlapping(s0, s1)
            if classes:
                zero[np.ix_(rows - ctx.lo, classes)] = False
            for k in classes:
                bags.append(Bag(k, rows, f"class {k} in shot {si}"))
    elif tag in ("point", "one-bb"):
        zero = _absent_zero(ctx, present)
        windows = [_window(a.point, level.window, nf) for a in annots]
        for a, w in zip(annots, windows):
            bags.extend(_unit_bags(ctx, a, w, level.unit, "window"))
        if tag == "one-bb":
            for a in annots:
                if len(a.keyframes) != 1 or a.keyframes[0][0] != a.point:
                    raise ConstraintError(
                        f"annotation {a.instance_id}: one-bb needs exactly one keyframe at the point")
            fixed = _keyframe_fixing(ctx, annots, windows, level.iou_gate)
    elif tag in ("temporal", "temporal-kbb"):
        zero = _absent_zero(ctx, present)
        outside = np.ones(ctx.hi - ctx.lo, dtype=bool)
        for a in annots:
            outside &= (ctx.ends <= a.interval[0]) | (ctx.starts >= a.interval[1])
            bags.extend(_unit_bags(ctx, a, a.interval, level.unit, "interval"))
        fixed = {int(i) + ctx.lo: BACKGROUND for i in np.flatnonzero(outside)}
        if tag == "temporal-kbb":
            kf = _keyframe_fixing(ctx, annots, [a.interval for a in annots], level.iou_gate)
            for m, k in kf.items():
                if fixed.get(m, k) != k:
                    continue
                fixed[m] = k
    else:  # full, spatial-points
        fixed = _hard_assignment(ctx, annots, level)
    return _finish(ctx, level, fixed, zero, bags)


def build_constraints(dataset: Dataset, level: SupervisionLevel,
                      annotations: Sequence[Annotation],
                      video_ids: Optional[Sequence[str]] = None) -> List[VideoConstraintSet]:
    ids = dataset.video_ids if video_ids is None else list(video_ids)
    by_video: Dict[str, List[Annotation]] = {v: [] for v in ids}
    for a in annotations:
        if a.video_id in by_video:
            by_video[a.video_id].append(a)
    return [build_video_constraints(dataset, v, level, by_video[v]) for v in ids]


def mix_levels(dataset: Dataset,
               assignment: Mapping[str, Tuple[SupervisionLevel, Sequence[Annotation]]]
               ) -> List[VideoConstraintSet]:
    """Build each video's set with its own level and annotations."""
    out = []
    for vid in dataset.video_ids:
        if vid not in assignment:
            raise ConstraintError(f"video {vid} has no supervision level assigned")
        level, annots = assignment[vid]
        out.append(build_video_constraints(dataset, vid, level, annots))
    return out
