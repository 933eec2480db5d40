"""File formats: binary feature matrices and JSON-lines record streams.

Feature files start with a 24-byte little-endian header (magic ``DFC1``,
u32 version, u64 rows, u64 dim) followed by ``rows * dim`` float32 values
in row-major order. Everything else is JSON: one object per line for
tracks, annotations, constraints and detections, a single document for
reports. All writes go through a temporary file and an atomic rename.
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Union

import numpy as np

from .constraints import Annotation, Bag, VideoConstraintSet
from .model import (ActionInstance, BoundingBox, DataError, Dataset, Detection, DetectionRecord,
                    Track, Video, DEFAULT_UNIT)

PathLike = Union[str, os.PathLike]

MAGIC = b"DFC1"
VERSION = 1
HEADER = struct.Struct("<4sIQQ")


@contextmanager
def atomic_open(path: PathLike, mode: str = "w"):
    """Open a temporary sibling of ``path``; rename it over ``path`` on success."""
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc
    try:
        kwargs = {} if "b" in mode else {"encoding": "utf-8", "newline": "\n"}
        with os.fdopen(fd, mode, **kwargs) as fh:
            yield fh
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- features -----------------------------------------------------------------

def save_features(path: PathLike, X) -> None:
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise DataError(f"feature matrix must be a non-empty 2-d array, got shape {X.shape}")
    with atomic_open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, X.shape[0], X.shape[1]))
        fh.write(np.ascontiguousarray(X, dtype="<f4").tobytes())


def load_features(path: PathLike) -> np.ndarray:
    """Read a feature file into a float64 ``(rows, dim)`` array."""
    try:
        with open(path, "rb") as fh:
            head = fh.read(HEADER.size)
            if len(head) < HEADER.size:
                raise DataError(f"{path}: truncated header")
            magic, version, rows, dim = HEADER.unpack(head)
            if magic != MAGIC:
                raise DataError(f"{path}: bad magic {magic!r}")
            if version != VERSION:
                raise DataError(f"{path}: unsupported version {version}")
            if rows == 0 or dim == 0:
                raise DataError(f"{path}: rows and dim must be positive")
            expected = rows * dim * 4
            actual = os.fstat(fh.fileno()).st_size - HEADER.size
            if actual != expected:
                raise DataError(f"{path}: payload has {actual} bytes, header implies {expected}")
            payload = fh.read(expected)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(rows, dim)


# -- JSON-lines helpers -------------------------------------------------------

def _dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, allow_nan=False)


def write_jsonl(path: PathLike, records: Iterable[dict]) -> None:
    with atomic_open(path) as fh:
        for r in records:
            fh.write(_dumps(r))
            fh.write("\n")


def read_jsonl(path: PathLike) -> Iterator[dict]:
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{n}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{n}: expected a JSON object")
            yield obj


def _field(rec: dict, name: str, where: str):
    try:
        return rec[name]
    except KeyError:
        raise DataError(f"{where}: missing field {name!r}") from None


def _boxes(arr) -> List[List[float]]:
    return np.asarray(arr, dtype=np.float64).tolist()


# -- tracks and ground truth --------------------------------------------------

def video_record(v: Video, num_actions: int, unit: int) -> dict:
    return {"type": "video", "video_id": v.video_id, "num_frames": v.num_frames,
            "shots": [list(s) for s in v.shots], "split": v.split,
            "num_actions": num_actions, "unit": unit}


def track_record(t: Track) -> dict:
    rec = {"type": "track", "video_id": t.video_id, "track_id": t.track_id,
           "start": t.start, "boxes": _boxes(t.boxes)}
    if t.descriptor_indices is not None:
        rec["descriptor_indices"] = t.descriptor_indices.tolist()
    return rec


def instance_record(i: ActionInstance) -> dict:
    rec = {"type": "instance", "video_id": i.video_id, "instance_id": i.instance_id,
           "class_id": i.class_id, "start": i.start, "end": i.end,
           "keyframes": [{"frame": f, "box": list(b.as_tuple())} for f, b in i.keyframes]}
    if i.boxes is not None:
        rec["boxes"] = _boxes(i.boxes)
    return rec


def save_tracks(path: PathLike, dataset: Dataset) -> None:
    def records():
        for v in dataset.videos:
            yield video_record(v, dataset.num_actions, dataset.unit)
        for t in dataset.tracks:
            yield track_record(t)
        for i in dataset.instances:
            yield instance_record(i)
    write_jsonl(path, records())


def _parse_track(rec: dict, where: str) -> Track:
    vid, tid = _field(rec, "video_id", where), str(_field(rec, "track_id", where))
    if "detections" in rec:
        dets = [Detection(int(_field(d, "frame", where)),
                          BoundingBox(*map(float, _field(d, "box", where))),
                          d.get("descriptor_index"))
                for d in rec["detections"]]
        return Track.from_detections(vid, tid, dets)
    return Track(vid, tid, int(_field(rec, "start", where)),
                 np.asarray(_field(rec, "boxes", where), dtype=np.float64).reshape(-1, 4),
                 rec.get("descriptor_indices"))


def _parse_instance(rec: dict, where: str) -> ActionInstance:
    kfs = tuple((int(_field(k, "frame", where)), BoundingBox(*map(float, _field(k, "box", where))))
                for k in rec.get("keyframes", ()))
    boxes = rec.get("boxes")
    return ActionInstance(
        _field(rec, "video_id", where), str(_field(rec, "instance_id", where)),
        int(_field(rec, "class_id", where)), int(_field(rec, "start", where)),
        int(_field(rec, "end", where)), keyframes=kfs,
        boxes=None if boxes is None else np.asarray(boxes, dtype=np.float64).reshape(-1, 4))


def load_tracks(path: PathLike, num_actions: Optional[int] = None,
                unit: Optional[int] = None) -> Dataset:
    """Read videos, tracks and instances into a validated :class:`Dataset`.

    ``num_actions`` and ``unit`` default to the values stored on the video
    records, then to the largest instance class (1 without instances) and 8.
    """
    videos, tracks, instances = [], [], []
    stored_k, stored_unit = set(), set()
    for n, rec in enumerate(read_jsonl(path), 1):
        where = f"{path}:{n}"
        kind = rec.get("type")
        try:
            if kind == "video":
                videos.append(Video(str(_field(rec, "video_id", where)),
                                    int(_field(rec, "num_frames", where)),
                                    tuple(tuple(int(x) for x in s) for s in rec.get("shots", ())),
                                    rec.get("split", "train")))
                if "num_actions" in rec:
                    stored_k.add(int(rec["num_actions"]))
                if "unit" in rec:
                    stored_unit.add(int(rec["unit"]))
            elif kind == "track":
                tracks.append(_parse_track(rec, where))
            elif kind == "instance":
                instances.append(_parse_instance(rec, where))
            else:
                raise DataError(f"{where}: unknown record type {kind!r}")
        except (TypeError, ValueError) as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"{where}: malformed record ({exc})") from exc
    if not videos and not tracks and not instances:
        raise DataError(f"{path}: empty dataset")
    if num_actions is None:
        if len(stored_k) > 1:
            raise DataError(f"{path}: video records disagree on num_actions")
        num_actions = stored_k.pop() if stored_k else max((i.class_id for i in instances), default=1)
    if unit is None:
        if len(stored_unit) > 1:
            raise DataError(f"{path}: video records disagree on unit")
        unit = stored_unit.pop() if stored_unit else DEFAULT_UNIT
    return Dataset(videos, tracks, instances, num_actions, unit)


# -- annotations --------------------------------------------------------------

def annotation_record(a: Annotation) -> dict:
    rec = {"video_id": a.video_id, "class_id": a.class_id, "instance_id": a.instance_id}
    if a.shot is not None:
        rec["shot"] = a.shot
    if a.point is not None:
        rec["point"] = a.point
    if a.interval is not None:
        rec["interval"] = list(a.interval)
    if a.keyframes:
        rec["keyframes"] = [{"frame": f, "box": list(b.as_tuple())} for f, b in a.keyframes]
    if a.points is not None:
        rec["points"] = a.points.tolist()
    if a.boxes is not None:
        rec["boxes"] = _boxes(a.boxes)
    return rec


def save_annotations(path: PathLike, annotations: Iterable[Annotation]) -> None:
    write_jsonl(path, (annotation_record(a) for a in annotations))


def load_annotations(path: PathLike) -> List[Annotation]:
    out = []
    for n, rec in enumerate(read_jsonl(path), 1):
        where = f"{path}:{n}"
        try:
            interval = rec.get("interval")
            out.append(Annotation(
                str(_field(rec, "video_id", where)), int(_field(rec, "class_id", where)),
                str(rec.get("instance_id", "")),
                shot=None if rec.get("shot") is None else int(rec["shot"]),
                point=None if rec.get("point") is None else int(rec["point"]),
                interval=None if interval is None else (int(interval[0]), int(interval[1])),
                keyframes=tuple((int(k["frame"]), BoundingBox(*map(float, k["box"])))
                                for k in rec.get("keyframes", ())),
                points=rec.get("points"), boxes=rec.get("boxes")))
        except (TypeError, ValueError, KeyError, IndexError) as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"{where}: malformed annotation ({exc})") from exc
    return out


# -- constraints --------------------------------------------------------------

def constraint_record(s: VideoConstraintSet) -> dict:
    return {"video_id": s.video_id, "row_start": s.row_start, "row_end": s.row_end,
            "num_classes": s.num_classes, "level": s.level,
            "fixed_one": s.fixed_one.tolist(), "fixed_zero": s.fixed_zero.tolist(),
            "bags": [{"class_id": b.class_id, "rows": b.rows.tolist(), "source": b.source}
                     for b in s.bags]}


def save_constraints(path: PathLike, sets: Iterable[VideoConstraintSet]) -> None:
    write_jsonl(path, (constraint_record(s) for s in sets))


def load_constraints(path: PathLike) -> List[VideoConstraintSet]:
    out = []
    for n, rec in enumerate(read_jsonl(path), 1):
        where = f"{path}:{n}"
        try:
            out.append(VideoConstraintSet(
                str(_field(rec, "video_id", where)), int(_field(rec, "row_start", where)),
                int(_field(rec, "row_end", where)), int(_field(rec, "num_classes", where)),
                np.asarray(rec.get("fixed_one", []), dtype=np.int64).reshape(-1, 2),
                np.asarray(rec.get("fixed_zero", []), dtype=np.int64).reshape(-1, 2),
                tuple(Bag(int(b["class_id"]), b["rows"], b.get("source", ""))
                      for b in rec.get("bags", ())),
                rec.get("level", "")))
        except (TypeError, ValueError, KeyError) as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"{where}: malformed constraint set ({exc})") from exc
    return out


# -- detections and reports ---------------------------------------------------

def detection_record(d: DetectionRecord) -> dict:
    return {"video_id": d.video_id, "class_id": d.class_id, "start": d.start, "end": d.end,
            "score": float(d.score), "track_id": d.track_id, "boxes": _boxes(d.boxes)}


def save_detections(path: PathLike, records: Iterable[DetectionRecord]) -> None:
    write_jsonl(path, (detection_record(d) for d in records))


def load_detections(path: PathLike) -> List[DetectionRecord]:
    out = []
    for n, rec in enumerate(read_jsonl(path), 1):
        where = f"{path}:{n}"
        try:
            d = DetectionRecord(str(_field(rec, "video_id", where)),
                                int(_field(rec, "class_id", where)),
                                int(_field(rec, "start", where)),
                                np.asarray(_field(rec, "boxes", where), dtype=np.float64).reshape(-1, 4),
                                float(_field(rec, "score", where)), str(rec.get("track_id", "")))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"{where}: malformed detection ({exc})") from exc
        if "end" in rec and int(rec["end"]) != d.end:
            raise DataError(f"{where}: interval length does not match the number of boxes")
        out.append(d)
    return out


def save_report(path: PathLike, report: dict) -> None:
    with atomic_open(path) as fh:
        json.dump(report, fh, indent=2, allow_nan=False)
        fh.write("\n")


def load_report(path: PathLike) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read report {path}: {exc}") from exc


# -- dense arrays -------------------------------------------------------------

def save_array(path: PathLike, arr) -> None:
    buf = io.BytesIO()
    np.save(buf, np.asarray(arr), allow_pickle=False)
    with atomic_open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_array(path: PathLike) -> np.ndarray:
    try:
        return np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read array {path}: {exc}") from exc


def save_text(path: PathLike, text: str) -> None:
    with atomic_open(path) as fh:
        fh.write(text)
