"""Synthetic benchmark: videos, person tracks, instances and tracklet features.

Each video has ``tracks_per_video`` person tracks spanning the whole video,
each in its own horizontal lane so boxes of different tracks never
overlap. Action instances sit on actor tracks with unit-aligned intervals,
which makes every ground-truth time unit contain a tracklet of the actor
track that matches the instance at IoU well above 0.3. Distractor tracks
never act. Tracklet features are drawn around one center per class
(background included).
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .constraints import Annotation, SupervisionLevel
from .model import ActionInstance, BoundingBox, Dataset, Track, Video

LANE_WIDTH = 100.0
BOX_W, BOX_H = 50.0, 120.0


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose, derived from one seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    num_videos: int = 50
    num_test_videos: int = 20
    num_actions: int = 5
    dim: int = 32
    tracks_per_video: int = 3
    frames_per_video: int = 200
    instances_per_video: int = 1
    separation: float = 1.0
    noise: float = 0.25
    box_jitter: float = 4.0
    distractor_fraction: float = 0.34
    min_length: int = 48
    max_length: int = 120
    shots_per_video: int = 2
    max_keyframes: int = 3
    unit: int = 8

    def __post_init__(self):
        counts = (self.num_videos, self.num_actions, self.dim, self.tracks_per_video,
                  self.frames_per_video, self.instances_per_video, self.shots_per_video,
                  self.max_keyframes, self.unit)
        if min(counts) < 1 or self.num_test_videos < 0:
            raise ValueError("synth counts must be >= 1")
        if self.separation < 0 or self.noise < 0 or self.box_jitter < 0:
            raise ValueError("separation, noise and jitter must be >= 0")
        if not 0 <= self.distractor_fraction < 1:
            raise ValueError("distractor_fraction must lie in [0, 1)")
        if self.min_length % self.unit or self.max_length % self.unit:
            raise ValueError("instance lengths must be multiples of the unit")
        if not self.unit <= self.min_length <= self.max_length:
            raise ValueError("need unit <= min_length <= max_length")
        if self.max_length > (self.frames_per_video // self.unit) * self.unit:
            raise ValueError("instances do not fit in the video")
        if self.box_jitter >= 10.0:
            # keeps detection/ground-truth IoU far above 0.3 and lanes disjoint
            raise ValueError("box_jitter must be < 10 pixels")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthResult:
    config: SynthConfig
    dataset: Dataset
    features: np.ndarray
    labels: np.ndarray
    points: Dict[str, int]
    keyframes: Dict[str, Tuple[int, ...]]
    actors: Dict[str, str]

    def annotations(self, level: SupervisionLevel,
                    video_ids: Optional[List[str]] = None) -> List[Annotation]:
        return derive_annotations(self, level, video_ids)


def class_centers(num_classes: int, dim: int, separation: float,
                  rng: np.random.Generator) -> np.ndarray:
    """``num_classes`` centers with pairwise distance at least ``separation``.

    With ``dim >= num_classes`` they are a randomly rotated, scaled simplex
    (all distances equal ``separation``).
    """
    if dim >= num_classes:
        Q, _ = np.linalg.qr(rng.standard_normal((dim, num_classes)))
        return (separation / np.sqrt(2.0)) * Q.T
    C = rng.standard_normal((num_classes, dim))
    dists = np.linalg.norm(C[:, None] - C[None], axis=2)
    dmin = dists[~np.eye(num_classes, dtype=bool)].min()
    return C * (separation / dmin if dmin > 0 else 0.0)


def _trajectory(num_frames: int, lane: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(num_frames)
    phase_x, phase_y = rng.uniform(0, 2 * np.pi, size=2)
    period = rng.uniform(60, 200)
    x1 = lane * LANE_WIDTH + 25.0 + 10.0 * np.sin(2 * np.pi * t / period + phase_x)
    y1 = 40.0 + 10.0 * np.sin(2 * np.pi * t / period + phase_y)
    return np.stack([x1, y1, x1 + BOX_W, y1 + BOX_H], axis=1)


def _place(length_choices: np.ndarray, usable: int, taken: List[Tuple[int, int]],
           unit: int, rng: np.random.Generator) -> Optional[Tuple[int, int]]:
    for _ in range(50):
        L = int(rng.choice(length_choices))
        slots = (usable - L) // unit + 1
        if slots < 1:
            continue
        s = int(rng.integers(slots)) * unit
        if all(s >= b or s + L <= a for a, b in taken):
            return s, s + L
    return None


def generate(config: SynthConfig) -> SynthResult:
    cfg = config
    rng_geo = substream(cfg.seed, "synth.geometry")
    rng_inst = substream(cfg.seed, "synth.instances")
    rng_feat = substream(cfg.seed, "synth.features")
    rng_ann = substream(cfg.seed, "synth.annotations")

    K = cfg.num_actions + 1
    centers = class_centers(K, cfg.dim, cfg.separation, rng_feat)
    F, unit = cfg.frames_per_video, cfg.unit
    usable = (F // unit) * unit
    lengths = np.arange(cfg.min_length, cfg.max_length + 1, unit)
    n_distract = int(round(cfg.distractor_fraction * cfg.tracks_per_video))
    n_actors = max(cfg.tracks_per_video - n_distract, 1)
    shot_edges = np.linspace(0, F, cfg.shots_per_video + 1).round().astype(int)
    shots = tuple((int(a), int(b)) for a, b in zip(shot_edges, shot_edges[1:]) if b > a)

    videos, tracks, instances = [], [], []
    points: Dict[str, int] = {}
    keyframes: Dict[str, Tuple[int, ...]] = {}
    actors: Dict[str, str] = {}
    names = ([f"train{i:04d}" for i in range(cfg.num_videos)]
             + [f"test{i:04d}" for i in range(cfg.num_test_videos)])
    for vi, vid in enumerate(names):
        split = "train" if vi < cfg.num_videos else "test"
        videos.append(Video(vid, F, shots, split))
        lanes = rng_geo.permutation(cfg.tracks_per_video)
        truth = []
        for ti in range(cfg.tracks_per_video):
            true_boxes = _trajectory(F, int(lanes[ti]), rng_geo)
            jitter = rng_geo.uniform(-cfg.box_jitter, cfg.box_jitter, size=true_boxes.shape)
            truth.append(true_boxes)
            tracks.append(Track(vid, f"t{ti}", 0, true_boxes + jitter))
        taken: Dict[int, List[Tuple[int, int]]] = {}
        for ii in range(cfg.instances_per_video):
            actor = ii % n_actors
            span = _place(lengths, usable, taken.setdefault(actor, []), unit, rng_inst)
            if span is None:
                continue
            taken[actor].append(span)
            s, e = span
            cls = int(rng_inst.integers(1, K))
            iid = f"{vid}/i{ii}"
            gt = truth[actor][s:e]
            # sampling order is kept: the first k frames serve the k-keyframe levels
            kf_order = tuple(int(f) for f in rng_ann.choice(
                np.arange(s, e), size=min(cfg.max_keyframes, e - s), replace=False))
            points[iid] = int(rng_ann.integers(s, e))
            keyframes[iid] = kf_order
            instances.append(ActionInstance(
                vid, iid, cls, s, e,
                keyframes=tuple((f, BoundingBox.from_array(gt[f - s])) for f in kf_order),
                boxes=gt))
            actors[iid] = f"t{actor}"

    dataset = Dataset(videos, tracks, instances, cfg.num_actions, unit)
    labels = np.zeros(dataset.M, dtype=np.int64)
    for inst in dataset.instances:
        a, b = dataset.rows_of_track(inst.video_id, actors[inst.instance_id])
        for r in range(a, b):
            tl = dataset.tracklets[r]
            if tl.start >= inst.start and tl.end <= inst.end:
                labels[r] = inst.class_id
    noise = rng_feat.standard_normal((dataset.M, cfg.dim)) * cfg.noise
    # round-trip through float32 so in-memory and on-disk features agree
    features = (centers[labels] + noise).astype(np.float32).astype(np.float64)
    return SynthResult(cfg, dataset, features, labels, points, keyframes, actors)


def derive_annotations(result: SynthResult, level: SupervisionLevel,
                       video_ids: Optional[List[str]] = None) -> List[Annotation]:
    """Project the ground truth onto what ``level`` lets an annotator give."""
    ds = result.dataset
    keep = None if video_ids is None else set(video_ids)
    out = []
    for inst in ds.instances:
        if keep is not None and inst.video_id not in keep:
            continue
        base = dict(video_id=inst.video_id, class_id=inst.class_id, instance_id=inst.instance_id)
        tag = level.tag
        if tag == "video":
            out.append(Annotation(**base))
        elif tag == "shot":
            for si, (a, b) in enumerate(ds.video(inst.video_id).shots):
                if a < inst.end and b > inst.start:
                    out.append(Annotation(**base, shot=si))
        elif tag == "point":
            out.append(Annotation(**base, point=result.points[inst.instance_id]))
        elif tag == "one-bb":
            p = result.points[inst.instance_id]
            box = BoundingBox.from_array(inst.boxes[p - inst.start])
            out.append(Annotation(**base, point=p, keyframes=((p, box),)))
        elif tag == "temporal":
            out.append(Annotation(**base, interval=inst.interval))
        elif tag == "temporal-kbb":
            frames = result.keyframes[inst.instance_id][:level.k]
            kfs = tuple(sorted((f, BoundingBox.from_array(inst.boxes[f - inst.start]))
                               for f in frames))
            out.append(Annotation(**base, interval=inst.interval, keyframes=kfs))
        elif tag == "spatial-points":
            centers = 0.5 * (inst.boxes[:, :2] + inst.boxes[:, 2:])
            out.append(Annotation(**base, interval=inst.interval, points=centers))
        else:
            out.append(Annotation(**base, interval=inst.interval, boxes=inst.boxes))
    return out
