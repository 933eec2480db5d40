"""End-to-end glue: train on a supervision assignment, calibrate, detect, evaluate."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Callable, Dict, List, Mapping, Sequence, Tuple

import numpy as np

from .constraints import (Annotation, SupervisionLevel, VideoConstraintSet,
                          build_video_constraints)
from .evaluation import video_map
from .geometry import scale_boxes
from .inference import ThresholdSet, calibrate_thresholds, detect
from .model import DataError, Dataset, DetectionRecord, Track
from .objective import build_cache
from .solver import BCFWSolver, SolveResult, SolverConfig
from .synth import substream

AnnotationSource = Callable[[SupervisionLevel, Sequence[str]], List[Annotation]]


@dataclass
class ExperimentConfig:
    lam: float = 1e-4
    iterations: int = 30000
    seed: int = 0
    gap_tolerance: float = 1e-3
    epsilon: float = 0.05
    calibrate_frac: float = 0.1
    thresholds: Tuple[float, ...] = (0.2, 0.5)
    mode: str = "full"
    normalize: bool = False

    def solver_config(self) -> SolverConfig:
        return SolverConfig(iterations=self.iterations, lam=self.lam, seed=self.seed,
                            gap_tolerance=self.gap_tolerance, epsilon=self.epsilon)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["thresholds"] = list(self.thresholds)
        return d


@dataclass
class PipelineResult:
    solve: SolveResult
    thresholds: ThresholdSet
    detections: List[DetectionRecord]
    report: dict
    train_ids: List[str]
    calib_ids: List[str]
    test_ids: List[str]


def split_train_calibration(train_ids: Sequence[str], frac: float) -> Tuple[List[str], List[str]]:
    """Hold out the last ``ceil(frac * n)`` training videos by id order."""
    ids = sorted(train_ids)
    if not 0 < frac < 1:
        raise ValueError("calibration fraction must lie in (0, 1)")
    n_cal = max(1, math.ceil(frac * len(ids)))
    if n_cal >= len(ids):
        raise DataError("calibration split would leave no training videos")
    return ids[:-n_cal], ids[-n_cal:]


def scale_tracks(dataset: Dataset, factor: float) -> Dataset:
    """Copy of ``dataset`` with every track box scaled about its center."""
    if factor == 1.0:
        return dataset
    tracks = [Track(t.video_id, t.track_id, t.start, scale_boxes(t.boxes, factor),
                    t.descriptor_indices) for t in dataset.tracks]
    return Dataset(dataset.videos, tracks, dataset.instances, dataset.num_actions, dataset.unit)


def relocate(sets: Sequence[VideoConstraintSet]) -> Tuple[np.ndarray, List[VideoConstraintSet]]:
    """Renumber the rows of ``sets`` to be contiguous from 0, in set order.

    Returns the original row indices (to slice features) and the new sets.
    """
    rows, out, pos = [], [], 0
    for s in sets:
        shift = pos - s.row_start
        rows.append(np.arange(s.row_start, s.row_end))
        move = np.array([shift, 0])
        out.append(VideoConstraintSet(
            s.video_id, pos, pos + s.num_rows, s.num_classes,
            s.fixed_one + move, s.fixed_zero + move,
            tuple(replace(b, rows=b.rows + shift) for b in s.bags), s.level))
        pos += s.num_rows
    return (np.concatenate(rows) if rows else np.zeros(0, np.int64)), out


def train(features: np.ndarray, sets: Sequence[VideoConstraintSet], cfg: ExperimentConfig,
          callback=None) -> SolveResult:
    rows, local = relocate(sets)
    cache = build_cache(features[rows], cfg.lam, normalize=cfg.normalize)
    solver = BCFWSolver(cache, local, cfg.solver_config())
    return solver.run(rng=substream(cfg.seed, "sampler"), callback=callback)


def evaluate(dataset: Dataset, features: np.ndarray, solve: SolveResult,
             calib_ids: Sequence[str], test_ids: Sequence[str], cfg: ExperimentConfig):
    feats = _maybe_normalize(features, cfg)
    thresholds = calibrate_thresholds(dataset, feats, solve.classifier, calib_ids)
    dets = detect(dataset, feats, solve.classifier, thresholds, test_ids)
    keep = set(test_ids)
    gt = [i for i in dataset.instances if i.video_id in keep]
    report = video_map(dets, gt, cfg.thresholds, cfg.mode, dataset.num_actions)
    return thresholds, dets, report


def _maybe_normalize(features: np.ndarray, cfg: ExperimentConfig) -> np.ndarray:
    if not cfg.normalize:
        return features
    from .objective import l2_normalize
    return l2_normalize(features)


def run_assignment(dataset: Dataset, features: np.ndarray,
                   assignment: Mapping[str, Tuple[SupervisionLevel, Sequence[Annotation]]],
                   train_ids: Sequence[str], calib_ids: Sequence[str], test_ids: Sequence[str],
                   cfg: ExperimentConfig) -> PipelineResult:
    missing = [v for v in train_ids if v not in assignment]
    if missing:
        raise DataError(f"videos without a supervision level: {missing}")
    sets = [build_video_constraints(dataset, v, *assignment[v]) for v in train_ids]
    solve = train(features, sets, cfg)
    thresholds, dets, report = evaluate(dataset, features, solve, calib_ids, test_ids, cfg)
    return PipelineResult(solve, thresholds, dets, report, list(train_ids), list(calib_ids),
                          list(test_ids))


def run_level(dataset: Dataset, features: np.ndarray, annotations: AnnotationSource,
              level: SupervisionLevel, cfg: ExperimentConfig) -> PipelineResult:
    """Train every training video at ``level`` and evaluate on the test split."""
    train_ids, calib_ids = split_train_calibration(dataset.split_ids("train"), cfg.calibrate_frac)
    annots = annotations(level, train_ids)
    assignment = {v: (level, annots) for v in train_ids}
    return run_assignment(dataset, features, assignment, train_ids, calib_ids,
                          dataset.split_ids("test"), cfg)


def mix_assignment(train_ids: Sequence[str], fraction: float, seed: int) -> Dict[str, bool]:
    """Which training videos get strong supervision.

    A single seeded permutation is used for every fraction, so the strong
    set grows monotonically with ``fraction``.
    """
    if not 0 <= fraction <= 1:
        raise ValueError("fraction must lie in [0, 1]")
    ids = sorted(train_ids)
    perm = substream(seed, "mix").permutation(len(ids))
    n_strong = int(round(fraction * len(ids)))
    strong = {ids[i] for i in perm[:n_strong]}
    return {v: v in strong for v in ids}


def run_mixed(dataset: Dataset, features: np.ndarray, annotations: AnnotationSource,
              weak: SupervisionLevel, strong: SupervisionLevel, fraction: float,
              cfg: ExperimentConfig) -> PipelineResult:
    train_ids, calib_ids = split_train_calibration(dataset.split_ids("train"), cfg.calibrate_frac)
    is_strong = mix_assignment(train_ids, fraction, cfg.seed)
    strong_ids = [v for v in train_ids if is_strong[v]]
    weak_ids = [v for v in train_ids if not is_strong[v]]
    strong_ann = annotations(strong, strong_ids) if strong_ids else []
    weak_ann = annotations(weak, weak_ids) if weak_ids else []
    assignment = {v: ((strong, strong_ann) if is_strong[v] else (weak, weak_ann))
                  for v in train_ids}
    return run_assignment(dataset, features, assignment, train_ids, calib_ids,
                          dataset.split_ids("test"), cfg)


def mix_curve(dataset: Dataset, features: np.ndarray, annotations: AnnotationSource,
              weak: SupervisionLevel, strong: SupervisionLevel, fractions: Sequence[float],
              cfg: ExperimentConfig) -> List[dict]:
    rows = []
    for f in fractions:
        res = run_mixed(dataset, features, annotations, weak, strong, f, cfg)
        row = {"fraction": float(f)}
        row.update({f"map@{k}": v for k, v in res.report["map"].items()})
        rows.append(row)
    return rows
