"""Command-line driver.

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 numerical failure. Failures print a single diagnostic line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__, dataio
from .constraints import Annotation, SupervisionLevel, build_video_constraints
from .evaluation import match, video_map
from .inference import calibrate_thresholds, detect
from .model import DataError, Dataset
from .objective import Classifier, NumericalError
from .pipeline import (ExperimentConfig, run_mixed, scale_tracks,
                       split_train_calibration, train)
from .synth import SynthConfig, generate

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

SYNTH_LEVELS = ("video", "shot", "point", "one-bb", "temporal", "temporal+1bb",
                "temporal+3bb", "spatial-points", "full")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    wall_clock_seconds: float = 0.0
    version: str = __version__

    def write(self, path: Path) -> None:
        dataio.save_report(path, {
            "command": self.command, "config": self.config, "seed": self.seed,
            "inputs": self.inputs, "outputs": self.outputs,
            "wall_clock_seconds": round(self.wall_clock_seconds, 3), "version": self.version})


# -- argument parsing ---------------------------------------------------------

def _floats(text: str) -> List[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _level(text: str) -> SupervisionLevel:
    try:
        return SupervisionLevel.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _common(p: argparse.ArgumentParser, *, solver=False, data=True):
    p.add_argument("--out-dir", type=Path, default=Path("."), help="output directory")
    p.add_argument("--seed", type=int, default=0)
    if data:
        p.add_argument("--features", type=Path, help="binary feature file")
        p.add_argument("--tracks", type=Path, help="tracks and ground truth (JSON lines)")
        p.add_argument("--box-scale", type=float, default=1.0,
                       help="scale track boxes about their centers at load time")
    if solver:
        p.add_argument("--lambda", dest="lam", type=float, default=1e-4)
        p.add_argument("--iterations", type=int, default=30000)
        p.add_argument("--gap-tolerance", type=float, default=1e-3,
                       help="stop when the total gap falls below this fraction of h(Y0)")
    p.add_argument("--calibrate-frac", type=float, default=0.1,
                   help="fraction of training videos held out to calibrate thresholds")


def _eval_flags(p: argparse.ArgumentParser):
    p.add_argument("--iou", type=_floats, default=[0.2, 0.5], help="e.g. 0.2,0.5")
    p.add_argument("--mode", choices=("full", "keyframe"), default="full")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="weakloc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _common(p, data=False)
    defaults = SynthConfig()
    for name in ("num_videos", "num_test_videos", "num_actions", "dim", "tracks_per_video",
                 "frames_per_video", "instances_per_video", "shots_per_video", "max_keyframes"):
        p.add_argument("--" + name.replace("_", "-"), type=int, default=getattr(defaults, name))
    for name in ("separation", "noise", "box_jitter", "distractor_fraction"):
        p.add_argument("--" + name.replace("_", "-"), type=float, default=getattr(defaults, name))

    p = sub.add_parser("build-constraints", help="compile annotations into constraint sets")
    _common(p)
    p.add_argument("--annotations", type=Path, required=True)
    p.add_argument("--level", type=_level, required=True)

    p = sub.add_parser("solve", help="run the block-coordinate Frank-Wolfe solver")
    _common(p, solver=True)
    p.add_argument("--constraints", type=Path, help="output of build-constraints")
    p.add_argument("--annotations", type=Path)
    p.add_argument("--level", type=_level)

    p = sub.add_parser("infer", help="calibrate thresholds and detect on the test split")
    _common(p)
    p.add_argument("--classifier", type=Path, help="W.npy from solve (default: OUT_DIR/W.npy)")
    p.add_argument("--iou", type=float, default=0.5, help="IoU used to calibrate thresholds")
    p.add_argument("--mode", choices=("full", "keyframe"), default="full")

    p = sub.add_parser("eval", help="video mAP of a detection file")
    _common(p)
    p.add_argument("--detections", type=Path, help="default: OUT_DIR/detections.jsonl")
    _eval_flags(p)

    p = sub.add_parser("e2e", help="build constraints, solve, infer and evaluate")
    _common(p, solver=True)
    p.add_argument("--annotations", type=Path, required=True)
    p.add_argument("--level", type=_level, required=True)
    _eval_flags(p)

    p = sub.add_parser("mix-curve", help="mAP against the fraction of strongly supervised videos")
    _common(p, solver=True)
    p.add_argument("--annotations", type=Path, required=True,
                   help="a directory of LEVEL.jsonl files, or WEAK.jsonl,STRONG.jsonl")
    p.add_argument("--levels", required=True, help="weak,strong (e.g. video,full)")
    p.add_argument("--fractions", type=_floats, default=[0, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0])
    _eval_flags(p)
    return parser


# -- shared loading -----------------------------------------------------------

def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError("missing required option(s): "
                         + ", ".join("--" + n.replace("_", "-") for n in missing))


def _dataset(args) -> Dataset:
    _require(args, "tracks")
    ds = dataio.load_tracks(args.tracks)
    if args.box_scale <= 0:
        raise UsageError("--box-scale must be positive")
    return scale_tracks(ds, args.box_scale)


def _features(args, dataset: Dataset) -> np.ndarray:
    _require(args, "features")
    X = dataio.load_features(args.features)
    if X.shape[0] != dataset.M:
        raise DataError(f"{args.features} has {X.shape[0]} rows but the tracks define "
                        f"{dataset.M} tracklets")
    return X


def _config(args) -> ExperimentConfig:
    iou = getattr(args, "iou", None)
    return ExperimentConfig(
        lam=getattr(args, "lam", 1e-4), iterations=getattr(args, "iterations", 30000),
        seed=args.seed, gap_tolerance=getattr(args, "gap_tolerance", 1e-3),
        calibrate_frac=args.calibrate_frac,
        thresholds=tuple(iou) if isinstance(iou, list) else (0.2, 0.5),
        mode=getattr(args, "mode", "full"))


def _split(args, dataset: Dataset):
    train_ids, calib_ids = split_train_calibration(dataset.split_ids("train"), args.calibrate_frac)
    test_ids = dataset.split_ids("test")
    if not test_ids:
        raise DataError("the tracks file has no videos in the test split")
    return train_ids, calib_ids, test_ids


def _annotation_file(path: Path, level: SupervisionLevel) -> Path:
    if path.is_dir():
        candidate = path / f"{level.name}.jsonl"
        if not candidate.exists():
            raise DataError(f"no annotations for level {level.name} in {path}")
        return candidate
    return path


def _level_sets(dataset, annotations: Sequence[Annotation], level, video_ids):
    by_video: Dict[str, List[Annotation]] = {v: [] for v in video_ids}
    for a in annotations:
        if a.video_id in by_video:
            by_video[a.video_id].append(a)
    return [build_video_constraints(dataset, v, level, by_video[v]) for v in video_ids]


# -- pipeline steps -----------------------------------------------------------

def _step_constraints(args, dataset, train_ids, outputs):
    path = _annotation_file(args.annotations, args.level)
    annots = dataio.load_annotations(path)
    sets = _level_sets(dataset, annots, args.level, train_ids)
    out = args.out_dir / "constraints.jsonl"
    dataio.save_constraints(out, sets)
    outputs["constraints"] = str(out)
    return sets, path


def _step_solve(args, features, sets, cfg, outputs):
    from .pipeline import relocate
    from .plotting import plot_trace
    res = train(features, sets, cfg)
    rows, _ = relocate(sets)
    files = {"Y": "Y.npy", "rows": "Y_rows.npy", "W": "W.npy", "trace": "trace.csv",
             "trace_plot": "trace.png"}
    dataio.save_array(args.out_dir / files["Y"], res.Y)
    dataio.save_array(args.out_dir / files["rows"], rows)
    dataio.save_array(args.out_dir / files["W"], res.classifier.W)
    dataio.save_text(args.out_dir / files["trace"], res.trace.to_csv())
    plot_trace(res.trace, args.out_dir / files["trace_plot"], res.h0)
    outputs.update({k: str(args.out_dir / v) for k, v in files.items()})
    return res


def _solver_summary(res) -> dict:
    return {"h0": res.h0, "h": res.h, "final_gap": res.final_gap,
            "relative_gap": res.final_gap / res.h0 if res.h0 > 0 else 0.0,
            "iterations": res.iterations, "converged": res.converged}


def _step_infer(args, dataset, features, classifier, calib_ids, test_ids, outputs,
                iou=0.5, mode="full"):
    thresholds = calibrate_thresholds(dataset, features, classifier, calib_ids,
                                      iou_threshold=iou, mode=mode)
    dets = detect(dataset, features, classifier, thresholds, test_ids)
    det_path = args.out_dir / "detections.jsonl"
    thr_path = args.out_dir / "thresholds.json"
    dataio.save_detections(det_path, dets)
    dataio.save_report(thr_path, {"calibration_videos": list(calib_ids), **thresholds.to_dict()})
    outputs.update({"detections": str(det_path), "thresholds": str(thr_path)})
    return thresholds, dets


def _step_eval(args, dataset, dets, test_ids, outputs, extra: dict):
    from .plotting import plot_pr_curves
    keep = set(test_ids)
    gt = [i for i in dataset.instances if i.video_id in keep]
    report = video_map(dets, gt, args.iou, args.mode, dataset.num_actions)
    report.update(extra)
    path = args.out_dir / "report.json"
    dataio.save_report(path, report)
    outputs["report"] = str(path)
    classes = range(1, dataset.num_classes)
    for thr in args.iou:
        res = match(dets, gt, thr, args.mode, classes=list(classes))
        png = args.out_dir / f"pr_iou{thr:g}.png"
        plot_pr_curves(res, classes, png, title=f"ST-IoU {thr:g} ({args.mode})")
        outputs[f"pr_iou{thr:g}"] = str(png)
    return report


# -- commands -----------------------------------------------------------------

def cmd_synth(args, manifest):
    names = ("num_videos", "num_test_videos", "num_actions", "dim", "tracks_per_video",
             "frames_per_video", "instances_per_video", "shots_per_video", "max_keyframes",
             "separation", "noise", "box_jitter", "distractor_fraction")
    try:
        cfg = SynthConfig(seed=args.seed, **{n: getattr(args, n) for n in names})
    except ValueError as exc:
        raise UsageError(str(exc))
    result = generate(cfg)
    out = args.out_dir
    dataio.save_features(out / "features.bin", result.features)
    dataio.save_tracks(out / "tracks.jsonl", result.dataset)
    (out / "annotations").mkdir(exist_ok=True)
    for name in SYNTH_LEVELS:
        level = SupervisionLevel.parse(name)
        if level.tag == "temporal-kbb" and level.k > cfg.max_keyframes:
            continue
        dataio.save_annotations(out / "annotations" / f"{level.name}.jsonl",
                                result.annotations(level))
    manifest.config = cfg.to_dict()
    manifest.outputs = {"features": str(out / "features.bin"),
                        "tracks": str(out / "tracks.jsonl"),
                        "annotations": str(out / "annotations")}
    print(f"synth: {len(result.dataset.videos)} videos, {result.dataset.M} tracklets, "
          f"{len(result.dataset.instances)} instances -> {out}")


def cmd_build_constraints(args, manifest):
    dataset = _dataset(args)
    train_ids, _, _ = _split(args, dataset)
    sets, ann_path = _step_constraints(args, dataset, train_ids, manifest.outputs)
    manifest.inputs = {"tracks": str(args.tracks), "annotations": str(ann_path)}
    manifest.config = {"level": args.level.name, "calibrate_frac": args.calibrate_frac,
                       "box_scale": args.box_scale}
    n_bags = sum(len(s.bags) for s in sets)
    print(f"build-constraints: {len(sets)} videos, {n_bags} bags, level {args.level.name}")


def cmd_solve(args, manifest):
    dataset = _dataset(args)
    features = _features(args, dataset)
    cfg = _config(args)
    if args.constraints is not None:
        sets = dataio.load_constraints(args.constraints)
        manifest.inputs["constraints"] = str(args.constraints)
    else:
        _require(args, "annotations", "level")
        train_ids, _, _ = _split(args, dataset)
        sets, ann_path = _step_constraints(args, dataset, train_ids, manifest.outputs)
        manifest.inputs["annotations"] = str(ann_path)
    if not sets:
        raise DataError("no constraint sets to solve")
    res = _step_solve(args, features, sets, cfg, manifest.outputs)
    summary = _solver_summary(res)
    dataio.save_report(args.out_dir / "solve.json", {"config": cfg.to_dict(), **summary})
    manifest.outputs["solve"] = str(args.out_dir / "solve.json")
    manifest.inputs.update({"features": str(args.features), "tracks": str(args.tracks)})
    manifest.config = cfg.to_dict()
    print(f"solve: h={res.h:.6g} gap={res.final_gap:.3g} ({summary['relative_gap']:.2e} of h0) "
          f"iterations={res.iterations} converged={res.converged}")


def cmd_infer(args, manifest):
    dataset = _dataset(args)
    features = _features(args, dataset)
    w_path = args.classifier or args.out_dir / "W.npy"
    W = dataio.load_array(w_path)
    if W.ndim != 2 or W.shape != (features.shape[1], dataset.num_classes):
        raise DataError(f"{w_path}: expected shape {(features.shape[1], dataset.num_classes)}, "
                        f"got {W.shape}")
    _, calib_ids, test_ids = _split(args, dataset)
    _, dets = _step_infer(args, dataset, features, Classifier(W, float("nan")), calib_ids,
                          test_ids, manifest.outputs, args.iou, args.mode)
    manifest.inputs = {"features": str(args.features), "tracks": str(args.tracks),
                       "classifier": str(w_path)}
    manifest.config = {"calibrate_frac": args.calibrate_frac, "iou": args.iou,
                       "mode": args.mode, "box_scale": args.box_scale}
    print(f"infer: {len(dets)} detections on {len(test_ids)} test videos")


def cmd_eval(args, manifest):
    dataset = _dataset(args)
    det_path = args.detections or args.out_dir / "detections.jsonl"
    dets = dataio.load_detections(det_path)
    test_ids = dataset.split_ids("test")
    if not test_ids:
        raise DataError("the tracks file has no videos in the test split")
    report = _step_eval(args, dataset, dets, test_ids, manifest.outputs,
                        {"seed": args.seed, "config": {"box_scale": args.box_scale}})
    manifest.inputs = {"tracks": str(args.tracks), "detections": str(det_path)}
    manifest.config = {"iou": args.iou, "mode": args.mode, "box_scale": args.box_scale}
    _print_map(report)


def cmd_e2e(args, manifest):
    dataset = _dataset(args)
    features = _features(args, dataset)
    cfg = _config(args)
    train_ids, calib_ids, test_ids = _split(args, dataset)
    sets, ann_path = _step_constraints(args, dataset, train_ids, manifest.outputs)
    res = _step_solve(args, features, sets, cfg, manifest.outputs)
    _, dets = _step_infer(args, dataset, features, res.classifier, calib_ids, test_ids,
                          manifest.outputs)
    config = {**cfg.to_dict(), "level": args.level.name, "box_scale": args.box_scale}
    report = _step_eval(args, dataset, dets, test_ids, manifest.outputs,
                        {"seed": args.seed, "config": config, "solver": _solver_summary(res)})
    manifest.inputs = {"features": str(args.features), "tracks": str(args.tracks),
                       "annotations": str(ann_path)}
    manifest.config = config
    _print_map(report)


def cmd_mix_curve(args, manifest):
    from .plotting import plot_mix_curve
    dataset = _dataset(args)
    features = _features(args, dataset)
    cfg = _config(args)
    try:
        weak, strong = (SupervisionLevel.parse(t) for t in args.levels.split(","))
    except ValueError:
        raise UsageError("--levels must be two supervision levels: weak,strong")
    if any(not 0 <= f <= 1 for f in args.fractions):
        raise UsageError("--fractions must lie in [0, 1]")
    if args.annotations.is_dir():
        paths = [_annotation_file(args.annotations, weak), _annotation_file(args.annotations, strong)]
    else:
        paths = [Path(p) for p in str(args.annotations).split(",")]
        if len(paths) != 2:
            raise UsageError("--annotations must be a directory or WEAK.jsonl,STRONG.jsonl")
    loaded = {weak.name: dataio.load_annotations(paths[0]),
              strong.name: dataio.load_annotations(paths[1])}

    def source(level, video_ids):
        keep = set(video_ids)
        return [a for a in loaded[level.name] if a.video_id in keep]

    _split(args, dataset)
    rows = []
    for f in args.fractions:
        res = run_mixed(dataset, features, source, weak, strong, f, cfg)
        row = {"fraction": float(f)}
        row.update({f"map@{k}": v for k, v in res.report["map"].items()})
        rows.append(row)
        rep = dict(res.report, seed=args.seed, fraction=float(f),
                   solver=_solver_summary(res.solve))
        path = args.out_dir / f"mix_{f:g}.json"
        dataio.save_report(path, rep)
        manifest.outputs[f"report_{f:g}"] = str(path)
        print(f"mix-curve: fraction {f:g} " + " ".join(
            f"{k}={v:.4f}" for k, v in row.items() if k != "fraction"), flush=True)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    dataio.save_text(args.out_dir / "mix_curve.csv", buf.getvalue())
    plot_mix_curve(rows, args.out_dir / "mix_curve.png", weak.name, strong.name)
    manifest.outputs.update({"curve": str(args.out_dir / "mix_curve.csv"),
                             "plot": str(args.out_dir / "mix_curve.png")})
    manifest.inputs = {"features": str(args.features), "tracks": str(args.tracks),
                       "annotations": ",".join(str(p) for p in paths)}
    manifest.config = {**cfg.to_dict(), "levels": [weak.name, strong.name],
                       "fractions": list(args.fractions), "box_scale": args.box_scale}


def _print_map(report: dict) -> None:
    print("map: " + " ".join(f"mAP@{k}={v:.4f}" for k, v in report["map"].items())
          + f" (mode {report['mode']})")


COMMANDS = {"synth": cmd_synth, "build-constraints": cmd_build_constraints, "solve": cmd_solve,
            "infer": cmd_infer, "eval": cmd_eval, "e2e": cmd_e2e, "mix-curve": cmd_mix_curve}


def run_command(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "iterations", 1) < 1:
            raise UsageError("--iterations must be >= 1")
        if getattr(args, "lam", 1.0) <= 0:
            raise UsageError("--lambda must be positive")
        args.out_dir.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest(args.command, {}, args.seed)
        t0 = time.perf_counter()
        COMMANDS[args.command](args, manifest)
        manifest.wall_clock_seconds = time.perf_counter() - t0
        manifest.write(args.out_dir / f"manifest_{args.command}.json")
        return EXIT_OK
    except UsageError as exc:
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except NumericalError as exc:
        print(f"{parser.prog}: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ValueError, OSError) as exc:
        print(f"{parser.prog}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
