"""Command line entry points: synth, train, predict, eval.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import data
from .evaluation import (
    ClassificationResult,
    DetectionResult,
    classification_map,
    detection_map,
    format_grid,
    grid_search,
    hit_at_3,
)
from .nn import CheckpointError, ShapeError, load_checkpoint, model_forward, save_checkpoint
from .postprocess import ClipProbSequence, PostprocessConfig, Segment, predict_video
from .training import TrainConfig, TrainingDiverged, format_loss_log, train

log = logging.getLogger("actloc")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS = {
    "num_layers": 1,
    "cells": 512,
    "dropout": 0.5,
    "rho": 0.3,
    "lr": 1e-5,
    "epochs": 100,
    "batch_size": 256,
    "seq_len": 20,
    "k": 5,
    "gamma": 0.2,
    "iou": 0.5,
    "input_dim": 4096,
    "seed": 0,
    "threads": 1,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}")


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=DEFAULTS["seed"], help="random seed (default: %(default)s)")
    common.add_argument("--threads", type=int, default=DEFAULTS["threads"],
                        help="parallel per-video workers (default: %(default)s, reproducible ordering)")
    common.add_argument("--output-dir", type=Path, default=Path("."), help="where outputs go (default: cwd)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="actloc", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic feature dataset")
    p.add_argument("--num-classes", type=int, default=10, help="activity classes K (default: %(default)s)")
    p.add_argument("--feature-dim", type=int, default=32, help="feature dimension D (default: %(default)s)")
    p.add_argument("--train-videos", type=int, default=200)
    p.add_argument("--validation-videos", type=int, default=50)
    p.add_argument("--testing-videos", type=int, default=0)
    p.add_argument("--min-clips", type=int, default=20)
    p.add_argument("--max-clips", type=int, default=60)
    p.add_argument("--min-segments", type=int, default=1)
    p.add_argument("--max-segments", type=int, default=2)
    p.add_argument("--separation", type=float, default=1.0, help="centroid norm (default: %(default)s)")
    p.add_argument("--noise", type=float, default=0.25, help="per-dim gaussian sigma (default: %(default)s)")
    p.add_argument("--fps", type=float, default=30.0)

    p = sub.add_parser("train", parents=[common], help="train the LSTM on a manifest's train subset")
    p.add_argument("manifest", type=Path)
    p.add_argument("--labels", type=Path, help="class-name file; sets K")
    p.add_argument("--num-classes", type=int, help="activity classes K (required without --labels)")
    p.add_argument("--subset", default="train", choices=data.SUBSETS)
    p.add_argument("--input-dim", type=int, default=DEFAULTS["input_dim"],
                   help="feature dimension (default: %(default)s, C3D fc6)")
    p.add_argument("--num-layers", type=int, default=DEFAULTS["num_layers"],
                   help="stacked LSTM layers N (default: %(default)s, best 1 x 512-LSTM configuration)")
    p.add_argument("--cells", type=int, default=DEFAULTS["cells"],
                   help="cells per LSTM layer c (default: %(default)s, best 1 x 512-LSTM configuration)")
    p.add_argument("--dropout", type=float, default=DEFAULTS["dropout"],
                   help="dropout probability before and after the LSTM stack (default: %(default)s)")
    p.add_argument("--rho", type=float, default=DEFAULTS["rho"],
                   help="loss weight of background clips (default: %(default)s)")
    p.add_argument("--lr", type=float, default=DEFAULTS["lr"], help="RMSprop learning rate (default: %(default)s)")
    p.add_argument("--epochs", type=int, default=DEFAULTS["epochs"], help="(default: %(default)s)")
    p.add_argument("--batch-size", type=int, default=DEFAULTS["batch_size"],
                   help="windows per minibatch (default: %(default)s)")
    p.add_argument("--seq-len", type=int, default=DEFAULTS["seq_len"],
                   help="16-frame clips per training window (default: %(default)s)")

    p = sub.add_parser("predict", parents=[common], help="run a checkpoint over a manifest")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("manifest", type=Path)
    p.add_argument("--labels", type=Path, help="class-name file; must agree with the checkpoint's K")
    p.add_argument("--subset", choices=data.SUBSETS, help="only this subset (default: every video)")
    _add_postprocess_flags(p)

    p = sub.add_parser("eval", parents=[common], help="score a prediction file against a manifest")
    p.add_argument("predictions", type=Path)
    p.add_argument("manifest", type=Path)
    p.add_argument("--subset", default="validation", choices=data.SUBSETS)
    p.add_argument("--iou", type=float, default=DEFAULTS["iou"],
                   help="detection IoU threshold, strict (default: %(default)s)")
    p.add_argument("--grid", nargs=2, metavar=("K_LIST", "GAMMA_LIST"),
                   help="comma-separated k and gamma values for a post-processing sweep")
    return parser


def _add_postprocess_flags(p):
    p.add_argument("-k", "--k", type=int, default=DEFAULTS["k"],
                   help="smoothing half-window in clips (default: %(default)s, best k/gamma cell)")
    p.add_argument("--gamma", type=float, default=DEFAULTS["gamma"],
                   help="activity threshold (default: %(default)s, best k/gamma cell)")


def _load_manifest(path, subset=None):
    records = data.read_manifest(path)
    return data.split(records, subset) if subset else records


def cmd_synth(args) -> int:
    spec = data.SyntheticSpec(
        num_classes=args.num_classes,
        feature_dim=args.feature_dim,
        videos_per_subset={"train": args.train_videos, "validation": args.validation_videos,
                           "testing": args.testing_videos},
        clip_count_range=(args.min_clips, args.max_clips),
        segments_per_video_range=(args.min_segments, args.max_segments),
        class_separation=args.separation,
        noise_sigma=args.noise,
        seed=args.seed,
        fps=args.fps,
    )
    ds = data.generate_synthetic(spec, args.output_dir)
    print(ds.manifest_path)
    return EXIT_OK


def _num_classes(args):
    if args.labels is not None:
        k = len(data.read_labels(args.labels))
        if args.num_classes is not None and args.num_classes != k:
            raise UsageError(f"--num-classes {args.num_classes} disagrees with {k} labels in {args.labels}")
        return k
    if args.num_classes is None:
        raise UsageError("train needs --labels or --num-classes")
    return args.num_classes


def cmd_train(args) -> int:
    k = _num_classes(args)
    records = _load_manifest(args.manifest, args.subset)
    if not records:
        raise data.ManifestError(f"{args.manifest}: no videos in subset {args.subset!r}")
    dataset = data.load_labeled(records, args.manifest.parent, k, expected_dim=args.input_dim)
    config = TrainConfig(
        num_layers=args.num_layers, cells=args.cells, num_classes=k, input_dim=args.input_dim,
        dropout=args.dropout, rho=args.rho, lr=args.lr, epochs=args.epochs,
        batch_size=args.batch_size, seq_len=args.seq_len, seed=args.seed,
    )
    args.output_dir.mkdir(parents=True, exist_ok=True)
    log_path = args.output_dir / "train_log.tsv"

    def progress(epoch, loss):
        print(f"{epoch}\t{loss:.8f}", flush=True)

    result = train(dataset, config, progress=progress)
    log_path.write_text(format_loss_log(result.epoch_losses))
    ckpt = args.output_dir / "model.sac"
    save_checkpoint(result.params, ckpt)
    print(ckpt)
    return EXIT_OK


def cmd_predict(args) -> int:
    params = load_checkpoint(args.checkpoint)
    if args.labels is not None:
        k = len(data.read_labels(args.labels))
        if k != params.num_classes:
            raise CheckpointError(f"checkpoint has K={params.num_classes}, {args.labels} lists {k} classes")
    records = _load_manifest(args.manifest, args.subset)
    cfg = PostprocessConfig(args.k, args.gamma)
    out_dir = args.output_dir
    (out_dir / "probs").mkdir(parents=True, exist_ok=True)
    base = args.manifest.parent

    def run(rec):
        feats = data.read_features(data.resolve(rec, base), rec.video_id, params.input_dim)
        probs, _ = model_forward(params, feats.clips, mode="eval")
        return rec, probs

    results = {}
    with ThreadPoolExecutor(max_workers=max(1, args.threads)) as pool:
        for rec, probs in pool.map(run, records):
            rel = f"probs/{rec.video_id}.c3df"
            data.write_features(probs, out_dir / rel)
            seq = ClipProbSequence(probs, rec.clip_duration_s)
            entry = predict_video(seq, cfg).to_json()
            entry["probs_path"] = rel
            entry["clip_duration_s"] = rec.clip_duration_s
            results[rec.video_id] = entry
    doc = {"version": "actloc-1", "postprocess": {"k": cfg.k, "gamma": cfg.gamma}, "results": results}
    pred_path = out_dir / "predictions.json"
    pred_path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    print(pred_path)
    return EXIT_OK


def _video_label(rec):
    return rec.annotations[0].label if rec.annotations else None


def evaluate_predictions(doc, records, iou, base_dir=None, grid=None):
    """Score prediction document ``doc`` over ``records``.

    Returns ``(report, grid_result)``; ``grid_result`` is None without ``grid``.
    """
    results = doc["results"]
    missing = [r.video_id for r in records if r.video_id not in results]
    if missing:
        raise data.ManifestError(
            f"{len(missing)} videos missing from predictions: {', '.join(missing)}"
        )
    cls_results, det_results = [], []
    for rec in records:
        entry = results[rec.video_id]
        gt_label = _video_label(rec)
        if gt_label is not None:
            ranked = sorted(((int(c["label"]), float(c["score"])) for c in entry["classification"]),
                            key=lambda pair: (-pair[1], pair[0]))
            cls_results.append(ClassificationResult(rec.video_id, ranked, gt_label))
        preds = [Segment.from_json(d) for d in entry["detection"]]
        det_results.append(DetectionResult(rec.video_id, preds, rec.annotations))
    report = {
        "classification": {"map": classification_map(cls_results), "hit_at_3": hit_at_3(cls_results)},
        "detection": {"map": detection_map(det_results, iou), "iou_threshold": iou},
        "grid": [],
    }
    result = None
    if grid is not None:
        k_values, gamma_values = grid
        probs = {}
        for rec in records:
            entry = results[rec.video_id]
            if "probs_path" not in entry:
                raise data.ManifestError(f"{rec.video_id}: prediction has no probs_path for --grid")
            seq = data.read_features(Path(base_dir) / entry["probs_path"], rec.video_id)
            probs[rec.video_id] = ClipProbSequence(seq.clips, entry["clip_duration_s"])
        gt = {rec.video_id: rec.annotations for rec in records}
        result = grid_search(probs, gt, k_values, gamma_values, iou)
        report["grid"] = [[k, g, m] for k, g, m in result.rows]
        report["grid_best"] = list(result.best)
    return report, result


def cmd_eval(args) -> int:
    doc = json.loads(args.predictions.read_text())
    records = _load_manifest(args.manifest, args.subset)
    grid = None
    if args.grid:
        grid = (_int_list(args.grid[0]), _float_list(args.grid[1]))
    report, grid_obj = evaluate_predictions(doc, records, args.iou, args.predictions.parent, grid)

    print(f"videos evaluated      {len(records)}")
    print(f"classification mAP    {report['classification']['map']:.5f}")
    print(f"classification Hit@3  {report['classification']['hit_at_3']:.5f}")
    print(f"detection mAP@{args.iou:<6g}  {report['detection']['map']:.5f}")
    if grid_obj is not None:
        print()
        print(format_grid(grid_obj, *grid))
        k, g, m = grid_obj.best
        print(f"best: k={k} gamma={g:g} mAP={m:.5f}")
    args.output_dir.mkdir(parents=True, exist_ok=True)
    (args.output_dir / "metrics.json").write_text(json.dumps(report, indent=1))
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "predict": cmd_predict, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"actloc {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"actloc {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError, ShapeError, CheckpointError, data.ManifestError,
            data.FeatureFormatError) as exc:
        print(f"actloc {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
