"""Command-line entry point: ``deflicker {synth,train,infer,eval,report}``.

Exit codes: 0 success, 2 usage or validation error, 3 I/O error,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from .errors import (DecodeError, DeflickerError, DimensionMismatchError, FlowFormatError,
                     MissingFlowError, NoFramesError, NonFiniteLossError, SpecError)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
CSV_COLUMNS = ("video_id", "task", "warping_error", "perceptual_distance", "frames_counted",
               "skipped_pairs", "processed_warping_error")

log = logging.getLogger("deflicker")


class UsageError(DeflickerError):
    pass


def _version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def run_header(args, seed=None):
    """Reproducibility header: config hash, seed, library version, timestamp."""
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return {
        "command": args.command,
        "config": cfg,
        "config_hash": hashlib.sha256(blob).hexdigest(),
        "seed": seed,
        "version": _version(),
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }


def _write_json(path, data):
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True, default=str) + "\n")


def _set_threads():
    threads = os.environ.get("DEFLICKER_THREADS")
    if threads:
        import torch

        torch.set_num_threads(max(1, int(threads)))


# -- synth --------------------------------------------------------------------


def cmd_synth(args):
    from .synth import b1_scene, export, generate, specs_from_dict, FlickerSpec

    if args.spec:
        try:
            data = json.loads(Path(args.spec).read_text())
        except json.JSONDecodeError as exc:
            raise SpecError(f"{args.spec}: {exc}") from exc
        scene, flicker = specs_from_dict(data)
    else:
        scene = b1_scene(args.seed)
        flicker = FlickerSpec("global_brightness", 0.15, seed=args.seed)
    video = generate(scene, flicker)
    out = Path(args.out)
    manifest = export(video, out)
    _write_json(out / "run.json", run_header(args, scene.seed))
    print(f"wrote {manifest['frames']} frames and {len(manifest['flow_pairs'])} flows to {out}")
    return EXIT_OK


# -- train --------------------------------------------------------------------


def _training_video(root):
    from .flow import FloDirectoryStore
    from .trainer import TrainingVideo
    from .video import VideoTriplet, load_frame_folder

    root = Path(root)
    triplet = VideoTriplet(load_frame_folder(root / "raw"), load_frame_folder(root / "processed"))
    return TrainingVideo(triplet, FloDirectoryStore(root / "flows"), name=root.name)


def cmd_train(args):
    from .features import FeatureExtractor
    from .network import NetConfig
    from .trainer import TrainConfig, fit, load_train_state

    if args.config:
        config = TrainConfig.from_file(args.config)
    else:
        config = TrainConfig()
    overrides = {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.batches_per_epoch is not None:
        overrides["batches_per_epoch"] = args.batches_per_epoch
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.learning_rate is not None:
        overrides["learning_rate"] = args.learning_rate
    if args.base_channels is not None:
        overrides["net"] = NetConfig(base_channels=args.base_channels)
    if overrides:
        config = TrainConfig.from_dict({**config.to_dict(), **{k: v for k, v in overrides.items()}})
    videos = [_training_video(root) for root in args.data]
    if args.feature_weights:
        extractor = FeatureExtractor.from_weight_file(args.feature_weights)
    else:
        extractor = FeatureExtractor.fixed_random(args.feature_seed, args.feature_width)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state = None
    if args.resume:
        state, _ = load_train_state(args.resume, config)
    _write_json(out / "run.json", {**run_header(args, config.seed), "train_config": config.to_dict(),
                                   "feature_extractor": extractor.provenance})
    state, history = fit(videos, config, extractor, state=state, checkpoint_dir=out / "checkpoints",
                         log_path=out / "metrics.jsonl", max_steps=args.max_steps)
    final = history[-1].total if history else float("nan")
    print(f"trained to step {state.step}; last total loss {final:.6g}")
    return EXIT_OK


# -- infer --------------------------------------------------------------------


def cmd_infer(args):
    from .network import load_checkpoint
    from .trainer import infer
    from .video import VideoTriplet, load_frame_folder, resize_keep_aspect, save_frame_folder

    net, step, _ = load_checkpoint(args.checkpoint)
    raw = load_frame_folder(args.raw, args.pattern)
    processed = load_frame_folder(args.processed, args.pattern)
    if len(raw) != len(processed):
        raise DimensionMismatchError(f"raw has {len(raw)} frames, processed has {len(processed)}")
    if args.height:
        raw, processed = resize_keep_aspect(raw, args.height), resize_keep_aspect(processed, args.height)
    out = infer(net, VideoTriplet(raw, processed))
    save_frame_folder(out, args.out)
    _write_json(Path(args.out) / "run.json", {**run_header(args), "checkpoint_step": step})
    print(f"wrote {len(out)} frames to {args.out}")
    return EXIT_OK


# -- eval ---------------------------------------------------------------------


def _embedder(args):
    from .features import FeatureExtractor
    from .metrics import FeatureEmbedder

    if args.embedder_weights:
        return FeatureEmbedder(FeatureExtractor.from_weight_file(args.embedder_weights))
    return FeatureEmbedder(FeatureExtractor.fixed_random(args.embedder_seed, args.embedder_width))


def _eval_jobs(args):
    jobs = []
    for tree in args.tree or []:
        tree = Path(tree)
        task = "default"
        manifest = tree / "manifest.json"
        if manifest.is_file():
            task = json.loads(manifest.read_text()).get("task", task)
        jobs.append((tree.name, task, tree / "raw", tree / "processed", tree / "output", tree / "flows"))
    if args.raw or args.processed or args.output:
        if not (args.raw and args.processed and args.output and args.flows):
            raise UsageError("--raw, --processed, --output and --flows are required together")
        jobs.append((args.video_id, args.task, Path(args.raw), Path(args.processed), Path(args.output),
                     Path(args.flows)))
    if not jobs:
        raise UsageError("nothing to evaluate; pass --tree or --raw/--processed/--output/--flows")
    return jobs


def evaluate_tree(raw_dir, processed_dir, output_dir, flow_dir, embedder, flow_source="raw", height=None,
                  pattern="*.png"):
    """Score one video tree; returns ``(VideoScore, processed_warping_error)``."""
    from .flow import FloDirectoryStore
    from .metrics import VideoScore, perceptual_distance, warping_error_details
    from .video import load_frame_folder, resize_keep_aspect

    for d in (raw_dir, processed_dir, output_dir, flow_dir):
        if not Path(d).is_dir():
            raise NoFramesError(f"missing directory {d}")
    raw = load_frame_folder(raw_dir, pattern)
    processed = load_frame_folder(processed_dir, pattern)
    output = load_frame_folder(output_dir, pattern)
    if not (len(raw) == len(processed) == len(output)):
        raise DimensionMismatchError(
            f"tree lengths differ: raw {len(raw)}, processed {len(processed)}, output {len(output)}"
        )
    if height:
        raw, processed, output = (resize_keep_aspect(s, height) for s in (raw, processed, output))
    flows = FloDirectoryStore(flow_dir)
    reference = raw if flow_source == "raw" else output
    we = warping_error_details(output, flows, reference)
    pd = perceptual_distance(processed, output, embedder)
    score = VideoScore(we.value, pd, we.frames_counted, we.skipped_pairs)
    base_ref = raw if flow_source == "raw" else processed
    base = warping_error_details(processed, flows, base_ref)
    return score, base.value


def cmd_eval(args):
    jobs = _eval_jobs(args)
    embedder = _embedder(args)
    rows = []
    for video_id, task, raw, processed, output, flows in jobs:
        score, base = evaluate_tree(raw, processed, output, flows, embedder, args.flow_source, args.height)
        rows.append({
            "video_id": video_id, "task": task,
            "warping_error": repr(score.warping_error),
            "perceptual_distance": repr(score.perceptual_distance),
            "frames_counted": score.frames_counted, "skipped_pairs": score.skipped_pairs,
            "processed_warping_error": repr(base),
        })
    csv_path = Path(args.csv)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    summary = {"header": {**run_header(args), "resolution_height": args.height or "native"},
               **summarize_rows(rows)}
    summary_path = Path(args.summary) if args.summary else csv_path.with_suffix(".json")
    _write_json(summary_path, summary)
    for r in rows:
        print(f"{r['video_id']}\t{r['task']}\tomega={float(r['warping_error']):.6g}\t"
              f"D={float(r['perceptual_distance']):.6g}")
    return EXIT_OK


def summarize_rows(rows):
    """Per-task means and an overall ``Average`` row."""
    tasks = {}
    for r in rows:
        tasks.setdefault(r["task"], []).append(r)

    def mean(items, key):
        vals = [float(i[key]) for i in items if i.get(key) not in (None, "")]
        return float(np.mean(vals)) if vals else float("nan")

    keys = ("warping_error", "perceptual_distance", "processed_warping_error")
    per_task = {t: {**{k: mean(items, k) for k in keys}, "videos": len(items)} for t, items in sorted(tasks.items())}
    average = {k: float(np.mean([v[k] for v in per_task.values()])) for k in keys}
    return {"per_task": per_task, "Average": average}


# -- report -------------------------------------------------------------------


def _read_metrics_csv(path):
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"warping_error", "perceptual_distance"} <= set(reader.fieldnames):
            raise UsageError(f"{path}: not a metrics CSV (missing columns)")
        rows = list(reader)
    if not rows:
        raise UsageError(f"{path}: no rows")
    for i, r in enumerate(rows):
        try:
            float(r["warping_error"])
            float(r["perceptual_distance"])
        except (TypeError, ValueError) as exc:
            raise UsageError(f"{path}: row {i + 1} is malformed") from exc
        r.setdefault("task", "default")
        if not r.get("task"):
            r["task"] = "default"
    return rows


def markdown_table(models: dict):
    """Rows per task (plus ``Average``), one warping-error column per model."""
    names = list(models)
    tasks = sorted({r["task"] for rows in models.values() for r in rows})
    per_model = {m: summarize_rows(rows) for m, rows in models.items()}
    lines = ["| Task | " + " | ".join(names) + " |", "|---|" + "---|" * len(names)]
    for task in tasks:
        cells = []
        for m in names:
            v = per_model[m]["per_task"].get(task)
            cells.append(f"{v['warping_error']:.4f}" if v else "-")
        lines.append(f"| {task} | " + " | ".join(cells) + " |")
    avg = [f"{per_model[m]['Average']['warping_error']:.4f}" for m in names]
    lines.append("| Average | " + " | ".join(avg) + " |")
    return "\n".join(lines) + "\n", per_model


def cmd_report(args):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = args.label or []
    if labels and len(labels) != len(args.csv):
        raise UsageError("--label must be given once per CSV")
    models = {}
    for i, path in enumerate(args.csv):
        name = labels[i] if labels else Path(path).stem
        models[name] = _read_metrics_csv(path)
    table, per_model = markdown_table(models)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.md").write_text(table)
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    for name, summary in per_model.items():
        x = summary["Average"]["warping_error"]
        y = summary["Average"]["perceptual_distance"]
        ax.scatter([x], [y])
        ax.annotate(name, (x, y), textcoords="offset points", xytext=(4, 4))
    ax.set_xlabel("warping error")
    ax.set_ylabel("perceptual distance")
    fig.tight_layout()
    fig.savefig(out / "tradeoff.png", dpi=120, metadata={"Software": None})
    plt.close(fig)
    _write_json(out / "report.json", {"header": run_header(args), "models": per_model})
    sys.stdout.write(table)
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="deflicker", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic video with ground-truth flow")
    p.add_argument("--spec", help="JSON file with 'scene' and 'flicker' objects (default: benchmark B1)")
    p.add_argument("--seed", type=int, default=1234, help="seed for the default B1 spec")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the consistency network")
    p.add_argument("--data", nargs="+", required=True, help="video trees with raw/, processed/, flows/")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON or TOML training config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batches-per-epoch", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--base-channels", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--feature-weights", help=".npz VGG19 weights (default: fixed random trunk)")
    p.add_argument("--feature-seed", type=int, default=0)
    p.add_argument("--feature-width", type=float, default=0.25)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="post-process a video (no optical flow needed)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--raw", required=True)
    p.add_argument("--processed", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pattern", default="*.png")
    p.add_argument("--height", type=int, help="resize to this height, keeping the aspect ratio")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="warping error and perceptual distance")
    p.add_argument("--tree", action="append", help="video tree with raw/, processed/, output/, flows/")
    p.add_argument("--raw")
    p.add_argument("--processed")
    p.add_argument("--output")
    p.add_argument("--flows")
    p.add_argument("--video-id", default="video")
    p.add_argument("--task", default="default")
    p.add_argument("--flow-source", choices=("raw", "self"), default="raw",
                   help="sequence the flow files were computed on")
    p.add_argument("--height", type=int)
    p.add_argument("--csv", required=True)
    p.add_argument("--summary", help="JSON summary path (default: next to the CSV)")
    p.add_argument("--embedder-weights")
    p.add_argument("--embedder-seed", type=int, default=1)
    p.add_argument("--embedder-width", type=float, default=0.25)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="trade-off plot and per-task summary table")
    p.add_argument("--csv", nargs="+", required=True)
    p.add_argument("--label", action="append")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _set_threads()
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DecodeError, FlowFormatError, MissingFlowError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, SpecError, DimensionMismatchError, NoFramesError, DeflickerError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
