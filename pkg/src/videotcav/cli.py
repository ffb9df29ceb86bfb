"""Command-line entry point: ``videotcav synth|train|concepts|run|gradcam|report``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import synthetic
from .concepts import DetectionFormatError, load_detection_file, mine_concepts, write_concept_manifest
from .core_types import (
    ConceptKind,
    ContainerError,
    VideoClip,
    load_clip,
    read_corpus_manifest,
    save_clip,
    write_tensor_container,
)
from .experiment import ConfigError, ExperimentConfig, ExperimentError, run_experiment
from .models import DivergenceError, UnknownLayerError

log = logging.getLogger("videotcav")


class CommandError(Exception):
    """A user-facing failure: printed without a traceback, exit code 1."""


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.seed is None:
        raise CommandError("seed required")
    out = Path(args.out)
    if args.kind == "dataset":
        spec = synthetic.SyntheticSpec(
            task=args.task,
            T=args.frames,
            H=args.height,
            W=args.width,
            shape_size=args.shape_size,
            speed=args.speed,
            noise_std=args.noise_std,
            n_train=args.n_train,
            n_test=args.n_test,
            seed=args.seed,
        )
        try:
            corpus = synthetic.generate_synthetic_dataset(spec)
        except ValueError as exc:
            raise CommandError(str(exc)) from exc
        path = synthetic.write_dataset(corpus, out)
        print(f"wrote {len(corpus.items)} clips to {path}")
    elif args.kind == "scenes":
        direction = +1 if args.direction == "right" else -1
        try:
            ids = synthetic.write_scenes(out, args.n, args.seed, direction=direction, T=args.frames)
        except ValueError as exc:
            raise CommandError(str(exc)) from exc
        print(f"wrote {len(ids)} scenes to {out / 'videos'} and {out / 'detections'}")
    else:
        try:
            path = synthetic.write_random_pool(out, args.n, args.seed, args.frames, args.height, args.width)
        except ValueError as exc:
            raise CommandError(str(exc)) from exc
        print(f"wrote {args.n} random clips to {path}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _class_names(manifest: Path, given: Optional[str]) -> List[str]:
    if given:
        return [c.strip() for c in given.split(",") if c.strip()]
    meta = manifest.parent / "spec.json"
    if meta.exists():
        return list(json.loads(meta.read_text())["class_names"])
    raise CommandError(f"no spec.json next to {manifest}; pass --classes")


def cmd_train(args) -> int:
    from .models import build_reference_model, save_model, train_reference_model

    if args.seed is None:
        raise CommandError("seed required")
    manifest = Path(args.corpus)
    entries = read_corpus_manifest(manifest)
    items = [(load_clip(manifest.parent / e.path, clip_id=e.clip_id), e.label, e.split) for e in entries]
    if not items:
        raise CommandError(f"{manifest}: empty corpus")
    names = _class_names(manifest, args.classes)
    model = build_reference_model(seed=args.seed, input_shape=items[0][0].shape, class_names=names)
    try:
        model, report = train_reference_model(model, items, epochs=args.epochs, lr=args.lr, seed=args.seed)
    except DivergenceError as exc:
        raise CommandError(f"training diverged: {exc}") from exc
    save_model(model, args.out)
    summary = {"model_id": model.model_id, "test_accuracy": report.test_accuracy, "losses": report.losses}
    (Path(args.out) / "train_report.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(f"model {model.model_id}: test accuracy {report.test_accuracy:.4f}")
    return 0


# ---------------------------------------------------------------------------
# concepts
# ---------------------------------------------------------------------------


def _review_copy(clip: VideoClip, seconds: float) -> VideoClip:
    # static concept: repeating frame 0 changes only the duration
    n = max(1, int(round(seconds * clip.fps)))
    return VideoClip(clip.clip_id, np.repeat(clip.frames[:1], n, axis=0), clip.fps, clip.source)


def cmd_concepts(args) -> int:
    det_dir, video_dir, out = Path(args.detections_dir), Path(args.video_dir), Path(args.out)
    classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    if not classes:
        raise CommandError("--classes needs at least one label")
    detections, videos = {}, {}
    for path in sorted(det_dir.glob("*.json")):
        try:
            det = load_detection_file(path)
        except DetectionFormatError as exc:
            raise CommandError(f"malformed detection file {path}: {exc}") from exc
        video_path = video_dir / f"{det.video_id}.vtc"
        if not video_path.exists():
            raise CommandError(f"{path}: no video {video_path}")
        detections[det.video_id] = det
        videos[det.video_id] = load_clip(video_path, clip_id=det.video_id)
    mined = mine_concepts(
        videos, detections, classes, T=args.frames, out_size=tuple(args.size),
        iou_threshold=args.iou, max_gap=args.max_gap,
    )
    for label in mined.skipped:
        log.warning("class %r: fewer than 2 tracks of length >= %d, no concept written", label, args.frames)
    if not mined.sets:
        log.warning("no concept sets produced for classes %s; writing an empty manifest", classes)
    path = write_concept_manifest(out, mined.sets)
    if args.export_duration is not None:
        for cs in mined.sets:
            if cs.kind != ConceptKind.SPATIAL:
                continue
            for i, clip in enumerate(cs.clips):
                name = cs.name.replace(":", "_")
                save_clip(out / "review" / name / f"{i:04d}.vtc", _review_copy(clip, args.export_duration))
    print(f"wrote {len(mined.sets)} concept sets to {path}")
    return 0


# ---------------------------------------------------------------------------
# run / report
# ---------------------------------------------------------------------------

RUN_FLAGS = {
    # flag dest -> config key
    "model": "model",
    "corpus": "corpus",
    "concepts": "concepts",
    "random_pool": "random_pool",
    "out_dir": "out_dir",
    "cache_dir": "cache_dir",
    "layers": "layers",
    "target_class": "target_class",
    "concept_names": "concept_names",
    "variant": "variant",
    "n_inputs": "n_inputs",
    "input_split": "input_split",
    "n_random_sets": "n_random_sets",
    "random_set_size": "random_set_size",
    "alpha": "alpha",
    "pooling": "pooling",
    "l2": "l2",
    "plot_format": "plot_format",
    "sweep_cav_seeds": "sweep_cav_seeds",
    "seed_data": "seeds.data",
    "seed_cav": "seeds.cav",
    "seed_sampling": "seeds.sampling",
}


def _split_list(text: Optional[str], cast=str):
    return None if text is None else [cast(x.strip()) for x in text.split(",") if x.strip()]


def _run_overrides(args) -> dict:
    out = {}
    for dest, key in RUN_FLAGS.items():
        value = getattr(args, dest)
        if value is None:
            continue
        if dest in ("layers", "concept_names"):
            value = _split_list(value)
        elif dest == "sweep_cav_seeds":
            value = _split_list(value, int)
        elif dest in ExperimentConfig.PATH_KEYS:
            # flags are relative to the working directory, not the config file
            value = str(Path(value).resolve())
        out[key] = value
    return out


def cmd_run(args) -> int:
    overrides = _run_overrides(args)
    if args.config:
        config = ExperimentConfig.load(args.config, overrides)
    else:
        from .experiment import merge_overrides

        config = ExperimentConfig.from_dict(merge_overrides({}, overrides))
    result = run_experiment(config)
    sig = [r for r in result.rows if r["significant"] == "true"]
    print(f"wrote {len(result.rows)} rows ({len(sig)} significant) to {result.out_dir / 'results.csv'}")
    return 0


def cmd_report(args) -> int:
    from .report import read_results_csv, write_report

    rows = read_results_csv(args.results)
    out = Path(args.out) if args.out else Path(args.results).parent / "plots"
    paths = write_report(rows, out, fmt=args.plot_format)
    print(f"wrote {len(paths)} plots to {out}")
    return 0


# ---------------------------------------------------------------------------
# gradcam
# ---------------------------------------------------------------------------


def cmd_gradcam(args) -> int:
    from matplotlib import pyplot as plt

    from .gradcam import compute_gradcam, overlay_heatmap
    from .models import load_model

    if not 0.0 <= args.alpha <= 1.0:
        raise CommandError(f"alpha must lie in [0, 1], got {args.alpha}")
    model = load_model(args.model)
    clip = load_clip(args.clip)
    try:
        k = model.class_index(args.target_class)
    except ValueError as exc:
        raise CommandError(str(exc)) from exc
    volume = compute_gradcam(model, clip, args.layer, k)
    overlay = overlay_heatmap(clip, volume, alpha=args.alpha)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor_container(
        out / "heatmap.vtc",
        {"values": volume.values, "upsampled": volume.upsampled, "class_index": np.array([k], np.float32)},
    )
    for t in range(overlay.num_frames):
        plt.imsave(out / f"frame_{t:03d}.png", overlay.frames[t], metadata={"Software": None})
    print(f"wrote {overlay.num_frames} overlays and heatmap.vtc to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="videotcav", description="Concept-based explanations for video classifiers.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic clips, concept scenes or a random pool")
    p.add_argument("--kind", choices=("dataset", "scenes", "random"), default="dataset")
    p.add_argument("--task", choices=synthetic.TASKS, default="direction_lr")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=512)
    p.add_argument("--n-test", type=int, default=200)
    p.add_argument("--n", type=int, default=30, help="scene or pool size")
    p.add_argument("--direction", choices=("left", "right"), default="right", help="scene motion")
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--shape-size", type=int, default=6)
    p.add_argument("--speed", type=int, default=1)
    p.add_argument("--noise-std", type=float, default=0.03)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the reference model on a corpus manifest")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--classes", help="comma-separated class names (default: from spec.json)")
    p.add_argument("--epochs", type=int, default=6)
    p.add_argument("--lr", type=float, default=3e-3)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("concepts", help="mine concept sets from videos and detection files")
    p.add_argument("--video-dir", required=True)
    p.add_argument("--detections-dir", required=True)
    p.add_argument("--classes", required=True, help="comma-separated detector labels")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--size", type=int, nargs=2, default=(32, 32), metavar=("H", "W"))
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--max-gap", type=int, default=1)
    p.add_argument("--export-duration", type=float, default=None, help="seconds; write long static review copies")
    p.set_defaults(func=cmd_concepts)

    p = sub.add_parser("run", help="run a TCAV experiment from a JSON config")
    p.add_argument("--config")
    for dest in RUN_FLAGS:
        flag = "--" + dest.replace("_", "-")
        if dest in ("n_inputs", "n_random_sets", "random_set_size", "seed_data", "seed_cav", "seed_sampling"):
            p.add_argument(flag, dest=dest, type=int)
        elif dest in ("alpha", "l2"):
            p.add_argument(flag, dest=dest, type=float)
        else:
            p.add_argument(flag, dest=dest)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("gradcam", help="Grad-CAM overlays for one clip")
    p.add_argument("--model", required=True)
    p.add_argument("--clip", required=True)
    p.add_argument("--layer", required=True)
    p.add_argument("--class", dest="target_class", required=True, help="class name or index")
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=0.5)
    p.set_defaults(func=cmd_gradcam)

    p = sub.add_parser("report", help="redraw plots from a results CSV")
    p.add_argument("--results", required=True)
    p.add_argument("--out")
    p.add_argument("--plot-format", choices=("svg", "png"), default="svg")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print("config errors:\n" + "\n".join(f"  - {p}" for p in exc.problems), file=sys.stderr)
    except (CommandError, ExperimentError, UnknownLayerError, ContainerError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
