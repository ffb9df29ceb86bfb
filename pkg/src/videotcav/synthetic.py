"""Desk-scale synthetic video data.

* ``generate_synthetic_dataset``: squares translating left/right (or
  shape-vs-blank) used to train and probe the reference model.
* ``generate_concept_scene``: a wider scene in which an "actor" region holds a
  square moving inside it, plus distractors, together with detector-style
  JSON. Concept clips are mined from these scenes by :mod:`videotcav.concepts`.
* ``generate_random_pool``: heterogeneous clips used as random control sets.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .core_types import (
    CorpusEntry,
    PathLike,
    VideoClip,
    read_tensor_container,
    save_clip,
    write_corpus_manifest,
    write_tensor_container,
)

TASKS = ("direction_lr", "presence")
CLASS_NAMES = {"direction_lr": ("left", "right"), "presence": ("blank", "shape")}


@dataclass(frozen=True)
class SyntheticSpec:
    task: str = "direction_lr"
    T: int = 16
    H: int = 32
    W: int = 32
    shape_size: int = 6
    speed: int = 1
    noise_std: float = 0.03
    n_train: int = 512
    n_test: int = 200
    seed: int = 0

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if min(self.T, self.H, self.W, self.shape_size) < 1:
            raise ValueError("T, H, W and shape_size must be >= 1")
        if self.speed < 0:
            raise ValueError("speed must be nonnegative")
        if self.task == "direction_lr" and self.speed == 0:
            raise ValueError("degenerate motion: direction_lr needs speed > 0")
        if self.shape_size > self.H or self.shape_size + self.speed * (self.T - 1) > self.W:
            raise ValueError(
                f"shape would exit frame: size {self.shape_size} moving {self.speed} px/frame "
                f"for {self.T} frames does not fit in {self.W}x{self.H}"
            )
        if self.n_train < 2 or self.n_test < 2:
            raise ValueError("n_train and n_test must each be >= 2")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SyntheticItem:
    clip: VideoClip
    label: int
    split: str
    # per-frame (x1, y1, x2, y2) of the shape, exclusive upper corner; empty if none
    boxes: np.ndarray


@dataclass
class SyntheticCorpus:
    spec: SyntheticSpec
    class_names: Tuple[str, ...]
    items: List[SyntheticItem] = field(default_factory=list)

    def split(self, name: str) -> List[SyntheticItem]:
        return [it for it in self.items if it.split == name]


def _draw_box(frame: np.ndarray, x: int, y: int, w: int, h: int, color) -> None:
    frame[y : y + h, x : x + w] = color


def _finish(frames: np.ndarray, noise_std: float, rng: np.random.Generator) -> np.ndarray:
    if noise_std > 0:
        frames = frames + rng.normal(0.0, noise_std, frames.shape)
    return np.clip(frames, 0.0, 1.0).astype(np.float32)


def _moving_square(spec: SyntheticSpec, direction: int, rng: np.random.Generator):
    size, travel = spec.shape_size, spec.speed * (spec.T - 1)
    x_start = int(rng.integers(0, spec.W - size - travel + 1))
    y0 = int(rng.integers(0, spec.H - size + 1))
    color = rng.uniform(0.5, 1.0, 3)
    frames = np.zeros((spec.T, spec.H, spec.W, 3))
    boxes = np.zeros((spec.T, 4), dtype=np.int64)
    for t in range(spec.T):
        x = x_start + spec.speed * t if direction > 0 else x_start + travel - spec.speed * t
        _draw_box(frames[t], x, y0, size, size, color)
        boxes[t] = (x, y0, x + size, y0 + size)
    return frames, boxes


def generate_synthetic_dataset(spec: SyntheticSpec) -> SyntheticCorpus:
    """Class-balanced labelled clips, deterministic in ``spec.seed``.

    direction_lr: class 0 moves left, class 1 moves right.
    presence: class 0 is noise only, class 1 contains a square moving in a
    random horizontal direction.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    corpus = SyntheticCorpus(spec=spec, class_names=CLASS_NAMES[spec.task])
    for split, n in (("train", spec.n_train), ("test", spec.n_test)):
        labels = rng.permutation(np.arange(n) % 2)
        for i, label in enumerate(labels):
            if spec.task == "direction_lr":
                frames, boxes = _moving_square(spec, +1 if label == 1 else -1, rng)
            elif label == 1:
                frames, boxes = _moving_square(spec, int(rng.choice([-1, 1])), rng)
            else:
                frames = np.zeros((spec.T, spec.H, spec.W, 3))
                boxes = np.zeros((0, 4), dtype=np.int64)
            clip = VideoClip(
                clip_id=f"{spec.task}-s{spec.seed}-{split}-{i:05d}",
                frames=_finish(frames, spec.noise_std, rng),
                source=f"synthetic:{spec.task}/seed={spec.seed}/{split}/{i}",
            )
            corpus.items.append(SyntheticItem(clip, int(label), split, boxes))
    return corpus


def shape_x_positions(clip: VideoClip, threshold: float = 0.3) -> np.ndarray:
    """Per-frame horizontal centroid of pixels brighter than ``threshold``.

    Recovers the shape trajectory from pixels alone; frames without a bright
    pixel yield NaN.
    """
    mask = clip.frames.max(axis=-1) > threshold
    cols = np.arange(clip.frames.shape[2], dtype=np.float64)
    out = np.full(clip.num_frames, np.nan)
    for t in range(clip.num_frames):
        m = mask[t]
        if m.any():
            out[t] = (m.sum(axis=0) * cols).sum() / m.sum()
    return out


# ---------------------------------------------------------------------------
# Concept source scenes
# ---------------------------------------------------------------------------


def generate_concept_scene(
    seed: int,
    video_id: Optional[str] = None,
    T: int = 16,
    H: int = 64,
    W: int = 64,
    actor_size: int = 32,
    square_size: int = 6,
    speed: int = 1,
    direction: int = +1,
    actor_label: str = "person",
    distractor_label: str = "sports ball",
    noise_std: float = 0.03,
    size_jitter: int = 1,
) -> Tuple[VideoClip, dict]:
    """One scene plus detections in the ingestion JSON schema.

    The actor box stays put (its lower/right edge jitters by up to
    ``size_jitter`` px) while a square travels inside it, so a crop of the
    actor box keeps the motion. A small distractor square drifts vertically
    elsewhere in the frame and is reported under ``distractor_label``.
    """
    rng = np.random.default_rng(seed)
    video_id = video_id or f"scene-{seed:05d}"
    travel = speed * (T - 1)
    margin = size_jitter + 1
    if square_size + travel + 2 * margin > actor_size or actor_size >= W or actor_size >= H:
        raise ValueError("square path does not fit inside the actor box")
    ax = int(rng.integers(0, W - actor_size + 1))
    ay = int(rng.integers(0, H - actor_size + 1))
    sx = int(rng.integers(margin, actor_size - margin - square_size - travel + 1))
    sy = int(rng.integers(margin, actor_size - margin - square_size + 1))
    color = rng.uniform(0.5, 1.0, 3)
    d_size = 4
    dx = int(rng.integers(0, W - d_size + 1))
    dy0 = int(rng.integers(0, H - d_size - T + 1))
    d_color = rng.uniform(0.3, 0.6, 3)

    frames = np.zeros((T, H, W, 3))
    det_frames = []
    for t in range(T):
        x = ax + sx + (speed * t if direction > 0 else travel - speed * t)
        _draw_box(frames[t], dx, dy0 + t, d_size, d_size, d_color)
        _draw_box(frames[t], x, ay + sy, square_size, square_size, color)
        jw, jh = (int(v) for v in rng.integers(0, size_jitter + 1, 2))
        det_frames.append(
            {
                "frame_index": t,
                "detections": [
                    {
                        "label": actor_label,
                        "confidence": round(float(rng.uniform(0.8, 0.99)), 4),
                        "bbox": [ax, ay, ax + actor_size - jw, ay + actor_size - jh],
                    },
                    {
                        "label": distractor_label,
                        "confidence": round(float(rng.uniform(0.4, 0.7)), 4),
                        "bbox": [dx, dy0 + t, dx + d_size, dy0 + t + d_size],
                    },
                ],
            }
        )
    clip = VideoClip(
        clip_id=video_id,
        frames=_finish(frames, noise_std, rng),
        source=f"synthetic:concept_scene/seed={seed}",
    )
    detections = {"video_id": video_id, "width": W, "height": H, "frames": det_frames}
    return clip, detections


# ---------------------------------------------------------------------------
# Random control pool
# ---------------------------------------------------------------------------


def generate_random_pool(n: int, T: int = 16, H: int = 32, W: int = 32, seed: int = 0) -> List[VideoClip]:
    """Heterogeneous clips: shapes of random size, colour, direction and speed.

    Directions are drawn from the 8 compass directions plus "static"; shapes
    bounce off the frame border instead of leaving it.
    """
    rng = np.random.default_rng(seed)
    clips = []
    for i in range(n):
        frames = np.full((T, H, W, 3), rng.uniform(0.0, 0.2, 3))
        for _ in range(int(rng.integers(1, 3))):
            size = int(rng.integers(3, max(4, min(H, W) // 3)))
            color = rng.uniform(0.0, 1.0, 3)
            vx, vy = (int(v) for v in rng.integers(-1, 2, 2))
            speed = int(rng.integers(1, 3))
            x, y = int(rng.integers(0, W - size + 1)), int(rng.integers(0, H - size + 1))
            for t in range(T):
                _draw_box(frames[t], x, y, size, size, color)
                if not 0 <= x + vx * speed <= W - size:
                    vx = -vx
                if not 0 <= y + vy * speed <= H - size:
                    vy = -vy
                x, y = x + vx * speed, y + vy * speed
        clips.append(
            VideoClip(
                clip_id=f"random-s{seed}-{i:05d}",
                frames=_finish(frames, float(rng.uniform(0.0, 0.08)), rng),
                source=f"synthetic:random_pool/seed={seed}/{i}",
            )
        )
    return clips


# ---------------------------------------------------------------------------
# On-disk layouts
# ---------------------------------------------------------------------------


def write_dataset(corpus: SyntheticCorpus, out_dir: PathLike) -> Path:
    """Write clips, ``manifest.json``, ``spec.json`` and per-clip shape boxes.

    Boxes go to ``boxes.vtc`` keyed by clip id (``(T, 4)`` rows of
    ``x1, y1, x2, y2``); clips without a shape have no entry.
    """
    out = Path(out_dir)
    entries, boxes = [], {}
    for it in corpus.items:
        rel = f"clips/{it.clip.clip_id}.vtc"
        save_clip(out / rel, it.clip)
        entries.append(CorpusEntry(it.clip.clip_id, rel, it.label, it.split))
        if len(it.boxes):
            boxes[it.clip.clip_id] = it.boxes.astype(np.float32)
    write_corpus_manifest(out / "manifest.json", entries)
    meta = {"spec": corpus.spec.to_json(), "class_names": list(corpus.class_names)}
    (out / "spec.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    write_tensor_container(out / "boxes.vtc", boxes)
    return out / "manifest.json"


def read_boxes(dataset_dir: PathLike) -> Dict[str, np.ndarray]:
    return {k: v.astype(np.int64) for k, v in read_tensor_container(Path(dataset_dir) / "boxes.vtc").items()}


def write_scenes(out_dir: PathLike, n: int, seed: int, direction: int = +1, **scene_kw) -> List[str]:
    """Write ``n`` concept scenes as ``videos/<id>.vtc`` plus ``detections/<id>.json``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out = Path(out_dir)
    (out / "detections").mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(n):
        clip, det = generate_concept_scene(seed=seed * 100_003 + i, direction=direction, **scene_kw)
        save_clip(out / "videos" / f"{clip.clip_id}.vtc", clip)
        (out / "detections" / f"{clip.clip_id}.json").write_text(json.dumps(det, indent=1) + "\n")
        ids.append(clip.clip_id)
    return ids


def write_random_pool(out_dir: PathLike, n: int, seed: int, T: int = 16, H: int = 32, W: int = 32) -> Path:
    """Random control clips as a corpus manifest (label -1, split ``pool``)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out = Path(out_dir)
    entries = []
    for clip in generate_random_pool(n, T, H, W, seed=seed):
        rel = f"clips/{clip.clip_id}.vtc"
        save_clip(out / rel, clip)
        entries.append(CorpusEntry(clip.clip_id, rel, -1, "pool"))
    write_corpus_manifest(out / "manifest.json", entries)
    return out / "manifest.json"
