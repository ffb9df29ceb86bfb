"""Machine-assisted concept generation from videos and per-frame detections.

Detections arrive as JSON files (any detector can produce them)::

    {"video_id": str, "width": int, "height": int,
     "frames": [{"frame_index": int,
                 "detections": [{"label": str, "confidence": float,
                                 "bbox": [x1, y1, x2, y2]}]}]}
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .core_types import ConceptKind, ConceptSet, PathLike, VideoClip, load_clip, save_clip

BBox = Tuple[float, float, float, float]


class DetectionFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    class_label: str
    confidence: float
    bbox: BBox


@dataclass(frozen=True)
class DetectionFrame:
    frame_index: int
    detections: Tuple[Detection, ...] = ()


@dataclass(frozen=True)
class DetectionFile:
    video_id: str
    width: int
    height: int
    frames: Tuple[DetectionFrame, ...]


@dataclass
class Track:
    track_id: str
    class_label: str
    boxes: List[Tuple[int, BBox]] = field(default_factory=list)
    confidences: List[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def frame_indices(self) -> List[int]:
        return [f for f, _ in self.boxes]

    @property
    def max_box(self) -> Tuple[int, int]:
        """Per-axis maximum (width, height) over the member crops."""
        sizes = [crop_size(b) for _, b in self.boxes]
        return max(w for w, _ in sizes), max(h for _, h in sizes)

    @property
    def mean_confidence(self) -> float:
        return float(np.mean(self.confidences)) if self.confidences else 0.0


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------


def parse_detections(raw: dict, source: str = "<detections>") -> DetectionFile:
    try:
        width, height = int(raw["width"]), int(raw["height"])
        video_id = str(raw["video_id"])
        raw_frames = raw["frames"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DetectionFormatError(f"{source}: missing or invalid header field ({exc})") from exc
    if width < 1 or height < 1:
        raise DetectionFormatError(f"{source}: frame size must be positive")
    frames = []
    seen = set()
    for pos, fr in enumerate(raw_frames):
        try:
            index = int(fr["frame_index"])
            dets_raw = fr["detections"]
        except (KeyError, TypeError, ValueError) as exc:
            raise DetectionFormatError(f"{source}: malformed frame entry #{pos}") from exc
        if index < 0 or index in seen:
            raise DetectionFormatError(f"{source}: invalid or duplicate frame_index {index}")
        seen.add(index)
        dets = []
        for j, d in enumerate(dets_raw):
            where = f"{source}: frame {index}, detection {j}"
            try:
                label = str(d["label"])
                conf = float(d["confidence"])
                x1, y1, x2, y2 = (float(v) for v in d["bbox"])
            except (KeyError, TypeError, ValueError) as exc:
                raise DetectionFormatError(f"{where}: malformed detection") from exc
            if not all(math.isfinite(v) for v in (conf, x1, y1, x2, y2)):
                raise DetectionFormatError(f"{where}: non-finite value")
            if not 0.0 <= conf <= 1.0:
                raise DetectionFormatError(f"{where}: confidence {conf} outside [0, 1]")
            if x1 >= x2 or y1 >= y2:
                raise DetectionFormatError(f"inverted bbox at frame {index} ({source}, detection {j})")
            if x1 < 0 or y1 < 0 or x2 > width or y2 > height:
                raise DetectionFormatError(f"bbox outside frame at frame {index} ({source}, detection {j})")
            dets.append(Detection(label, conf, (x1, y1, x2, y2)))
        frames.append(DetectionFrame(index, tuple(dets)))
    frames.sort(key=lambda f: f.frame_index)
    return DetectionFile(video_id, width, height, tuple(frames))


def load_detection_file(path: PathLike) -> DetectionFile:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DetectionFormatError(f"{path}: malformed JSON ({exc})") from exc
    return parse_detections(raw, source=str(path))


def ingest_detections(path: PathLike) -> List[DetectionFrame]:
    return list(load_detection_file(path).frames)


# ---------------------------------------------------------------------------
# Tracking
# ---------------------------------------------------------------------------


def iou(a: BBox, b: BBox) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


def build_tracks(
    frames: Sequence[DetectionFrame],
    class_label: str,
    iou_threshold: float = 0.5,
    max_gap: int = 0,
) -> List[Track]:
    """Greedy single-instance tracks for one class label.

    Repeatedly seeds a track at the highest-confidence unassigned detection
    (ties: earlier frame, then lower x1) and grows it forward, then backward,
    frame by frame. In each frame the unassigned detection with maximal IoU
    against the track's nearest box joins if IoU >= ``iou_threshold``
    (ties: lower x1, then lower y1); ``max_gap + 1`` consecutive misses end
    that direction.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must be in (0, 1)")
    if max_gap < 0:
        raise ValueError("max_gap must be >= 0")

    ordered = sorted(frames, key=lambda f: f.frame_index)
    indices = [f.frame_index for f in ordered]
    # candidates[pos] -> list of (detection id, Detection); ids are (pos, j)
    candidates = [
        [((pos, j), d) for j, d in enumerate(fr.detections) if d.class_label == class_label]
        for pos, fr in enumerate(ordered)
    ]
    unassigned = {key: det for cands in candidates for key, det in cands}

    def grow(track_boxes, start_pos, step, anchor):
        misses = 0
        pos = start_pos + step
        last_index = indices[start_pos]
        while 0 <= pos < len(ordered):
            misses = abs(indices[pos] - last_index) - 1
            if misses > max_gap:
                break
            best = None
            for key, det in candidates[pos]:
                if key not in unassigned:
                    continue
                score = iou(anchor, det.bbox)
                rank = (-score, det.bbox[0], det.bbox[1], key)
                if score >= iou_threshold and (best is None or rank < best[0]):
                    best = (rank, key, det)
            if best is not None:
                _, key, det = best
                del unassigned[key]
                track_boxes.append((indices[pos], det))
                anchor = det.bbox
                last_index = indices[pos]
            pos += step

    tracks = []
    while unassigned:
        seed_key = min(
            unassigned,
            key=lambda k: (-unassigned[k].confidence, indices[k[0]], unassigned[k].bbox[0], k),
        )
        seed = unassigned.pop(seed_key)
        members = [(indices[seed_key[0]], seed)]
        grow(members, seed_key[0], +1, seed.bbox)
        grow(members, seed_key[0], -1, seed.bbox)
        members.sort(key=lambda m: m[0])
        tracks.append(
            Track(
                track_id=f"{class_label}-{len(tracks)}",
                class_label=class_label,
                boxes=[(f, d.bbox) for f, d in members],
                confidences=[d.confidence for _, d in members],
            )
        )
    return tracks


# ---------------------------------------------------------------------------
# Concept clip builders
# ---------------------------------------------------------------------------


def crop_bounds(bbox: BBox) -> Tuple[int, int, int, int]:
    """Integer pixel bounds covering ``bbox`` (floor the low corner, ceil the high one)."""
    x1, y1, x2, y2 = bbox
    return int(math.floor(x1)), int(math.floor(y1)), int(math.ceil(x2)), int(math.ceil(y2))


def crop_size(bbox: BBox) -> Tuple[int, int]:
    x1, y1, x2, y2 = crop_bounds(bbox)
    return x2 - x1, y2 - y1


def resize_frames(frames: np.ndarray, out_size: Optional[Tuple[int, int]]) -> np.ndarray:
    """Stretch-resize ``(T, H, W, C)`` frames to ``out_size = (H, W)`` bilinearly.

    Equal sizes return the input unchanged, bit for bit.
    """
    frames = np.asarray(frames, dtype=np.float32)
    if out_size is None or tuple(out_size) == frames.shape[1:3]:
        return frames
    x = torch.from_numpy(np.ascontiguousarray(frames)).permute(0, 3, 1, 2)
    y = F.interpolate(x, size=tuple(out_size), mode="bilinear", align_corners=False)
    return np.clip(y.permute(0, 2, 3, 1).numpy(), 0.0, 1.0).astype(np.float32)


def build_spatial_concept(
    frame: np.ndarray,
    T: int,
    out_size: Optional[Tuple[int, int]] = None,
    clip_id: str = "spatial",
    source: str = "",
) -> VideoClip:
    """Repeat a single (resized) crop ``T`` times into a static clip."""
    frame = np.asarray(frame, dtype=np.float32)
    if T < 1:
        raise ValueError("T must be >= 1")
    if frame.ndim != 3 or frame.shape[0] == 0 or frame.shape[1] == 0:
        raise ValueError(f"zero-area crop (shape {frame.shape})")
    still = resize_frames(frame[None], out_size)[0]
    frames = np.repeat(still[None], T, axis=0)
    return VideoClip(clip_id=clip_id, frames=frames, source=source or "spatial-concept")


def subsample_indices(length: int, T: int) -> np.ndarray:
    """``round(linspace(0, length - 1, T))`` with halves rounded up."""
    if T > length:
        raise ValueError(f"track shorter than T ({length} < {T})")
    if T == 1:
        return np.zeros(1, dtype=np.int64)
    # exact integer form of floor((length - 1) * i / (T - 1) + 1/2); float linspace can land below a half
    i = np.arange(T, dtype=np.int64)
    return (2 * (length - 1) * i + (T - 1)) // (2 * (T - 1))


def center_offsets(size: Tuple[int, int], canvas: Tuple[int, int]) -> Tuple[int, int]:
    """(left, top) offsets placing a ``(w, h)`` crop at the centre of a ``(W, H)`` canvas."""
    return (canvas[0] - size[0]) // 2, (canvas[1] - size[1]) // 2


def crop_frame(frame: np.ndarray, bbox: BBox) -> np.ndarray:
    x1, y1, x2, y2 = crop_bounds(bbox)
    return frame[y1:y2, x1:x2]


def build_spatiotemporal_concept(
    video: VideoClip,
    track: Track,
    T: int,
    pad_value: float = 0.0,
    out_size: Optional[Tuple[int, int]] = None,
    clip_id: Optional[str] = None,
) -> VideoClip:
    """Per-frame track crops, centred on a canvas the size of the track's largest box.

    Tracks longer than ``T`` are uniformly subsampled; the canvas is then
    stretch-resized to ``out_size`` when given.
    """
    if not 0.0 <= pad_value <= 1.0:
        raise ValueError("pad_value must lie in [0, 1]")
    for f, _ in track.boxes:
        if not 0 <= f < video.num_frames:
            raise ValueError(f"track {track.track_id!r} references frame {f} outside [0, {video.num_frames})")
    picks = subsample_indices(len(track), T)
    max_w, max_h = track.max_box
    canvas = np.full((T, max_h, max_w, video.frames.shape[3]), pad_value, dtype=np.float32)
    for t, k in enumerate(picks):
        f, bbox = track.boxes[k]
        crop = crop_frame(video.frames[f], bbox)
        h, w = crop.shape[:2]
        left, top = center_offsets((w, h), (max_w, max_h))
        canvas[t, top : top + h, left : left + w] = crop
    return VideoClip(
        clip_id=clip_id or f"{video.clip_id}/{track.track_id}",
        frames=resize_frames(canvas, out_size),
        fps=video.fps,
        source=f"spatiotemporal:{video.clip_id}/{track.track_id}",
    )


# ---------------------------------------------------------------------------
# Random control sets
# ---------------------------------------------------------------------------


def sample_random_sets(
    corpus: Sequence[VideoClip],
    n_sets: int,
    set_size: int,
    exclude: Iterable[str] = (),
    seed: int = 0,
    prefix: str = "random",
) -> List[ConceptSet]:
    """Seeded random control sets, pairwise disjoint whenever the corpus allows."""
    excluded = set(exclude)
    pool = [c for c in corpus if c.clip_id not in excluded]
    if n_sets < 1 or set_size < 2:
        raise ValueError("need n_sets >= 1 and set_size >= 2")
    if len(pool) < set_size:
        raise ValueError(f"insufficient corpus: {len(pool)} clips available, set_size {set_size}")
    rng = np.random.default_rng(seed)
    if len(pool) >= n_sets * set_size:
        order = rng.permutation(len(pool))
        picks = [order[i * set_size : (i + 1) * set_size] for i in range(n_sets)]
    else:
        picks = [rng.choice(len(pool), size=set_size, replace=False) for _ in range(n_sets)]
    return [
        ConceptSet(
            name=f"{prefix}_{i}",
            kind=ConceptKind.RANDOM,
            clips=[pool[j] for j in sorted(idx)],
            origin=f"sampling seed={seed}, set {i}",
        )
        for i, idx in enumerate(picks)
    ]


# ---------------------------------------------------------------------------
# Mining concept sets from a detection corpus
# ---------------------------------------------------------------------------


def best_track(tracks: Sequence[Track], min_length: int) -> Optional[Track]:
    """Longest track of at least ``min_length`` boxes; ties go to higher mean confidence."""
    eligible = [t for t in tracks if len(t) >= min_length]
    if not eligible:
        return None
    return max(eligible, key=lambda t: (len(t), t.mean_confidence))


@dataclass
class MinedConcepts:
    sets: List[ConceptSet]
    skipped: List[str]


def mine_concepts(
    videos: Dict[str, VideoClip],
    detections: Dict[str, DetectionFile],
    classes: Sequence[str],
    T: int,
    out_size: Tuple[int, int],
    iou_threshold: float = 0.5,
    max_gap: int = 1,
    pad_value: float = 0.0,
) -> MinedConcepts:
    """One spatiotemporal and one spatial concept set per requested class.

    Each video contributes its best track of the class: the track's clip to
    the spatiotemporal set and its first crop, repeated, to the spatial set.
    """
    sets, skipped = [], []
    for label in classes:
        dynamic, static, used = [], [], []
        for video_id in sorted(detections):
            det = detections[video_id]
            if video_id not in videos:
                raise ValueError(f"detections for {video_id!r} have no matching video")
            video = videos[video_id]
            track = best_track(build_tracks(det.frames, label, iou_threshold, max_gap), T)
            if track is None:
                continue
            dynamic.append(
                build_spatiotemporal_concept(
                    video, track, T, pad_value, out_size, clip_id=f"{video_id}/{track.track_id}/dynamic"
                )
            )
            f0, b0 = track.boxes[int(subsample_indices(len(track), T)[0])]
            static.append(
                build_spatial_concept(
                    crop_frame(video.frames[f0], b0),
                    T,
                    out_size,
                    clip_id=f"{video_id}/{track.track_id}/static",
                    source=f"spatial:{video_id}/{track.track_id}/frame{f0}",
                )
            )
            used.append(f"{video_id}:{track.track_id}")
        if len(dynamic) < 2:
            skipped.append(label)
            continue
        origin = "tracks " + ",".join(used)
        sets.append(ConceptSet(f"{label}:spatiotemporal", ConceptKind.SPATIOTEMPORAL, dynamic, origin))
        sets.append(ConceptSet(f"{label}:spatial", ConceptKind.SPATIAL, static, origin))
    return MinedConcepts(sets, skipped)


# ---------------------------------------------------------------------------
# Concept manifest
# ---------------------------------------------------------------------------


def _safe_name(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)


def write_concept_manifest(directory: PathLike, sets: Sequence[ConceptSet]) -> Path:
    """Save every clip under ``directory/clips`` and index them in ``manifest.json``."""
    root = Path(directory)
    names = [s.name for s in sets]
    if len(set(names)) != len(names):
        raise ValueError("duplicate concept set name")
    records = []
    for cs in sets:
        clips = []
        for i, clip in enumerate(cs.clips):
            rel = f"clips/{_safe_name(cs.name)}/{i:04d}.vtc"
            save_clip(root / rel, clip)
            clips.append({"clip_id": clip.clip_id, "path": rel, "source": clip.source})
        records.append({"name": cs.name, "kind": ConceptKind(cs.kind).value, "origin": cs.origin, "clips": clips})
    path = root / "manifest.json"
    root.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps({"sets": records}, indent=1) + "\n")
    tmp.replace(path)
    return path


def read_concept_manifest(path: PathLike) -> List[ConceptSet]:
    path = Path(path)
    raw = json.loads(path.read_text())
    if not isinstance(raw, dict) or not isinstance(raw.get("sets"), list):
        raise ValueError(f"{path}: concept manifest needs a 'sets' list")
    out = []
    for rec in raw["sets"]:
        clips = []
        for c in rec["clips"]:
            clip = load_clip(path.parent / c["path"], clip_id=c["clip_id"])
            clips.append(VideoClip(clip.clip_id, clip.frames, clip.fps, c.get("source", clip.source)))
        out.append(ConceptSet(rec["name"], ConceptKind(rec["kind"]), clips, rec.get("origin", "")))
    return out
