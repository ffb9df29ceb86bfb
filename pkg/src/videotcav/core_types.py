"""Domain data model and the tensor container file format.

Every module in the package exchanges clips as ``VideoClip`` (channels-last
``T x H x W x 3`` float32 frames in ``[0, 1]``) and persists arrays through
the manifest + raw-payload container defined here.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

PathLike = Union[str, Path]

# Dotted-path probe point name, e.g. "stage3".
LayerId = str

MAGIC = b"VTCAVTN1"
_U64 = struct.Struct("<Q")


class ContainerError(ValueError):
    """Raised for malformed or inconsistent tensor container files."""


class ConceptKind(str, Enum):
    SPATIAL = "spatial"
    SPATIOTEMPORAL = "spatiotemporal"
    RANDOM = "random"


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class VideoClip:
    """A stack of frames, channels-last.

    Construction does not validate; call :func:`validate_clip` (or
    :func:`require_valid`) to check the invariants.
    """

    clip_id: str
    frames: np.ndarray
    fps: float = 25.0
    source: str = ""

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.dtype != np.float32 and np.issubdtype(frames.dtype, np.floating):
            frames = frames.astype(np.float32)
        object.__setattr__(self, "frames", _frozen(frames))

    @property
    def shape(self) -> tuple:
        return tuple(self.frames.shape)

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])

    def reversed(self) -> "VideoClip":
        """Same frames played backwards."""
        return VideoClip(
            clip_id=f"{self.clip_id}:reversed",
            frames=self.frames[::-1],
            fps=self.fps,
            source=f"reversed({self.source})",
        )


def validate_clip(clip: VideoClip) -> List[str]:
    """Return every violated VideoClip invariant; an empty list means valid."""
    violations: List[str] = []
    frames = np.asarray(clip.frames)
    if frames.ndim != 4:
        violations.append(f"rank != 4 (got shape {frames.shape})")
    else:
        if any(d < 1 for d in frames.shape):
            violations.append("empty dimension")
        if frames.shape[3] != 3:
            violations.append("channel count != 3")
    if frames.dtype != np.float32:
        violations.append(f"dtype != float32 (got {frames.dtype})")
    if np.issubdtype(frames.dtype, np.number) and frames.size:
        finite = np.isfinite(frames)
        if not finite.all():
            violations.append("non-finite pixel")
        vals = frames[finite]
        if vals.size and (vals.min() < 0.0 or vals.max() > 1.0):
            violations.append("pixel out of range")
    if not (isinstance(clip.fps, (int, float)) and math.isfinite(clip.fps) and clip.fps > 0):
        violations.append("fps must be positive")
    if not clip.clip_id:
        violations.append("empty clip_id")
    return violations


def require_valid(clip: VideoClip) -> VideoClip:
    problems = validate_clip(clip)
    if problems:
        raise ValueError(f"invalid clip {clip.clip_id!r}: {'; '.join(problems)}")
    return clip


@dataclass(frozen=True)
class ActivationRecord:
    """Pooled activation (and optional logit-gradient) of one clip at one layer."""

    clip_id: str
    layer: LayerId
    class_index: int
    activation: np.ndarray
    gradient: Optional[np.ndarray] = None
    raw_shape: tuple = ()

    def __post_init__(self):
        if self.class_index < 0:
            raise ValueError("class_index must be nonnegative")
        act = np.asarray(self.activation, dtype=np.float32).reshape(-1)
        if not np.isfinite(act).all():
            raise ValueError(f"non-finite activation for clip {self.clip_id!r}")
        object.__setattr__(self, "activation", _frozen(act))
        if self.gradient is not None:
            grad = np.asarray(self.gradient, dtype=np.float32).reshape(-1)
            if grad.shape != act.shape:
                raise ValueError(
                    f"gradient dimension {grad.size} != activation dimension {act.size}"
                )
            if not np.isfinite(grad).all():
                raise ValueError(f"non-finite gradient for clip {self.clip_id!r}")
            object.__setattr__(self, "gradient", _frozen(grad))
        object.__setattr__(self, "raw_shape", tuple(int(d) for d in self.raw_shape))

    @property
    def dim(self) -> int:
        return int(self.activation.size)


@dataclass(frozen=True)
class ConceptSet:
    """A named collection of clips delineating one concept."""

    name: str
    kind: ConceptKind
    clips: tuple
    origin: str = ""

    def __post_init__(self):
        object.__setattr__(self, "kind", ConceptKind(self.kind))
        object.__setattr__(self, "clips", tuple(self.clips))
        problems = concept_set_violations(self)
        if problems:
            raise ValueError(f"invalid concept set {self.name!r}: {'; '.join(problems)}")

    @property
    def clip_ids(self) -> List[str]:
        return [c.clip_id for c in self.clips]

    def __len__(self) -> int:
        return len(self.clips)


def concept_set_violations(concept: ConceptSet) -> List[str]:
    problems = []
    if len(concept.clips) < 2:
        problems.append("needs at least 2 clips")
    shapes = {c.shape[:3] for c in concept.clips}
    if len(shapes) > 1:
        problems.append(f"clips disagree on T,H,W: {sorted(shapes)}")
    if concept.kind is ConceptKind.SPATIAL:
        for c in concept.clips:
            if not is_static(c):
                problems.append(f"spatial clip {c.clip_id!r} has non-identical frames")
    return problems


def is_static(clip: VideoClip) -> bool:
    """True when every frame is bit-identical to frame 0."""
    frames = clip.frames
    return bool(np.array_equal(frames, np.broadcast_to(frames[:1], frames.shape)))


# ---------------------------------------------------------------------------
# Tensor container: MAGIC | u64 manifest length | JSON manifest | payload
# ---------------------------------------------------------------------------


def _as_f32(name: str, value) -> np.ndarray:
    arr = np.asarray(value)
    if arr.dtype != np.float32:
        if not np.issubdtype(arr.dtype, np.number):
            raise TypeError(f"entry {name!r}: dtype {arr.dtype} is not numeric")
        converted = arr.astype(np.float32)
        if not np.array_equal(converted.astype(arr.dtype), arr):
            raise TypeError(f"entry {name!r}: {arr.dtype} values not exactly representable as f32")
        arr = converted
    if not np.isfinite(arr).all():
        raise ValueError(f"entry {name!r} contains non-finite values")
    return arr


def write_tensor_container(path: PathLike, entries: Mapping[str, np.ndarray]) -> None:
    """Write float32 tensors to ``path``; insertion order fixes payload layout."""
    arrays = {str(name): _as_f32(str(name), value) for name, value in entries.items()}
    manifest: Dict[str, dict] = {}
    offset = 0
    for name, arr in arrays.items():
        nbytes = 4 * int(arr.size)
        manifest[name] = {
            "dtype": "f32",
            "shape": [int(d) for d in arr.shape],
            "byte_offset": offset,
            "byte_length": nbytes,
        }
        offset += nbytes
    header = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_U64.pack(len(header)))
        fh.write(header)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp.replace(path)


def read_tensor_container(path: PathLike) -> Dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ContainerError(f"{path}: bad magic")
    if len(data) < 16:
        raise ContainerError(f"{path}: truncated header")
    (mlen,) = _U64.unpack_from(data, 8)
    start = 16 + mlen
    if start > len(data):
        raise ContainerError(f"{path}: manifest length exceeds file size")
    try:
        manifest = json.loads(data[16:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: corrupt manifest ({exc})") from exc
    if not isinstance(manifest, dict):
        raise ContainerError(f"{path}: corrupt manifest (not an object)")

    payload = memoryview(data)[start:]
    expected = 0
    spans = []
    out: Dict[str, np.ndarray] = {}
    for name, meta in manifest.items():
        try:
            dtype, shape = meta["dtype"], [int(d) for d in meta["shape"]]
            off, length = int(meta["byte_offset"]), int(meta["byte_length"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ContainerError(f"{path}: corrupt manifest entry {name!r}") from exc
        if dtype != "f32":
            raise ContainerError(f"{path}: entry {name!r} has unsupported dtype {dtype!r}")
        if length != 4 * math.prod(shape) or any(d < 0 for d in shape):
            raise ContainerError(
                f"{path}: entry {name!r} byte_length {length} does not match shape {shape}"
            )
        spans.append((off, off + length, name))
        expected = max(expected, off + length)
        out[name] = (off, length, shape)
    spans.sort()
    for (_, end_a, a), (start_b, _, b) in zip(spans, spans[1:]):
        if start_b < end_a:
            raise ContainerError(f"{path}: entries {a!r} and {b!r} overlap")
    if len(payload) != expected:
        raise ContainerError(
            f"{path}: payload length mismatch (manifest expects {expected} bytes, found {len(payload)})"
        )
    return {
        name: np.frombuffer(payload[off : off + length], dtype="<f4").reshape(shape).astype(np.float32)
        for name, (off, length, shape) in out.items()
    }


# ---------------------------------------------------------------------------
# Clip and corpus persistence
# ---------------------------------------------------------------------------


def save_clip(path: PathLike, clip: VideoClip) -> None:
    require_valid(clip)
    write_tensor_container(path, {"frames": clip.frames, "fps": np.array([clip.fps], np.float32)})


def load_clip(path: PathLike, clip_id: Optional[str] = None) -> VideoClip:
    entries = read_tensor_container(path)
    if "frames" not in entries:
        raise ContainerError(f"{path}: no 'frames' entry")
    fps = float(entries["fps"][0]) if "fps" in entries else 25.0
    clip = VideoClip(
        clip_id=clip_id or Path(path).stem,
        frames=entries["frames"],
        fps=fps,
        source=str(path),
    )
    return require_valid(clip)


@dataclass(frozen=True)
class CorpusEntry:
    clip_id: str
    path: str
    label: int
    split: str

    def to_json(self) -> dict:
        return {"clip_id": self.clip_id, "path": self.path, "label": self.label, "split": self.split}


def write_corpus_manifest(path: PathLike, entries: Sequence[CorpusEntry]) -> None:
    ids = [e.clip_id for e in entries]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate clip_id in corpus manifest")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps([e.to_json() for e in entries], indent=1) + "\n")


def read_corpus_manifest(path: PathLike) -> List[CorpusEntry]:
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, list):
        raise ValueError(f"{path}: corpus manifest must be a JSON list")
    entries = [
        CorpusEntry(str(r["clip_id"]), str(r["path"]), int(r["label"]), str(r["split"])) for r in raw
    ]
    ids = [e.clip_id for e in entries]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate clip_id in corpus manifest")
    return entries


def load_corpus(manifest_path: PathLike, split: Optional[str] = None, expect_frames: Optional[int] = None):
    """Load ``(clip, label)`` pairs listed in a corpus manifest.

    Paths are resolved relative to the manifest's directory. Clips whose
    frame count differs from ``expect_frames`` are rejected, not resampled.
    """
    root = Path(manifest_path).parent
    out = []
    for entry in read_corpus_manifest(manifest_path):
        if split is not None and entry.split != split:
            continue
        clip = load_clip(root / entry.path, clip_id=entry.clip_id)
        if expect_frames is not None and clip.num_frames != expect_frames:
            raise ValueError(
                f"clip {entry.clip_id!r} has {clip.num_frames} frames, corpus expects {expect_frames}"
            )
        out.append((clip, entry.label))
    return out
