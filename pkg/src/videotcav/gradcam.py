"""Grad-CAM over frame stacks: spatiotemporal heatmap volumes and overlays."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
import torch
import torch.nn.functional as F
from matplotlib import colormaps

from .core_types import LayerId, VideoClip
from .models import ModelHandle, activations_and_gradients


@dataclass(frozen=True)
class HeatmapVolume:
    values: np.ndarray  # (T', H', W') at the layer's resolution, in [0, 1]
    layer: LayerId
    class_index: int
    upsampled: np.ndarray  # (T, H, W) aligned with the input clip

    def mass_fraction(self, mask: np.ndarray) -> float:
        """Share of total upsampled heatmap mass falling inside ``mask``."""
        total = float(self.upsampled.sum(dtype=np.float64))
        if total == 0.0:
            return 0.0
        return float(self.upsampled[np.asarray(mask, bool)].sum(dtype=np.float64) / total)


def gradcam_map(activation: np.ndarray, gradient: np.ndarray) -> np.ndarray:
    """Rectified, max-normalised Grad-CAM map from channels-last tensors.

    Channel weights average the gradient over every spatiotemporal position.
    An identically non-positive map stays zero.
    """
    act = np.asarray(activation, dtype=np.float64)
    grad = np.asarray(gradient, dtype=np.float64)
    if act.shape != grad.shape:
        raise ValueError(f"activation {act.shape} and gradient {grad.shape} differ")
    weights = grad.reshape(-1, grad.shape[-1]).mean(axis=0)
    cam = np.maximum(act @ weights, 0.0)
    peak = cam.max() if cam.size else 0.0
    if peak > 0:
        cam = cam / peak
    return cam.astype(np.float32)


def upsample_volume(values: np.ndarray, size: Tuple[int, int, int], mode: str = "trilinear") -> np.ndarray:
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"unknown upsampling mode {mode!r}")
    v = torch.from_numpy(np.ascontiguousarray(values, dtype=np.float32))[None, None]
    kwargs = {"align_corners": False} if mode == "trilinear" else {}
    out = F.interpolate(v, size=tuple(size), mode=mode, **kwargs)[0, 0].numpy()
    return np.clip(out, 0.0, 1.0)


def compute_gradcam(
    model: ModelHandle,
    clip: VideoClip,
    layer: LayerId,
    class_index,
    upsample: str = "trilinear",
) -> HeatmapVolume:
    k = model.class_index(class_index)
    acts, grads = activations_and_gradients(model, [clip], layer, k)
    values = gradcam_map(acts[0], grads[0])
    return HeatmapVolume(
        values=values,
        layer=layer,
        class_index=k,
        upsampled=upsample_volume(values, clip.shape[:3], upsample),
    )


def overlay_heatmap(clip: VideoClip, volume: HeatmapVolume, alpha: float = 0.5, cmap: str = "jet") -> VideoClip:
    """Blend ``(1 - alpha*h) * frame + alpha*h * colormap(h)`` pixelwise."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    h = np.asarray(volume.upsampled, dtype=np.float32)
    if h.shape != clip.shape[:3]:
        raise ValueError(f"heatmap {h.shape} not aligned with clip {clip.shape[:3]}")
    colors = colormaps[cmap](h)[..., :3].astype(np.float32)
    w = (alpha * h)[..., None]
    blended = (1.0 - w) * clip.frames + w * colors
    return VideoClip(
        clip_id=f"{clip.clip_id}:gradcam",
        frames=np.clip(blended, 0.0, 1.0),
        fps=clip.fps,
        source=f"gradcam({clip.source}, layer={volume.layer}, class={volume.class_index})",
    )


def shape_tube_mask(boxes: np.ndarray, size: Tuple[int, int, int], dilation: int) -> np.ndarray:
    """Boolean ``(T, H, W)`` mask of per-frame boxes grown by ``dilation`` px."""
    t_len, h, w = size
    mask = np.zeros(size, dtype=bool)
    for t in range(min(t_len, len(boxes))):
        x1, y1, x2, y2 = (int(v) for v in boxes[t])
        mask[t, max(0, y1 - dilation) : min(h, y2 + dilation), max(0, x1 - dilation) : min(w, x2 + dilation)] = True
    return mask
