"""Uniform access to video action recognition models.

Any ``torch.nn.Module`` implementing :class:`ProbedNetwork` can sit behind a
:class:`ModelHandle`: it must run the full network while returning named
probe tensors, and run the tail of the network from an injected probe
tensor. A Video Swin Transformer adapter would wrap the backbone the same
way; this package ships only the small reference network below.

At this boundary activations are channels-last ``(T', H', W', C)`` per clip,
matching the clip layout.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core_types import LayerId, PathLike, VideoClip, read_tensor_container, write_tensor_container

log = logging.getLogger(__name__)


class UnknownLayerError(KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown probe layer"


class ProbedNetwork(nn.Module):
    """Interface the adapter needs from a network.

    Inputs are ``(N, C, T, H, W)``; probe tensors are ``(N, C', T', H', W')``.
    """

    probe_names: Tuple[str, ...] = ()

    def forward_with_probes(self, x: torch.Tensor, layers: Sequence[str]):
        raise NotImplementedError

    def forward_from(self, layer: str, activation: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


DEFAULT_POOLS = ((2, 2, 2), (2, 1, 1), (4, 4, 4))
ACTIVATIONS = {"gelu": F.gelu, "relu": F.relu}
SMOOTH_MAX_TAU = 0.5


def smooth_max_pool3d(x: torch.Tensor, kernel_size: Sequence[int], ceil_mode: bool = True, tau: float = SMOOTH_MAX_TAU) -> torch.Tensor:
    """Log-mean-exp pooling ``tau * log(mean(exp(x / tau)))`` over each window.

    Tends to max pooling as ``tau -> 0`` but stays differentiable, so finite
    differences of the network tail remain valid. Ragged edges (``ceil_mode``)
    are padded with ``-inf`` and contribute nothing.
    """
    k = [int(v) for v in kernel_size]
    n, c, *dims = x.shape
    out = [-(-d // kk) if ceil_mode else d // kk for d, kk in zip(dims, k)]
    pad = []
    for d, kk, o in zip(reversed(dims), reversed(k), reversed(out)):
        pad += [0, o * kk - d]
    if any(pad):
        x = F.pad(x, pad, value=float("-inf")) if ceil_mode else x[..., : out[0] * k[0], : out[1] * k[1], : out[2] * k[2]]
    w = x.reshape(n, c, out[0], k[0], out[1], k[1], out[2], k[2])
    return tau * (torch.logsumexp(w / tau, dim=(3, 5, 7)) - float(np.log(k[0] * k[1] * k[2])))


DOWNSAMPLERS = {"smoothmax": smooth_max_pool3d, "max": F.max_pool3d, "avg": F.avg_pool3d}
DEFAULT_ACTIVATION = "gelu"
DEFAULT_DOWNSAMPLE = "smoothmax"


class ReferenceVideoNet(ProbedNetwork):
    """Three stages of bias-free 3D convolution -> nonlinearity -> pooling,
    then global average pooling and a class-centred linear head.

    The probe point of each stage is its convolution response, taken before
    the nonlinearity; this keeps the logit-gradient input dependent even at
    the last stage. Smooth-max downsampling routes most of each window's
    gradient to its largest, input-specific positions, so logit-gradients of
    different clips share little beyond the channel weights, while the
    network stays differentiable everywhere. Centring the head across
    classes leaves predictions unchanged but removes the class-agnostic part
    of every logit, so its gradient only carries class-specific evidence.
    """

    probe_names = ("stage1", "stage2", "stage3")

    def __init__(
        self,
        num_classes: int = 2,
        channels: Sequence[int] = (8, 16, 32),
        in_channels: int = 3,
        pools: Sequence[Sequence[int]] = DEFAULT_POOLS,
        activation: str = DEFAULT_ACTIVATION,
        downsample: str = DEFAULT_DOWNSAMPLE,
    ):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}; expected one of {sorted(ACTIVATIONS)}")
        if downsample not in DOWNSAMPLERS:
            raise ValueError(f"unknown downsampling {downsample!r}; expected one of {sorted(DOWNSAMPLERS)}")
        self.activation = activation
        self.downsample = downsample
        self._act = ACTIVATIONS[activation]
        self._pool = DOWNSAMPLERS[downsample]
        if len(pools) != len(channels):
            raise ValueError("one pooling kernel per stage")
        self.pools = tuple(tuple(int(k) for k in p) for p in pools)
        chans = [in_channels, *channels]
        self.convs = nn.ModuleList(
            nn.Conv3d(chans[i], chans[i + 1], kernel_size=3, padding=1, bias=False) for i in range(len(channels))
        )
        self.head = nn.Linear(chans[-1], num_classes)
        self.channels = tuple(channels)

    def _logits(self, a: torch.Tensor) -> torch.Tensor:
        # class-centred head: softmax ignores any shared component, so drop it
        w = self.head.weight - self.head.weight.mean(dim=0, keepdim=True)
        b = self.head.bias - self.head.bias.mean()
        return F.linear(a.mean(dim=(2, 3, 4)), w, b)

    def _after(self, a: torch.Tensor, stage: int) -> torch.Tensor:
        return self._pool(self._act(a), kernel_size=self.pools[stage], ceil_mode=True)

    def forward_with_probes(self, x, layers=()):
        wanted = set(layers)
        probes = {}
        a = x
        for i, conv in enumerate(self.convs):
            a = conv(a)
            name = self.probe_names[i]
            if name in wanted:
                probes[name] = a
            a = self._after(a, i)
        return self._logits(a), probes

    def forward_from(self, layer, activation):
        start = self.probe_names.index(layer)
        a = self._after(activation, start)
        for i in range(start + 1, len(self.convs)):
            a = self._after(self.convs[i](a), i)
        return self._logits(a)

    def forward(self, x):
        return self.forward_with_probes(x)[0]


def reference_probe_shapes(
    input_shape: Tuple[int, int, int, int],
    channels: Sequence[int] = (8, 16, 32),
    pools: Sequence[Sequence[int]] = DEFAULT_POOLS,
):
    """Channels-last probe shapes of :class:`ReferenceVideoNet` for ``(T, H, W, C)`` input.

    Convolutions preserve size; stage ``k`` sees the input after the first
    ``k - 1`` pooling kernels, each dividing its axis with ceiling.
    """
    dims = list(input_shape[:3])
    shapes = {}
    for i, c in enumerate(channels):
        shapes[f"stage{i + 1}"] = (*dims, c)
        dims = [-(-d // k) for d, k in zip(dims, pools[i])]
    return shapes


@dataclass
class ModelHandle:
    model_id: str
    input_shape: Tuple[int, int, int, int]
    class_names: Tuple[str, ...]
    probe_layers: Tuple[LayerId, ...]
    network: ProbedNetwork = field(repr=False)
    arch: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.class_names = tuple(self.class_names)
        self.probe_layers = tuple(self.probe_layers)
        if not self.probe_layers:
            raise ValueError("probe_layers must be non-empty")
        if len(set(self.probe_layers)) != len(self.probe_layers):
            raise ValueError("probe_layers must be unique")
        unknown = [l for l in self.probe_layers if l not in self.network.probe_names]
        if unknown:
            raise UnknownLayerError(f"unknown probe layer(s) {unknown}")
        self.network.eval()

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.network.parameters()).dtype

    def class_index(self, target: Union[int, str]) -> int:
        if isinstance(target, str) and not target.lstrip("-").isdigit():
            if target not in self.class_names:
                raise ValueError(f"unknown class {target!r}; known: {list(self.class_names)}")
            return self.class_names.index(target)
        idx = int(target)
        if not 0 <= idx < self.num_classes:
            raise ValueError(f"class index {idx} out of range [0, {self.num_classes})")
        return idx

    def with_dtype(self, dtype: torch.dtype) -> "ModelHandle":
        """Copy of the handle whose network computes in ``dtype``."""
        return replace(self, network=copy.deepcopy(self.network).to(dtype))

    def check_layers(self, layers: Iterable[LayerId]) -> List[LayerId]:
        layers = list(layers)
        for layer in layers:
            if layer not in self.probe_layers:
                raise UnknownLayerError(f"unknown probe layer {layer!r}; known: {list(self.probe_layers)}")
        return layers


# ---------------------------------------------------------------------------
# Adapter operations
# ---------------------------------------------------------------------------


def _to_input(model: ModelHandle, clips: Sequence[VideoClip]) -> torch.Tensor:
    arrays = []
    for clip in clips:
        if tuple(clip.shape) != model.input_shape:
            raise ValueError(
                f"shape mismatch: clip {clip.clip_id!r} is {tuple(clip.shape)}, model expects {model.input_shape}"
            )
        arrays.append(clip.frames)
    batch = torch.from_numpy(np.stack(arrays)).to(model.dtype)
    return batch.permute(0, 4, 1, 2, 3).contiguous()


def _channels_last(t: torch.Tensor) -> np.ndarray:
    return t.detach().permute(0, 2, 3, 4, 1).contiguous().cpu().numpy()


def _channels_first(a, dtype) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a)).to(dtype).permute(0, 4, 1, 2, 3).contiguous()


def _check_finite(t: torch.Tensor, what: str) -> None:
    if not torch.isfinite(t).all():
        raise FloatingPointError(f"non-finite {what}")


def _batches(items: Sequence, size: int):
    for i in range(0, len(items), size):
        yield items[i : i + size]


def forward_logits(model: ModelHandle, clips: Sequence[VideoClip], batch_size: int = 64) -> np.ndarray:
    """Pre-softmax logits, one row per clip."""
    if isinstance(clips, VideoClip):
        clips = [clips]
    out = []
    with torch.no_grad():
        for chunk in _batches(list(clips), batch_size):
            logits = model.network(_to_input(model, chunk))
            _check_finite(logits, "logits")
            out.append(logits.cpu().numpy())
    if not out:
        return np.zeros((0, model.num_classes), dtype=np.float32)
    return np.concatenate(out)


def capture_batch(
    model: ModelHandle, clips: Sequence[VideoClip], layers: Sequence[LayerId], batch_size: int = 64
) -> Dict[LayerId, np.ndarray]:
    """Raw channels-last activations for many clips: ``layer -> (N, T', H', W', C)``."""
    layers = model.check_layers(layers)
    if not layers:
        return {}
    parts: Dict[LayerId, list] = {l: [] for l in layers}
    with torch.no_grad():
        for chunk in _batches(list(clips), batch_size):
            _, probes = model.network.forward_with_probes(_to_input(model, chunk), layers)
            for layer in layers:
                _check_finite(probes[layer], f"activation at {layer}")
                parts[layer].append(_channels_last(probes[layer]))
    return {l: np.concatenate(p) for l, p in parts.items()}


def capture_activations(model: ModelHandle, clip: VideoClip, layers: Sequence[LayerId]) -> Dict[LayerId, np.ndarray]:
    """Raw (pre-pooling) activations of one clip at each requested layer."""
    return {l: a[0] for l, a in capture_batch(model, [clip], layers).items()}


def activations_and_gradients(
    model: ModelHandle, clips: Sequence[VideoClip], layer: LayerId, class_index: int, batch_size: int = 32
) -> Tuple[np.ndarray, np.ndarray]:
    """Activations and d logit_k / d activation for a batch of clips at one layer.

    Samples are independent, so the gradient of the summed class logit gives
    every per-sample gradient in one backward pass.
    """
    model.check_layers([layer])
    class_index = model.class_index(class_index)
    acts, grads = [], []
    for chunk in _batches(list(clips), batch_size):
        with torch.no_grad():
            _, probes = model.network.forward_with_probes(_to_input(model, chunk), [layer])
        a = probes[layer].detach().requires_grad_(True)
        with torch.enable_grad():
            logits = model.network.forward_from(layer, a)
            (g,) = torch.autograd.grad(logits[:, class_index].sum(), a)
        _check_finite(g, f"gradient at {layer}")
        acts.append(_channels_last(a))
        grads.append(_channels_last(g))
    return np.concatenate(acts), np.concatenate(grads)


def gradient_wrt_activation(model: ModelHandle, clip: VideoClip, layer: LayerId, class_index: int) -> np.ndarray:
    """d logit_k / d activation at ``layer`` for one clip, channels-last."""
    return activations_and_gradients(model, [clip], layer, class_index)[1][0]


def forward_from_activation(model: ModelHandle, layer: LayerId, activation) -> np.ndarray:
    """Logits from running the network tail on an injected activation.

    Accepts one channels-last activation (returns a logit vector) or a batch
    of them (returns a matrix).
    """
    model.check_layers([layer])
    expected = reference_shape(model, layer)
    arr = np.asarray(activation)
    single = arr.shape == expected
    if single:
        arr = arr[None]
    if arr.shape[1:] != expected:
        raise ValueError(f"shape mismatch: activation {np.asarray(activation).shape}, layer {layer!r} expects {expected}")
    with torch.no_grad():
        logits = model.network.forward_from(layer, _channels_first(arr, model.dtype))
    _check_finite(logits, "logits")
    out = logits.cpu().numpy()
    return out[0] if single else out


def reference_shape(model: ModelHandle, layer: LayerId) -> Tuple[int, ...]:
    """Channels-last raw activation shape of ``layer`` for the model's input shape."""
    cache = model.arch.setdefault("_probe_shapes", {})
    if layer not in cache:
        probe = VideoClip("shape-probe", np.zeros(model.input_shape, np.float32))
        cache[layer] = tuple(capture_activations(model, probe, [layer])[layer].shape)
    return tuple(cache[layer])


# ---------------------------------------------------------------------------
# Reference model: build, train, persist
# ---------------------------------------------------------------------------


def _weights_digest(network: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in network.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().to(torch.float32).numpy().tobytes())
    return h.hexdigest()[:12]


def build_reference_model(
    seed: int = 0,
    input_shape: Tuple[int, int, int, int] = (16, 32, 32, 3),
    class_names: Sequence[str] = ("left", "right"),
    channels: Sequence[int] = (8, 16, 32),
    pools: Sequence[Sequence[int]] = DEFAULT_POOLS,
    activation: str = DEFAULT_ACTIVATION,
    downsample: str = DEFAULT_DOWNSAMPLE,
    zero_head: bool = False,
) -> ModelHandle:
    gen_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        net = ReferenceVideoNet(
            num_classes=len(class_names),
            channels=channels,
            in_channels=input_shape[3],
            pools=pools,
            activation=activation,
            downsample=downsample,
        )
    finally:
        torch.random.set_rng_state(gen_state)
    if zero_head:
        nn.init.zeros_(net.head.weight)
        nn.init.zeros_(net.head.bias)
    arch = {
        "kind": "reference",
        "channels": list(channels),
        "pools": [list(p) for p in pools],
        "activation": activation,
        "downsample": downsample,
        "input_shape": list(input_shape),
        "class_names": list(class_names),
        "seed": seed,
    }
    return ModelHandle(
        model_id=f"reference-{_weights_digest(net)}",
        input_shape=input_shape,
        class_names=tuple(class_names),
        probe_layers=ReferenceVideoNet.probe_names,
        network=net,
        arch=arch,
    )


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainReport:
    test_accuracy: float
    losses: List[float]
    epochs: int


def _split_items(corpus) -> Tuple[list, list]:
    items = corpus.items if hasattr(corpus, "items") else corpus
    train, test = [], []
    for it in items:
        clip, label, split = (it.clip, it.label, it.split) if hasattr(it, "clip") else it
        (train if split == "train" else test).append((clip, int(label)))
    return train, test


def accuracy(model: ModelHandle, labelled: Sequence[Tuple[VideoClip, int]]) -> float:
    if not labelled:
        return float("nan")
    logits = forward_logits(model, [c for c, _ in labelled])
    labels = np.array([l for _, l in labelled])
    return float(np.mean(logits.argmax(axis=1) == labels))


def train_reference_model(
    model: ModelHandle,
    corpus,
    epochs: int = 6,
    lr: float = 3e-3,
    seed: int = 0,
    batch_size: int = 32,
    weight_decay: float = 1e-3,
) -> Tuple[ModelHandle, TrainReport]:
    """Adam on cross-entropy over the ``train`` split; returns a new handle.

    Accuracy is measured on the ``test`` split. A non-finite loss raises
    :class:`DivergenceError`.
    """
    train, test = _split_items(corpus)
    for clip, label in train + test:
        if not 0 <= label < model.num_classes:
            raise ValueError(f"label {label} of clip {clip.clip_id!r} outside class range")
    net = copy.deepcopy(model.network)
    trained = replace(model, network=net, arch=dict(model.arch))
    trained.arch.pop("_probe_shapes", None)
    losses: List[float] = []
    if epochs > 0:
        if not train:
            raise ValueError("corpus has no train split")
        x_all = _to_input(model, [c for c, _ in train])
        y_all = torch.tensor([l for _, l in train])
        gen = torch.Generator().manual_seed(seed)
        opt = torch.optim.Adam(net.parameters(), lr=lr, weight_decay=weight_decay)
        net.train()
        for epoch in range(epochs):
            order = torch.randperm(len(train), generator=gen)
            total = 0.0
            for i in range(0, len(train), batch_size):
                idx = order[i : i + batch_size]
                opt.zero_grad()
                loss = F.cross_entropy(net(x_all[idx]), y_all[idx])
                if not torch.isfinite(loss):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {i // batch_size}")
                loss.backward()
                opt.step()
                total += float(loss.detach()) * len(idx)
            losses.append(total / len(train))
            log.info("epoch %d loss %.5f", epoch, losses[-1])
        net.eval()
        for p in net.parameters():
            if not torch.isfinite(p).all():
                raise DivergenceError("non-finite weights after training")
        trained.model_id = f"reference-{_weights_digest(net)}"
    trained.arch["train"] = {"epochs": epochs, "lr": lr, "seed": seed, "batch_size": batch_size}
    return trained, TrainReport(accuracy(trained, test), losses, epochs)


def save_model(model: ModelHandle, directory: PathLike) -> None:
    """Weights as a tensor container plus a JSON architecture sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().to(torch.float32).numpy() for k, v in model.network.state_dict().items()}
    write_tensor_container(directory / "weights.vtc", state)
    arch = {k: v for k, v in model.arch.items() if not k.startswith("_")}
    arch.update(
        model_id=model.model_id,
        input_shape=list(model.input_shape),
        class_names=list(model.class_names),
        probe_layers=list(model.probe_layers),
    )
    (directory / "arch.json").write_text(json.dumps(arch, indent=2, sort_keys=True) + "\n")


def load_model(directory: PathLike) -> ModelHandle:
    directory = Path(directory)
    arch = json.loads((directory / "arch.json").read_text())
    if arch.get("kind") != "reference":
        raise ValueError(f"{directory}: unsupported model kind {arch.get('kind')!r}")
    handle = build_reference_model(
        seed=int(arch.get("seed", 0)),
        input_shape=tuple(arch["input_shape"]),
        class_names=arch["class_names"],
        channels=arch["channels"],
        pools=arch.get("pools", DEFAULT_POOLS),
        activation=arch.get("activation", DEFAULT_ACTIVATION),
        downsample=arch.get("downsample", DEFAULT_DOWNSAMPLE),
    )
    state = {k: torch.from_numpy(v) for k, v in read_tensor_container(directory / "weights.vtc").items()}
    handle.network.load_state_dict(state)
    handle.network.eval()
    handle.model_id = arch["model_id"]
    handle.arch = {k: v for k, v in arch.items() if k not in ("model_id", "probe_layers")}
    return handle
