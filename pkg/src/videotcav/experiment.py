"""Config-driven TCAV experiments with an on-disk activation cache.

A run loads a trained model, samples input clips of the target class,
captures pooled activations (and logit-gradients for the inputs) at each
requested layer, trains CAVs and writes a result table plus a report bundle.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .cav import DEFAULT_L2, POOLING_MODES, pool_activation, pool_gradient, train_relative_cavs
from .concepts import read_concept_manifest, sample_random_sets
from .core_types import (
    ActivationRecord,
    ConceptKind,
    ContainerError,
    LayerId,
    VideoClip,
    load_corpus,
    read_tensor_container,
    write_tensor_container,
)
from .models import ModelHandle, UnknownLayerError, activations_and_gradients, capture_batch, load_model
from .scoring import relative_tcav, significance_test, tcav_random_pairs, tcav_with_random_sets

log = logging.getLogger(__name__)

VARIANTS = ("relative", "random_sets", "both")
RANDOM_CONCEPT = "random"
NULL_CONCEPT = "random_null"
CACHE_ENV = "VIDEOTCAV_CACHE"

RESULT_COLUMNS = (
    "concept",
    "kind",
    "layer",
    "class",
    "class_index",
    "score",
    "relative_score",
    "random_set_score",
    "per_set_scores",
    "p_value",
    "corrected_alpha",
    "significant",
    "cav_accuracy",
    "pooling_mode",
    "seeds",
)


class ConfigError(ValueError):
    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("invalid experiment config:\n  - " + "\n  - ".join(self.problems))


class ExperimentError(RuntimeError):
    pass


@dataclass
class Seeds:
    data: int
    cav: int
    sampling: int


@dataclass
class ExperimentConfig:
    model: str
    corpus: str
    concepts: str
    layers: List[LayerId]
    target_class: Union[int, str]
    seeds: Seeds
    out_dir: str = "results"
    random_pool: Optional[str] = None
    concept_names: Optional[List[str]] = None
    variant: str = "both"
    n_inputs: int = 30
    input_split: str = "test"
    n_random_sets: int = 10
    random_set_size: int = 30
    alpha: float = 0.05
    pooling: str = "flatten"
    l2: float = DEFAULT_L2
    cache_dir: Optional[str] = None
    sweep_cav_seeds: List[int] = field(default_factory=list)
    plot_format: str = "svg"

    PATH_KEYS = ("model", "corpus", "concepts", "random_pool", "out_dir", "cache_dir")

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Optional[Union[str, Path]] = None) -> "ExperimentConfig":
        """Build a config, collecting every structural problem before raising.

        Relative paths are resolved against ``base_dir`` when given.
        """
        problems = []
        known = {f.name for f in fields(cls)}
        for key in sorted(set(raw) - known):
            problems.append(f"unknown key {key!r}")
        required = [f.name for f in fields(cls) if f.default is MISSING and f.default_factory is MISSING]
        for key in required:
            if raw.get(key) is None:
                problems.append(f"missing required key {key!r}")
        seeds = raw.get("seeds")
        if seeds is not None:
            if not isinstance(seeds, dict):
                problems.append("seeds must be an object with data, cav and sampling")
            else:
                for k in ("data", "cav", "sampling"):
                    v = seeds.get(k)
                    if not isinstance(v, int) or isinstance(v, bool):
                        problems.append(f"seeds.{k} must be an explicit integer")
                for k in sorted(set(seeds) - {"data", "cav", "sampling"}):
                    problems.append(f"unknown key 'seeds.{k}'")
        if problems:
            raise ConfigError(problems)
        values = {k: v for k, v in raw.items() if k in known and k != "seeds"}
        if isinstance(values.get("layers"), str):
            values["layers"] = [values["layers"]]
        cfg = cls(seeds=Seeds(**raw["seeds"]), **values)
        if base_dir is not None:
            for key in cls.PATH_KEYS:
                value = getattr(cfg, key)
                if value is not None and not Path(value).is_absolute():
                    setattr(cfg, key, str(Path(base_dir) / value))
        return cfg

    @classmethod
    def load(cls, path: Union[str, Path], overrides: Optional[dict] = None) -> "ExperimentConfig":
        raw = json.loads(Path(path).read_text())
        if not isinstance(raw, dict):
            raise ConfigError([f"{path}: config must be a JSON object"])
        raw = merge_overrides(raw, overrides or {})
        return cls.from_dict(raw, base_dir=Path(path).parent)

    def to_dict(self) -> dict:
        return asdict(self)

    def resolved_cache_dir(self) -> Optional[str]:
        return os.environ.get(CACHE_ENV) or self.cache_dir

    def validate(self) -> List[str]:
        problems = []
        for key in ("model", "corpus", "concepts", "random_pool"):
            value = getattr(self, key)
            if value is not None and not Path(value).exists():
                problems.append(f"{key}: path does not exist: {value}")
        if not self.layers or not all(isinstance(l, str) and l for l in self.layers):
            problems.append("layers must be a non-empty list of layer names")
        elif len(set(self.layers)) != len(self.layers):
            problems.append("layers contain duplicates")
        if self.variant not in VARIANTS:
            problems.append(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.pooling not in POOLING_MODES:
            problems.append(f"pooling must be one of {POOLING_MODES}, got {self.pooling!r}")
        if not 0.0 < float(self.alpha) < 1.0:
            problems.append(f"alpha must lie in (0, 1), got {self.alpha}")
        if not float(self.l2) > 0.0:
            problems.append(f"l2 must be positive, got {self.l2}")
        if int(self.n_inputs) < 1:
            problems.append("n_inputs must be >= 1")
        if int(self.n_random_sets) < 2:
            problems.append("n_random_sets must be >= 2")
        if int(self.random_set_size) < 2:
            problems.append("random_set_size must be >= 2")
        if self.plot_format not in ("svg", "png"):
            problems.append(f"plot_format must be 'svg' or 'png', got {self.plot_format!r}")
        if self.concept_names is not None and (RANDOM_CONCEPT in self.concept_names or NULL_CONCEPT in self.concept_names):
            problems.append(f"concept names {RANDOM_CONCEPT!r} and {NULL_CONCEPT!r} are reserved")
        return problems


def merge_overrides(raw: dict, overrides: dict) -> dict:
    """Flags override file values; ``None`` means "not given". ``seeds.x`` keys nest."""
    out = dict(raw)
    for key, value in overrides.items():
        if value is None:
            continue
        if key.startswith("seeds."):
            seeds = dict(out.get("seeds") or {})
            seeds[key.split(".", 1)[1]] = value
            out["seeds"] = seeds
        else:
            out[key] = value
    return out


# ---------------------------------------------------------------------------
# Activation cache
# ---------------------------------------------------------------------------


def clips_digest(clips: Sequence[VideoClip]) -> str:
    h = hashlib.sha256()
    for clip in clips:
        h.update(clip.clip_id.encode())
        h.update(str(clip.frames.shape).encode())
        h.update(np.ascontiguousarray(clip.frames).tobytes())
    return h.hexdigest()


class ActivationCache:
    """Pooled activation (and gradient) matrices stored as tensor containers.

    Keys cover the model id (a weight digest), the clip content, the layer,
    the pooling mode and the gradient class, so retraining or editing any
    clip invalidates stale entries.
    """

    def __init__(self, directory: Optional[Union[str, Path]], model: ModelHandle, pooling: str):
        self.directory = Path(directory) if directory else None
        self.model = model
        self.pooling = pooling
        self.hits = 0
        self.misses = 0

    def key(self, clips: Sequence[VideoClip], layer: LayerId, class_index: Optional[int]) -> str:
        parts = [self.model.model_id, clips_digest(clips), layer, self.pooling, "acts" if class_index is None else f"grad{class_index}"]
        return hashlib.sha256("|".join(parts).encode()).hexdigest()[:24]

    def get(
        self, clips: Sequence[VideoClip], layer: LayerId, class_index: Optional[int] = None
    ) -> Tuple[np.ndarray, Optional[np.ndarray], Tuple[int, ...]]:
        path = None
        if self.directory is not None:
            path = self.directory / f"{self.key(clips, layer, class_index)}.vtc"
            if path.exists():
                try:
                    entries = read_tensor_container(path)
                    acts = entries["activations"]
                    if acts.shape[0] == len(clips):
                        self.hits += 1
                        raw_shape = tuple(int(v) for v in entries["raw_shape"])
                        return acts, entries.get("gradients"), raw_shape
                except (ContainerError, KeyError, OSError) as exc:
                    log.warning("ignoring unreadable cache entry %s: %s", path, exc)
        self.misses += 1
        acts, grads, raw_shape = self._compute(clips, layer, class_index)
        if path is not None:
            entries = {"activations": acts, "raw_shape": np.array(raw_shape, np.float32)}
            if grads is not None:
                entries["gradients"] = grads
            write_tensor_container(path, entries)
        return acts, grads, raw_shape

    def _compute(self, clips, layer, class_index):
        if class_index is None:
            raw = capture_batch(self.model, clips, [layer])[layer]
            grads = None
        else:
            raw, raw_g = activations_and_gradients(self.model, clips, layer, class_index)
            grads = np.stack([pool_gradient(g, self.pooling) for g in raw_g])
        acts = np.stack([pool_activation(a, self.pooling) for a in raw])
        return acts, grads, tuple(raw.shape[1:])


# ---------------------------------------------------------------------------
# Running an experiment
# ---------------------------------------------------------------------------


@dataclass
class ExperimentResult:
    rows: List[dict]
    summary: dict
    sweep_rows: List[dict]
    out_dir: Optional[Path] = None
    artifacts: List[Path] = field(default_factory=list)


@dataclass
class _Inputs:
    model: ModelHandle
    class_index: int
    inputs: List[VideoClip]
    concept_sets: list
    random_sets: list
    pool: List[VideoClip]


def _fmt(x: Optional[float], spec: str = ".6f") -> str:
    return "" if x is None else format(float(x), spec)


def _prepare(config: ExperimentConfig) -> _Inputs:
    """Load and check every referenced artifact; raise all problems at once."""
    problems = config.validate()
    if problems:
        raise ConfigError(problems)
    model = load_model(config.model)
    try:
        model.check_layers(config.layers)
    except UnknownLayerError as exc:
        problems.append(str(exc))
    try:
        k = model.class_index(config.target_class)
    except (KeyError, ValueError, IndexError) as exc:
        problems.append(f"target_class: {exc}")
        k = None

    concept_sets = read_concept_manifest(config.concepts)
    names = [s.name for s in concept_sets]
    if config.concept_names is not None:
        for name in config.concept_names:
            if name not in names:
                problems.append(f"concept {name!r} not in concept manifest")
        wanted = list(config.concept_names)
    else:
        wanted = [s.name for s in concept_sets if s.kind != ConceptKind.RANDOM]
    if not wanted:
        problems.append("no concepts selected")
    for name in wanted:
        if name in (RANDOM_CONCEPT, NULL_CONCEPT):
            problems.append(f"concept name {name!r} is reserved")
    selected = [s for s in concept_sets if s.name in wanted]
    for s in selected:
        if tuple(s.clips[0].shape) != model.input_shape:
            problems.append(f"concept {s.name!r} clips are {s.clips[0].shape}, model expects {model.input_shape}")

    corpus = [c for c, label in load_corpus(config.corpus, split=config.input_split) if label == k]
    if len(corpus) < config.n_inputs:
        problems.append(
            f"corpus has {len(corpus)} {config.input_split!r} clips of class {config.target_class!r}, need {config.n_inputs}"
        )

    if config.random_pool is not None:
        pool = [c for c, _ in load_corpus(config.random_pool)]
    else:
        pool = [c for s in concept_sets if s.kind == ConceptKind.RANDOM for c in s.clips]
    used = {c.clip_id for c in corpus} | {c.clip_id for s in selected for c in s.clips}
    available = [c for c in pool if c.clip_id not in used]
    if len(available) < config.random_set_size:
        problems.append(f"random pool has {len(available)} usable clips, random_set_size is {config.random_set_size}")
    if problems:
        raise ConfigError(problems)

    rng = np.random.default_rng(config.seeds.data)
    corpus.sort(key=lambda c: c.clip_id)
    inputs = [corpus[i] for i in sorted(rng.choice(len(corpus), size=config.n_inputs, replace=False))]
    n = config.n_random_sets
    if len(available) < 3 * n * config.random_set_size:
        log.warning("random pool too small for %d disjoint sets; sets will overlap", 3 * n)
    sets = sample_random_sets(available, 3 * n, config.random_set_size, exclude=used, seed=config.seeds.sampling)
    names = [f"control_{i}" for i in range(n)] + [f"random_{i}" for i in range(n)] + [f"null_{i}" for i in range(n)]
    random_sets = list(zip(names, sets))
    return _Inputs(model, k, inputs, selected, random_sets, available)


def _score_layer(config, prep, cache, layer, n_hypotheses):
    k = prep.class_index
    groups: Dict[str, np.ndarray] = {}
    for s in prep.concept_sets:
        groups[s.name] = cache.get(list(s.clips), layer)[0]
    # the whole pool is embedded once, so other sampling seeds reuse the entry
    pool_acts = cache.get(prep.pool, layer)[0]
    row = {c.clip_id: i for i, c in enumerate(prep.pool)}
    for name, s in prep.random_sets:
        groups[name] = pool_acts[[row[cid] for cid in s.clip_ids]]
    in_acts, in_grads, raw_shape = cache.get(prep.inputs, layer, k)
    records = [
        ActivationRecord(c.clip_id, layer, k, a, g, raw_shape) for c, a, g in zip(prep.inputs, in_acts, in_grads)
    ]

    concepts = [s.name for s in prep.concept_sets] + [RANDOM_CONCEPT]
    kinds = {s.name: ConceptKind(s.kind).value for s in prep.concept_sets}
    kinds[RANDOM_CONCEPT] = kinds[NULL_CONCEPT] = ConceptKind.RANDOM.value
    relative, rand = {}, {}

    n = config.n_random_sets
    controls = [f"control_{i}" for i in range(n)]
    # the relative group's random member is the first random partner set
    groups[RANDOM_CONCEPT] = groups["random_0"]
    if config.variant in ("relative", "both"):
        group = {c: groups[c] for c in concepts}
        try:
            cavs = train_relative_cavs(group, l2=config.l2, seed=config.seeds.cav, layer=layer)
        except (ValueError, FloatingPointError) as exc:
            raise ExperimentError(f"relative group at layer {layer!r}: {exc}") from exc
        relative = relative_tcav(cavs, records)

    sweep = []
    for seed in config.sweep_cav_seeds if config.variant in ("relative", "both") else ():
        cavs = train_relative_cavs({c: groups[c] for c in concepts}, l2=config.l2, seed=seed, layer=layer)
        for name, res in relative_tcav(cavs, records).items():
            sweep.append({"concept": name, "layer": layer, "cav_seed": seed, "relative_score": _fmt(res.score)})

    if config.variant in ("random_sets", "both"):
        control_sets = [groups[c] for c in controls]
        for name in concepts + [NULL_CONCEPT]:
            try:
                if name == RANDOM_CONCEPT or name == NULL_CONCEPT:
                    prefix = "random" if name == RANDOM_CONCEPT else "null"
                    pairs = [(groups[f"{prefix}_{i}"], groups[c]) for i, c in enumerate(controls)]
                    rand[name] = tcav_random_pairs(
                        pairs, records, l2=config.l2, seed=config.seeds.cav, concept=name, pair_names=controls
                    )
                else:
                    rand[name] = tcav_with_random_sets(
                        groups[name], control_sets, records, l2=config.l2, seed=config.seeds.cav,
                        concept=name, random_set_names=controls,
                    )
            except (ValueError, FloatingPointError) as exc:
                raise ExperimentError(f"concept {name!r} at layer {layer!r}: {exc}") from exc
        null = rand[NULL_CONCEPT].per_random_set_scores
        for name in concepts:
            res = rand[name]
            res.p_value, res.corrected_alpha, res.significant = significance_test(
                res.per_random_set_scores, null, n_hypotheses, config.alpha
            )

    rows = []
    for name in concepts + ([NULL_CONCEPT] if rand else []):
        rel = relative.get(name)
        rs = rand.get(name)
        accs = [r.cav_accuracy for r in (rel, rs) if r is not None and r.cav_accuracy is not None]
        score = rel.score if rel is not None else rs.score
        rows.append(
            {
                "concept": name,
                "kind": kinds[name],
                "layer": layer,
                "class": prep.model.class_names[k],
                "class_index": str(k),
                "score": _fmt(score),
                "relative_score": _fmt(rel.score if rel else None),
                "random_set_score": _fmt(rs.score if rs else None),
                "per_set_scores": ";".join(_fmt(s) for s in rs.per_random_set_scores) if rs else "",
                "p_value": _fmt(rs.p_value if rs else None, ".6g"),
                "corrected_alpha": _fmt(rs.corrected_alpha if rs else None, ".6g"),
                "significant": "" if rs is None or rs.significant is None else str(bool(rs.significant)).lower(),
                "cav_accuracy": _fmt(float(np.mean(accs)) if accs else None, ".4f"),
                "pooling_mode": config.pooling,
                "seeds": f"data={config.seeds.data};cav={config.seeds.cav};sampling={config.seeds.sampling}",
            }
        )
    return rows, sweep


def results_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=RESULT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def run_experiment(config: ExperimentConfig, write: bool = True) -> ExperimentResult:
    """Run a full experiment; with ``write`` the report bundle lands in ``out_dir``."""
    prep = _prepare(config)
    cache = ActivationCache(config.resolved_cache_dir(), prep.model, config.pooling)
    n_concepts = len(prep.concept_sets) + 1
    n_hypotheses = n_concepts * len(config.layers)
    rows, sweep = [], []
    for layer in config.layers:
        log.info("scoring layer %s", layer)
        layer_rows, layer_sweep = _score_layer(config, prep, cache, layer, n_hypotheses)
        rows.extend(layer_rows)
        sweep.extend(layer_sweep)

    summary = {
        "model_id": prep.model.model_id,
        "target_class": prep.model.class_names[prep.class_index],
        "class_index": prep.class_index,
        "n_inputs": len(prep.inputs),
        "input_clip_ids": [c.clip_id for c in prep.inputs],
        "n_random_sets": config.n_random_sets,
        "random_set_size": config.random_set_size,
        "alpha": config.alpha,
        "n_hypotheses": n_hypotheses if config.variant != "relative" else None,
        "random_sets": {n: s.clip_ids for n, s in prep.random_sets},
        "concepts": {s.name: {"kind": ConceptKind(s.kind).value, "origin": s.origin, "n_clips": len(s)} for s in prep.concept_sets},
        "config": config.to_dict(),
        "results": rows,
        "cache": {"hits": cache.hits, "misses": cache.misses},
    }
    result = ExperimentResult(rows, summary, sweep)
    if write:
        from .report import write_report

        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.csv").write_text(results_to_csv(rows))
        (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
        result.artifacts = [out / "results.csv", out / "summary.json"]
        if sweep:
            buf = io.StringIO()
            w = csv.DictWriter(buf, fieldnames=["concept", "layer", "cav_seed", "relative_score"], lineterminator="\n")
            w.writeheader()
            w.writerows(sweep)
            (out / "seed_sweep.csv").write_text(buf.getvalue())
            result.artifacts.append(out / "seed_sweep.csv")
        result.artifacts.extend(write_report(rows, out / "plots", fmt=config.plot_format))
        result.out_dir = out
    return result
