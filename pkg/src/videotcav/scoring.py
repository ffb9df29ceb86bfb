"""Conceptual sensitivity, sign-count TCAV scores and significance testing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .cav import CAV, DEFAULT_L2, train_cav
from .core_types import ActivationRecord, LayerId


@dataclass
class TCAVResult:
    concept: str
    layer: LayerId
    class_index: int
    score: float
    per_random_set_scores: List[float] = field(default_factory=list)
    p_value: Optional[float] = None
    corrected_alpha: Optional[float] = None
    significant: Optional[bool] = None
    n_inputs: int = 0
    cav_accuracy: Optional[float] = None


def conceptual_sensitivity(gradient, cav: CAV) -> float:
    """Directional derivative of the class logit along the CAV."""
    g = np.asarray(gradient, dtype=np.float64).reshape(-1)
    if g.size != cav.dim:
        raise ValueError(f"dimension mismatch: gradient {g.size} vs CAV {cav.dim}")
    return float(g @ cav.vector.astype(np.float64))


def sign_count_score(sensitivities: Sequence[float]) -> float:
    """Fraction of strictly positive sensitivities (zeros count as non-positive)."""
    s = np.asarray(sensitivities, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise ValueError("sign_count_score of an empty list")
    if not np.isfinite(s).all():
        raise ValueError("non-finite sensitivity")
    return float(np.count_nonzero(s > 0) / s.size)


def _gradient_matrix(records: Sequence[ActivationRecord], layer: Optional[LayerId] = None) -> np.ndarray:
    if not records:
        raise ValueError("no input records")
    grads = []
    for rec in records:
        if rec.gradient is None:
            raise ValueError(f"record {rec.clip_id!r} carries no gradient")
        if layer is not None and rec.layer != layer:
            raise ValueError(f"layer mismatch: record {rec.clip_id!r} is at {rec.layer!r}, CAV at {layer!r}")
        grads.append(rec.gradient)
    dims = {g.size for g in grads}
    if len(dims) != 1:
        raise ValueError(f"records disagree on gradient dimension: {sorted(dims)}")
    return np.asarray(grads, dtype=np.float64)


def _scores_for(cav: CAV, grads: np.ndarray) -> float:
    if grads.shape[1] != cav.dim:
        raise ValueError(f"dimension mismatch: gradients {grads.shape[1]} vs CAV {cav.dim}")
    return sign_count_score(grads @ cav.vector.astype(np.float64))


def relative_tcav(group_cavs: Mapping[str, CAV], input_records: Sequence[ActivationRecord]) -> Dict[str, TCAVResult]:
    layers = {cav.layer for cav in group_cavs.values()}
    if len(layers) != 1:
        raise ValueError(f"group CAVs span several layers: {sorted(layers)}")
    (layer,) = layers
    grads = _gradient_matrix(input_records, layer)
    class_index = input_records[0].class_index
    if any(r.class_index != class_index for r in input_records):
        raise ValueError("input records disagree on target class")
    return {
        name: TCAVResult(
            concept=name,
            layer=layer,
            class_index=class_index,
            score=_scores_for(cav, grads),
            n_inputs=len(input_records),
            cav_accuracy=cav.heldout_accuracy,
        )
        for name, cav in group_cavs.items()
    }


def tcav_with_random_sets(
    concept_vectors: Sequence,
    random_sets: Sequence[Sequence],
    input_records: Sequence[ActivationRecord],
    l2: float = DEFAULT_L2,
    seed: int = 0,
    concept: str = "concept",
    random_set_names: Optional[Sequence[str]] = None,
) -> TCAVResult:
    """Score a concept against each random control set in turn."""
    if len(random_sets) < 2:
        raise ValueError("need at least 2 random sets")
    layer = input_records[0].layer if input_records else ""
    grads = _gradient_matrix(input_records, layer)
    names = list(random_set_names) if random_set_names else [f"random_{i}" for i in range(len(random_sets))]
    scores, accs = [], []
    for name, negatives in zip(names, random_sets):
        cav = train_cav(concept_vectors, negatives, l2=l2, seed=seed, concept=concept, layer=layer, negatives_descriptor=name)
        scores.append(_scores_for(cav, grads))
        accs.append(cav.heldout_accuracy)
    return TCAVResult(
        concept=concept,
        layer=layer,
        class_index=input_records[0].class_index,
        score=float(np.mean(scores)),
        per_random_set_scores=scores,
        n_inputs=len(input_records),
        cav_accuracy=float(np.mean(accs)),
    )


def tcav_random_pairs(
    pairs: Sequence[Tuple[Sequence, Sequence]],
    input_records: Sequence[ActivationRecord],
    l2: float = DEFAULT_L2,
    seed: int = 0,
    concept: str = "random",
    pair_names: Optional[Sequence[str]] = None,
) -> TCAVResult:
    """Scores of random-vs-random CAVs, one per (random set, control set) pair.

    Every pair uses a fresh random set, so the scores are exchangeable draws
    from the null distribution of a concept-free CAV.
    """
    if len(pairs) < 2:
        raise ValueError("need at least 2 random pairs")
    layer = input_records[0].layer if input_records else ""
    grads = _gradient_matrix(input_records, layer)
    names = list(pair_names) if pair_names else [f"pair_{i}" for i in range(len(pairs))]
    scores, accs = [], []
    for name, (positives, negatives) in zip(names, pairs):
        cav = train_cav(positives, negatives, l2=l2, seed=seed, concept=concept, layer=layer, negatives_descriptor=name)
        scores.append(_scores_for(cav, grads))
        accs.append(cav.heldout_accuracy)
    return TCAVResult(
        concept=concept,
        layer=layer,
        class_index=input_records[0].class_index,
        score=float(np.mean(scores)),
        per_random_set_scores=scores,
        n_inputs=len(input_records),
        cav_accuracy=float(np.mean(accs)),
    )


def welch_t(a: Sequence[float], b: Sequence[float]) -> Tuple[float, float, float]:
    """Welch statistic, Welch-Satterthwaite dof and two-sided p-value.

    Zero variance in both samples gives ``p = 1`` for equal means and
    ``p = 0`` otherwise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least 2 values")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0.0:
        return (0.0, math.inf, 1.0) if diff == 0.0 else (math.copysign(math.inf, diff), math.inf, 0.0)
    t = diff / math.sqrt(se2)
    dof = se2**2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    p = float(2.0 * stats.t.sf(abs(t), dof))
    return float(t), float(dof), min(p, 1.0)


def significance_test(
    concept_scores: Sequence[float],
    null_scores: Sequence[float],
    n_hypotheses: int = 1,
    alpha: float = 0.05,
) -> Tuple[float, float, bool]:
    """Two-sided Welch t-test against the null scores, Bonferroni-corrected.

    Returns ``(p_value, corrected_alpha, significant)``.
    """
    if n_hypotheses < 1:
        raise ValueError("n_hypotheses must be >= 1")
    if not 0 < alpha < 1:
        raise ValueError("alpha must be in (0, 1)")
    _, _, p = welch_t(concept_scores, null_scores)
    corrected = alpha / n_hypotheses
    return p, corrected, bool(p < corrected)
