"""Concept Activation Vectors.

A CAV is the unit normal of an L2-regularised logistic separator between a
concept's pooled activations and a set of negatives. The separator is fit
with damped Newton iterations in the row space of the training matrix: the
penalised optimum always lies there, so a thin SVD reduces a
``(n, D)`` problem with ``D >> n`` to at most ``n + 1`` unknowns without
changing the solution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, Sequence

import numpy as np

from .core_types import LayerId

POOLING_MODES = ("flatten", "spatial_mean")
DEFAULT_L2 = 1e-3
WEAK_ACCURACY = 0.6


class DegenerateDataError(ValueError):
    pass


@dataclass(frozen=True)
class CAV:
    concept: str
    layer: LayerId
    vector: np.ndarray
    heldout_accuracy: float
    negatives_descriptor: str
    trainer_seed: int
    # decision rule: x is on the concept side iff x . vector > threshold
    threshold: float = 0.0
    converged: bool = True
    iterations: int = 0

    @property
    def dim(self) -> int:
        return int(self.vector.size)

    @property
    def weak(self) -> bool:
        return self.heldout_accuracy < WEAK_ACCURACY

    def flipped(self) -> "CAV":
        return CAV(
            concept=self.concept,
            layer=self.layer,
            vector=-self.vector,
            heldout_accuracy=1.0 - self.heldout_accuracy,
            negatives_descriptor=self.negatives_descriptor,
            trainer_seed=self.trainer_seed,
            threshold=-self.threshold,
            converged=self.converged,
            iterations=self.iterations,
        )


def pool_activation(raw, mode: str = "flatten") -> np.ndarray:
    """Turn a channels-last activation tensor into a vector.

    ``flatten`` is row-major flattening; ``spatial_mean`` averages over every
    leading (spatiotemporal) axis and keeps the trailing channel axis.
    """
    raw = np.asarray(raw, dtype=np.float32)
    if mode == "flatten":
        return raw.reshape(-1)
    if mode == "spatial_mean":
        if raw.ndim <= 1:
            return raw.reshape(-1)
        return raw.reshape(-1, raw.shape[-1]).mean(axis=0, dtype=np.float64).astype(np.float32)
    raise ValueError(f"unknown pooling mode {mode!r}; expected one of {POOLING_MODES}")


def pool_gradient(raw_grad, mode: str = "flatten") -> np.ndarray:
    """Logit-gradient with respect to the pooled activation.

    For ``spatial_mean`` the pooled coordinate is moved by adding the same
    offset at every position, so its derivative is the positional *sum* of
    the raw gradient.
    """
    raw_grad = np.asarray(raw_grad, dtype=np.float32)
    if mode == "flatten":
        return raw_grad.reshape(-1)
    if mode == "spatial_mean":
        if raw_grad.ndim <= 1:
            return raw_grad.reshape(-1)
        return (
            raw_grad.reshape(-1, raw_grad.shape[-1]).sum(axis=0, dtype=np.float64).astype(np.float32)
        )
    raise ValueError(f"unknown pooling mode {mode!r}; expected one of {POOLING_MODES}")


def _stack(vectors, side: str) -> np.ndarray:
    arr = np.asarray([np.asarray(v, dtype=np.float64).reshape(-1) for v in vectors])
    if arr.ndim != 2:
        raise ValueError(f"{side} vectors have inconsistent dimensions")
    return arr


def _is_degenerate(pos: np.ndarray, neg: np.ndarray) -> bool:
    # Both sides spanned by exactly the same set of points: no separator means anything.
    return {r.tobytes() for r in pos} == {r.tobytes() for r in neg}


def fit_logistic(X: np.ndarray, y: np.ndarray, l2: float, tol: float = 1e-5, max_iter: int = 5000):
    """Minimise ``mean(log(1 + exp(-s * (X w + b)))) + l2/2 |w|^2``.

    Returns ``(w, b, iterations, converged)``. ``tol`` bounds the Euclidean
    norm of the full-space gradient (w and b together).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    if l2 <= 0:
        raise ValueError("l2 must be positive")
    U, S, Vt = np.linalg.svd(X, full_matrices=False)
    keep = S > S.max() * max(n, d) * np.finfo(np.float64).eps if S.size else S > 0
    Z = U[:, keep] * S[keep]
    Vt = Vt[keep]
    r = Z.shape[1]
    A = np.hstack([Z, np.ones((n, 1))])
    reg = np.full(r + 1, l2)
    reg[-1] = 0.0
    theta = np.zeros(r + 1)

    def objective(th):
        z = A @ th
        margin = np.where(y > 0.5, z, -z)
        return np.logaddexp(0.0, -margin).mean() + 0.5 * l2 * th[:r] @ th[:r]

    converged = False
    it = 0
    f = objective(theta)
    for it in range(1, max_iter + 1):
        p = 0.5 * (1.0 + np.tanh(0.5 * (A @ theta)))
        grad = A.T @ (p - y) / n + reg * theta
        if np.linalg.norm(grad) < tol:
            converged = True
            it -= 1
            break
        hess = (A * (p * (1 - p))[:, None]).T @ A / n + np.diag(reg)
        hess[np.diag_indices_from(hess)] += 1e-12
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        t = 1.0
        slope = grad @ step
        while True:
            candidate = theta - t * step
            fc = objective(candidate)
            if fc <= f - 1e-4 * t * slope or t < 1e-10:
                break
            t *= 0.5
        if fc > f:  # no descent possible at working precision
            converged = np.linalg.norm(grad) < tol * 10
            break
        theta, f = candidate, fc
    w = Vt.T @ theta[:r]
    return w, float(theta[-1]), it, converged


def _split(n_pos: int, n_neg: int, rng: np.random.Generator, test_frac: float = 0.2):
    """Seeded stratified split; every side keeps at least one training point."""
    train, test = [], []
    for offset, count in ((0, n_pos), (n_pos, n_neg)):
        idx = offset + rng.permutation(count)
        n_test = int(round(test_frac * count))
        n_test = min(max(n_test, 1), count - 1)
        test.extend(idx[:n_test])
        train.extend(idx[n_test:])
    return np.sort(np.array(train)), np.sort(np.array(test))


def train_cav(
    positives: Sequence,
    negatives: Sequence,
    l2: float = DEFAULT_L2,
    seed: int = 0,
    concept: str = "concept",
    layer: LayerId = "",
    negatives_descriptor: str = "negatives",
    max_iter: int = 5000,
) -> CAV:
    pos = _stack(positives, "positive")
    neg = _stack(negatives, "negative")
    if len(pos) < 2 or len(neg) < 2:
        raise ValueError("train_cav needs at least 2 vectors per side")
    if pos.shape[1] != neg.shape[1]:
        raise ValueError(f"dimension mismatch: positives {pos.shape[1]} vs negatives {neg.shape[1]}")
    if _is_degenerate(pos, neg):
        raise DegenerateDataError("inseparable degenerate data")

    X = np.vstack([pos, neg])
    y = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    rng = np.random.default_rng(seed)
    train_idx, test_idx = _split(len(pos), len(neg), rng)
    w, b, iters, converged = fit_logistic(X[train_idx], y[train_idx], l2, max_iter=max_iter)
    norm = np.linalg.norm(w)
    if not np.isfinite(norm) or norm == 0.0:
        raise DegenerateDataError("inseparable degenerate data")
    vector = w / norm
    threshold = -b / norm
    accuracy = float(np.mean(((X[test_idx] @ vector) > threshold) == (y[test_idx] > 0.5)))

    cav = CAV(
        concept=concept,
        layer=layer,
        vector=vector.astype(np.float32),
        heldout_accuracy=accuracy,
        negatives_descriptor=negatives_descriptor,
        trainer_seed=seed,
        threshold=float(threshold),
        converged=converged,
        iterations=iters,
    )
    # orientation: concept points project further along the CAV than negatives
    if (pos @ vector).mean() <= (neg @ vector).mean():
        cav = cav.flipped()
    cav.vector.setflags(write=False)
    return cav


def train_relative_cavs(
    group: Mapping[str, Sequence],
    l2: float = DEFAULT_L2,
    seed: int = 0,
    layer: LayerId = "",
) -> Dict[str, CAV]:
    """One-vs-rest CAV for every concept of the group."""
    if len(group) < 2:
        raise ValueError("relative CAVs need a group of at least 2 concepts")
    names = list(group)
    stacked = {name: _stack(group[name], name) for name in names}
    dims = {arr.shape[1] for arr in stacked.values()}
    if len(dims) != 1:
        raise ValueError(f"dimension mismatch within group: {sorted(dims)}")
    out = {}
    for name in names:
        rest = np.vstack([stacked[other] for other in names if other != name])
        out[name] = train_cav(
            stacked[name],
            rest,
            l2=l2,
            seed=seed,
            concept=name,
            layer=layer,
            negatives_descriptor="rest-of-group",
        )
    return out


def cav_validation_accuracy(cav: CAV, positives: Sequence, negatives: Sequence) -> float:
    pos = _stack(positives, "positive")
    neg = _stack(negatives, "negative")
    for arr in (pos, neg):
        if arr.shape[1] != cav.dim:
            raise ValueError(f"dimension mismatch: vectors {arr.shape[1]} vs CAV {cav.dim}")
    v = cav.vector.astype(np.float64)
    correct = np.sum(pos @ v > cav.threshold) + np.sum(neg @ v <= cav.threshold)
    return float(correct / (len(pos) + len(neg)))
