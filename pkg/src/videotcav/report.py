"""Result-table parsing and plots: per-layer score bars and a significance chart."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Dict, List, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .experiment import NULL_CONCEPT, RESULT_COLUMNS  # noqa: E402

# fixed SVG ids and no timestamps keep reruns byte-identical
matplotlib.rcParams["svg.hashsalt"] = "videotcav"
_METADATA = {"svg": {"Date": None}, "png": {"Software": None}}


def read_results_csv(path: Union[str, Path]) -> List[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in RESULT_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: results CSV lacks columns {missing}")
        return list(reader)


def _float(text: str) -> float:
    return float(text) if text not in ("", None) else float("nan")


def _per_set(row: dict) -> List[float]:
    return [float(v) for v in row["per_set_scores"].split(";")] if row["per_set_scores"] else []


def _layers(rows: Sequence[dict]) -> List[str]:
    seen: Dict[str, None] = {}
    for r in rows:
        seen.setdefault(r["layer"], None)
    return list(seen)


def _save(fig, path: Path, fmt: str) -> Path:
    path = path.with_suffix("." + fmt)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format=fmt, metadata=_METADATA[fmt])
    plt.close(fig)
    return path


def plot_layer_scores(rows: Sequence[dict], layer: str, path: Path, fmt: str = "svg") -> Path:
    """Grouped bars per concept: relative score and mean random-set score (with spread)."""
    rows = [r for r in rows if r["layer"] == layer and r["concept"] != NULL_CONCEPT]
    names = [r["concept"] for r in rows]
    x = np.arange(len(rows))
    rel = [_float(r["relative_score"]) for r in rows]
    rnd = [_float(r["random_set_score"]) for r in rows]
    spread = [np.std(_per_set(r)) if _per_set(r) else 0.0 for r in rows]
    has_rel = not all(np.isnan(rel))
    has_rnd = not all(np.isnan(rnd))
    width = 0.38 if has_rel and has_rnd else 0.6
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(rows) + 2), 3.6))
    if has_rel:
        ax.bar(x - (width / 2 if has_rnd else 0), np.nan_to_num(rel), width, label="relative TCAV", color="#3b6ea8")
    if has_rnd:
        ax.bar(
            x + (width / 2 if has_rel else 0), np.nan_to_num(rnd), width, yerr=spread,
            capsize=3, label="mean over random sets", color="#d08a2c",
        )
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("TCAV score")
    cls = rows[0]["class"] if rows else ""
    ax.set_title(f"{layer}: class {cls}")
    ax.axhline(0.5, color="grey", lw=0.6, ls=":")
    ax.legend(fontsize=7, loc="upper right")
    fig.tight_layout()
    return _save(fig, path, fmt)


def plot_significance(rows: Sequence[dict], path: Path, fmt: str = "svg") -> Path:
    """Per-layer strip plot of random-set scores with the null and p-values."""
    layers = _layers(rows)
    fig, axes = plt.subplots(1, len(layers), figsize=(4.2 * len(layers), 3.8), squeeze=False)
    for ax, layer in zip(axes[0], layers):
        lrows = [r for r in rows if r["layer"] == layer and _per_set(r)]
        for i, r in enumerate(lrows):
            scores = _per_set(r)
            jitter = np.linspace(-0.15, 0.15, len(scores))
            null = r["concept"] == NULL_CONCEPT
            ax.scatter(i + jitter, scores, s=12, color="grey" if null else "#3b6ea8")
            ax.hlines(np.mean(scores), i - 0.25, i + 0.25, color="black", lw=1)
            if r["p_value"]:
                star = "*" if r["significant"] == "true" else ""
                ax.text(i, 1.04, f"p={float(r['p_value']):.2g}{star}", ha="center", fontsize=7)
        ax.set_xticks(range(len(lrows)))
        ax.set_xticklabels([r["concept"] for r in lrows], rotation=20, ha="right", fontsize=8)
        ax.set_ylim(-0.02, 1.12)
        alpha = next((r["corrected_alpha"] for r in lrows if r["corrected_alpha"]), "")
        ax.set_title(f"{layer} (corrected alpha {float(alpha):.3g})" if alpha else layer, fontsize=9)
        ax.set_ylabel("score per random set")
    fig.tight_layout()
    return _save(fig, path, fmt)


def write_report(rows: Sequence[dict], directory: Union[str, Path], fmt: str = "svg") -> List[Path]:
    if fmt not in _METADATA:
        raise ValueError(f"unsupported plot format {fmt!r}")
    directory = Path(directory)
    out = [plot_layer_scores(rows, layer, directory / f"scores_{layer}", fmt) for layer in _layers(rows)]
    if any(_per_set(r) for r in rows):
        out.append(plot_significance(rows, directory / "significance", fmt))
    return out
