"""Separation and robustness metrics plus CSV exports for figures.

AUC is the Mann-Whitney rank statistic: the probability that a random
outlier scores more outlier-like than a random in-distribution point,
ties counting one half.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .datasynth import CORRUPTION_KINDS, SEVERITIES
from .nn import MlpModel, forward, softmax
from .scores import SCORE_KINDS, _entropy_rows

ORIENTATIONS = ("higher_id", "higher_ood")
GRID_QUANTITIES = ("predicted_class", "confidence", "entropy")


def auc_roc(scores_id, scores_ood, orientation: str) -> float:
    """Rank-based AUC of OOD-vs-ID separation, in [0, 1].

    orientation says which way the raw score runs: "higher_id" for
    confidence-like scores, "higher_ood" for entropy-like scores.
    """
    if orientation not in ORIENTATIONS:
        raise ValueError(
            f"orientation must be one of {ORIENTATIONS}, got {orientation!r}"
        )
    s_id = np.asarray(scores_id, dtype=np.float64).ravel()
    s_ood = np.asarray(scores_ood, dtype=np.float64).ravel()
    if s_id.size == 0 or s_ood.size == 0:
        raise ValueError("both score populations must be non-empty")
    if not (np.all(np.isfinite(s_id)) and np.all(np.isfinite(s_ood))):
        raise ValueError("non-finite scores")
    if orientation == "higher_id":
        s_id, s_ood = -s_id, -s_ood
    ranks = rankdata(np.concatenate([s_id, s_ood]))
    rank_sum_ood = ranks[s_id.size:].sum()
    n_id, n_ood = s_id.size, s_ood.size
    u = rank_sum_ood - n_ood * (n_ood + 1) / 2.0
    return float(u / (n_id * n_ood))


def accuracy(predictions, labels) -> float:
    """Percent of matching entries."""
    pred = np.asarray(predictions).ravel()
    y = np.asarray(labels).ravel()
    if pred.shape != y.shape or pred.size == 0:
        raise ValueError("predictions and labels must be equal-length, non-empty")
    return float(100.0 * np.mean(pred == y))


def classify(model: MlpModel, inputs) -> np.ndarray:
    """Eval-mode argmax class indices."""
    logits, _ = forward(model, inputs, mode="eval")
    return logits.argmax(axis=1)


def mce(error_table: dict[str, dict[int, float]]) -> float:
    """Sum over corruption kinds of the mean error across severities.

    The table maps kind -> severity -> error percent and must cover the
    full corruption suite at every severity.
    """
    missing_kinds = [k for k in CORRUPTION_KINDS if k not in error_table]
    if missing_kinds:
        raise ValueError(f"error table missing kinds: {missing_kinds}")
    extra = [k for k in error_table if k not in CORRUPTION_KINDS]
    if extra:
        raise ValueError(f"unknown corruption kinds: {extra}")
    total = 0.0
    for kind in CORRUPTION_KINDS:
        row = error_table[kind]
        missing = [s for s in SEVERITIES if s not in row]
        if missing:
            raise ValueError(f"kind {kind!r} missing severities: {missing}")
        vals = [float(row[s]) for s in SEVERITIES]
        if any(not np.isfinite(v) or v < 0 or v > 100 for v in vals):
            raise ValueError(f"kind {kind!r} has error values outside [0, 100]")
        total += float(np.mean(vals))
    return total


def grid_bounds(features, pad: float = 0.2) -> tuple[float, float, float, float]:
    """Bounding box of 2-D features, padded by a fraction of each extent."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 2:
        raise ValueError(f"features must be (N, 2), got {x.shape}")
    lo = x.min(axis=0)
    hi = x.max(axis=0)
    span = np.maximum(hi - lo, 1e-12)
    lo = lo - pad * span
    hi = hi + pad * span
    return float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1])


def export_decision_grid(
    model: MlpModel,
    bounds: tuple[float, float, float, float],
    resolution: int,
    quantity: str,
    path,
) -> None:
    """Evaluate one quantity over a regular grid and write x0,x1,value.

    Rows iterate x1 outer, x0 inner (x0 varies fastest).
    """
    if quantity not in GRID_QUANTITIES:
        raise ValueError(
            f"quantity must be one of {GRID_QUANTITIES}, got {quantity!r}"
        )
    if resolution < 2:
        raise ValueError(f"resolution must be >= 2, got {resolution}")
    x0_min, x0_max, x1_min, x1_max = bounds
    if not (x0_min < x0_max and x1_min < x1_max):
        raise ValueError(f"degenerate bounds {bounds}")
    if model.input_dim != 2:
        raise ValueError("decision grids require a 2-D input model")
    xs = np.linspace(x0_min, x0_max, resolution)
    ys = np.linspace(x1_min, x1_max, resolution)
    gx, gy = np.meshgrid(xs, ys)  # row-major: x0 varies fastest
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    logits, _ = forward(model, pts, mode="eval")
    if quantity == "predicted_class":
        values = logits.argmax(axis=1)
        fmt = lambda v: str(int(v))
    else:
        probs = softmax(logits)
        values = probs.max(axis=1) if quantity == "confidence" else _entropy_rows(probs)
        fmt = lambda v: repr(float(v))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x0", "x1", "value"])
        for (px, py), v in zip(pts, values):
            writer.writerow([repr(float(px)), repr(float(py)), fmt(v)])


def export_histograms(
    score_dumps: dict[str, tuple], bins: int, path
) -> None:
    """Shared-edge histograms per score kind for the ID and OOD populations.

    score_dumps maps kind -> (id_scores, ood_scores). Writes CSV rows
    score_kind,population,bin_lo,bin_hi,count; per-population counts sum
    to the population size.
    """
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    if not score_dumps:
        raise ValueError("no score populations given")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["score_kind", "population", "bin_lo", "bin_hi", "count"])
        for kind in sorted(score_dumps):
            s_id = np.asarray(score_dumps[kind][0], dtype=np.float64).ravel()
            s_ood = np.asarray(score_dumps[kind][1], dtype=np.float64).ravel()
            if s_id.size == 0 or s_ood.size == 0:
                raise ValueError(f"kind {kind!r} has an empty population")
            combined = np.concatenate([s_id, s_ood])
            lo, hi = float(combined.min()), float(combined.max())
            if lo == hi:
                lo, hi = lo - 0.5, hi + 0.5
            edges = np.linspace(lo, hi, bins + 1)
            for name, scores in (("id", s_id), ("ood", s_ood)):
                counts, _ = np.histogram(scores, bins=edges)
                for b in range(bins):
                    writer.writerow([
                        kind, name, repr(float(edges[b])),
                        repr(float(edges[b + 1])), int(counts[b]),
                    ])


@dataclass
class EvalReport:
    """Evaluation summary. AUC values are percentages."""

    id_accuracy: float
    auc: dict[str, float]
    mce: float | None = None
    warnings: list[str] = field(default_factory=list)
    artifact_paths: list[str] = field(default_factory=list)

    def __post_init__(self):
        bad = [k for k in self.auc if k not in SCORE_KINDS]
        if bad:
            raise ValueError(f"unknown score kinds in AUC table: {bad}")
        for k, v in self.auc.items():
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"AUC {k} = {v} outside [0, 100]")
        if not 0.0 <= self.id_accuracy <= 100.0:
            raise ValueError(f"accuracy {self.id_accuracy} outside [0, 100]")
        if self.mce is not None and self.mce < 0:
            raise ValueError(f"mce {self.mce} must be >= 0")
