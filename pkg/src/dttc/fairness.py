"""Dynamic per-sample reweighting by (group, predicted class) cell counts."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .data import DEFAULT_NEUTRAL, DEFAULT_SENSITIVE


@dataclass(frozen=True)
class FairnessConfig:
    epsilon: float = 1e-8
    sensitive: frozenset[str] = frozenset(DEFAULT_SENSITIVE)
    neutral: str = DEFAULT_NEUTRAL
    normalize_weights: bool = False

    def __post_init__(self):
        object.__setattr__(self, "sensitive", frozenset(self.sensitive))
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.neutral in self.sensitive:
            raise ValueError(f"neutral group {self.neutral!r} cannot also be sensitive")


def _level_column(predicted, level):
    predicted = np.asarray(predicted)
    return predicted if predicted.ndim == 1 else predicted[:, level]


def group_class_counts(groups, predicted, level: int = 0) -> Counter:
    """Count instances per (group, predicted class) at one level.

    ``predicted`` is either an ``(m, n_levels)`` array of label paths or the
    single column for ``level``.
    """
    groups = np.asarray(groups)
    col = _level_column(predicted, level)
    if len(groups) != len(col):
        raise ValueError(f"{len(groups)} groups but {len(col)} predictions")
    return Counter(zip(groups.tolist(), col.tolist()))


def dynamic_weights(cfg: FairnessConfig, groups, predicted, level: int = 0, counts=None) -> np.ndarray:
    """``1 / (N[g_j, yhat_j] + eps)`` for sensitive instances, 1 otherwise.

    ``counts`` overrides the batch-local cell counts, e.g. with counts taken
    over a whole epoch.
    """
    groups = np.asarray(groups)
    col = _level_column(predicted, level)
    if counts is None:
        counts = group_class_counts(groups, col)
    w = np.ones(len(groups))
    for j, (g, c) in enumerate(zip(groups.tolist(), col.tolist())):
        if g in cfg.sensitive:
            w[j] = 1.0 / (counts.get((g, c), 0) + cfg.epsilon)
    if cfg.normalize_weights and len(w):
        w *= len(w) / w.sum()
    return w


def weight_table(cfg: FairnessConfig, groups, predicted, counts=None) -> np.ndarray:
    """Weights for every level, shape ``(m, n_levels)``."""
    predicted = np.asarray(predicted)
    return np.stack(
        [dynamic_weights(cfg, groups, predicted, i, None if counts is None else counts[i])
         for i in range(predicted.shape[1])],
        axis=1,
    ) if predicted.size else np.ones(predicted.shape)


def apply_weights(weights, losses, pi) -> float:
    """``(1/m) * sum_j sum_i pi_i * w_ji * loss_ji``."""
    weights = np.asarray(weights, dtype=np.float64)
    losses = np.asarray(losses, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    if weights.shape != losses.shape or weights.ndim != 2 or pi.shape != (losses.shape[1],):
        raise ValueError(f"shape mismatch: weights {weights.shape}, losses {losses.shape}, pi {pi.shape}")
    if losses.shape[0] == 0:
        raise ValueError("no instances")
    return float(((weights * losses) @ pi).sum() / losses.shape[0])
