"""Hierarchical F1, consistency, exact match and equalized odds.

Label paths are ``(m, n_levels)`` arrays of per-level local class indices.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .fairness import FairnessConfig
from .taxonomy import Taxonomy


def _paths(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.int64)
    if a.ndim != 2:
        raise ValueError("label paths must be a 2-D (instances x levels) array")
    return a


def _aligned(pred, truth):
    pred, truth = _paths(pred), _paths(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"predictions {pred.shape} and truth {truth.shape} are not aligned")
    if pred.shape[0] == 0:
        raise ValueError("no instances")
    return pred, truth


def _label_set(tax: Taxonomy, path, closure: bool) -> set[int]:
    ids = {tax.global_id(i, int(k)) for i, k in enumerate(path)}
    if closure:
        for gid in list(ids):
            p = tax.parent(gid)
            while p is not None:
                ids.add(p)
                p = tax.parent(p)
    return ids


def hierarchical_f1(pred, truth, tax: Taxonomy, *, closure: bool = False) -> float:
    """Micro-averaged hierarchical F1 over per-instance label sets.

    Each instance contributes its n predicted (resp. true) global class ids.
    With ``closure=True`` the predicted set is also augmented with the
    ancestors of every predicted class, which only matters for paths that
    are not taxonomy-consistent.
    """
    pred, truth = _aligned(pred, truth)
    hit = n_pred = n_true = 0
    for p, t in zip(pred, truth):
        ps = _label_set(tax, p, closure)
        ts = _label_set(tax, t, closure)
        hit += len(ps & ts)
        n_pred += len(ps)
        n_true += len(ts)
    hp = hit / n_pred
    hr = hit / n_true
    return 0.0 if hp + hr == 0 else 2 * hp * hr / (hp + hr)


def consistency_rate(pred, tax: Taxonomy) -> float:
    pred = _paths(pred)
    if pred.shape[0] == 0:
        raise ValueError("no instances")
    if pred.shape[1] != tax.n_levels:
        raise ValueError(f"paths have {pred.shape[1]} levels, taxonomy has {tax.n_levels}")
    ok = np.ones(pred.shape[0], dtype=bool)
    for i, par in enumerate(tax.parents):
        for col, size in ((pred[:, i], tax.sizes[i]), (pred[:, i + 1], tax.sizes[i + 1])):
            if col.min() < 0 or col.max() >= size:
                raise IndexError(f"invalid class index at level {i + 1}")
        ok &= np.asarray(par)[pred[:, i + 1]] == pred[:, i]
    return float(ok.mean())


def exact_match_rate(pred, truth) -> float:
    pred, truth = _aligned(pred, truth)
    return float(np.all(pred == truth, axis=1).mean())


@dataclass
class EqualizedOdds:
    """EO at one level: macro-average over classes with defined rates."""

    value: float | None
    per_class: dict[int, float] = field(default_factory=dict)
    skipped: list[int] = field(default_factory=list)


def equalized_odds_detail(pred, truth, groups, level: int, cfg: FairnessConfig) -> EqualizedOdds:
    pred, truth = _aligned(pred, truth)
    groups = np.asarray(groups)
    if len(groups) != pred.shape[0]:
        raise ValueError(f"{len(groups)} groups for {pred.shape[0]} instances")
    present = sorted(set(groups.tolist()) & cfg.sensitive)
    yp, yt = pred[:, level], truth[:, level]
    classes = sorted(set(yt.tolist()) | set(yp.tolist()))
    if len(present) < 2:
        return EqualizedOdds(None, {}, classes)

    per_class, skipped = {}, []
    for c in classes:
        rates = {}
        for g in present:
            in_g = groups == g
            pos = in_g & (yt == c)
            neg = in_g & (yt != c)
            if not pos.any() or not neg.any():
                break
            rates[g] = ((yp[pos] == c).mean(), (yp[neg] == c).mean())
        else:
            per_class[c] = max(
                max(abs(rates[a][0] - rates[b][0]), abs(rates[a][1] - rates[b][1]))
                for a, b in combinations(present, 2)
            )
            continue
        skipped.append(c)
    value = float(np.mean(list(per_class.values()))) if per_class else None
    return EqualizedOdds(value, per_class, skipped)


def equalized_odds(pred, truth, groups, level: int, cfg: FairnessConfig) -> float | None:
    """Equalized-odds gap at one level, or None when no class has defined rates.

    For each class, one-vs-rest TPR and FPR are computed per sensitive
    group; the class gap is the largest TPR or FPR difference over group
    pairs. The level value is the mean gap over classes where every
    sensitive group has at least one positive and one negative instance.
    """
    return equalized_odds_detail(pred, truth, groups, level, cfg).value


@dataclass
class MetricsReport:
    hf1: float
    consistency: float
    exact_match: float
    eo_per_level: list[float | None]
    eo_avg: float | None
    per_level_accuracy: list[float]
    per_group_per_level_accuracy: dict[str, list[float]]
    counts: dict[str, int]
    eo_skipped_classes: list[int]

    def to_dict(self) -> dict:
        return {
            "hf1": self.hf1,
            "consistency": self.consistency,
            "exact_match": self.exact_match,
            "eo_per_level": self.eo_per_level,
            "eo_avg": self.eo_avg,
            "per_level_accuracy": self.per_level_accuracy,
            "per_group_per_level_accuracy": self.per_group_per_level_accuracy,
            "counts": self.counts,
            "eo_skipped_classes": self.eo_skipped_classes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def csv_header(self) -> list[str]:
        n = len(self.eo_per_level)
        return ["hf1", "consistency", "exact_match", *(f"eo_l{i + 1}" for i in range(n)), "eo_avg"]

    def csv_values(self) -> list[float | None]:
        return [self.hf1, self.consistency, self.exact_match, *self.eo_per_level, self.eo_avg]

    def wide_header(self) -> list[str]:
        """``csv_header`` followed by overall and per-group accuracy columns."""
        n = len(self.eo_per_level)
        cols = self.csv_header() + [f"acc_l{i + 1}" for i in range(n)]
        for g in self.per_group_per_level_accuracy:
            cols += [f"acc_{g}_l{i + 1}" for i in range(n)]
        return cols

    def wide_values(self) -> list[float | None]:
        vals = self.csv_values() + list(self.per_level_accuracy)
        for accs in self.per_group_per_level_accuracy.values():
            vals += accs
        return vals

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(self.csv_header()) + "\n")
        buf.write(",".join(format_value(v) for v in self.csv_values()) + "\n")
        return buf.getvalue()


def format_value(v) -> str:
    """Shortest round-tripping text for a metric; empty for undefined."""
    return "" if v is None else repr(float(v))


def report(pred, truth, groups, tax: Taxonomy, cfg: FairnessConfig, *,
           eo_aggregate: str = "mean", closure: bool = False) -> MetricsReport:
    if eo_aggregate not in ("mean", "max"):
        raise ValueError(f"unknown EO aggregate {eo_aggregate!r}")
    pred, truth = _aligned(pred, truth)
    groups = np.asarray(groups)
    eo = [equalized_odds_detail(pred, truth, groups, i, cfg) for i in range(tax.n_levels)]
    defined = [e.value for e in eo if e.value is not None]
    if not defined:
        eo_avg = None
    elif eo_aggregate == "mean":
        eo_avg = float(np.mean(defined))
    else:
        eo_avg = float(max(defined))
    correct = pred == truth
    names = sorted(set(groups.tolist()))
    return MetricsReport(
        hf1=hierarchical_f1(pred, truth, tax, closure=closure),
        consistency=consistency_rate(pred, tax),
        exact_match=exact_match_rate(pred, truth),
        eo_per_level=[e.value for e in eo],
        eo_avg=eo_avg,
        per_level_accuracy=[float(a) for a in correct.mean(axis=0)],
        per_group_per_level_accuracy={
            g: [float(a) for a in correct[groups == g].mean(axis=0)] for g in names
        },
        counts={g: int((groups == g).sum()) for g in names},
        eo_skipped_classes=[len(e.skipped) for e in eo],
    )
