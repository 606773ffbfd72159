"""Mini-batch SGD with momentum on the weighted multi-level cross-entropy."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .fairness import FairnessConfig, group_class_counts, weight_table
from .taxonomy import Taxonomy
from .ttc import ModelParams, Variant, forward, init_params, predict_paths

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


class NumericalError(RuntimeError):
    """Training diverged to a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 64
    pi: tuple[float, ...] | None = None
    seed: int = 0
    mask_gradient: str = "detached"
    variant: Variant = Variant.HD
    tau: float = 1.0
    epoch_counts: bool = False
    fairness: FairnessConfig = field(default_factory=FairnessConfig)

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        if self.pi is not None:
            object.__setattr__(self, "pi", tuple(float(p) for p in self.pi))
            if any(not p > 0 for p in self.pi):
                raise ValueError("level importance factors must be positive")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.mask_gradient not in ("detached", "full"):
            raise ValueError("mask_gradient must be 'detached' or 'full'")
        if not self.tau > 0:
            raise ValueError("temperature must be positive")

    def level_factors(self, n_levels: int) -> np.ndarray:
        if self.pi is None:
            return np.ones(n_levels)
        if len(self.pi) != n_levels:
            raise ValueError(f"pi has {len(self.pi)} entries for {n_levels} levels")
        return np.asarray(self.pi)


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(rec) + "\n" for rec in self.epochs)


def level_loss(probs, y: int) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= y < len(probs):
        raise IndexError(f"class index {y} out of range for {len(probs)} classes")
    return float(-np.log(probs[y] + LOG_FLOOR))


def _as_arrays(batch):
    if isinstance(batch, Dataset):
        return np.asarray(batch.features, dtype=np.float64), batch.labels, batch.groups
    x, y, g = batch
    return np.asarray(x, dtype=np.float64), np.asarray(y), np.asarray(g)


def batch_weights(params: ModelParams, tax: Taxonomy, batch, cfg: TrainConfig, trace=None) -> np.ndarray:
    """Per-instance, per-level loss weights for this batch (all ones unless reweighted)."""
    x, y, g = _as_arrays(batch)
    if not params.variant.reweighted:
        return np.ones(y.shape)
    if trace is None:
        trace = forward(params, tax, x)
    pred = np.stack([p.argmax(axis=1) for p in trace.probs], axis=1)
    return weight_table(cfg.fairness, g, pred)


def _objective(params, tax, batch, cfg, weights, want_grads):
    x, y, g = _as_arrays(batch)
    m = x.shape[0]
    if m == 0:
        raise ValueError("empty batch")
    pi = cfg.level_factors(tax.n_levels)
    trace = forward(params, tax, x)
    if weights is None:
        weights = batch_weights(params, tax, (x, y, g), cfg, trace)
    rows = np.arange(m)
    losses = np.stack([-np.log(p[rows, y[:, i]] + LOG_FLOOR) for i, p in enumerate(trace.probs)], axis=1)
    loss = float(((weights * losses) @ pi).sum() / m)
    if not want_grads:
        return loss, None

    tau = params.tau
    masked = params.variant.masked
    full = masked and cfg.mask_gradient == "full"
    n = tax.n_levels
    grad_p = [None] * n
    grads = [None] * n
    for i in range(n - 1, -1, -1):
        p = trace.probs[i]
        py = p[rows, y[:, i]]
        coef = pi[i] * weights[:, i] * py / (py + LOG_FLOOR) / m
        g_u = p.copy()
        g_u[rows, y[:, i]] -= 1.0
        g_u *= (coef / tau)[:, None]
        if grad_p[i] is not None:
            gp = grad_p[i]
            g_u += p * (gp - (p * gp).sum(axis=1, keepdims=True)) / tau
        if masked:
            g_z = g_u * trace.masks[i]
            if full and i > 0:
                g_m = g_u * trace.logits[i]
                grad_p[i - 1] = g_m @ tax.transition_matrix(i - 1).T
        else:
            g_z = g_u
        grads[i] = (g_z.T @ x, g_z.sum(axis=0))
    return loss, grads


def batch_loss(params: ModelParams, tax: Taxonomy, batch, cfg: TrainConfig, weights=None) -> float:
    """Weighted multi-level cross-entropy averaged over the batch.

    ``batch`` is a Dataset or a ``(features, labels, groups)`` tuple. When
    ``weights`` is None they are derived from this batch's own argmax
    predictions (reweighted variants) or set to 1.
    """
    return _objective(params, tax, batch, cfg, weights, False)[0]


def gradients(params: ModelParams, tax: Taxonomy, batch, cfg: TrainConfig, weights=None):
    """Analytic ``[(dL/dW_i, dL/db_i), ...]`` for ``batch_loss``.

    Loss weights are constants. With ``mask_gradient="detached"`` the masks
    are constants too; with ``"full"`` the gradient also flows from each
    masked level back through the mask into the parent's probabilities.
    """
    return _objective(params, tax, batch, cfg, weights, True)[1]


def _epoch_weights(params, tax, ds, cfg):
    pred, _ = predict_paths(params, tax, ds.features)
    counts = [group_class_counts(ds.groups, pred, i) for i in range(tax.n_levels)]
    return weight_table(cfg.fairness, ds.groups, pred, counts)


def fit(ds: Dataset, tax: Taxonomy, cfg: TrainConfig) -> tuple[ModelParams, TrainReport]:
    ds.validate(tax)
    rng = np.random.default_rng(cfg.seed)
    params = init_params(tax, ds.dim, cfg.variant, cfg.tau, rng)
    report = TrainReport()
    x_all = np.asarray(ds.features, dtype=np.float64)
    velocity = [(np.zeros_like(w), np.zeros_like(b)) for w, b in zip(params.weights, params.biases)]
    m = len(ds)

    for epoch in range(cfg.epochs):
        order = rng.permutation(m)
        global_w = None
        if cfg.epoch_counts and params.variant.reweighted:
            global_w = _epoch_weights(params, tax, ds, cfg)
        total = 0.0
        for start in range(0, m, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = (x_all[idx], ds.labels[idx], ds.groups[idx])
            w = None if global_w is None else global_w[idx]
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, grads = _objective(params, tax, batch, cfg, w, True)
            except ValueError as exc:
                if "finite" not in str(exc):
                    raise
                loss = float("nan")
            where = f"epoch {epoch + 1}, batch {start // cfg.batch_size + 1}"
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite loss at {where}; learning rate {cfg.lr} is probably too high")
            total += loss * len(idx)
            for (vw, vb), (gw, gb), i in zip(velocity, grads, range(tax.n_levels)):
                vw *= cfg.momentum
                vw -= cfg.lr * gw
                vb *= cfg.momentum
                vb -= cfg.lr * gb
                params.weights[i] += vw
                params.biases[i] += vb
            if not all(np.isfinite(w).all() and np.isfinite(b).all() for w, b in zip(params.weights, params.biases)):
                raise NumericalError(f"parameters overflowed at {where}; learning rate {cfg.lr} is probably too high")
        pred, _ = predict_paths(params, tax, x_all)
        acc = (pred == ds.labels).mean(axis=0)
        report.epochs.append({
            "epoch": epoch + 1,
            "loss": total / m,
            "accuracy": [float(a) for a in acc],
        })
        log.debug("epoch %d loss %.6f acc %s", epoch + 1, total / m, np.round(acc, 4))
    return params, report
