"""Per-level linear heads with top-down transitional masking.

For level 1 the prediction is a temperature softmax of the head's logits.
For every deeper level the parent probabilities are pushed through the
binary transition matrix, giving a mask that equals each child's parent
probability; the masked variants multiply the child logits by that mask
elementwise before the softmax. Negative logits therefore move *toward*
zero when their parent is unlikely, and children of a parent with
probability exactly 0 get logit 0 (not -inf). That is deliberate.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from .taxonomy import Taxonomy

CHECKPOINT_MAGIC = b"DTTM"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Parameters, features and taxonomy disagree on dimensions."""


class Variant(str, enum.Enum):
    BASE = "base"
    D = "d"
    H = "h"
    HD = "hd"

    @property
    def masked(self) -> bool:
        return self in (Variant.H, Variant.HD)

    @property
    def reweighted(self) -> bool:
        return self in (Variant.D, Variant.HD)

    @property
    def label(self) -> str:
        return {"base": "Base", "d": "D", "h": "H", "hd": "HD"}[self.value]

    @classmethod
    def parse(cls, value) -> Variant:
        if isinstance(value, Variant):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown variant {value!r}; expected one of base, d, h, hd") from None


_VARIANT_CODE = {Variant.BASE: 0, Variant.D: 1, Variant.H: 2, Variant.HD: 3}


@dataclass
class ModelParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    variant: Variant = Variant.HD
    tau: float = 1.0

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)
        if not self.tau > 0:
            raise ValueError("temperature must be positive")
        if len(self.weights) != len(self.biases):
            raise ShapeError("one bias vector per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"level {i + 1}: W {w.shape} and b {b.shape} do not match")
        if len({w.shape[1] for w in self.weights}) > 1:
            raise ShapeError("all heads must share the feature dimension")

    @property
    def dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(w.shape[0] for w in self.weights)

    def check(self, tax: Taxonomy, dim: int | None = None) -> None:
        if self.sizes != tax.sizes:
            raise ShapeError(f"checkpoint level sizes {self.sizes} do not match taxonomy {tax.sizes}")
        if dim is not None and dim != self.dim:
            raise ShapeError(f"features have dimension {dim}, model expects {self.dim}")

    def copy(self) -> ModelParams:
        return ModelParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                           self.variant, self.tau)

    def as_float32(self) -> ModelParams:
        """Round parameters to the precision they are checkpointed at."""
        return ModelParams(
            [w.astype(np.float32).astype(np.float64) for w in self.weights],
            [b.astype(np.float32).astype(np.float64) for b in self.biases],
            self.variant, self.tau,
        )


@dataclass
class ForwardTrace:
    """Per-level logits, masks and probabilities.

    Arrays are ``(batch, |l_i|)`` for batched calls and 1-D for a single
    instance. ``masks[0]`` is all ones.
    """

    logits: list[np.ndarray]
    masks: list[np.ndarray]
    probs: list[np.ndarray]


def softmax_t(v, tau: float = 1.0) -> np.ndarray:
    """Temperature softmax along the last axis."""
    v = np.asarray(v, dtype=np.float64)
    if not tau > 0:
        raise ValueError("temperature must be positive")
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax input must be finite")
    s = v / tau
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def level_logits(params: ModelParams, i: int, a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    w = params.weights[i]
    if a.shape[-1] != w.shape[1]:
        raise ShapeError(f"feature length {a.shape[-1]} != model dimension {w.shape[1]}")
    return a @ w.T + params.biases[i]


def attention_mask(parent_probs, M) -> np.ndarray:
    parent_probs = np.asarray(parent_probs, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    if parent_probs.shape[-1] != M.shape[0]:
        raise ShapeError(f"parent vector of length {parent_probs.shape[-1]} vs matrix with {M.shape[0]} rows")
    return parent_probs @ M


def forward(params: ModelParams, tax: Taxonomy, a) -> ForwardTrace:
    """Run all heads top-down for one feature vector or a batch of them."""
    a = np.asarray(a, dtype=np.float64)
    logits, masks, probs = [], [], []
    for i in range(tax.n_levels):
        z = level_logits(params, i, a)
        if i == 0:
            m = np.ones_like(z)
        else:
            m = attention_mask(probs[-1], tax.transition_matrix(i - 1))
        u = z * m if params.variant.masked else z
        logits.append(z)
        masks.append(m)
        probs.append(softmax_t(u, params.tau))
    return ForwardTrace(logits, masks, probs)


def predict_paths(params: ModelParams, tax: Taxonomy, features) -> tuple[np.ndarray, np.ndarray]:
    """Argmax class per level (lowest index wins ties) and its probability.

    Returns two ``(m, n_levels)`` arrays: local class indices and probabilities.
    """
    features = np.asarray(features)
    m = features.shape[0]
    if m == 0:
        return np.zeros((0, tax.n_levels), np.int64), np.zeros((0, tax.n_levels))
    params.check(tax, features.shape[1])
    trace = forward(params, tax, features)
    pred = np.stack([p.argmax(axis=1) for p in trace.probs], axis=1)
    conf = np.stack([p[np.arange(m), k] for p, k in zip(trace.probs, pred.T)], axis=1)
    return pred.astype(np.int64), conf


def init_params(tax: Taxonomy, dim: int, variant, tau: float, rng: np.random.Generator) -> ModelParams:
    """W ~ U(-1/sqrt(d), 1/sqrt(d)) level by level, b = 0."""
    bound = 1.0 / np.sqrt(dim)
    weights = [rng.uniform(-bound, bound, size=(k, dim)) for k in tax.sizes]
    biases = [np.zeros(k) for k in tax.sizes]
    return ModelParams(weights, biases, variant, tau)


# -- checkpoints --------------------------------------------------------

def checkpoint_bytes(params: ModelParams) -> bytes:
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<IBd", CHECKPOINT_VERSION, _VARIANT_CODE[params.variant], params.tau),
    ]
    for w, b in zip(params.weights, params.biases):
        parts.append(struct.pack("<II", *w.shape))
        parts.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    return b"".join(parts)


def parse_checkpoint(blob: bytes) -> ModelParams:
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ShapeError(f"bad checkpoint magic {blob[:4]!r}")
    head = struct.Struct("<IBd")
    if len(blob) < 4 + head.size:
        raise ShapeError("truncated checkpoint header")
    version, code, tau = head.unpack_from(blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ShapeError(f"unsupported checkpoint version {version}")
    variant = {v: k for k, v in _VARIANT_CODE.items()}.get(code)
    if variant is None:
        raise ShapeError(f"unknown variant code {code}")
    pos = 4 + head.size
    weights, biases = [], []
    while pos < len(blob):
        if pos + 8 > len(blob):
            raise ShapeError("truncated level header in checkpoint")
        rows, cols = struct.unpack_from("<II", blob, pos)
        pos += 8
        need = 4 * (rows * cols + rows)
        if pos + need > len(blob):
            raise ShapeError("truncated level payload in checkpoint")
        w = np.frombuffer(blob, "<f4", rows * cols, pos).reshape(rows, cols)
        b = np.frombuffer(blob, "<f4", rows, pos + 4 * rows * cols)
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
        pos += need
    if not weights:
        raise ShapeError("checkpoint has no levels")
    return ModelParams(weights, biases, variant, tau)


def save_checkpoint(path, params: ModelParams) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params))


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
