"""Datasets: feature matrices, hierarchical label paths and demographic groups."""
from __future__ import annotations

import csv
import io
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .taxonomy import Taxonomy

FEATURE_MAGIC = b"DTTC"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")

DEFAULT_SENSITIVE = ("Male", "Female")
DEFAULT_NEUTRAL = "Background"


class DataError(ValueError):
    """Input files that are malformed or inconsistent with the taxonomy."""


@dataclass(frozen=True)
class GroupTag:
    name: str
    is_sensitive: bool


def make_vocab(sensitive=DEFAULT_SENSITIVE, neutral: str | None = DEFAULT_NEUTRAL) -> tuple[GroupTag, ...]:
    sensitive = tuple(sensitive)
    if neutral is not None and neutral in sensitive:
        raise ValueError(f"neutral group {neutral!r} is also listed as sensitive")
    tags = [GroupTag(g, True) for g in sensitive]
    if neutral is not None:
        tags.append(GroupTag(neutral, False))
    return tuple(tags)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Aligned features, label paths and group tags for m instances.

    ``labels`` holds per-level local class indices, shape ``(m, n_levels)``.
    """

    features: np.ndarray
    labels: np.ndarray
    groups: np.ndarray
    ids: tuple[str, ...]
    vocab: tuple[GroupTag, ...] = field(default_factory=make_vocab)

    def __post_init__(self):
        m = len(self.ids)
        if self.features.ndim != 2 or self.features.shape[0] != m:
            raise DataError(f"features have shape {self.features.shape}, expected {m} rows")
        if self.labels.ndim != 2 or self.labels.shape[0] != m:
            raise DataError(f"labels have shape {self.labels.shape}, expected {m} rows")
        if self.groups.shape != (m,):
            raise DataError(f"{len(self.groups)} group tags for {m} instances")
        if not np.all(np.isfinite(self.features)):
            raise DataError("features contain NaN or Inf")
        known = {t.name for t in self.vocab}
        unknown = set(self.groups.tolist()) - known
        if unknown:
            raise DataError(f"groups not in vocabulary: {sorted(unknown)}")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, index) -> Dataset:
        index = np.asarray(index, dtype=np.int64)
        return Dataset(
            self.features[index],
            self.labels[index],
            self.groups[index],
            tuple(self.ids[i] for i in index),
            self.vocab,
        )

    def validate(self, tax: Taxonomy) -> None:
        if self.labels.shape[1] != tax.n_levels:
            raise DataError(f"label paths have {self.labels.shape[1]} levels, taxonomy has {tax.n_levels}")
        for i, size in enumerate(tax.sizes):
            col = self.labels[:, i]
            if len(col) and (col.min() < 0 or col.max() >= size):
                raise DataError(f"label index out of range at level {i + 1}")
        for i, par in enumerate(tax.parents):
            bad = np.flatnonzero(np.asarray(par)[self.labels[:, i + 1]] != self.labels[:, i])
            if len(bad):
                raise DataError(f"instance {self.ids[bad[0]]!r}: inconsistent path at level {i + 2}")


# -- features -----------------------------------------------------------

def write_features(path, features: np.ndarray) -> None:
    x = np.ascontiguousarray(features, dtype="<f4")
    if x.ndim != 2:
        raise ValueError("features must be a 2-D matrix")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, x.shape[0], x.shape[1]))
        fh.write(x.tobytes())


def read_features_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise DataError("truncated header")
    magic, version, m, d = _HEADER.unpack_from(blob)
    if magic != FEATURE_MAGIC:
        raise DataError(f"bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
    if version != FEATURE_VERSION:
        raise DataError(f"unsupported feature format version {version}")
    expected = _HEADER.size + 4 * m * d
    if len(blob) != expected:
        kind = "truncated" if len(blob) < expected else "oversized"
        raise DataError(f"{kind} payload: {len(blob)} bytes, expected {expected}")
    return np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(m, d).astype(np.float32)


def parse_features_csv(text: str) -> np.ndarray:
    rows = []
    width = None
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), 1):
        if not row:
            continue
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise DataError(f"line {lineno}: {len(row)} columns, expected {width}")
        try:
            rows.append([float(cell) for cell in row])
        except ValueError:
            raise DataError(f"line {lineno}: non-numeric cell in {row!r}") from None
    if not rows:
        return np.zeros((0, 0), dtype=np.float32)
    return np.asarray(rows, dtype=np.float32)


def load_features(path) -> np.ndarray:
    """Read the binary format (by magic) or fall back to headerless CSV."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] == FEATURE_MAGIC or path.suffix == ".bin":
        try:
            return read_features_bytes(blob)
        except DataError as exc:
            raise DataError(f"{path}: {exc}") from None
    try:
        return parse_features_csv(blob.decode("utf-8"))
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


# -- labels and groups --------------------------------------------------

def parse_labels(text: str, tax: Taxonomy) -> tuple[tuple[str, ...], np.ndarray]:
    ids = []
    paths = []
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), 1):
        if not row:
            continue
        if len(row) != tax.n_levels + 1:
            raise DataError(f"line {lineno}: {len(row)} columns, expected id + {tax.n_levels} levels")
        path = []
        for i, name in enumerate(row[1:]):
            try:
                path.append(tax.class_index(i, name))
            except KeyError:
                raise DataError(f"line {lineno}: unknown class {name!r} at level {i + 1}") from None
        for i in range(tax.n_levels - 1):
            if tax.parents[i][path[i + 1]] != path[i]:
                raise DataError(
                    f"line {lineno}: inconsistent path, {row[i + 2]!r} is not under {row[i + 1]!r}"
                )
        ids.append(row[0])
        paths.append(path)
    labels = np.asarray(paths, dtype=np.int64).reshape(len(paths), tax.n_levels)
    if len(set(ids)) != len(ids):
        raise DataError("duplicate instance ids in labels")
    return tuple(ids), labels


def load_labels(path, tax: Taxonomy) -> tuple[tuple[str, ...], np.ndarray]:
    try:
        return parse_labels(Path(path).read_text(encoding="utf-8"), tax)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def parse_groups(text: str, vocab, ids=None) -> np.ndarray:
    """Parse ``id,group`` rows; with ``ids`` given, align to that order."""
    known = {t.name for t in vocab}
    by_id: dict[str, str] = {}
    order = []
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), 1):
        if not row:
            continue
        if len(row) != 2:
            raise DataError(f"line {lineno}: expected 'id,group'")
        rid, group = row
        if group not in known:
            raise DataError(f"line {lineno}: unknown group {group!r}")
        if rid in by_id:
            raise DataError(f"line {lineno}: duplicate id {rid!r}")
        by_id[rid] = group
        order.append(rid)
    if ids is None:
        return np.asarray([by_id[r] for r in order], dtype=str)
    extra = set(by_id) - set(ids)
    if extra:
        raise DataError(f"group for id without features: {sorted(extra)[0]!r}")
    missing = [r for r in ids if r not in by_id]
    if missing:
        raise DataError(f"no group for id {missing[0]!r}")
    return np.asarray([by_id[r] for r in ids], dtype=str)


def load_groups(path, vocab, ids=None) -> np.ndarray:
    try:
        return parse_groups(Path(path).read_text(encoding="utf-8"), vocab, ids)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def load_dataset(features, labels, groups, tax: Taxonomy, vocab=None) -> Dataset:
    vocab = make_vocab() if vocab is None else tuple(vocab)
    x = load_features(features)
    ids, y = load_labels(labels, tax)
    if x.shape[0] != len(ids):
        raise DataError(f"{features}: {x.shape[0]} feature rows but {len(ids)} label rows")
    g = load_groups(groups, vocab, ids)
    return Dataset(x, y, g, ids, vocab)


def write_dataset(ds: Dataset, tax: Taxonomy, out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "features": out_dir / "features.bin",
        "labels": out_dir / "labels.csv",
        "groups": out_dir / "groups.csv",
    }
    write_features(paths["features"], ds.features)
    with open(paths["labels"], "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for rid, path in zip(ds.ids, ds.labels):
            w.writerow([rid, *(tax.levels[i][k] for i, k in enumerate(path))])
    with open(paths["groups"], "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for rid, g in zip(ds.ids, ds.groups):
            w.writerow([rid, g])
    return paths


# -- splitting ----------------------------------------------------------

def split(ds: Dataset, train_fraction: float, seed: int, *, stratify: bool = True) -> tuple[Dataset, Dataset]:
    """Seeded train/test split, stratified by (leaf class, group).

    The train size is ``round(train_fraction * m)``. Each stratum receives
    the floor of its proportional share and the remaining slots go to the
    strata with the largest fractional remainders, ties broken at random.
    Strata with a single member therefore end up assigned at random.
    """
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    m = len(ds)
    n_train = int(round(train_fraction * m))
    if not stratify:
        perm = rng.permutation(m)
        return ds.subset(np.sort(perm[:n_train])), ds.subset(np.sort(perm[n_train:]))

    keys = [(int(leaf), str(g)) for leaf, g in zip(ds.labels[:, -1], ds.groups)]
    strata: dict[tuple[int, str], list[int]] = {}
    for j, key in enumerate(keys):
        strata.setdefault(key, []).append(j)
    order = sorted(strata)
    small = [k for k in order if len(strata[k]) < 2]
    if small:
        warnings.warn(f"{len(small)} strata have fewer than 2 members; assigned at random", stacklevel=2)

    members = [rng.permutation(strata[k]) for k in order]
    ideal = np.array([train_fraction * len(mem) for mem in members])
    take = np.floor(ideal).astype(np.int64)
    left = n_train - int(take.sum())
    if left > 0:
        frac = ideal - take
        tiebreak = rng.random(len(order))
        ranked = np.lexsort((tiebreak, -frac))
        take[ranked[:left]] += 1
    train_idx = np.concatenate([mem[:t] for mem, t in zip(members, take)] + [np.empty(0, np.int64)])
    test_idx = np.concatenate([mem[t:] for mem, t in zip(members, take)] + [np.empty(0, np.int64)])
    return ds.subset(np.sort(train_idx)), ds.subset(np.sort(test_idx))


# -- synthetic data -----------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the Gaussian-cluster generator.

    Each leaf's cluster mean is the sum of one offset vector per ancestor
    (and itself); the offset norm at level i is ``separation * level_decay**i``
    so coarse levels separate more cleanly. A sample from a biased group is,
    with probability ``bias_strength``, drawn from a point ``bias_shift`` of
    the way from its own cluster mean to a sibling leaf's mean, keeping its
    label. Independently, with probability ``stereotype_skew`` a biased-group
    sample is drawn (features and label) from the stereotype sibling instead
    of its nominal leaf, so that group over-represents those classes. The
    stereotype sibling of a leaf is the first-declared child of its parent.

    Sensitive groups carry a fixed offset of norm ``group_signal`` so a linear
    model can tell groups apart, as pooled language-model embeddings can.
    When ``dim`` leaves room, the offset is orthogonal to every class offset,
    so it does not move samples toward any class mean.
    """

    branching: tuple[int, ...] = (2, 2, 2)
    samples_per_leaf: int = 250
    dim: int = 16
    separation: float = 4.0
    level_decay: float = 0.5
    noise: float = 1.0
    bias_strength: float = 0.0
    bias_shift: float = 1.0
    stereotype_skew: float = 0.0
    group_signal: float = 2.0
    group_proportions: tuple[tuple[str, float], ...] = (
        ("Male", 0.25), ("Female", 0.25), ("Background", 0.5),
    )
    biased_groups: tuple[str, ...] = ("Female",)
    neutral: str = DEFAULT_NEUTRAL
    seed: int = 0

    def __post_init__(self):
        if not self.branching or any(b < 1 for b in self.branching):
            raise ValueError("branching factors must be positive")
        if self.samples_per_leaf < 1 or self.dim < 1:
            raise ValueError("samples_per_leaf and dim must be positive")
        if self.separation < 0 or self.noise < 0:
            raise ValueError("separation and noise must be nonnegative")
        if not 0.0 <= self.bias_strength <= 1.0:
            raise ValueError("bias_strength must lie in [0, 1]")
        if not 0.0 <= self.stereotype_skew <= 1.0:
            raise ValueError("stereotype_skew must lie in [0, 1]")
        if self.group_signal < 0:
            raise ValueError("group_signal must be nonnegative")
        probs = [p for _, p in self.group_proportions]
        if any(p < 0 for p in probs) or not math.isclose(sum(probs), 1.0, abs_tol=1e-9):
            raise ValueError("group proportions must be nonnegative and sum to 1")
        names = [g for g, _ in self.group_proportions]
        if len(set(names)) != len(names):
            raise ValueError("duplicate group in group_proportions")
        if self.neutral not in names:
            raise ValueError(f"neutral group {self.neutral!r} missing from group_proportions")
        if set(self.biased_groups) - set(names):
            raise ValueError("biased_groups must be drawn from group_proportions")

    @property
    def vocab(self) -> tuple[GroupTag, ...]:
        return tuple(GroupTag(g, g != self.neutral) for g, _ in self.group_proportions)


def _unit_rows(rng, k, d):
    v = rng.standard_normal((k, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def generate_synthetic(spec: SyntheticSpec, tax: Taxonomy) -> Dataset:
    if tax.n_levels < 2:
        raise ValueError("synthetic data needs a taxonomy with at least 2 levels")
    if spec.dim < tax.n_levels:
        raise ValueError(f"dim={spec.dim} is too small to place distinct means for {tax.n_levels} levels")
    rng = np.random.default_rng(spec.seed)
    d = spec.dim

    offsets = [
        _unit_rows(rng, size, d) * spec.separation * spec.level_decay ** i
        for i, size in enumerate(tax.sizes)
    ]
    n_leaves = tax.sizes[-1]
    paths = np.stack([tax.local_path(c) for c in range(n_leaves)])
    means = sum(offsets[i][paths[:, i]] for i in range(tax.n_levels))

    names = [g for g, _ in spec.group_proportions]
    probs = np.array([p for _, p in spec.group_proportions])
    directions = _unit_rows(rng, len(names), d)
    basis, _ = np.linalg.qr(np.concatenate(offsets).T)
    if basis.shape[1] < d:
        directions = directions - (directions @ basis) @ basis.T
        directions /= np.maximum(np.linalg.norm(directions, axis=1, keepdims=True), 1e-12)
    signal = {
        g: (u * spec.group_signal if g != spec.neutral else np.zeros(d))
        for g, u in zip(names, directions)
    }

    # the first-declared child of each parent is where biased samples drift
    leaf_parent = np.asarray(tax.parents[-1])
    target = np.array([np.flatnonzero(leaf_parent == leaf_parent[c])[0] for c in range(n_leaves)])

    leaves = np.repeat(np.arange(n_leaves), spec.samples_per_leaf)
    m = len(leaves)
    groups = np.asarray(names)[rng.choice(len(names), size=m, p=probs)]
    biased = np.isin(groups, spec.biased_groups)
    skewed = biased & (rng.random(m) < spec.stereotype_skew)
    leaves[skewed] = target[leaves[skewed]]
    centers = means[leaves].copy()
    flip = biased & (rng.random(m) < spec.bias_strength)
    centers[flip] += spec.bias_shift * (means[target[leaves[flip]]] - means[leaves[flip]])
    centers += np.stack([signal[g] for g in groups]) if m else 0.0
    x = centers + spec.noise * rng.standard_normal((m, d))

    width = len(str(m - 1)) if m else 1
    ids = tuple(f"s{j:0{width}d}" for j in range(m))
    return Dataset(x.astype(np.float32), paths[leaves], groups, ids, spec.vocab)
