"""Independent reference implementations used as test oracles.

Nothing here calls into the package's numeric code; trees are handled
through plain parent-name dictionaries and losses through explicit loops.
"""
from __future__ import annotations

import math
from collections import deque
from itertools import combinations

import numpy as np

from dttc.taxonomy import Taxonomy

BEAUTY = (
    "Beauty\t-\n"
    "Hair Care\tBeauty\n"
    "Cosmetics\tBeauty\n"
    "Hair Color\tHair Care\n"
    "Shampoo\tHair Care\n"
    "Lipsticks\tCosmetics\n"
    "Skin Care\tCosmetics\n"
)


def random_taxonomy(rng, n_levels, max_children=3, max_roots=3) -> Taxonomy:
    levels = [[f"r{k}" for k in range(rng.integers(1, max_roots + 1))]]
    parents = []
    for i in range(1, n_levels):
        names, par = [], []
        for p, _ in enumerate(levels[-1]):
            for c in range(rng.integers(1, max_children + 1)):
                names.append(f"n{i}_{p}_{c}")
                par.append(p)
        levels.append(names)
        parents.append(par)
    return Taxonomy(tuple(map(tuple, levels)), tuple(map(tuple, parents)))


# -- trees -----------------------------------------------------------------

def parent_ids(tax: Taxonomy) -> dict[int, int | None]:
    """Global id -> parent global id, built from the parent tables directly."""
    out, off = {}, 0
    for i, size in enumerate(tax.sizes):
        for k in range(size):
            out[off + k] = None if i == 0 else (off - tax.sizes[i - 1]) + tax.parents[i - 1][k]
        off += size
    return out


def bfs_descendants(tax: Taxonomy) -> dict[int, set[int]]:
    """Strict descendants of every class, by breadth-first search over child lists."""
    par = parent_ids(tax)
    children: dict[int, list[int]] = {g: [] for g in par}
    for g, p in par.items():
        if p is not None:
            children[p].append(g)
    out = {}
    for start in par:
        seen, queue = set(), deque(children[start])
        while queue:
            g = queue.popleft()
            if g not in seen:
                seen.add(g)
                queue.extend(children[g])
        out[start] = seen
    return out


def walk_up(tax: Taxonomy, gid: int) -> list[int]:
    par = parent_ids(tax)
    path = [gid]
    while par[path[-1]] is not None:
        path.append(par[path[-1]])
    return path[::-1]


# -- model -------------------------------------------------------------------

def unrolled_loss(weights, biases, tax, x, y, groups, *, masked, reweighted, tau=1.0, pi=None,
                  sensitive=("Male", "Female"), eps=1e-8, frozen_masks=None, frozen_weights=None):
    """Weighted multi-level cross-entropy with every sum written as a loop."""
    m, d = len(x), len(x[0])
    n = len(weights)
    pi = [1.0] * n if pi is None else list(pi)
    probs = []
    for j in range(m):
        per_level = []
        for i in range(n):
            rows = len(weights[i])
            z = []
            for k in range(rows):
                acc = biases[i][k]
                for t in range(d):
                    acc += weights[i][k][t] * x[j][t]
                z.append(acc)
            if i == 0:
                mask = [1.0] * rows
            elif frozen_masks is not None:
                mask = list(frozen_masks[j][i])
            else:
                mask = [per_level[i - 1][tax.parents[i - 1][k]] for k in range(rows)]
            u = [z[k] * mask[k] if masked else z[k] for k in range(rows)]
            top = max(v / tau for v in u)
            e = [math.exp(v / tau - top) for v in u]
            s = sum(e)
            per_level.append([v / s for v in e])
        probs.append(per_level)

    w = [[1.0] * n for _ in range(m)]
    if frozen_weights is not None:
        w = [list(r) for r in frozen_weights]
    elif reweighted:
        for i in range(n):
            pred = [max(range(len(probs[j][i])), key=lambda k: (probs[j][i][k], -k)) for j in range(m)]
            for j in range(m):
                if groups[j] in sensitive:
                    count = sum(1 for q in range(m) if groups[q] == groups[j] and pred[q] == pred[j])
                    w[j][i] = 1.0 / (count + eps)
    total = 0.0
    for j in range(m):
        for i in range(n):
            total += pi[i] * w[j][i] * -math.log(probs[j][i][y[j][i]] + 1e-12)
    return total / m, probs


def reference_loss(weights, biases, tax, x, y, *, masked, tau, pi, loss_weights, frozen_masks=None):
    """Vectorised version of ``unrolled_loss`` with weights given; used for finite differences.

    Masks are gathered through the parent index rather than a matrix product.
    """
    total = 0.0
    probs_prev = None
    m = x.shape[0]
    for i, (w, b) in enumerate(zip(weights, biases)):
        z = x @ w.T + b
        if i == 0:
            mask = np.ones_like(z)
        elif frozen_masks is not None:
            mask = frozen_masks[i]
        else:
            mask = probs_prev[:, np.asarray(tax.parents[i - 1])]
        u = (z * mask if masked else z) / tau
        u = u - u.max(axis=1, keepdims=True)
        p = np.exp(u) / np.exp(u).sum(axis=1, keepdims=True)
        total += pi[i] * np.sum(loss_weights[:, i] * -np.log(p[np.arange(m), y[:, i]] + 1e-12))
        probs_prev = p
    return total / m


# -- metrics ---------------------------------------------------------------

def brute_hf1(pred, truth):
    hit = n_p = n_t = 0
    for p, t in zip(pred, truth):
        ps = {(i, int(c)) for i, c in enumerate(p)}
        ts = {(i, int(c)) for i, c in enumerate(t)}
        hit += len(ps & ts)
        n_p += len(ps)
        n_t += len(ts)
    hp, hr = hit / n_p, hit / n_t
    return 0.0 if hp + hr == 0 else 2 * hp * hr / (hp + hr)


def brute_consistency(pred, tax: Taxonomy):
    names = {}
    parent_name = {}
    for i, level in enumerate(tax.levels):
        for k, name in enumerate(level):
            names[(i, k)] = name
            parent_name[(i, name)] = None if i == 0 else tax.levels[i - 1][tax.parents[i - 1][k]]
    ok = 0
    for p in pred:
        good = True
        for i in range(1, len(p)):
            if parent_name[(i, names[(i, int(p[i]))])] != names[(i - 1, int(p[i - 1]))]:
                good = False
        ok += good
    return ok / len(pred)


def brute_exact(pred, truth):
    return sum(all(int(a) == int(b) for a, b in zip(p, t)) for p, t in zip(pred, truth)) / len(pred)


def brute_eo(pred, truth, groups, level, sensitive=("Male", "Female")):
    """EO by explicit confusion-matrix counting; returns None when undefined."""
    present = sorted({g for g in groups if g in sensitive})
    if len(present) < 2:
        return None
    classes = sorted({int(t[level]) for t in truth} | {int(p[level]) for p in pred})
    gaps = []
    for c in classes:
        rates = {}
        for g in present:
            tp = fn = fp = tn = 0
            for p, t, gg in zip(pred, truth, groups):
                if gg != g:
                    continue
                if int(t[level]) == c:
                    if int(p[level]) == c:
                        tp += 1
                    else:
                        fn += 1
                else:
                    if int(p[level]) == c:
                        fp += 1
                    else:
                        tn += 1
            if tp + fn == 0 or fp + tn == 0:
                rates = None
                break
            rates[g] = (tp / (tp + fn), fp / (fp + tn))
        if rates is None:
            continue
        gaps.append(max(max(abs(rates[a][0] - rates[b][0]), abs(rates[a][1] - rates[b][1]))
                        for a, b in combinations(present, 2)))
    return sum(gaps) / len(gaps) if gaps else None


def reference_masks(weights, biases, tax, x, *, masked, tau):
    """Masks produced by a forward pass, to be held fixed for detached gradients."""
    masks, prev = [], None
    for i, (w, b) in enumerate(zip(weights, biases)):
        z = x @ w.T + b
        mask = np.ones_like(z) if i == 0 else prev[:, np.asarray(tax.parents[i - 1])]
        u = (z * mask if masked else z) / tau
        e = np.exp(u - u.max(axis=1, keepdims=True))
        prev = e / e.sum(axis=1, keepdims=True)
        masks.append(mask)
    return masks


def finite_difference(weights, biases, tax, x, y, loss_weights, *, masked, detached, tau, pi, h=1e-4):
    """Central differences of ``reference_loss`` for every W and b coordinate."""
    frozen = reference_masks(weights, biases, tax, x, masked=masked, tau=tau) if detached else None
    W = [w.copy() for w in weights]
    B = [b.copy() for b in biases]

    def loss():
        return reference_loss(W, B, tax, x, y, masked=masked, tau=tau, pi=pi,
                              loss_weights=loss_weights, frozen_masks=frozen)

    out = []
    for i in range(len(W)):
        gw = np.zeros_like(W[i])
        for idx in np.ndindex(W[i].shape):
            keep = W[i][idx]
            W[i][idx] = keep + h
            up = loss()
            W[i][idx] = keep - h
            down = loss()
            W[i][idx] = keep
            gw[idx] = (up - down) / (2 * h)
        gb = np.zeros_like(B[i])
        for k in range(len(B[i])):
            keep = B[i][k]
            B[i][k] = keep + h
            up = loss()
            B[i][k] = keep - h
            down = loss()
            B[i][k] = keep
            gb[k] = (up - down) / (2 * h)
        out.append((gw, gb))
    return out


def relative_errors(analytic, numeric, floor=1e-6):
    """Per-coordinate |a - f| / max(|a| + |f|, floor), flattened over all levels."""
    errs = []
    for (aw, ab), (fw, fb) in zip(analytic, numeric):
        for a, f in ((aw, fw), (ab, fb)):
            errs.append(np.abs(a - f).ravel() / np.maximum(np.abs(a) + np.abs(f), floor).ravel())
    return np.concatenate(errs)


def gradient_problem(seed):
    """A random small instance: 3-level tree (<= 5 classes/level), d <= 8, mixed groups."""
    rng = np.random.default_rng(seed)
    while True:
        tax = random_taxonomy(rng, 3, max_children=3, max_roots=2)
        if max(tax.sizes) <= 5:
            break
    d = int(rng.integers(2, 9))
    m = int(rng.integers(3, 7))
    weights = [rng.normal(0, 0.8, (k, d)) for k in tax.sizes]
    biases = [rng.normal(0, 0.5, k) for k in tax.sizes]
    x = rng.normal(size=(m, d))
    leaves = rng.integers(0, tax.sizes[-1], m)
    y = np.stack([tax.local_path(int(k)) for k in leaves])
    groups = rng.choice(["Male", "Female", "Background"], m)
    pi = rng.uniform(0.5, 2.0, 3)
    tau = float(rng.uniform(0.5, 2.0))
    return tax, weights, biases, x, y, groups, pi, tau
