"""Tree taxonomies partitioned into levels, and their transition matrices.

A taxonomy file is UTF-8 text with one edge per line, ``child<TAB>parent``.
Roots are declared as ``name<TAB>-``. Blank lines and lines starting with
``#`` are ignored. The order in which classes are declared fixes their
index within a level, and therefore the row/column layout of every
transition matrix. A ``.json`` file with ``{"levels": [...], "edges": [...]}``
is accepted as an alternative.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

ROOT_MARKER = "-"
OTHER_SUFFIX = "::other"


class TaxonomyError(ValueError):
    """Malformed or structurally invalid taxonomy."""


@dataclass(frozen=True)
class Taxonomy:
    """An n-level tree of named classes.

    ``levels[i]`` holds the class names at level i (0-based) in declaration
    order. ``parents[i]`` gives, for each class at level i + 1, the local
    index of its parent at level i, so ``len(parents) == n_levels - 1``.

    Global class ids are dense and level-major: level 0 occupies
    ``0 .. |l0|-1``, level 1 follows, and so on.
    """

    levels: tuple[tuple[str, ...], ...]
    parents: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if not self.levels:
            raise TaxonomyError("taxonomy has no levels")
        if len(self.parents) != len(self.levels) - 1:
            raise TaxonomyError("need exactly one parent table per non-root level")
        for i, names in enumerate(self.levels):
            if not names:
                raise TaxonomyError(f"level {i + 1} is empty")
            if len(set(names)) != len(names):
                dup = next(n for n in names if names.count(n) > 1)
                raise TaxonomyError(f"duplicate class {dup!r} at level {i + 1}")
        for i, par in enumerate(self.parents):
            if len(par) != len(self.levels[i + 1]):
                raise TaxonomyError(f"parent table for level {i + 2} has wrong length")
            if any(p < 0 or p >= len(self.levels[i]) for p in par):
                raise TaxonomyError(f"parent index out of range at level {i + 2}")
            childless = set(range(len(self.levels[i]))) - set(par)
            if childless:
                name = self.levels[i][min(childless)]
                raise TaxonomyError(
                    f"class {name!r} at level {i + 1} has no children "
                    "(use allow_childless to pad an 'other' child)"
                )

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(names) for names in self.levels)

    @property
    def n_classes(self) -> int:
        return sum(self.sizes)

    @cached_property
    def offsets(self) -> tuple[int, ...]:
        return tuple(int(x) for x in np.concatenate([[0], np.cumsum(self.sizes)[:-1]]))

    @cached_property
    def _index(self) -> tuple[dict[str, int], ...]:
        return tuple({name: k for k, name in enumerate(names)} for names in self.levels)

    # -- id helpers -----------------------------------------------------

    def global_id(self, level: int, local: int) -> int:
        if not 0 <= local < self.sizes[level]:
            raise IndexError(f"class index {local} out of range at level {level + 1}")
        return self.offsets[level] + local

    def locate(self, gid: int) -> tuple[int, int]:
        """Map a global id to ``(level, local index)``."""
        if not 0 <= gid < self.n_classes:
            raise IndexError(f"invalid class id {gid}")
        level = int(np.searchsorted(self.offsets, gid, side="right")) - 1
        return level, gid - self.offsets[level]

    def class_index(self, level: int, name: str) -> int:
        try:
            return self._index[level][name]
        except KeyError:
            raise KeyError(f"unknown class {name!r} at level {level + 1}") from None

    def name_of(self, gid: int) -> str:
        level, local = self.locate(gid)
        return self.levels[level][local]

    def parent(self, gid: int) -> int | None:
        level, local = self.locate(gid)
        if level == 0:
            return None
        return self.global_id(level - 1, self.parents[level - 1][local])

    # -- structure ------------------------------------------------------

    def transition_matrix(self, i: int) -> np.ndarray:
        """Binary ``|l_i| x |l_{i+1}|`` matrix; 1 where the column is a child of the row.

        ``i`` is the 0-based index of the upper level.
        """
        if not 0 <= i < self.n_levels - 1:
            raise IndexError(f"no transition from level {i + 1} in a {self.n_levels}-level taxonomy")
        return self._matrices[i]

    @cached_property
    def _matrices(self) -> tuple[np.ndarray, ...]:
        out = []
        for i, par in enumerate(self.parents):
            m = np.zeros((self.sizes[i], self.sizes[i + 1]))
            m[list(par), np.arange(len(par))] = 1.0
            m.flags.writeable = False
            out.append(m)
        return tuple(out)

    def is_descendant(self, child: int, ancestor: int) -> bool:
        lc, _ = self.locate(child)
        la, _ = self.locate(ancestor)
        if lc <= la:
            return False
        node = child
        while node is not None and self.locate(node)[0] > la:
            node = self.parent(node)
        return node == ancestor

    def path_of(self, leaf: int) -> list[int]:
        """Root-to-leaf global ids for a class at the deepest level."""
        level, _ = self.locate(leaf)
        if level != self.n_levels - 1:
            raise ValueError(f"class id {leaf} is at level {level + 1}, not the leaf level")
        path = [leaf]
        while (p := self.parent(path[-1])) is not None:
            path.append(p)
        return path[::-1]

    def local_path(self, leaf_local: int) -> np.ndarray:
        """Like ``path_of`` but in per-level local indices."""
        path = np.empty(self.n_levels, dtype=np.int64)
        path[-1] = leaf_local
        for i in range(self.n_levels - 2, -1, -1):
            path[i] = self.parents[i][path[i + 1]]
        return path

    def is_consistent(self, path) -> bool:
        """True if each entry (local index) is the parent of the next."""
        return all(self.parents[i][path[i + 1]] == path[i] for i in range(self.n_levels - 1))

    # -- serialization --------------------------------------------------

    def to_text(self) -> str:
        names = [n for level in self.levels for n in level]
        if len(set(names)) != len(names):
            raise TaxonomyError("class names repeat across levels; serialize with to_json instead")
        lines = []
        for name in self.levels[0]:
            lines.append(f"{name}\t{ROOT_MARKER}")
        for i, par in enumerate(self.parents):
            for name, p in zip(self.levels[i + 1], par):
                lines.append(f"{name}\t{self.levels[i][p]}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        edges = [
            [name, self.levels[i][p]]
            for i, par in enumerate(self.parents)
            for name, p in zip(self.levels[i + 1], par)
        ]
        return json.dumps({"levels": [list(n) for n in self.levels], "edges": edges}, indent=2)

    def summary(self) -> str:
        lines = [f"levels: {'/'.join(str(s) for s in self.sizes)}"]
        for i in range(self.n_levels - 1):
            r, c = self.transition_matrix(i).shape
            lines.append(f"M[l{i + 1},l{i + 2}]: {r}x{c}")
        return "\n".join(lines)


def _pad_childless(levels: list[list[str]], parents: list[list[int]]) -> None:
    """Give every childless non-leaf class a chain of synthetic 'other' children."""
    for i in range(len(parents)):
        have = set(parents[i])
        for k, name in enumerate(levels[i]):
            if k not in have:
                child = name + OTHER_SUFFIX
                while child in levels[i + 1]:
                    child += OTHER_SUFFIX
                levels[i + 1].append(child)
                parents[i].append(k)


def _build(levels, parents, allow_childless):
    if allow_childless:
        _pad_childless(levels, parents)
    return Taxonomy(tuple(tuple(n) for n in levels), tuple(tuple(p) for p in parents))


def parse_taxonomy(source: str, *, allow_childless: bool = False) -> Taxonomy:
    """Parse the tab-separated edge-list format."""
    order: list[str] = []
    parent_of: dict[str, str | None] = {}
    line_of: dict[str, int] = {}
    for lineno, raw in enumerate(source.splitlines(), 1):
        line = raw.rstrip("\r")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise TaxonomyError(f"line {lineno}: expected 'child<TAB>parent', got {line!r}")
        child, parent = parts
        if child in parent_of:
            if parent_of[child] != (None if parent == ROOT_MARKER else parent):
                raise TaxonomyError(
                    f"line {lineno}: class {child!r} has multiple parents "
                    f"(first declared on line {line_of[child]})"
                )
            raise TaxonomyError(f"line {lineno}: duplicate class {child!r} (line {line_of[child]})")
        if child == parent:
            raise TaxonomyError(f"line {lineno}: cycle detected, {child!r} is its own parent")
        parent_of[child] = None if parent == ROOT_MARKER else parent
        line_of[child] = lineno
        order.append(child)

    if not order:
        raise TaxonomyError("taxonomy file declares no classes")
    for child in order:
        p = parent_of[child]
        if p is not None and p not in parent_of:
            raise TaxonomyError(f"line {line_of[child]}: parent {p!r} of {child!r} is never declared")

    depth: dict[str, int] = {}
    for child in order:
        chain = []
        node = child
        while node is not None and node not in depth:
            if node in chain:
                cyc = " -> ".join(chain[chain.index(node):] + [node])
                raise TaxonomyError(f"line {line_of[node]}: cycle detected: {cyc}")
            chain.append(node)
            node = parent_of[node]
        base = -1 if node is None else depth[node]
        for k, name in enumerate(reversed(chain), 1):
            depth[name] = base + k

    n = max(depth.values()) + 1
    levels: list[list[str]] = [[] for _ in range(n)]
    for name in order:
        levels[depth[name]].append(name)
    index = [{name: k for k, name in enumerate(names)} for names in levels]
    parents = [
        [index[i][parent_of[name]] for name in levels[i + 1]] for i in range(n - 1)
    ]
    return _build(levels, parents, allow_childless)


def parse_taxonomy_json(source: str, *, allow_childless: bool = False) -> Taxonomy:
    try:
        doc = json.loads(source)
    except json.JSONDecodeError as exc:
        raise TaxonomyError(f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict) or "levels" not in doc:
        raise TaxonomyError("JSON taxonomy needs a 'levels' key")
    levels = doc["levels"]
    edges = doc.get("edges", [])
    if not isinstance(levels, list) or not all(isinstance(l, list) for l in levels):
        raise TaxonomyError("'levels' must be a list of lists of names")
    levels = [[str(n) for n in names] for names in levels]
    for i, names in enumerate(levels):
        if not names:
            raise TaxonomyError(f"levels[{i}]: level is empty")
        seen = set()
        for name in names:
            if name in seen:
                raise TaxonomyError(f"levels[{i}]: duplicate class {name!r}")
            seen.add(name)
    index = [{name: k for k, name in enumerate(names)} for names in levels]
    parents: list[list[int | None]] = [[None] * len(levels[i + 1]) for i in range(len(levels) - 1)]
    for e, edge in enumerate(edges):
        if not (isinstance(edge, list) and len(edge) == 2):
            raise TaxonomyError(f"edges[{e}]: expected [child, parent]")
        child, parent = (str(x) for x in edge)
        hits = [
            i for i in range(1, len(levels))
            if child in index[i] and parent in index[i - 1]
        ]
        if not hits:
            raise TaxonomyError(f"edges[{e}]: no adjacent-level pair matches {child!r} -> {parent!r}")
        if len(hits) > 1:
            raise TaxonomyError(f"edges[{e}]: ambiguous edge {child!r} -> {parent!r}")
        i = hits[0]
        slot = parents[i - 1]
        k = index[i][child]
        if slot[k] is not None and slot[k] != index[i - 1][parent]:
            raise TaxonomyError(f"edges[{e}]: class {child!r} has multiple parents")
        slot[k] = index[i - 1][parent]
    for i, slot in enumerate(parents):
        for k, p in enumerate(slot):
            if p is None:
                raise TaxonomyError(f"class {levels[i + 1][k]!r} at level {i + 2} has no parent")
    return _build(levels, parents, allow_childless)


def load_taxonomy(path, *, allow_childless: bool = False) -> Taxonomy:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix.lower() == ".json":
            return parse_taxonomy_json(text, allow_childless=allow_childless)
        return parse_taxonomy(text, allow_childless=allow_childless)
    except TaxonomyError as exc:
        raise TaxonomyError(f"{path}: {exc}") from None


def synthetic_taxonomy(branching) -> Taxonomy:
    """Balanced tree; ``branching[i]`` is the number of classes per node at level i.

    ``branching[0]`` is the number of roots, so ``(2, 2, 2)`` gives sizes 2/4/8.
    """
    if not branching or any(b < 1 for b in branching):
        raise ValueError("branching factors must be positive")
    levels = [[f"c{k}" for k in range(branching[0])]]
    parents = []
    for b in branching[1:]:
        prev = levels[-1]
        levels.append([f"{p}.{k}" for p in prev for k in range(b)])
        parents.append([j for j in range(len(prev)) for _ in range(b)])
    return Taxonomy(tuple(tuple(n) for n in levels), tuple(tuple(p) for p in parents))

