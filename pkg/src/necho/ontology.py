"""Two-level diagnosis hierarchy and multi-hot label construction.

Edge file format (UTF-8, one entry per line, ``#`` starts a comment)::

    <leaf_id> <parent_id>     # an edge; whitespace or a comma separates columns
    <parent_id>               # declares a parent, possibly childless

Indices are assigned by first appearance, so the same file always yields the
same dense index spaces.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

LEAF = "leaf"
PARENT = "parent"


class HierarchyError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Ontology:
    leaf_codes: tuple[str, ...]
    parent_codes: tuple[str, ...]
    parent_of: np.ndarray  # leaf index -> parent index

    def __post_init__(self):
        parent_of = np.asarray(self.parent_of, dtype=np.int64)
        parent_of.setflags(write=False)
        object.__setattr__(self, "parent_of", parent_of)
        if parent_of.shape != (len(self.leaf_codes),):
            raise HierarchyError("parent_of must map every leaf")
        if len(parent_of) and (parent_of.min() < 0 or parent_of.max() >= len(self.parent_codes)):
            raise HierarchyError("parent_of points outside the parent space")
        object.__setattr__(self, "_leaf_index", {c: i for i, c in enumerate(self.leaf_codes)})
        object.__setattr__(self, "_parent_index", {c: i for i, c in enumerate(self.parent_codes)})

    @property
    def n_leaves(self) -> int:
        return len(self.leaf_codes)

    @property
    def n_parents(self) -> int:
        return len(self.parent_codes)

    def leaf_index(self, code: str) -> int:
        return self._leaf_index[code]

    def parent_index(self, code: str) -> int:
        return self._parent_index[code]

    def children(self, parent: int) -> np.ndarray:
        return np.flatnonzero(self.parent_of == parent)

    def edges(self) -> dict[str, str]:
        return {leaf: self.parent_codes[p] for leaf, p in zip(self.leaf_codes, self.parent_of)}

    def __eq__(self, other) -> bool:
        # structural equality: same codes, same edges, independent of file order
        if not isinstance(other, Ontology):
            return NotImplemented
        return (set(self.parent_codes) == set(other.parent_codes)
                and self.edges() == other.edges())

    def __hash__(self):
        return hash((frozenset(self.parent_codes), frozenset(self.edges().items())))


_SPLIT = re.compile(r"[,\s]+")


def parse_ontology_lines(lines: Iterable[str]) -> Ontology:
    leaves: dict[str, int] = {}
    parents: dict[str, int] = {}
    parent_of: list[int] = []
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        cols = [c for c in _SPLIT.split(line) if c]
        if len(cols) > 2:
            raise HierarchyError(f"line {lineno}: expected 'leaf parent' or 'parent', got {raw.strip()!r}")
        if len(cols) == 1:
            parents.setdefault(cols[0], len(parents))
            continue
        leaf, parent = cols
        p = parents.setdefault(parent, len(parents))
        if leaf in leaves:
            known = parent_of[leaves[leaf]]
            if known != p:
                first = next(k for k, v in parents.items() if v == known)
                raise HierarchyError(f"line {lineno}: leaf {leaf!r} has two parents ({first!r}, {parent!r})")
            continue  # duplicate edge
        leaves[leaf] = len(leaves)
        parent_of.append(p)
    ont = Ontology(tuple(leaves), tuple(parents), np.array(parent_of, dtype=np.int64))
    counts = np.bincount(ont.parent_of, minlength=ont.n_parents)
    for j in np.flatnonzero(counts == 0):
        log.warning("parent %r has no children; retained", ont.parent_codes[j])
    return ont


def parse_ontology(path) -> Ontology:
    with open(path, encoding="utf-8") as fh:
        return parse_ontology_lines(fh)


def emit_ontology(ont: Ontology) -> str:
    """Canonical text: edges sorted by (parent, leaf), then childless parents."""
    lines = ["# leaf_id parent_id"]
    for leaf, parent in sorted(ont.edges().items(), key=lambda kv: (kv[1], kv[0])):
        lines.append(f"{leaf}\t{parent}")
    counts = np.bincount(ont.parent_of, minlength=ont.n_parents)
    for j in sorted(np.flatnonzero(counts == 0), key=lambda j: ont.parent_codes[j]):
        lines.append(ont.parent_codes[j])
    return "\n".join(lines) + "\n"


def write_ontology(ont: Ontology, path) -> Path:
    path = Path(path)
    path.write_text(emit_ontology(ont), encoding="utf-8")
    return path


def default_ontology(n_parents: int = 12, children_per_parent: int = 10) -> Ontology:
    """The synthetic hierarchy: ``P00..`` parents each with ``P00.0..`` leaves."""
    width = max(2, len(str(n_parents - 1)))
    cwidth = len(str(children_per_parent - 1))
    parents = tuple(f"P{j:0{width}d}" for j in range(n_parents))
    leaves, parent_of = [], []
    for j, p in enumerate(parents):
        for c in range(children_per_parent):
            leaves.append(f"{p}.{c:0{cwidth}d}")
            parent_of.append(j)
    return Ontology(tuple(leaves), parents, np.array(parent_of))


def sample_ontology_path() -> Path:
    return Path(__file__).parent / "resources" / "sample_ontology.txt"


def _check_codes(codes: Sequence[int], size: int) -> np.ndarray:
    idx = np.fromiter(codes, dtype=np.int64) if not isinstance(codes, np.ndarray) else codes.astype(np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        bad = idx[(idx < 0) | (idx >= size)][0]
        raise IndexError(f"code index {int(bad)} outside label space of size {size}")
    return idx


def leaf_label_vector(codes: Iterable[int], ont: Ontology) -> np.ndarray:
    """Multi-hot over the leaf space."""
    idx = _check_codes(list(codes), ont.n_leaves)
    out = np.zeros(ont.n_leaves, dtype=np.int8)
    out[idx] = 1
    return out


def ancestor_label_vector(codes: Iterable[int], ont: Ontology) -> np.ndarray:
    """Multi-hot over the parent space: bit j set iff some code has parent j."""
    idx = _check_codes(list(codes), ont.n_leaves)
    out = np.zeros(ont.n_parents, dtype=np.int8)
    out[ont.parent_of[idx]] = 1
    return out
