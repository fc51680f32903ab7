"""Hierarchical index partitions and rank allocations.

Levels are indexed ``0 .. L-1`` internally (level 0 is the coarsest, level
``L-1`` is the singleton level carrying the diagonal). Every level is stored
as a boundary array ``bounds[l]`` of length ``p_l + 1`` over the contiguous
(permuted) feature order.
"""
from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np


class PartitionError(ValueError):
    """Structurally invalid hierarchy or rank allocation."""


class HierarchicalPartition:
    """Nested contiguous partitions ``J_1 >= ... >= J_L`` of ``n`` features.

    Parameters
    ----------
    bounds : sequence of int arrays
        Per level, boundaries ``0 = b_0 < b_1 < ... < b_p = n``.
    perm : int array, optional
        ``perm[i]`` is the raw feature index stored at contiguous position
        ``i``. Defaults to the identity.
    labels : sequence, optional
        Raw feature labels (in raw order).
    """

    def __init__(self, bounds, perm=None, labels=None):
        self.bounds = tuple(np.asarray(b, dtype=np.int64) for b in bounds)
        if len(self.bounds) < 2:
            raise PartitionError("a hierarchy needs at least 2 levels")
        n = int(self.bounds[0][-1])
        self.n = n
        for l, b in enumerate(self.bounds):
            if b.ndim != 1 or b.size < 2 or b[0] != 0 or b[-1] != n:
                raise PartitionError(f"level {l}: boundaries must run from 0 to n={n}")
            if np.any(np.diff(b) <= 0):
                k = int(np.argmax(np.diff(b) <= 0))
                raise PartitionError(f"level {l}: group {k} is empty")
        for l in range(1, len(self.bounds)):
            missing = np.setdiff1d(self.bounds[l - 1], self.bounds[l])
            if missing.size:
                k = int(np.searchsorted(self.bounds[l], missing[0])) - 1
                raise PartitionError(
                    f"level {l}: group {k} straddles a boundary of level {l - 1}"
                )
        if self.bounds[-1].size != n + 1:
            raise PartitionError("bottom level must consist of singletons")
        if perm is None:
            perm = np.arange(n)
        perm = np.asarray(perm, dtype=np.int64)
        if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
            raise PartitionError("perm must be a permutation of 0..n-1")
        self.perm = perm
        self.labels = None if labels is None else list(labels)
        self._parents = {}

    @classmethod
    def from_sizes(cls, sizes: Sequence[Sequence[int]], perm=None, labels=None):
        """Build from per-level group sizes in contiguous order.

        A singleton bottom level is appended when the last level given is
        not already all ones.
        """
        levels = [list(map(int, s)) for s in sizes]
        if not levels:
            raise PartitionError("no levels given")
        if any(x <= 0 for s in levels for x in s):
            raise PartitionError("group sizes must be positive")
        n = sum(levels[0])
        for l, s in enumerate(levels):
            if sum(s) != n:
                raise PartitionError(f"level {l}: sizes sum to {sum(s)}, expected {n}")
        if any(x != 1 for x in levels[-1]):
            levels.append([1] * n)
        bounds = [np.concatenate([[0], np.cumsum(s)]) for s in levels]
        return cls(bounds, perm=perm, labels=labels)

    @property
    def L(self) -> int:
        return len(self.bounds)

    def num_groups(self, level: int) -> int:
        return self.bounds[level].size - 1

    def sizes(self, level: int) -> np.ndarray:
        return np.diff(self.bounds[level])

    def groups(self, level: int):
        """Contiguous index ranges of ``level`` as ``range`` objects."""
        b = self.bounds[level]
        return [range(int(b[k]), int(b[k + 1])) for k in range(b.size - 1)]

    def parent_index(self, level: int, coarser: int) -> np.ndarray:
        """For each group of ``level``, the index of its ancestor at ``coarser``."""
        if coarser > level:
            raise ValueError("coarser level must not be finer than level")
        key = (level, coarser)
        if key not in self._parents:
            starts = self.bounds[level][:-1]
            self._parents[key] = np.searchsorted(self.bounds[coarser], starts, side="right") - 1
        return self._parents[key]

    def row_group(self, level: int) -> np.ndarray:
        """Group index at ``level`` of every contiguous row."""
        return np.repeat(np.arange(self.num_groups(level)), self.sizes(level))

    def level_sizes(self):
        return [self.sizes(l).tolist() for l in range(self.L)]

    def contiguous_labels(self):
        if self.labels is None:
            return None
        return [self.labels[i] for i in self.perm]

    def __eq__(self, other):
        if not isinstance(other, HierarchicalPartition):
            return NotImplemented
        return self.L == other.L and all(
            np.array_equal(a, b) for a, b in zip(self.bounds, other.bounds)
        )

    def same_structure(self, other) -> bool:
        return self == other

    def __repr__(self):
        return f"HierarchicalPartition(n={self.n}, groups={[self.num_groups(l) for l in range(self.L)]})"


@dataclass(frozen=True)
class RankAllocation:
    """Per-level ranks ``(r_1, ..., r_{L-1}, 1)``."""

    ranks: tuple

    def __init__(self, ranks, levels=None):
        ranks = tuple(int(r) for r in ranks)
        if levels is not None and len(ranks) == levels - 1:
            ranks = ranks + (1,)
        if not ranks or ranks[-1] != 1:
            raise PartitionError("the last (diagonal) rank must be 1")
        if any(r < 0 for r in ranks):
            raise PartitionError("ranks must be nonnegative")
        if levels is not None and len(ranks) != levels:
            raise PartitionError(f"expected {levels} ranks, got {len(ranks)}")
        object.__setattr__(self, "ranks", ranks)

    @property
    def L(self) -> int:
        return len(self.ranks)

    @property
    def factor_ranks(self):
        return self.ranks[:-1]

    @property
    def mlr_rank(self) -> int:
        return sum(self.ranks)

    def col_offsets(self) -> np.ndarray:
        """Column offsets of each level inside the compressed matrix ``Fbar``."""
        return np.concatenate([[0], np.cumsum(self.factor_ranks)]).astype(np.int64)

    def num_factor_columns(self, partition: HierarchicalPartition) -> int:
        """``s = sum_l p_l r_l`` over factor levels."""
        return int(sum(partition.num_groups(l) * r for l, r in enumerate(self.factor_ranks)))

    def __iter__(self):
        return iter(self.ranks)

    def __getitem__(self, i):
        return self.ranks[i]

    def __len__(self):
        return len(self.ranks)


@dataclass(frozen=True)
class SparsityGroup:
    """Rows of ``F`` sharing one sparsity pattern and the columns it selects."""

    index: int
    rows: range
    cols: np.ndarray


def check_ranks(partition: HierarchicalPartition, ranks) -> RankAllocation:
    if not isinstance(ranks, RankAllocation):
        ranks = RankAllocation(ranks, levels=partition.L)
    if ranks.L != partition.L:
        raise PartitionError(f"{ranks.L} ranks for a {partition.L}-level hierarchy")
    return ranks


def build_partition(assignments: Sequence[Sequence[Hashable]], labels=None) -> HierarchicalPartition:
    """Contiguize a raw per-level grouping of features.

    ``assignments[l][j]`` is the group label of raw feature ``j`` at level
    ``l``. Groups are ordered by first appearance, recursively within their
    parent. A singleton bottom level is appended when missing.
    """
    levels = [list(a) for a in assignments]
    if not levels:
        raise PartitionError("no levels given")
    n = len(levels[0])
    if n == 0:
        raise PartitionError("no features")
    for l, a in enumerate(levels):
        if len(a) != n:
            raise PartitionError(f"level {l}: {len(a)} assignments for {n} features")
    if len(set(levels[-1])) != n:
        levels.append(list(range(n)))

    # nesting: every level-l group must sit inside one level-(l-1) group
    for l in range(1, len(levels)):
        parent_of = {}
        for j in range(n):
            g, pg = levels[l][j], levels[l - 1][j]
            if parent_of.setdefault(g, pg) != pg:
                raise PartitionError(
                    f"level {l}: group {g!r} spans level-{l - 1} groups "
                    f"{parent_of[g]!r} and {pg!r}"
                )

    order = []
    sizes = [[] for _ in levels]

    def visit(level, members):
        seen = {}
        for j in members:
            seen.setdefault(levels[level][j], []).append(j)
        for child in seen.values():
            sizes[level].append(len(child))
            if level + 1 < len(levels):
                visit(level + 1, child)
            else:
                order.extend(child)

    visit(0, range(n))
    bounds = [np.concatenate([[0], np.cumsum(s)]) for s in sizes]
    return HierarchicalPartition(bounds, perm=np.array(order), labels=labels)


def refines(a, b) -> bool:
    """True iff every block of partition ``a`` lies inside a block of ``b``."""
    a = [frozenset(x) for x in a]
    b = [frozenset(x) for x in b]
    ua = frozenset().union(*a)
    ub = frozenset().union(*b)
    if ua != ub or sum(map(len, a)) != len(ua) or sum(map(len, b)) != len(ub):
        raise PartitionError("arguments are not partitions of the same index set")
    owner = {i: k for k, blk in enumerate(b) for i in blk}
    return all(len({owner[i] for i in blk}) == 1 for blk in a)


def sparsity_groups(partition: HierarchicalPartition, ranks) -> list:
    """Row sparsity patterns of the structured factor matrix ``F``.

    One group per level ``L-2`` block (0-based), in leaf order. ``cols``
    indexes the columns of the expanded ``n x s`` matrix
    ``F = [F_1 ... F_{L-1}]``.
    """
    ranks = check_ranks(partition, ranks)
    leaf = partition.L - 2
    offsets = np.concatenate(
        [[0], np.cumsum([partition.num_groups(l) * r for l, r in enumerate(ranks.factor_ranks)])]
    )
    out = []
    b = partition.bounds[leaf]
    for i in range(partition.num_groups(leaf)):
        cols = []
        for l, r in enumerate(ranks.factor_ranks):
            if r == 0:
                continue
            k = int(partition.parent_index(leaf, l)[i])
            cols.append(offsets[l] + k * r + np.arange(r))
        cols = np.concatenate(cols).astype(np.int64) if cols else np.zeros(0, dtype=np.int64)
        out.append(SparsityGroup(i, range(int(b[i]), int(b[i + 1])), cols))
    return out
