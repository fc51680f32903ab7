"""Products of MLR matrices sharing one hierarchical partition.

A general (non-symmetric) contiguous MLR matrix is ``A = sum_l B_l C_l^T``
with ``B_l, C_l`` block diagonal over level ``l``; the bottom level is the
singleton level, so ``B_L C_L^T`` is diagonal. The product of matrices of
MLR-rank ``r`` and ``r'`` is an MLR matrix of MLR-rank ``r + r'``, with
level ``l`` factors

    left  = [B_l | sum_{lt > l} Bbar_{l,lt}]
    right = [sum_{lt >= l} Cbar_{l,lt} | C'_l]

where ``A_l A'_lt = B_l Cbar_{l,lt}^T`` (``lt >= l``) and
``A_lt A'_l = Bbar_{l,lt} C'_l^T`` (``lt > l``).
"""
from dataclasses import dataclass

import numpy as np

from . import _backend
from .inverse import InverseMlr
from .mlr import PsdMlr, _check_cap
from .partition import HierarchicalPartition, PartitionError


@dataclass
class GeneralMlr:
    """Per level ``l = 0 .. L-1``, compressed ``n x r_l`` left and right factors."""

    partition: HierarchicalPartition
    left: list
    right: list

    def __post_init__(self):
        n = self.partition.n
        if len(self.left) != self.partition.L or len(self.right) != self.partition.L:
            raise PartitionError("need left/right factors for every level, including the diagonal one")
        for l, (B, C) in enumerate(zip(self.left, self.right)):
            if B.shape != C.shape or B.shape[0] != n:
                raise PartitionError(f"level {l}: factor shapes {B.shape} and {C.shape}")

    @property
    def ranks(self):
        return tuple(B.shape[1] for B in self.left)

    @property
    def mlr_rank(self):
        return sum(self.ranks)

    def to_dense(self, cap=None) -> np.ndarray:
        n = self.partition.n
        _check_cap(n, cap)
        A = np.zeros((n, n))
        for l, (B, C) in enumerate(zip(self.left, self.right)):
            for g in self.partition.groups(l):
                A[g.start:g.stop, g.start:g.stop] += B[g.start:g.stop] @ C[g.start:g.stop].T
        return A

    def matvec(self, x):
        X = np.asarray(x, dtype=np.float64).reshape(self.partition.n, -1)
        out = np.zeros_like(X)
        for l, (B, C) in enumerate(zip(self.left, self.right)):
            b = self.partition.bounds[l]
            out += _backend.segment_apply(B, _backend.segment_gram(C, X, b), b)
        return out.reshape(np.shape(x))


def as_general(m) -> GeneralMlr:
    """Embed a :class:`PsdMlr` or :class:`InverseMlr` as a :class:`GeneralMlr`."""
    if isinstance(m, PsdMlr):
        left = [F for F in m.factors] + [m.d[:, None]]
        right = [F for F in m.factors] + [np.ones((m.n, 1))]
        return GeneralMlr(m.partition, left, right)
    if isinstance(m, InverseMlr):
        left = [-H for H in m.hfactors] + [m.dinv[:, None]]
        right = [H for H in m.hfactors] + [np.ones((m.n, 1))]
        return GeneralMlr(m.partition, left, right)
    raise TypeError(f"cannot embed {type(m).__name__}")


def multiply(a: GeneralMlr, b: GeneralMlr) -> GeneralMlr:
    """``a @ b`` in MLR form, ``O(n max(r, r')^2)``."""
    if not a.partition.same_structure(b.partition):
        raise PartitionError("operands must share the same hierarchical partition")
    part = a.partition
    L = part.L
    left, right = [], []
    for l in range(L):
        B, C = a.left[l], a.right[l]
        Bp, Cp = b.left[l], b.right[l]
        # sum_{lt >= l} Cbar_{l,lt}: rows of level-lt block j get Cp_lt[j] (Bp_lt[j]^T C_l[j])
        cbar = np.zeros((part.n, B.shape[1]))
        for lt in range(l, L):
            bt = part.bounds[lt]
            G = _backend.segment_gram(b.left[lt], C, bt)
            cbar += _backend.segment_apply(b.right[lt], G, bt)
        # sum_{lt > l} Bbar_{l,lt}: rows of level-lt block j get B_lt[j] (C_lt[j]^T Bp_l[j])
        bbar = np.zeros((part.n, Cp.shape[1]))
        for lt in range(l + 1, L):
            bt = part.bounds[lt]
            G = _backend.segment_gram(a.right[lt], Bp, bt)
            bbar += _backend.segment_apply(a.left[lt], G, bt)
        left.append(np.hstack([B, bbar]))
        right.append(np.hstack([cbar, Cp]))
    return GeneralMlr(part, left, right)


def identity_residual(m: PsdMlr, inv: InverseMlr, cap=None) -> float:
    """``||Sigma Sigma^{-1} - I||_F`` through the MLR product (dense at the end)."""
    if not m.partition.same_structure(inv.partition):
        raise PartitionError("model and inverse partitions differ")
    P = multiply(as_general(m), as_general(inv))
    return float(np.linalg.norm(P.to_dense(cap) - np.eye(m.n)))
