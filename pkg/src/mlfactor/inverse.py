"""Linear-time inverse and log-determinant of a PSD MLR matrix.

The Sherman-Morrison-Woodbury identity is applied level by level, from the
finest factor level up to the top:

    Sigma_{l+}^{-1} = Sigma_{(l+1)+}^{-1} - H_l H_l^T,
    H_l = Sigma_{(l+1)+}^{-1} F_l (I + F_l^T Sigma_{(l+1)+}^{-1} F_l)^{-1/2}.

The only recursion state is ``Sigma_{(l+1)+}^{-1} F_{l-}`` in compressed
form, which keeps the sparsity pattern of ``F_{l-}``.
"""
from dataclasses import dataclass, field

import numpy as np

from . import _backend
from .mlr import PsdMlr, _check_cap

EIG_TOL = 1e-8


class NumericalConsistencyError(ArithmeticError):
    """A quantity that is analytically bounded came out of range."""


@dataclass
class LevelRecord:
    """Per-level byproducts of the recursion (``l`` is 0-based)."""

    level: int
    eigvals: np.ndarray           # (p_l, r_l), eigenvalues of I + F_l^T Sigma_{(l+1)+}^{-1} F_l
    eigvecs: np.ndarray           # (p_l, r_l, r_l)
    gram: np.ndarray | None = None  # the symmetrized blocks themselves
    m3: np.ndarray | None = None    # (p_l, r_l, sum_{l'<l} r_l'), kept for the Cholesky strips


@dataclass
class InverseMlr:
    """``Sigma^{-1} = diag(dinv) - sum_l H_l H_l^T`` with ``supp(H_l) = supp(F_l)``."""

    partition: object
    ranks: object
    hfactors: list
    dinv: np.ndarray
    logdet: float
    level_eigs: list
    records: list = field(default_factory=list, repr=False)

    @property
    def n(self):
        return self.partition.n

    def apply(self, X) -> np.ndarray:
        """``Sigma^{-1} @ X`` in ``O(n r m)``."""
        X = np.asarray(X, dtype=np.float64)
        if X.shape[0] != self.n:
            raise ValueError(f"row count {X.shape[0]} does not match n={self.n}")
        Y = X.reshape(self.n, -1)
        out = self.dinv[:, None] * Y
        for l, H in enumerate(self.hfactors):
            if H.shape[1] == 0:
                continue
            b = self.partition.bounds[l]
            out -= _backend.segment_apply(H, _backend.segment_gram(H, Y, b), b)
        return out.reshape(X.shape)

    def diagonal(self) -> np.ndarray:
        """Diagonal of ``Sigma^{-1}``."""
        out = self.dinv.copy()
        for H in self.hfactors:
            out -= np.einsum("ij,ij->i", H, H)
        return out

    def to_dense(self, cap=None) -> np.ndarray:
        _check_cap(self.n, cap)
        S = np.diag(self.dinv)
        for l, H in enumerate(self.hfactors):
            for g in self.partition.groups(l):
                blk = H[g.start:g.stop]
                S[g.start:g.stop, g.start:g.stop] -= blk @ blk.T
        return S

    def expanded_factor(self, level) -> np.ndarray:
        r = self.ranks[level]
        p = self.partition.num_groups(level)
        out = np.zeros((self.n, p * r))
        for k, g in enumerate(self.partition.groups(level)):
            out[g.start:g.stop, k * r:(k + 1) * r] = self.hfactors[level][g.start:g.stop]
        return out


def _sym(A):
    return 0.5 * (A + A.transpose(0, 2, 1))


def invert(m: PsdMlr, keep_records=False) -> InverseMlr:
    """Recursive SMW inverse of ``m``; the log-determinant comes for free.

    With ``keep_records`` the per-level Gram blocks and the ``M_3`` products
    needed by the expanded Cholesky factorization are retained.
    """
    part, ranks = m.partition, m.ranks
    fr = ranks.factor_ranks
    off = ranks.col_offsets()
    dinv = 1.0 / m.d
    logdet = float(np.sum(np.log(m.d)))
    # state: Sigma_{(l+1)+}^{-1} F_{l-}, compressed, columns of levels 0..l
    state = dinv[:, None] * m.Fbar
    hfactors = [None] * (m.L - 1)
    level_eigs = [None] * (m.L - 1)
    records = []
    for l in range(m.L - 2, -1, -1):
        r = fr[l]
        b = part.bounds[l]
        p = part.num_groups(l)
        if r == 0:
            hfactors[l] = np.zeros((m.n, 0))
            level_eigs[l] = np.zeros((p, 0))
            continue
        M0 = state[:, off[l]:off[l + 1]]
        G = _sym(np.eye(r) + _backend.segment_gram(m.factors[l], M0, b))
        lam, Q = np.linalg.eigh(G)
        if not np.all(np.isfinite(lam)) or lam.min() < 1.0 - EIG_TOL:
            raise NumericalConsistencyError(
                f"level {l}: eigenvalue {lam.min()!r} of I + F^T Sigma^-1 F below 1"
            )
        logdet += float(np.sum(np.log(lam)))
        # H_l = M0 (Q diag(lam^-1/2) Q^T), per block
        Hmat = np.matmul(Q * lam[:, None, :] ** -0.5, Q.transpose(0, 2, 1))
        hfactors[l] = _backend.segment_apply(M0, Hmat, b)
        level_eigs[l] = lam
        rec = LevelRecord(l, lam, Q, G if keep_records else None)
        c = off[l]
        if c > 0:
            M1 = _backend.segment_gram(M0, m.Fbar[:, :c], b)          # M0^T F_{(l-1)-}
            M2 = np.matmul(Q / lam[:, None, :], Q.transpose(0, 2, 1))  # G^{-1}
            M3 = np.matmul(M2, M1)
            M4 = _backend.segment_apply(M0, M3, b)
            state = state[:, :c] - M4                                 # M5
            if keep_records:
                rec.m3 = M3
        else:
            state = state[:, :0]
        records.append(rec)
    for l in range(m.L - 1):
        hfactors[l].setflags(write=False)
    return InverseMlr(part, ranks, hfactors, dinv, logdet, level_eigs, records[::-1])


def apply_inverse(inv: InverseMlr, X) -> np.ndarray:
    return inv.apply(X)


def logdet(inv: InverseMlr) -> float:
    return inv.logdet
