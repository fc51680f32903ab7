"""PSD multilevel low rank (MLR) covariance matrices.

``Sigma = F_1 F_1^T + ... + F_{L-1} F_{L-1}^T + diag(d)`` where each ``F_l``
is block diagonal over the level-``l`` groups. Factors are stored in
compressed form: ``factors[l]`` is the ``n x r_l`` vertical stack of the
per-block factors ``F_{l,k}``.
"""
from dataclasses import dataclass

import numpy as np

from . import _backend
from .partition import HierarchicalPartition, PartitionError, check_ranks

DENSE_CAP = 5000


class DenseCapError(RuntimeError):
    """Dense materialization requested above the configured size cap."""


def _check_cap(n, cap):
    cap = DENSE_CAP if cap is None else cap
    if n > cap:
        raise DenseCapError(f"n={n} exceeds the dense cap {cap}; pass cap= to override")


@dataclass(frozen=True)
class CompressedForm:
    """All factor coefficients as one ``n x (r-1)`` matrix plus the diagonal."""

    Fbar: np.ndarray
    d: np.ndarray


class PsdMlr:
    """Contiguous PSD MLR matrix in compressed factor form.

    Parameters
    ----------
    partition : HierarchicalPartition
    ranks : RankAllocation or sequence of int
    factors : sequence of arrays
        ``factors[l]`` has shape ``(n, r_l)`` for ``l = 0 .. L-2``.
    d : array
        Positive diagonal of length ``n``.
    """

    def __init__(self, partition: HierarchicalPartition, ranks, factors, d):
        self.partition = partition
        self.ranks = check_ranks(partition, ranks)
        n = partition.n
        factors = list(factors)
        if len(factors) != partition.L - 1:
            raise PartitionError(f"expected {partition.L - 1} factor levels, got {len(factors)}")
        self.factors = []
        for l, (F, r) in enumerate(zip(factors, self.ranks.factor_ranks)):
            F = np.array(F, dtype=np.float64)
            if r == 0 and F.size == 0:
                F = F.reshape(n, 0)
            if F.shape != (n, r):
                raise PartitionError(f"level {l}: factor shape {F.shape}, expected {(n, r)}")
            F.setflags(write=False)
            self.factors.append(F)
        d = np.array(d, dtype=np.float64)
        if d.shape != (n,):
            raise PartitionError(f"d has shape {d.shape}, expected {(n,)}")
        bad = np.flatnonzero(~(d > 0))
        if bad.size:
            raise ValueError(f"d[{bad[0]}] = {d[bad[0]]} is not positive")
        d.setflags(write=False)
        self.d = d

    @property
    def n(self) -> int:
        return self.partition.n

    @property
    def L(self) -> int:
        return self.partition.L

    @property
    def mlr_rank(self) -> int:
        return self.ranks.mlr_rank

    @property
    def s(self) -> int:
        return self.ranks.num_factor_columns(self.partition)

    def block(self, level: int, k: int) -> np.ndarray:
        """The factor ``F_{l,k}`` (a view)."""
        b = self.partition.bounds[level]
        return self.factors[level][b[k]:b[k + 1]]

    @property
    def Fbar(self) -> np.ndarray:
        if not self.factors or self.mlr_rank == 1:
            return np.zeros((self.n, 0))
        return np.hstack(self.factors)

    def expanded_factor(self, levels=None) -> np.ndarray:
        """Dense ``n x s`` matrix ``[F_1 ... F_{L-1}]`` (oracle use)."""
        levels = range(self.L - 1) if levels is None else levels
        cols = []
        for l in levels:
            r = self.ranks[l]
            p = self.partition.num_groups(l)
            Fl = np.zeros((self.n, p * r))
            for k, g in enumerate(self.partition.groups(l)):
                Fl[g.start:g.stop, k * r:(k + 1) * r] = self.factors[l][g.start:g.stop]
            cols.append(Fl)
        return np.hstack(cols) if cols else np.zeros((self.n, 0))

    def matvec(self, x) -> np.ndarray:
        """``Sigma @ x`` for a vector or an ``n x m`` matrix, in ``O(n r m)``."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] != self.n:
            raise ValueError(f"length {x.shape[0]} does not match n={self.n}")
        X = x.reshape(self.n, -1)
        out = self.d[:, None] * X
        for l, F in enumerate(self.factors):
            if F.shape[1] == 0:
                continue
            b = self.partition.bounds[l]
            out += _backend.segment_apply(F, _backend.segment_gram(F, X, b), b)
        return out.reshape(x.shape)

    def to_dense(self, cap=None) -> np.ndarray:
        """Materialize ``Sigma`` (refuses above the dense cap)."""
        _check_cap(self.n, cap)
        S = np.diag(self.d)
        for l, F in enumerate(self.factors):
            for g in self.partition.groups(l):
                blk = F[g.start:g.stop]
                S[g.start:g.stop, g.start:g.stop] += blk @ blk.T
        return S

    def pack(self) -> CompressedForm:
        return CompressedForm(self.Fbar.copy(), self.d.copy())

    @classmethod
    def unpack(cls, partition, ranks, c: CompressedForm) -> "PsdMlr":
        ranks = check_ranks(partition, ranks)
        Fbar = np.asarray(c.Fbar, dtype=np.float64).reshape(partition.n, -1)
        if Fbar.shape[1] != ranks.mlr_rank - 1:
            raise PartitionError(
                f"Fbar has {Fbar.shape[1]} columns, ranks imply {ranks.mlr_rank - 1}"
            )
        off = ranks.col_offsets()
        factors = [Fbar[:, off[l]:off[l + 1]] for l in range(partition.L - 1)]
        return cls(partition, ranks, factors, c.d)

    def with_params(self, factors=None, d=None) -> "PsdMlr":
        return PsdMlr(
            self.partition,
            self.ranks,
            self.factors if factors is None else factors,
            self.d if d is None else d,
        )

    def __repr__(self):
        return f"PsdMlr(n={self.n}, ranks={self.ranks.ranks})"


def new_psd_mlr(partition, ranks, factors, d) -> PsdMlr:
    return PsdMlr(partition, ranks, factors, d)


def pack_compressed(m: PsdMlr) -> CompressedForm:
    return m.pack()


def unpack_compressed(partition, ranks, c: CompressedForm) -> PsdMlr:
    return PsdMlr.unpack(partition, ranks, c)


def frobenius_error(m: PsdMlr, S, cap=None) -> float:
    """Relative Frobenius error ``||Sigma - S||_F / ||S||_F``."""
    S = np.asarray(S, dtype=np.float64)
    return float(np.linalg.norm(m.to_dense(cap) - S) / np.linalg.norm(S))


def random_psd_mlr(partition, ranks, rng=None, scale=1.0, dmin=0.1, dmax=1.0) -> PsdMlr:
    """Random model with standard normal factors (testing and warm starts)."""
    rng = np.random.default_rng(rng)
    ranks = check_ranks(partition, ranks)
    factors = [scale * rng.standard_normal((partition.n, r)) for r in ranks.factor_ranks]
    d = rng.uniform(dmin, dmax, size=partition.n)
    return PsdMlr(partition, ranks, factors, d)
