"""LDL^T factorization of the expanded arrow matrix.

    E = [[D,      F_{L-1}, ..., F_1],
         [F_{L-1}^T, -I,           ],
         [ ...            ...      ],
         [F_1^T,              -I   ]]

has ``Sigma = F F^T + D`` as the Schur complement of its ``-I_s`` block.
The factor ``L`` is unit lower triangular and is built level by level from
the quantities already produced by the SMW recursion; ``D^E`` is diagonal
with ``n`` positive entries followed by ``s`` negative ones.

Storage is strip-sparse. For factor level ``l`` (0-based) the strip rows are

* ``F_l^T D^{-1}`` over the first ``n`` columns (stored as ``n x r_l``),
* a coupling block ``(p_lt, r_l, r_lt)`` for every finer factor level ``lt``,
* the block-diagonal unit lower triangular ``R_l`` (``p_l x r_l x r_l``).
"""
import struct
from dataclasses import dataclass

import numpy as np

from .inverse import NumericalConsistencyError, invert
from .mlr import PsdMlr, _check_cap
from .partition import HierarchicalPartition

_MAGIC = b"MLFC"
_VERSION = 1


@dataclass
class ExpandedCholesky:
    partition: HierarchicalPartition
    ranks: object
    d: np.ndarray
    ftdinv: dict      # level -> (n, r_l)
    coupling: dict    # (level, finer level) -> (p_finer, r_l, r_finer)
    R: dict           # level -> (p_l, r_l, r_l), unit lower triangular
    V: dict           # level -> (p_l, r_l), positive

    @property
    def n(self):
        return self.partition.n

    @property
    def s(self):
        return self.ranks.num_factor_columns(self.partition)

    def factor_levels(self):
        """Factor levels with nonzero rank, in elimination order (finest first)."""
        return [l for l in range(self.partition.L - 2, -1, -1) if self.ranks[l] > 0]

    def row_offsets(self) -> dict:
        off, pos = {}, self.n
        for l in self.factor_levels():
            off[l] = pos
            pos += self.partition.num_groups(l) * self.ranks[l]
        return off

    def dsigned(self) -> np.ndarray:
        """Diagonal of ``D^E``: ``d`` then ``-V_l`` level by level."""
        parts = [self.d] + [-self.V[l].ravel() for l in self.factor_levels()]
        return np.concatenate(parts)

    def logdet(self) -> float:
        """``log det Sigma = sum log |D^E_ii|``."""
        return float(np.sum(np.log(self.d)) + sum(np.sum(np.log(self.V[l])) for l in self.V))

    def nnz_bound(self) -> int:
        """Stored nonzeros of ``L`` including the unit diagonal."""
        total = self.n
        for l in self.factor_levels():
            r = self.ranks[l]
            total += self.n * r
            total += sum(c.size for (a, _), c in self.coupling.items() if a == l)
            total += self.partition.num_groups(l) * r * (r + 1) // 2
        return total

    def to_dense(self, cap=None):
        """Dense ``(L, D^E)`` pair (oracle use)."""
        N = self.n + self.s
        _check_cap(N, cap)
        Lm = np.eye(N)
        off = self.row_offsets()
        part = self.partition
        for l in self.factor_levels():
            r = self.ranks[l]
            o = off[l]
            for k, g in enumerate(part.groups(l)):
                rows = slice(o + k * r, o + (k + 1) * r)
                Lm[rows, g.start:g.stop] = self.ftdinv[l][g.start:g.stop].T
                Lm[rows, rows] = self.R[l][k]
            for lt in self.factor_levels():
                if lt <= l:
                    continue
                rt = self.ranks[lt]
                anc = part.parent_index(lt, l)
                C = self.coupling[(l, lt)]
                for kt in range(part.num_groups(lt)):
                    k = anc[kt]
                    Lm[o + k * r:o + (k + 1) * r, off[lt] + kt * rt:off[lt] + (kt + 1) * rt] = C[kt]
        return Lm, self.dsigned()


def _ldl_blocks(G):
    """Batched ``G_k = R_k diag(V_k) R_k^T`` with unit lower triangular ``R_k``."""
    try:
        C = np.linalg.cholesky(G)
    except np.linalg.LinAlgError as exc:
        raise NumericalConsistencyError("block of I + F^T Sigma^-1 F is not positive definite") from exc
    diag = np.diagonal(C, axis1=1, axis2=2)
    return C / diag[:, None, :], diag ** 2


def factorize(m: PsdMlr, inv=None) -> ExpandedCholesky:
    """Factor the expanded matrix of ``m``; shares one pass with ``invert``."""
    if inv is None or not inv.records or inv.records[0].gram is None:
        inv = invert(m, keep_records=True)
    part, ranks = m.partition, m.ranks
    off = ranks.col_offsets()
    dinv = 1.0 / m.d
    ftdinv = {l: m.factors[l] * dinv[:, None] for l in range(m.L - 1) if ranks[l] > 0}
    coupling, R, V = {}, {}, {}
    for rec in sorted(inv.records, key=lambda x: -x.level):
        l = rec.level
        Rl, Vl = _ldl_blocks(rec.gram)
        R[l], V[l] = Rl, Vl
        if rec.m3 is None:
            continue
        # recurrent term: rows of coarser levels gain the column block M3^T R_l
        T = np.matmul(rec.m3.transpose(0, 2, 1), Rl)  # (p_l, c, r_l)
        for la in range(l):
            if ranks[la] > 0:
                coupling[(la, l)] = np.ascontiguousarray(T[:, off[la]:off[la + 1], :])
    return ExpandedCholesky(part, ranks, m.d.copy(), ftdinv, coupling, R, V)


def build_expanded_dense(m: PsdMlr, cap=None) -> np.ndarray:
    """Dense arrow matrix ``E`` with column order ``[n | F_{L-1} | ... | F_1]``."""
    N = m.n + m.s
    _check_cap(N, cap)
    E = np.zeros((N, N))
    E[:m.n, :m.n] = np.diag(m.d)
    pos = m.n
    for l in range(m.L - 2, -1, -1):
        if m.ranks[l] == 0:
            continue
        Fl = m.expanded_factor([l])
        w = Fl.shape[1]
        E[:m.n, pos:pos + w] = Fl
        E[pos:pos + w, :m.n] = Fl.T
        E[pos:pos + w, pos:pos + w] = -np.eye(w)
        pos += w
    return E


def schur_complement_check(m: PsdMlr, cap=None) -> float:
    """``||E / (-I_s) - Sigma||_F / ||Sigma||_F`` by dense block elimination."""
    E = build_expanded_dense(m, cap)
    n = m.n
    E11, E12, E22 = E[:n, :n], E[:n, n:], E[n:, n:]
    schur = E11 - E12 @ np.linalg.solve(E22, E12.T) if E22.size else E11
    S = m.to_dense(cap)
    return float(np.linalg.norm(schur - S) / np.linalg.norm(S))


def logdet_from_cholesky(c: ExpandedCholesky) -> float:
    return c.logdet()


def dump_binary(c: ExpandedCholesky, path):
    """Little-endian dump.

    Layout: ``b"MLFC"``, uint32 version, int64 ``n``, ``s``, ``L``, then
    ``L`` int64 ranks, then per level ``p_l`` and its ``p_l + 1`` int64
    boundaries, then ``d`` (float64). Then for every factor level in
    elimination order: ``F_l^T D^{-1}`` (``n x r_l``), the coupling blocks
    to finer levels in elimination order, ``R_l``, ``V_l``; all row-major
    float64.
    """
    part = c.partition
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<I3q", _VERSION, c.n, c.s, part.L))
        fh.write(struct.pack(f"<{part.L}q", *c.ranks.ranks))
        for b in part.bounds:
            fh.write(struct.pack("<q", b.size - 1))
            fh.write(b.astype("<i8").tobytes())
        fh.write(c.d.astype("<f8").tobytes())
        levels = c.factor_levels()
        for l in levels:
            fh.write(c.ftdinv[l].astype("<f8").tobytes())
            for lt in levels:
                if lt > l:
                    fh.write(c.coupling[(l, lt)].astype("<f8").tobytes())
            fh.write(c.R[l].astype("<f8").tobytes())
            fh.write(c.V[l].astype("<f8").tobytes())


def load_binary(path) -> ExpandedCholesky:
    from .partition import RankAllocation

    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _MAGIC:
        raise ValueError("not an expanded Cholesky dump")
    version, n, s, L = struct.unpack_from("<I3q", buf, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported dump version {version}")
    pos = 4 + struct.calcsize("<I3q")
    ranks = RankAllocation(struct.unpack_from(f"<{L}q", buf, pos))
    pos += 8 * L

    def take(count, shape=None, dtype="<f8"):
        nonlocal pos
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).copy()
        pos += 8 * count
        return arr.reshape(shape) if shape else arr

    bounds = []
    for _ in range(L):
        p = int(take(1, dtype="<i8")[0])
        bounds.append(take(p + 1, dtype="<i8"))
    part = HierarchicalPartition(bounds)
    d = take(n)
    c = ExpandedCholesky(part, ranks, d, {}, {}, {}, {})
    levels = c.factor_levels()
    for l in levels:
        r, p = ranks[l], part.num_groups(l)
        c.ftdinv[l] = take(n * r, (n, r))
        for lt in levels:
            if lt > l:
                pt, rt = part.num_groups(lt), ranks[lt]
                c.coupling[(l, lt)] = take(pt * r * rt, (pt, r, rt))
        c.R[l] = take(p * r * r, (p, r, r))
        c.V[l] = take(p * r, (p, r))
    return c
