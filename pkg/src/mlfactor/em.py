"""Structured EM for multilevel factor models.

Each iteration inverts the current PSD MLR covariance in linear time, forms
the E-step moments ``V`` and ``W`` restricted to every row sparsity pattern
of ``F``, and solves one small dense least squares problem per pattern.
The observed-data log-likelihood reuses the same inverse.
"""
import logging
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla

from . import _backend
from .inverse import InverseMlr, NumericalConsistencyError, invert
from .mlr import DENSE_CAP, PsdMlr
from .partition import HierarchicalPartition, check_ranks, sparsity_groups

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)


class FitError(RuntimeError):
    pass


class InitFallbackWarning(RuntimeWarning):
    pass


@dataclass
class Dataset:
    """Observations ``Y`` (``N x n``, contiguous feature order) and optional covariates ``X``."""

    Y: np.ndarray
    X: np.ndarray | None = None

    def __post_init__(self):
        self.Y = np.ascontiguousarray(self.Y, dtype=np.float64)
        if self.Y.ndim != 2:
            raise ValueError("Y must be a 2-d array")
        if self.Y.shape[0] < 1:
            raise ValueError("N must be >= 1")
        if self.X is not None:
            self.X = np.ascontiguousarray(self.X, dtype=np.float64).reshape(self.Y.shape[0], -1)

    @property
    def N(self):
        return self.Y.shape[0]

    @property
    def n(self):
        return self.Y.shape[1]

    @property
    def p(self):
        return 0 if self.X is None else self.X.shape[1]


@dataclass
class EmOptions:
    max_iters: int = 300
    rel_tol: float = 1e-8
    d_floor: float | None = None   # absolute; default 1e-8 * mean second moment
    init: object = "frob"          # "frob", "random", or a PsdMlr warm start
    seed: int = 0
    dense_cap: int = DENSE_CAP

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive")
        if self.d_floor is not None and not self.d_floor > 0:
            raise ValueError("d_floor must be positive")


@dataclass
class FitTrace:
    loglik: list = field(default_factory=list)
    rel_change: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    status: str = "max_iters"
    init: str = ""
    floored: int = 0

    @property
    def converged(self):
        return self.status == "converged"

    @property
    def iterations(self):
        """Number of completed M-steps."""
        return max(len(self.loglik) - 1, 0)

    def rows(self):
        return [
            (i, ll, rc, t)
            for i, (ll, rc, t) in enumerate(zip(self.loglik, self.rel_change, self.seconds))
        ]


@dataclass
class ReducedMoments:
    """Pattern-restricted E-step moments.

    ``V[i] = S_ci V S_ri^T`` and ``W[i] = S_ci W S_ci^T``; ``P`` is the full
    ``s x N`` matrix ``F^T Sigma^{-1} Ytilde^T``.
    """

    V: list
    W: list
    trace_W: float
    yty: np.ndarray
    loglik: float
    P: np.ndarray
    K: np.ndarray


def _residual(data: Dataset, B):
    if B is None or data.p == 0:
        return data.Y
    return data.Y - data.X @ B.T


def _default_floor(Y):
    return 1e-8 * float(np.mean(Y * Y))


def _per_level_blocks(m: PsdMlr, A):
    """``F^T A`` stacked in expanded column order (``s x m``)."""
    parts = []
    for l, F in enumerate(m.factors):
        if F.shape[1] == 0:
            continue
        G = _backend.segment_gram(F, A, m.partition.bounds[l])
        parts.append(G.reshape(-1, A.shape[1]))
    return np.vstack(parts) if parts else np.zeros((0, A.shape[1]))


def log_likelihood(m: PsdMlr, data: Dataset, inv: InverseMlr | None = None, B=None) -> float:
    """Observed-data log-likelihood; mean ``B x_i`` when covariates are given."""
    if data.n != m.n:
        raise ValueError(f"data has {data.n} features, model has {m.n}")
    inv = invert(m) if inv is None else inv
    R = _residual(data, B)
    U = inv.apply(np.ascontiguousarray(R.T))
    quad = float(np.einsum("ij,ji->", R, U))
    return -0.5 * data.N * (m.n * LOG_2PI + inv.logdet) - 0.5 * quad


def e_step(m0: PsdMlr, data: Dataset, groups=None, inv=None, B=None) -> ReducedMoments:
    """Pattern-restricted ``V`` and ``W`` plus the log-likelihood of ``m0``."""
    if data.n != m0.n:
        raise ValueError(f"data has {data.n} features, model has {m0.n}")
    groups = sparsity_groups(m0.partition, m0.ranks) if groups is None else groups
    inv = invert(m0) if inv is None else inv
    N = data.N
    R = _residual(data, B)
    U = inv.apply(np.ascontiguousarray(R.T))                # Sigma^{-1} Ytilde^T
    loglik = -0.5 * N * (m0.n * LOG_2PI + inv.logdet) - 0.5 * float(np.einsum("ij,ji->", R, U))
    if not math.isfinite(loglik):
        raise FloatingPointError(f"log-likelihood is {loglik}")
    P = _per_level_blocks(m0, U)                            # s x N
    SF = inv.apply(m0.expanded_factor())                    # Sigma^{-1} F, n x s
    K = _per_level_blocks(m0, SF)                           # F^T Sigma^{-1} F
    K = 0.5 * (K + K.T)
    s = K.shape[0]
    Vs, Ws = [], []
    for g in groups:
        Pi = P[g.cols]
        Wi = N * (np.eye(g.cols.size) - K[np.ix_(g.cols, g.cols)]) + Pi @ Pi.T
        Wi = 0.5 * (Wi + Wi.T)
        if Wi.size:
            lo = np.linalg.eigvalsh(Wi)[0]
            if not lo > 1e-10 * max(1.0, np.abs(Wi).max()):
                raise NumericalConsistencyError(
                    f"pattern {g.index}: reduced W has eigenvalue {lo!r}"
                )
        Vs.append(Pi @ R[:, g.rows.start:g.rows.stop])
        Ws.append(Wi)
    trace_W = N * (s - float(np.trace(K))) + float(np.sum(P * P))
    yty = np.einsum("ij,ij->j", R, R)
    return ReducedMoments(Vs, Ws, trace_W, yty, loglik, P, K)


def m_step(moments: ReducedMoments, data: Dataset, groups, partition, ranks, d_floor=None, B=None):
    """Per-pattern least squares for ``F`` (and ``B``), then the diagonal update.

    Returns ``(model, B, floored)`` where ``floored`` counts diagonal entries
    raised to ``d_floor``.
    """
    ranks = check_ranks(partition, ranks)
    n, N, p = partition.n, data.N, data.p
    Y = data.Y
    q = ranks.mlr_rank - 1
    Fbar = np.zeros((n, q))
    Bnew = np.zeros((n, p))
    dnew = np.zeros(n)
    if p:
        X = data.X
        XtX = X.T @ X
        R = _residual(data, B)
    for g, Vi, Wi in zip(groups, moments.V, moments.W):
        rows = slice(g.rows.start, g.rows.stop)
        Yi = Y[:, rows]
        if p:
            Pi = moments.P[g.cols]
            XtP = X.T @ Pi.T
            G = np.block([[XtX, XtP], [XtP.T, Wi]])
            rhs = np.vstack([X.T @ Yi, Pi @ Yi])
        else:
            G, rhs = Wi, Vi
        if G.size:
            sol = sla.solve(G, rhs, assume_a="pos")          # (p + r - 1) x |s_i|
        else:
            sol = np.zeros((0, Yi.shape[1]))
        Bnew[rows] = sol[:p].T
        Fbar[rows] = sol[p:].T
        yy = np.einsum("ij,ij->j", Yi, Yi)
        dnew[rows] = (yy - 2 * np.einsum("ij,ij->j", sol, rhs) + np.einsum("ij,ij->j", sol, G @ sol)) / N
    if d_floor is None:
        d_floor = _default_floor(Y if not p else R)
    floored = int(np.sum(dnew < d_floor))
    dnew = np.maximum(dnew, d_floor)
    off = ranks.col_offsets()
    factors = [Fbar[:, off[l]:off[l + 1]] for l in range(partition.L - 1)]
    return PsdMlr(partition, ranks, factors, dnew), (Bnew if p else None), floored


def _sign_fix(U):
    # first nonzero entry of every eigenvector positive
    for j in range(U.shape[1]):
        nz = np.flatnonzero(np.abs(U[:, j]) > 1e-14)
        if nz.size and U[nz[0], j] < 0:
            U[:, j] = -U[:, j]
    return U


def init_frobenius_sweep(data: Dataset, partition, ranks, d_floor=None, cap=None, B=None) -> PsdMlr:
    """One top-to-bottom sweep of blockwise truncated eigendecompositions.

    At level ``l`` each diagonal block of the residual ``S - (fitted
    coarser levels)`` is replaced by its best PSD rank-``r_l`` approximation.
    Falls back to :func:`init_random` (with a warning) when a top-level
    block exceeds ``cap``.
    """
    ranks = check_ranks(partition, ranks)
    cap = DENSE_CAP if cap is None else cap
    R = _residual(data, B)
    N, n = R.shape
    if partition.sizes(0).max() > cap:
        warnings.warn(
            f"top-level block of size {partition.sizes(0).max()} exceeds the dense cap {cap}; "
            "using random initialization",
            InitFallbackWarning,
        )
        return init_random(data, partition, ranks, seed=0, B=B)
    factors = []
    for l, r in enumerate(ranks.factor_ranks):
        F = np.zeros((n, r))
        if r:
            for g in partition.groups(l):
                rows = slice(g.start, g.stop)
                Sb = R[:, rows].T @ R[:, rows] / N
                for Fc in factors:
                    Sb -= Fc[rows] @ Fc[rows].T
                Sb = 0.5 * (Sb + Sb.T)
                lam, U = np.linalg.eigh(Sb)
                k = min(r, lam.size)
                lam, U = lam[::-1][:k], _sign_fix(U[:, ::-1][:, :k].copy())
                F[rows, :k] = U * np.sqrt(np.maximum(lam, 0.0))
        factors.append(F)
    d = np.einsum("ij,ij->j", R, R) / N
    for F in factors:
        d = d - np.einsum("ij,ij->i", F, F)
    floor = _default_floor(R) if d_floor is None else d_floor
    return PsdMlr(partition, ranks, factors, np.maximum(d, floor))


def init_random(data: Dataset, partition, ranks, seed=0, B=None) -> PsdMlr:
    """Standard normal factors scaled to the per-feature sample variance."""
    ranks = check_ranks(partition, ranks)
    rng = np.random.default_rng(seed)
    R = _residual(data, B)
    var = np.maximum(np.einsum("ij,ij->j", R, R) / R.shape[0], _default_floor(R) + 1e-300)
    q = max(ranks.mlr_rank - 1, 1)
    scale = np.sqrt(var / q / 2)[:, None]
    factors = [rng.standard_normal((partition.n, r)) * scale for r in ranks.factor_ranks]
    return PsdMlr(partition, ranks, factors, var / 2)


def _initial(data, partition, ranks, opts: EmOptions, B):
    init = opts.init
    if isinstance(init, PsdMlr):
        if not init.partition.same_structure(partition) or init.ranks != ranks:
            raise ValueError("warm start does not match the hierarchy and ranks")
        return init, "warm"
    if init == "random":
        return init_random(data, partition, ranks, seed=opts.seed, B=B), "random"
    if init == "frob":
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", InitFallbackWarning)
            m = init_frobenius_sweep(data, partition, ranks, d_floor=opts.d_floor, cap=opts.dense_cap, B=B)
        if caught:
            logger.warning(str(caught[0].message))
            return m, "random(fallback)"
        return m, "frob"
    raise ValueError(f"unknown init {init!r}")


def _em_loop(data: Dataset, partition, ranks, opts: EmOptions, B0=None):
    ranks = check_ranks(partition, ranks)
    if data.n != partition.n:
        raise ValueError(f"data has {data.n} features, hierarchy has {partition.n}")
    groups = sparsity_groups(partition, ranks)
    model, how = _initial(data, partition, ranks, opts, B0)
    B = B0
    trace = FitTrace(init=how)
    prev = None
    for it in range(opts.max_iters):
        t0 = time.perf_counter()
        try:
            inv = invert(model)
            mom = e_step(model, data, groups, inv=inv, B=B)
        except (FloatingPointError, NumericalConsistencyError) as exc:
            raise FitError(f"iteration {it}: {exc}") from exc
        ll = mom.loglik
        rel = float("nan") if prev is None else abs(ll - prev) / max(1.0, abs(prev))
        trace.loglik.append(ll)
        trace.rel_change.append(rel)
        if prev is not None and rel < opts.rel_tol:
            trace.seconds.append(time.perf_counter() - t0)
            trace.status = "converged"
            break
        if it == opts.max_iters - 1:
            trace.seconds.append(time.perf_counter() - t0)
            break
        model, B, floored = m_step(mom, data, groups, partition, ranks, d_floor=opts.d_floor, B=B)
        trace.floored += floored
        trace.seconds.append(time.perf_counter() - t0)
        prev = ll
        logger.debug("iter %d loglik %.6f rel %.3e", it, ll, rel)
    return model, B, trace


def fit(data: Dataset, partition: HierarchicalPartition, ranks, opts: EmOptions | None = None):
    """Maximum likelihood fit by structured EM; returns ``(model, trace)``."""
    opts = EmOptions() if opts is None else opts
    if data.p:
        data = Dataset(data.Y)
    model, _, trace = _em_loop(data, partition, ranks, opts)
    return model, trace


def fit_with_covariates(data: Dataset, partition: HierarchicalPartition, ranks, opts: EmOptions | None = None):
    """EM for ``y_i = B x_i + F z_i + e_i``; returns ``(model, B, trace)``.

    ``B`` starts at the ordinary least squares solution.
    """
    opts = EmOptions() if opts is None else opts
    if data.p == 0:
        model, _, trace = _em_loop(Dataset(data.Y), partition, ranks, opts)
        return model, np.zeros((data.n, 0)), trace
    X = data.X
    G = X.T @ X
    if np.linalg.matrix_rank(X) < X.shape[1] or np.linalg.cond(G) > 1e12:
        raise ValueError("covariate matrix X is rank deficient; remove collinear covariates")
    B0 = np.linalg.lstsq(X, data.Y, rcond=None)[0].T
    model, B, trace = _em_loop(data, partition, ranks, opts, B0=B0)
    return model, B, trace
