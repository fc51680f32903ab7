"""Synthetic multilevel factor models and likelihood-based evaluation."""
import csv
import math
from dataclasses import dataclass

import numpy as np

from . import _backend
from .em import Dataset, EmOptions, fit, init_frobenius_sweep, log_likelihood
from .inverse import invert
from .mlr import PsdMlr
from .partition import HierarchicalPartition, PartitionError, check_ranks

LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings.

    ``groups`` lists the number of groups per level, top to bottom; the last
    entry must equal ``n`` (singletons). Groups are split evenly and nested.
    """

    n: int
    groups: tuple
    ranks: tuple
    snr: float = 4.0
    N: int = 80
    seed: int = 0

    def __post_init__(self):
        if not self.snr > 0:
            raise ValueError("snr must be positive")
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if len(self.groups) != len(self.ranks):
            raise ValueError("groups and ranks need one entry per level")
        if self.groups[-1] != self.n:
            raise ValueError("the bottom level must have n singleton groups")

    def partition(self) -> HierarchicalPartition:
        return even_partition(self.n, self.groups)


def desk_config(seed=0) -> SynthConfig:
    return SynthConfig(500, (1, 4, 8, 16, 32, 500), (10, 5, 4, 3, 2, 1), snr=4.0, N=80, seed=seed)


def full_scale_config(seed=0) -> SynthConfig:
    return SynthConfig(10000, (1, 4, 8, 16, 32, 10000), (10, 5, 4, 3, 2, 1), snr=4.0, N=80, seed=seed)


def even_partition(n, groups) -> HierarchicalPartition:
    """Boundaries ``round(k n / p_l)``; nested whenever each count divides the next."""
    bounds = [np.rint(np.arange(p + 1) * (n / p)).astype(np.int64) for p in groups]
    try:
        return HierarchicalPartition(bounds)
    except PartitionError as exc:
        raise PartitionError(f"group counts {tuple(groups)} do not give nested even splits: {exc}") from exc


class Generator:
    """A sampled truth plus a reproducible sampler.

    The model and the samples come from separate Philox streams spawned
    from ``SeedSequence(cfg.seed)``, so drawing data never perturbs the truth.
    """

    def __init__(self, cfg: SynthConfig):
        self.cfg = cfg
        root = np.random.SeedSequence(cfg.seed)
        self._model_ss, self._sample_ss = root.spawn(2)
        self.truth = self._draw_truth()

    def _draw_truth(self) -> PsdMlr:
        cfg = self.cfg
        rng = np.random.Generator(np.random.Philox(self._model_ss))
        part = cfg.partition()
        ranks = check_ranks(part, cfg.ranks)
        factors = [rng.standard_normal((cfg.n, r)) for r in ranks.factor_ranks]
        signal = sum(float(np.sum(F * F)) for F in factors) / cfg.n
        hi = 2.0 * signal / cfg.snr
        if not hi > 0:
            hi = 1.0   # no factors: nothing to scale against
        d = rng.uniform(0.0, hi, size=cfg.n)
        while np.any(d == 0.0):
            zero = d == 0.0
            d[zero] = rng.uniform(0.0, hi, size=int(zero.sum()))
        return PsdMlr(part, ranks, factors, d)

    def sample(self, count=None, seed=0) -> Dataset:
        """``count`` draws of ``y = F z + e``; stream ``seed`` of the sample generator."""
        count = self.cfg.N if count is None else int(count)
        if count < 1:
            raise ValueError("N must be >= 1")
        ss = np.random.SeedSequence(self._sample_ss.entropy, spawn_key=self._sample_ss.spawn_key + (int(seed),))
        rng = np.random.Generator(np.random.Philox(ss))
        m = self.truth
        Y = np.sqrt(m.d)[:, None] * rng.standard_normal((m.n, count))
        for l, F in enumerate(m.factors):
            r = F.shape[1]
            if r == 0:
                continue
            p = m.partition.num_groups(l)
            Z = rng.standard_normal((p, r, count))
            Y += _backend.segment_apply(F, Z, m.partition.bounds[l])
        return Dataset(np.ascontiguousarray(Y.T))


def generate(cfg: SynthConfig):
    """Return ``(truth, sample)`` where ``sample(count, seed)`` yields a :class:`Dataset`."""
    g = Generator(cfg)
    return g.truth, g.sample


def _trace_inv_times(inv, truth: PsdMlr) -> float:
    """``Tr(Sigma_fit^{-1} Sigma_true)`` in linear time (shared partition)."""
    part = truth.partition
    dinv = inv.dinv
    total = float(np.sum(inv.diagonal() * truth.d))
    for lt, Ft in enumerate(truth.factors):
        if Ft.shape[1] == 0:
            continue
        total += float(np.sum(dinv[:, None] * Ft * Ft))
        for l, H in enumerate(inv.hfactors):
            if H.shape[1] == 0:
                continue
            G = _backend.segment_gram(H, Ft, part.bounds[max(l, lt)])
            total -= float(np.sum(G * G))
    return total


def expected_ll(fit_model: PsdMlr, truth: PsdMlr) -> float:
    """Expected log-likelihood of one draw from ``truth`` under ``fit_model``."""
    if fit_model.n != truth.n:
        raise ValueError(f"dimension mismatch: {fit_model.n} vs {truth.n}")
    inv = invert(fit_model)
    if fit_model.partition.same_structure(truth.partition):
        tr = _trace_inv_times(inv, truth)
    else:
        tr = float(np.trace(inv.to_dense() @ truth.to_dense()))
    return -0.5 * fit_model.n * LOG_2PI - 0.5 * inv.logdet - 0.5 * tr


def _avg_ll_dense(Sigma, S):
    n = S.shape[0]
    sign, ld = np.linalg.slogdet(Sigma)
    if sign <= 0:
        raise ValueError("model covariance is not positive definite")
    return -0.5 * n * LOG_2PI - 0.5 * ld - 0.5 * np.trace(np.linalg.solve(Sigma, S))


def average_ll(S, m) -> float:
    """``ell(Sigma; Y) / N`` written through the sample covariance ``S``."""
    Sigma = m.to_dense() if isinstance(m, PsdMlr) else np.asarray(m, dtype=np.float64)
    return _avg_ll_dense(Sigma, np.asarray(S, dtype=np.float64))


def quadratic_ll_approx(S, m, form="whitened") -> float:
    """Second-order expansion of the average log-likelihood around ``Sigma = S``.

    ``form="whitened"`` uses the Taylor correction
    ``1/4 ||S^{-1/2} (Sigma - S) S^{-1/2}||_F^2``; ``form="unwhitened"``
    uses ``1/4 ||I - S^{-1} Sigma||_F^2``. The two agree when ``S`` is a
    multiple of the identity; only the first has a third-order remainder
    in general.
    """
    S = 0.5 * (np.asarray(S, dtype=np.float64) + np.asarray(S, dtype=np.float64).T)
    Sigma = m.to_dense() if isinstance(m, PsdMlr) else np.asarray(m, dtype=np.float64)
    n = S.shape[0]
    lam, Q = np.linalg.eigh(S)
    if lam[0] <= 1e-12 * max(lam[-1], 1e-300):
        raise ValueError("sample covariance is singular; apply shrinkage (S + eps*I) first")
    base = -0.5 * n * LOG_2PI - 0.5 * float(np.sum(np.log(lam))) - 0.5 * n
    if form == "whitened":
        Wh = (Q / np.sqrt(lam)) @ Q.T
        C = Wh @ (Sigma - S) @ Wh
    elif form == "unwhitened":
        C = np.eye(n) - np.linalg.solve(S, Sigma)
    else:
        raise ValueError(f"unknown form {form!r}")
    return base - 0.25 * float(np.sum(C * C))


def ll_mean_std_under_model(m, N) -> tuple:
    """Mean and standard deviation of ``ell / N`` when ``y_i ~ N(0, Sigma)``."""
    if N < 1:
        raise ValueError("N must be >= 1")
    n = m.n
    ld = invert(m).logdet if isinstance(m, PsdMlr) else float(np.linalg.slogdet(m)[1])
    return -0.5 * n * LOG_2PI - 0.5 * ld - 0.5 * n, math.sqrt(n / (2.0 * N))


def compare_methods(cfg: SynthConfig, trials: int, seed=0, opts: EmOptions | None = None, hist_path=None) -> dict:
    """Expected log-likelihood of the MLE versus the single Frobenius sweep.

    The truth is fixed by ``cfg.seed``; trial ``t`` draws ``cfg.N`` fresh
    samples from sample stream ``seed + t``. The MLE is EM started from the
    same sweep that serves as the baseline.
    """
    gen = Generator(cfg)
    opts = EmOptions() if opts is None else opts
    part, ranks = gen.truth.partition, gen.truth.ranks
    rows = []
    for t in range(int(trials)):
        data = gen.sample(cfg.N, seed=seed + t)
        base = init_frobenius_sweep(data, part, ranks, d_floor=opts.d_floor, cap=opts.dense_cap)
        run = EmOptions(opts.max_iters, opts.rel_tol, opts.d_floor, base, opts.seed, opts.dense_cap)
        mle, trace = fit(data, part, ranks, run)
        e_mle, e_frob = expected_ll(mle, gen.truth), expected_ll(base, gen.truth)
        rows.append({
            "trial": t,
            "ell_mle": e_mle,
            "ell_frob": e_frob,
            "diff": e_mle - e_frob,
            "loglik_mle": trace.loglik[-1],
            "loglik_frob": log_likelihood(base, data),
            "status": trace.status,
        })
    diffs = np.array([r["diff"] for r in rows])
    report = {
        "baseline": "frobenius_sweep",
        "trials": len(rows),
        "mean": float(diffs.mean()) if rows else None,
        "std": float(diffs.std(ddof=1)) if len(rows) > 1 else None,
        "fraction_positive": float(np.mean(diffs > 0)) if rows else None,
        "ell_truth": expected_ll(gen.truth, gen.truth) if rows else None,
        "rows": rows,
    }
    if hist_path is not None:
        write_histogram_csv(rows, hist_path)
    return report


def write_histogram_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "ell_mle", "ell_frob", "diff"])
        for r in rows:
            w.writerow([r["trial"], repr(r["ell_mle"]), repr(r["ell_frob"]), repr(r["diff"])])
