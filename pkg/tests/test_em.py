import numpy as np
import pytest

from mlfactor.em import (Dataset, EmOptions, FitError, e_step, fit, fit_with_covariates,
                         init_frobenius_sweep, init_random, log_likelihood, m_step)
from mlfactor.inverse import NumericalConsistencyError
from mlfactor.mlr import PsdMlr, random_psd_mlr
from mlfactor.partition import HierarchicalPartition, sparsity_groups
from oracles import (compressed_from_expanded, dense_em_step, dense_loglik, dense_moments, dense_q,
                     dense_q_grad, random_partition, random_ranks, support_mask)


def sample(m, N, rng):
    return rng.multivariate_normal(np.zeros(m.n), m.to_dense(), size=N)


def instance(seed, n=30, L=4, N=40, ranks=None):
    rng = np.random.default_rng(seed)
    part = random_partition(rng, n, L)
    ranks = random_ranks(rng, L) if ranks is None else ranks
    truth = random_psd_mlr(part, ranks, rng)
    Y = sample(truth, N, rng)
    m0 = random_psd_mlr(part, ranks, rng)
    return part, ranks, m0, Dataset(Y), rng


# --- log-likelihood -------------------------------------------------------

def test_loglik_standard_normal_at_zero():
    part = HierarchicalPartition.from_sizes([[1], [1]])
    m = PsdMlr(part, (0, 1), [np.zeros((1, 0))], [1.0])
    assert log_likelihood(m, Dataset(np.zeros((1, 1)))) == pytest.approx(-0.9189385, abs=1e-7)


def test_loglik_diagonal_closed_form(rng):
    part = random_partition(rng, 12, 3)
    d = rng.uniform(0.5, 2, 12)
    m = PsdMlr(part, (1, 1, 1), [np.zeros((12, 1))] * 2, d)
    Y = rng.standard_normal((7, 12))
    ref = np.sum(-0.5 * np.log(2 * np.pi * d) - 0.5 * Y ** 2 / d)
    assert log_likelihood(m, Dataset(Y)) == pytest.approx(ref, abs=1e-12 * abs(ref))


def test_loglik_dense_oracle():
    part, ranks, m0, data, rng = instance(1, n=50, L=4, N=30)
    ll = log_likelihood(m0, data)
    ref = dense_loglik(m0.to_dense(), data.Y)
    assert abs(ll - ref) < 1e-9 * abs(ref)
    with pytest.raises(ValueError):
        log_likelihood(m0, Dataset(data.Y[:, :-1]))


# --- E-step -----------------------------------------------------------------

def test_estep_zero_factors(rng):
    part = random_partition(rng, 20, 3)
    m = PsdMlr(part, (2, 1, 1), [np.zeros((20, 2)), np.zeros((20, 1))], np.ones(20))
    Y = rng.standard_normal((9, 20))
    groups = sparsity_groups(part, (2, 1, 1))
    mom = e_step(m, Dataset(Y), groups)
    for V, W in zip(mom.V, mom.W):
        assert np.all(V == 0)
        np.testing.assert_allclose(W, 9 * np.eye(3))


def test_estep_matches_dense_moments():
    part, ranks, m0, data, rng = instance(2, n=30, L=4, N=25, ranks=(2, 1, 2, 1))
    groups = sparsity_groups(part, ranks)
    mom = e_step(m0, data, groups)
    V, W = dense_moments(m0.expanded_factor(), m0.d, data.Y)
    for g, Vi, Wi in zip(groups, mom.V, mom.W):
        rows = list(g.rows)
        np.testing.assert_allclose(Vi, V[np.ix_(g.cols, rows)], rtol=1e-9, atol=1e-9 * np.abs(V).max())
        np.testing.assert_allclose(Wi, W[np.ix_(g.cols, g.cols)], rtol=1e-9, atol=1e-9 * np.abs(W).max())
        assert np.linalg.eigvalsh(Wi).min() > 0
    assert mom.trace_W == pytest.approx(np.trace(W), rel=1e-10)


def test_estep_zero_data(rng):
    part = random_partition(rng, 15, 3)
    m = random_psd_mlr(part, (2, 1, 1), rng)
    groups = sparsity_groups(part, (2, 1, 1))
    mom = e_step(m, Dataset(np.zeros((1, 15))), groups)
    F = m.expanded_factor()
    Wd = np.eye(F.shape[1]) - F.T @ np.linalg.solve(m.to_dense(), F)
    for g, V, W in zip(groups, mom.V, mom.W):
        assert np.all(V == 0)
        np.testing.assert_allclose(W, Wd[np.ix_(g.cols, g.cols)], atol=1e-12)
        assert np.linalg.eigvalsh(W).min() > 0


def test_estep_rejects_indefinite_w(rng, monkeypatch):
    part = random_partition(rng, 10, 3)
    m = random_psd_mlr(part, (1, 1, 1), rng)
    import mlfactor.em as em

    monkeypatch.setattr(em, "_per_level_blocks", lambda model, A: 1e6 * np.ones((model.s, A.shape[1])))
    with pytest.raises(NumericalConsistencyError, match="pattern"):
        e_step(m, Dataset(np.zeros((1, 10))))


# --- M-step -----------------------------------------------------------------

def test_mstep_decoupled(rng):
    part = random_partition(rng, 20, 3)
    m = PsdMlr(part, (2, 1, 1), [np.zeros((20, 2)), np.zeros((20, 1))], np.ones(20))
    Y = rng.standard_normal((9, 20))
    groups = sparsity_groups(part, m.ranks)
    m1, _, _ = m_step(e_step(m, Dataset(Y), groups), Dataset(Y), groups, part, m.ranks)
    assert np.all(m1.Fbar == 0)
    np.testing.assert_allclose(m1.d, np.sum(Y ** 2, 0) / 9, rtol=1e-13)


@pytest.mark.parametrize("seed", range(6))
def test_mstep_row_oracle_and_q_increase(seed):
    part, ranks, m0, data, rng = instance(10 + seed, n=30, L=4, N=35)
    groups = sparsity_groups(part, ranks)
    m1, _, _ = m_step(e_step(m0, data, groups), data, groups, part, ranks)
    mask = support_mask(part, ranks)
    F1, D1 = dense_em_step(m0.expanded_factor(), m0.d, data.Y, mask)
    scale = max(1.0, np.abs(F1).max())
    np.testing.assert_allclose(m1.expanded_factor(), F1, atol=1e-9 * scale)
    np.testing.assert_allclose(m1.d, D1, rtol=1e-9)
    V, W = dense_moments(m0.expanded_factor(), m0.d, data.Y)
    q0 = dense_q(m0.expanded_factor(), m0.d, V, W, data.Y)
    q1 = dense_q(m1.expanded_factor(), m1.d, V, W, data.Y)
    assert q1 >= q0 - 1e-9 * abs(q0)
    # stationarity of Q in the free entries of F at the update
    G = dense_q_grad(m1.expanded_factor(), m1.d, V, W, mask)
    assert np.abs(G).max() < 1e-6 * max(1.0, np.abs(V).max())


def test_mstep_finite_difference_direction():
    part, ranks, m0, data, rng = instance(33, n=20, L=3, N=30, ranks=(2, 1, 1))
    groups = sparsity_groups(part, ranks)
    m1, _, _ = m_step(e_step(m0, data, groups), data, groups, part, ranks)
    V, W = dense_moments(m0.expanded_factor(), m0.d, data.Y)
    F1, D1 = m1.expanded_factor(), m1.d
    mask = support_mask(part, ranks)
    q1 = dense_q(F1, D1, V, W, data.Y)
    for _ in range(5):
        P = rng.standard_normal(F1.shape) * mask
        for h in (1e-3, -1e-3):
            assert dense_q(F1 + h * P, D1, V, W, data.Y) <= q1 + 1e-9 * abs(q1)


# --- fit ----------------------------------------------------------------------

def test_fit_diagonal_converges_fast(rng):
    part = random_partition(rng, 25, 3)
    d = rng.uniform(0.5, 2, 25)
    Y = rng.standard_normal((200, 25)) * np.sqrt(d)
    model, trace = fit(Dataset(Y), part, (0, 0, 1), EmOptions(init="random"))
    assert trace.converged and trace.iterations <= 2
    np.testing.assert_allclose(model.d, np.mean(Y ** 2, 0), rtol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_fit_monotone(seed):
    rng = np.random.default_rng(seed)
    L = int(rng.integers(2, 6))
    part = random_partition(rng, int(rng.integers(15, 60)), L)
    ranks = random_ranks(rng, L, rmax=3)
    truth = random_psd_mlr(part, ranks, rng)
    data = Dataset(sample(truth, int(rng.integers(10, 60)), rng))
    init = "random" if seed % 2 else "frob"
    model, trace = fit(data, part, ranks, EmOptions(max_iters=60, init=init, seed=seed))
    ll = np.array(trace.loglik)
    assert np.all(np.diff(ll) >= -1e-7 * np.maximum(1.0, np.abs(ll[:-1])))
    assert np.all(model.d > 0)
    assert trace.loglik[-1] == pytest.approx(log_likelihood(model, data), rel=1e-12)


def test_structured_equals_naive_dense_per_iteration():
    part, ranks, m0, data, rng = instance(7, n=40, L=4, N=50, ranks=(2, 2, 1, 1))
    mask = support_mask(part, ranks)
    groups = sparsity_groups(part, ranks)
    F, D = m0.expanded_factor(), m0.d.copy()
    m = m0
    for _ in range(15):
        m, _, _ = m_step(e_step(m, data, groups), data, groups, part, ranks)
        F, D = dense_em_step(F, D, data.Y, mask)
        assert np.linalg.norm(m.expanded_factor() - F) <= 1e-8 * np.linalg.norm(F)
        assert np.linalg.norm(m.d - D) <= 1e-8 * np.linalg.norm(D)


def test_warm_start_fixed_point():
    part, ranks, m0, data, rng = instance(5, n=20, L=3, N=40, ranks=(1, 1, 1))
    model, trace = fit(data, part, ranks, EmOptions(max_iters=3000, rel_tol=1e-13, init="random"))
    warm, tr2 = fit(data, part, ranks, EmOptions(init=model))
    assert tr2.converged and tr2.iterations == 1
    assert abs(tr2.rel_change[1]) < 1e-8


def test_max_iters_status():
    part, ranks, m0, data, rng = instance(8, n=20, L=3, N=40, ranks=(2, 1, 1))
    model, trace = fit(data, part, ranks, EmOptions(max_iters=3))
    assert trace.status == "max_iters" and len(trace.loglik) == 3
    assert trace.loglik[-1] == pytest.approx(log_likelihood(model, data), rel=1e-12)


def test_nan_aborts_with_iteration():
    part, ranks, m0, data, rng = instance(9, n=12, L=3, N=10, ranks=(1, 1, 1))
    Y = data.Y.copy()
    Y[3, 4] = np.nan
    with pytest.raises(FitError, match="iteration 0"):
        fit(Dataset(Y), part, ranks, EmOptions(init=m0))


def test_options_validation():
    with pytest.raises(ValueError):
        EmOptions(max_iters=0)
    with pytest.raises(ValueError):
        EmOptions(rel_tol=0)
    with pytest.raises(ValueError):
        Dataset(np.zeros((0, 3)))


def test_d_floor_applied(rng):
    part = HierarchicalPartition.from_sizes([[6], [1] * 6])
    z = rng.standard_normal((50, 1))
    Y = np.hstack([z, z + 0.5 * rng.standard_normal((50, 5))])
    data = Dataset(Y)
    model, trace = fit(data, part, (1, 1), EmOptions(max_iters=50, init="random"))
    assert model.d.min() >= 1e-8 * np.mean(Y ** 2)
    # an explicit floor above the unconstrained update is enforced and counted
    groups = sparsity_groups(part, (1, 1))
    m1, _, floored = m_step(e_step(model, data, groups), data, groups, part, (1, 1), d_floor=0.2)
    assert floored >= 1 and m1.d.min() == pytest.approx(0.2)
    model, trace = fit(data, part, (1, 1), EmOptions(max_iters=20, init="random", d_floor=0.2))
    assert trace.floored > 0 and model.d.min() >= 0.2


# --- initialization -----------------------------------------------------------

def exact_data(S):
    n = S.shape[0]
    return Dataset(np.sqrt(n) * np.linalg.cholesky(S).T)


def test_frob_sweep_recovers_scale_separated_model(rng):
    part = random_partition(rng, 30, 4)
    ranks = (2, 1, 2, 1)
    factors = [s * rng.standard_normal((30, r)) for s, r in zip((1.0, 1e-3, 1e-6), ranks[:-1])]
    truth = PsdMlr(part, ranks, factors, np.full(30, 1e-9))
    S = truth.to_dense()
    m = init_frobenius_sweep(exact_data(S), part, ranks)
    assert np.linalg.norm(m.to_dense() - S) / np.linalg.norm(S) < 1e-6
    fitted = m.to_dense()
    for l in range(3):
        for g in part.groups(l):
            blk = slice(g.start, g.stop)
            assert np.linalg.norm(fitted[blk, blk] - S[blk, blk]) < 1e-6 * np.linalg.norm(S[blk, blk])


def test_frob_sweep_diagonal_only(rng):
    part = random_partition(rng, 10, 3)
    Y = rng.standard_normal((20, 10))
    m = init_frobenius_sweep(Dataset(Y), part, (0, 0, 1))
    np.testing.assert_allclose(m.d, np.mean(Y ** 2, 0))
    Yz = Y.copy(); Yz[:, 2] = 0
    m = init_frobenius_sweep(Dataset(Yz), part, (0, 0, 1))
    assert m.d[2] == pytest.approx(1e-8 * np.mean(Yz ** 2))


def test_frob_sweep_identity():
    part = HierarchicalPartition.from_sizes([[8], [4, 4], [1] * 8])
    m = init_frobenius_sweep(exact_data(np.eye(8)), part, (2, 1, 1))
    np.testing.assert_allclose(m.to_dense(), np.eye(8), atol=1e-7)


def test_frob_sweep_sign_convention(rng):
    part = random_partition(rng, 12, 3)
    m = init_frobenius_sweep(Dataset(rng.standard_normal((30, 12))), part, (2, 1, 1))
    for l, F in enumerate(m.factors):
        for g in part.groups(l):
            blk = F[g.start:g.stop]
            for j in range(blk.shape[1]):
                nz = np.flatnonzero(np.abs(blk[:, j]) > 1e-14)
                assert nz.size == 0 or blk[nz[0], j] > 0


def test_frob_sweep_cap_fallback(rng):
    part = random_partition(rng, 20, 3)
    data = Dataset(rng.standard_normal((10, 20)))
    with pytest.warns(RuntimeWarning, match="dense cap"):
        init_frobenius_sweep(data, part, (1, 1, 1), cap=10)
    _, trace = fit(data, part, (1, 1, 1), EmOptions(max_iters=2, dense_cap=10))
    assert trace.init == "random(fallback)"


def test_random_init_scaling(rng):
    part = random_partition(rng, 40, 3)
    Y = rng.standard_normal((100, 40)) * 3
    m = init_random(Dataset(Y), part, (3, 2, 1), seed=1)
    np.testing.assert_allclose(m.d, np.mean(Y ** 2, 0) / 2)
    m2 = init_random(Dataset(Y), part, (3, 2, 1), seed=1)
    assert np.array_equal(m.Fbar, m2.Fbar)


# --- covariates -----------------------------------------------------------------

def test_covariates_empty_matches_fit():
    part, ranks, m0, data, rng = instance(4, n=25, L=3, N=40, ranks=(2, 1, 1))
    opts = EmOptions(max_iters=20)
    a, ta = fit(data, part, ranks, opts)
    b, B, tb = fit_with_covariates(Dataset(data.Y, np.zeros((40, 0))), part, ranks, opts)
    assert ta.loglik == tb.loglik
    assert np.array_equal(a.Fbar, b.Fbar) and B.shape == (25, 0)


def test_covariates_constant_mean_shift(rng):
    part = random_partition(rng, 15, 3)
    truth = random_psd_mlr(part, (2, 1, 1), rng)
    mu = rng.uniform(-3, 3, 15)
    N = 500
    Y = sample(truth, N, rng) + mu
    X = np.ones((N, 1))
    model, B, trace = fit_with_covariates(Dataset(Y, X), part, (2, 1, 1), EmOptions(max_iters=500))
    # identical regressors in every equation: the GLS mean is the sample mean
    np.testing.assert_allclose(B[:, 0], Y.mean(0), atol=1e-6 * np.abs(mu).max())
    se = np.sqrt(np.diag(truth.to_dense()) / N)
    z = np.abs(B[:, 0] - mu) / se
    assert np.mean(z < 2) >= 0.8 and z.max() < 4
    ll = np.array(trace.loglik)
    assert np.all(np.diff(ll) >= -1e-7 * np.abs(ll[:-1]))


def test_covariates_mstep_dense_oracle():
    part, ranks, m0, data, rng = instance(21, n=18, L=3, N=60, ranks=(2, 1, 1))
    X = np.column_stack([np.ones(60), rng.standard_normal(60)])
    B0 = rng.standard_normal((18, 2))
    d = Dataset(data.Y, X)
    groups = sparsity_groups(part, ranks)
    m1, B1, _ = m_step(e_step(m0, d, groups, B=B0), d, groups, part, ranks, B=B0)
    # dense augmented normal equations
    F, D = m0.expanded_factor(), m0.d
    Si = np.linalg.inv(m0.to_dense())
    R = data.Y - X @ B0.T
    Vt = F.T @ Si @ R.T                                 # s x N
    Wt = 60 * (np.eye(F.shape[1]) - F.T @ Si @ F) + Vt @ Vt.T
    mask = support_mask(part, ranks)
    for j in range(18):
        c = np.flatnonzero(mask[j])
        G = np.block([[X.T @ X, X.T @ Vt[c].T], [Vt[c] @ X, Wt[np.ix_(c, c)]]])
        rhs = np.concatenate([X.T @ data.Y[:, j], Vt[c] @ data.Y[:, j]])
        sol = np.linalg.solve(G, rhs)
        np.testing.assert_allclose(B1[j], sol[:2], rtol=1e-9, atol=1e-9)
        np.testing.assert_allclose(m1.expanded_factor()[j, c], sol[2:], rtol=1e-9, atol=1e-9)


def test_covariates_rank_deficient(rng):
    part = random_partition(rng, 10, 3)
    X = np.column_stack([np.ones(30), np.ones(30)])
    with pytest.raises(ValueError, match="rank deficient"):
        fit_with_covariates(Dataset(rng.standard_normal((30, 10)), X), part, (1, 1, 1))
