import csv
import math

import numpy as np
import pytest

from mlfactor.em import Dataset, EmOptions, fit, log_likelihood
from mlfactor.mlr import PsdMlr, random_psd_mlr
from mlfactor.partition import HierarchicalPartition, PartitionError
from mlfactor.synth import (Generator, SynthConfig, average_ll, compare_methods, desk_config,
                            even_partition, expected_ll, full_scale_config, generate,
                            ll_mean_std_under_model, quadratic_ll_approx)
from oracles import dense_expected_ll, random_partition


def test_full_scale_factor_count():
    cfg = full_scale_config()
    part = cfg.partition()
    assert part.L == 6 and [part.num_groups(l) for l in range(6)] == [1, 4, 8, 16, 32, 10000]
    s = sum(part.num_groups(l) * r for l, r in enumerate(cfg.ranks[:-1]))
    assert s == 174


def test_even_partition_requires_nesting():
    with pytest.raises(PartitionError):
        even_partition(12, (1, 3, 4, 12))
    assert even_partition(12, (1, 2, 4, 12)).sizes(2).tolist() == [3, 3, 3, 3]


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(10, (1, 10), (1, 1), snr=0)
    with pytest.raises(ValueError):
        SynthConfig(10, (1, 5), (1, 1))


def test_noise_interval_and_snr_limit():
    cfg = SynthConfig(200, (1, 4, 200), (3, 2, 1), snr=4.0, seed=3)
    truth, _ = generate(cfg)
    signal = sum(np.sum(F * F) for F in truth.factors) / 200
    assert truth.d.min() > 0 and truth.d.max() <= 2 * signal / 4
    hi, _ = generate(SynthConfig(200, (1, 4, 200), (3, 2, 1), snr=1e12, seed=3))
    assert hi.d.max() <= 2 * signal / 1e12


def test_sample_moments_desk():
    cfg = SynthConfig(500, (1, 4, 8, 16, 32, 500), (10, 5, 4, 3, 2, 1), seed=11)
    gen = Generator(cfg)
    data = gen.sample(2000)
    m = gen.truth
    var = sum(np.sum(F * F, 1) for F in m.factors) + m.d
    emp = np.mean(data.Y ** 2, 0)
    z = np.abs(emp - var) / (np.sqrt(2.0 / 2000) * var)
    assert np.mean(z < 3) >= 0.99 and z.max() < 5


def test_determinism_and_stream_split():
    cfg = SynthConfig(60, (1, 3, 60), (2, 1, 1), seed=5)
    a, b = Generator(cfg), Generator(cfg)
    assert np.array_equal(a.truth.Fbar, b.truth.Fbar) and np.array_equal(a.truth.d, b.truth.d)
    assert np.array_equal(a.sample(10, seed=2).Y, b.sample(10, seed=2).Y)
    assert not np.array_equal(a.sample(10, seed=2).Y, a.sample(10, seed=3).Y)
    # drawing samples never touches the model stream
    a.sample(1000)
    assert np.array_equal(Generator(cfg).truth.Fbar, a.truth.Fbar)


def test_expected_ll_identities(rng):
    part = random_partition(rng, 30, 3)
    m = random_psd_mlr(part, (2, 1, 1), rng)
    ld = np.linalg.slogdet(m.to_dense())[1]
    assert expected_ll(m, m) == pytest.approx(-15 * math.log(2 * math.pi) - 0.5 * ld - 15, abs=1e-10)
    ident = PsdMlr(part, (2, 1, 1), [np.zeros((30, 2)), np.zeros((30, 1))], np.ones(30))
    assert expected_ll(ident, ident) == pytest.approx(-15 * (math.log(2 * math.pi) + 1), abs=1e-12)


def test_expected_ll_dense_oracle(rng):
    part = random_partition(rng, 40, 4)
    a = random_psd_mlr(part, (2, 0, 3, 1), rng)
    b = random_psd_mlr(part, (1, 2, 1, 1), rng)
    ref = dense_expected_ll(a.to_dense(), b.to_dense())
    assert abs(expected_ll(a, b) - ref) < 1e-9 * abs(ref)
    # differing partitions fall back to dense evaluation
    c = random_psd_mlr(random_partition(rng, 40, 3), (1, 1, 1), rng)
    assert abs(expected_ll(a, c) - dense_expected_ll(a.to_dense(), c.to_dense())) < 1e-9 * abs(ref)
    with pytest.raises(ValueError):
        expected_ll(a, random_psd_mlr(random_partition(rng, 10, 3), (1, 1, 1), rng))


def test_gibbs_inequality():
    cfg = SynthConfig(80, (1, 4, 80), (2, 1, 1), N=40, seed=9)
    gen = Generator(cfg)
    for t in range(4):
        data = gen.sample(seed=t)
        model, _ = fit(data, gen.truth.partition, gen.truth.ranks, EmOptions(max_iters=50))
        assert expected_ll(gen.truth, gen.truth) >= expected_ll(model, gen.truth) - 1e-8


def random_spd(rng, n):
    A = rng.standard_normal((n, n))
    return A @ A.T / n + 0.5 * np.eye(n)


def test_quadratic_approx_exact_at_s(rng):
    S = random_spd(rng, 10)
    assert quadratic_ll_approx(S, S) == pytest.approx(average_ll(S, S), abs=1e-12)


def test_quadratic_approx_hand_case():
    S = np.eye(2)
    base = average_ll(S, S)
    for form in ("whitened", "unwhitened"):
        assert base - quadratic_ll_approx(S, 2 * S, form=form) == pytest.approx(0.5)


def remainder_ratios(S, Delta, form="whitened"):
    scale = np.linalg.norm(S) / np.linalg.norm(Delta)
    errs = []
    for t in (1e-1, 5e-2, 2.5e-2):
        Sig = S + t * scale * Delta
        errs.append(abs(average_ll(S, Sig) - quadratic_ll_approx(S, Sig, form=form)))
    return errs[0] / errs[1], errs[1] / errs[2]


def test_quadratic_remainder_is_cubic(rng):
    for _ in range(5):
        S = random_spd(rng, 30)
        G = rng.standard_normal((30, 30))
        for r in remainder_ratios(S, G @ G.T):
            assert 4 <= r <= 16


def test_unwhitened_form_is_only_second_order(rng):
    S = random_spd(rng, 30)
    G = rng.standard_normal((30, 30))
    r1, r2 = remainder_ratios(S, G @ G.T, form="unwhitened")
    assert r2 < 6  # quadratic leftover: halving the step divides the error by about 4


def test_quadratic_approx_singular():
    with pytest.raises(ValueError, match="shrinkage"):
        quadratic_ll_approx(np.zeros((3, 3)), np.eye(3))


def test_ll_std_formula():
    part = HierarchicalPartition.from_sizes([[5000], [1] * 5000])
    m = PsdMlr(part, (0, 1), [np.zeros((5000, 0))], np.ones(5000))
    mean, std = ll_mean_std_under_model(m, 300)
    assert std == pytest.approx(2.887, abs=1e-3)
    assert mean == pytest.approx(-2500 * (math.log(2 * math.pi) + 1))
    part = HierarchicalPartition.from_sizes([[100], [1] * 100])
    m = PsdMlr(part, (0, 1), [np.zeros((100, 0))], np.ones(100))
    assert ll_mean_std_under_model(m, 50)[1] == 1.0


def test_ll_mean_std_monte_carlo():
    cfg = SynthConfig(200, (1, 4, 200), (3, 2, 1), N=50, seed=21)
    gen = Generator(cfg)
    mean, std = ll_mean_std_under_model(gen.truth, 50)
    vals = np.array([log_likelihood(gen.truth, gen.sample(50, seed=k)) / 50 for k in range(2000)])
    assert abs(vals.std(ddof=1) / std - 1) < 0.10
    assert abs(vals.mean() - mean) < 3 * vals.std(ddof=1) / np.sqrt(2000)


def test_compare_methods_empty():
    rep = compare_methods(SynthConfig(40, (1, 2, 40), (2, 1, 1), N=30), trials=0)
    assert rep["trials"] == 0 and rep["rows"] == [] and rep["mean"] is None


def test_compare_methods_single_trial(tmp_path):
    cfg = SynthConfig(60, (1, 2, 4, 60), (3, 2, 1, 1), N=40, seed=4)
    path = tmp_path / "hist.csv"
    rep = compare_methods(cfg, trials=2, opts=EmOptions(max_iters=100), hist_path=path)
    assert rep["baseline"] == "frobenius_sweep" and rep["trials"] == 2
    for row in rep["rows"]:
        assert row["loglik_mle"] >= row["loglik_frob"]
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["trial", "ell_mle", "ell_frob", "diff"] and len(rows) == 3
    assert float(rows[1][3]) == pytest.approx(rep["rows"][0]["diff"])


def test_desk_config_shape():
    cfg = desk_config()
    assert (cfg.n, cfg.groups, cfg.ranks, cfg.snr, cfg.N) == (500, (1, 4, 8, 16, 32, 500), (10, 5, 4, 3, 2, 1), 4.0, 80)
