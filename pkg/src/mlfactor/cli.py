"""Command-line driver: ``mlfactor fit | generate | eval | check``.

Failures print one JSON object ``{"error": {"code": ..., "message": ...}}``
on standard error and exit with status 1 (64 for command-line usage
errors, 3 for failed ``check`` tolerances). ``fit`` exits 0 when
converged and 2 when it hit ``--max-iters``.
"""
import argparse
import json
import logging
import math
import sys
from contextlib import nullcontext

import numpy as np

from .cholesky import build_expanded_dense, factorize
from .em import Dataset, EmOptions, FitError, fit, fit_with_covariates, log_likelihood
from .inverse import NumericalConsistencyError, invert
from .io import (InputError, align_columns, read_csv_matrix, read_dataset, read_model,
                 write_csv_matrix, write_model, write_trace)
from .mlr import DENSE_CAP, DenseCapError
from .partition import PartitionError
from .product import identity_residual
from .synth import SynthConfig, Generator, expected_ll, ll_mean_std_under_model

EXIT_OK, EXIT_ERROR, EXIT_MAX_ITERS, EXIT_CHECK_FAILED = 0, 1, 2, 3
EXIT_USAGE = 64

logger = logging.getLogger("mlfactor")


class CliError(Exception):
    def __init__(self, code, message, **extra):
        super().__init__(message)
        self.code = code
        self.extra = extra


def _emit(obj):
    print(json.dumps(obj, sort_keys=True))


def _parse_init(spec):
    if spec in ("frob", "random"):
        return spec
    if spec.startswith("warm:"):
        return read_model(spec[5:]).model
    raise CliError("E_USAGE", f"--init must be frob, random or warm:PATH, got {spec!r}")


def cmd_fit(a):
    data, part, ranks = read_dataset(a.data, a.hierarchy, a.covariates)
    init = _parse_init(a.init)
    if not isinstance(init, str):
        # warm start carries its own perm/labels; only the structure must match
        if not init.partition.same_structure(part) or init.ranks != ranks:
            raise CliError("E_WARM_MISMATCH", "warm-start model does not match the hierarchy and ranks")
        init = init.with_params()
        init.partition = part
    opts = EmOptions(max_iters=a.max_iters, rel_tol=a.tol, d_floor=a.d_floor, init=init,
                     seed=a.seed, dense_cap=a.dense_cap)
    if data.p:
        model, B, trace = fit_with_covariates(data, part, ranks, opts)
    else:
        (model, trace), B = fit(data, part, ranks, opts), None
    meta = {
        "seed": a.seed,
        "options": {"max_iters": a.max_iters, "rel_tol": a.tol, "d_floor": a.d_floor, "init": a.init},
        "loglik": trace.loglik[-1],
        "status": trace.status,
        "iterations": trace.iterations,
        "floored": trace.floored,
        "init_used": trace.init,
    }
    write_model(a.out, model, B, meta)
    if a.trace:
        write_trace(a.trace, trace)
    _emit({"status": trace.status, "iterations": trace.iterations, "loglik": trace.loglik[-1],
           "loglik_per_sample": trace.loglik[-1] / data.N, "floored": trace.floored})
    return EXIT_OK if trace.converged else EXIT_MAX_ITERS


def cmd_generate(a):
    try:
        with open(a.config) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read {a.config}: {exc.strerror}", "E_IO") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{a.config}: invalid JSON: {exc}", "E_CONFIG") from exc
    try:
        conf = SynthConfig(
            n=int(cfg["n"]), groups=tuple(cfg["groups"]), ranks=tuple(cfg["ranks"]),
            snr=float(cfg.get("snr", 4.0)), N=int(cfg.get("N", 80)),
            seed=int(a.seed if a.seed is not None else cfg.get("seed", 0)),
        )
    except KeyError as exc:
        raise InputError(f"config is missing {exc.args[0]!r}", "E_CONFIG") from exc
    gen = Generator(conf)
    count = a.n_samples if a.n_samples is not None else conf.N
    data = gen.sample(count, seed=a.sample_seed)
    labels = [f"f{i}" for i in range(conf.n)]
    truth = gen.truth
    truth.partition.labels = labels
    write_model(a.out_model, truth, None, {"seed": conf.seed, "generator": {
        "groups": list(conf.groups), "snr": conf.snr, "N": conf.N}})
    write_csv_matrix(a.out_data, labels, data.Y)
    if a.out_hierarchy:
        with open(a.out_hierarchy, "w") as fh:
            json.dump({"n": conf.n, "levels": truth.partition.level_sizes(),
                       "ranks": list(truth.ranks.ranks), "features": labels}, fh, indent=1)
            fh.write("\n")
    _emit({"n": conf.n, "N": count, "s": truth.s, "seed": conf.seed})
    return EXIT_OK


def cmd_eval(a):
    mf = read_model(a.model)
    model = mf.model
    columns, Y = read_csv_matrix(a.data)
    if Y.shape[0] < 1:
        raise InputError(f"{a.data}: N must be >= 1 (no data rows)", "E_EMPTY")
    X = None
    if mf.B is not None and mf.B.shape[1]:
        if not a.covariates:
            raise CliError("E_USAGE", "model has covariates; pass --covariates")
        _, X = read_csv_matrix(a.covariates)
    data = Dataset(align_columns(columns, Y, model), X)
    ll = log_likelihood(model, data, B=mf.B if X is not None else None)
    out = {"N": data.N, "n": model.n, "loglik": ll, "loglik_per_sample": ll / data.N}
    if a.truth:
        truth = read_model(a.truth).model
        mean, std = ll_mean_std_under_model(truth, data.N)
        out.update({
            "expected_ll": expected_ll(model, truth),
            "expected_ll_truth": expected_ll(truth, truth),
            "truth_loglik_per_sample_mean": mean,
            "truth_loglik_per_sample_std": std,
        })
    _emit(out)
    return EXIT_OK


def cmd_check(a):
    model = read_model(a.model).model
    n = model.n
    inv = invert(model, keep_records=True)
    chol = factorize(model, inv)
    rng = np.random.default_rng(0)
    X = rng.standard_normal((n, 4))
    probe = float(np.linalg.norm(model.matvec(inv.apply(X)) - X) / np.linalg.norm(X))
    ld_tol = 1e-9 * max(1.0, abs(inv.logdet))
    res = {
        "n": n, "s": model.s,
        "probe_residual": probe,
        "logdet_inverse": inv.logdet,
        "logdet_cholesky": chol.logdet(),
        "logdet_gap": abs(inv.logdet - chol.logdet()),
    }
    ok = probe < 1e-8 and res["logdet_gap"] < ld_tol
    if n <= a.dense_cap:
        res["identity_residual"] = identity_residual(model, inv, cap=a.dense_cap)
        res["logdet_dense"] = float(np.linalg.slogdet(model.to_dense(a.dense_cap))[1])
        ok &= res["identity_residual"] < 1e-8 * math.sqrt(n)
        ok &= abs(res["logdet_dense"] - inv.logdet) < ld_tol
    else:
        res["identity_residual"] = None
    if n + model.s <= a.dense_cap:
        Lm, De = chol.to_dense(a.dense_cap)
        E = build_expanded_dense(model, a.dense_cap)
        res["cholesky_residual"] = float(np.linalg.norm(Lm @ (De[:, None] * Lm.T) - E) / np.linalg.norm(E))
        ok &= res["cholesky_residual"] < 1e-10
    else:
        res["cholesky_residual"] = None
    res["ok"] = bool(ok)
    _emit(res)
    return EXIT_OK if ok else EXIT_CHECK_FAILED


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("E_USAGE", f"{self.prog}: {message}")


def build_parser():
    p = _Parser(prog="mlfactor", description="Multilevel factor models.")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="maximum likelihood fit by EM")
    f.add_argument("--data", required=True)
    f.add_argument("--hierarchy", required=True)
    f.add_argument("--covariates")
    f.add_argument("--init", default="frob", help="frob, random or warm:PATH")
    f.add_argument("--tol", type=float, default=1e-8)
    f.add_argument("--max-iters", type=int, default=300)
    f.add_argument("--d-floor", type=float, default=None)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--dense-cap", type=int, default=DENSE_CAP)
    f.add_argument("--out", required=True)
    f.add_argument("--trace")
    f.set_defaults(func=cmd_fit)

    g = sub.add_parser("generate", help="sample a synthetic multilevel model and data")
    g.add_argument("--config", required=True)
    g.add_argument("--out-model", required=True)
    g.add_argument("--out-data", required=True)
    g.add_argument("--out-hierarchy")
    g.add_argument("--n-samples", type=int)
    g.add_argument("--seed", type=int, help="override the config seed")
    g.add_argument("--sample-seed", type=int, default=0, help="sample stream index")
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("eval", help="log-likelihood of data under a model")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--covariates")
    e.add_argument("--truth")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("check", help="numerical self-check of a model file")
    c.add_argument("--model", required=True)
    c.add_argument("--dense-cap", type=int, default=DENSE_CAP)
    c.set_defaults(func=cmd_check)
    return p


_CODES = (
    (InputError, None),
    (PartitionError, "E_PARTITION"),
    (DenseCapError, "E_DENSE_CAP"),
    (NumericalConsistencyError, "E_NUMERIC"),
    (FitError, "E_FIT"),
)


def _error(code, message, **extra):
    sys.stderr.write(json.dumps({"error": {"code": code, "message": message, **extra}}, sort_keys=True) + "\n")


def main(argv=None):
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except CliError as exc:
        _error(exc.code, str(exc))
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return exc.code if isinstance(exc.code, int) else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if a.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if a.threads is not None:
        from threadpoolctl import threadpool_limits
        ctx = threadpool_limits(limits=a.threads)
    else:
        ctx = nullcontext()
    try:
        with ctx:
            return a.func(a)
    except CliError as exc:
        _error(exc.code, str(exc), **exc.extra)
    except InputError as exc:
        _error(exc.code, str(exc), **exc.where)
    except (PartitionError, DenseCapError, NumericalConsistencyError, FitError) as exc:
        code = next(c for t, c in _CODES if isinstance(exc, t))
        _error(code, str(exc))
    except ValueError as exc:
        _error("E_VALUE", str(exc))
    except OSError as exc:
        _error("E_IO", f"{exc.filename}: {exc.strerror}" if exc.filename else str(exc))
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
