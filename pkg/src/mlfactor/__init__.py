"""Multilevel low rank covariance models: linear-time algebra and EM fitting."""
from ._backend import BACKEND
from .cholesky import ExpandedCholesky, factorize, schur_complement_check
from .em import (Dataset, EmOptions, FitError, FitTrace, e_step, fit, fit_with_covariates,
                 init_frobenius_sweep, init_random, log_likelihood, m_step)
from .inverse import InverseMlr, NumericalConsistencyError, apply_inverse, invert, logdet
from .mlr import (DENSE_CAP, CompressedForm, DenseCapError, PsdMlr, frobenius_error, new_psd_mlr,
                  pack_compressed, random_psd_mlr, unpack_compressed)
from .partition import (HierarchicalPartition, PartitionError, RankAllocation, SparsityGroup,
                        build_partition, refines, sparsity_groups)
from .product import GeneralMlr, as_general, identity_residual, multiply
from .synth import (Generator, SynthConfig, average_ll, compare_methods, desk_config, expected_ll,
                    generate, ll_mean_std_under_model, quadratic_ll_approx)
from .io import InputError, ModelFile, read_dataset, read_model, write_model

__version__ = "0.1.0"
