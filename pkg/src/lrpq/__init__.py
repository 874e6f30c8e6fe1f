"""Quantile regression for panels with low-rank slope and intercept matrices."""

from .errors import (
    DuplicateCell,
    InvalidConfig,
    KOutOfRange,
    LrpqError,
    NegativeThreshold,
    NonFiniteInput,
    NonNumericField,
    NotConvergedWarning,
    NTooSmall,
    RankDeficientDesign,
    ROutOfRange,
    ShapeMismatch,
    SingularCovariance,
    SingularVhat,
    TooFewUnits,
    UnbalancedPanel,
)
from .quantile_core import QuantileIndex, check_loss, qr_objective, rq, rq_batch, solve_qr
from .lowrank import factor_decompose, nuclear_norm, operator_norm, svt_prox, thin_svd
from .admm import NnrConfig, NnrFit, default_nu, fit_nnr
from .rank import RankEstimate, estimate_all_ranks, estimate_rank
from .pca import PcaFit, estimate_num_factors, pca_fit
from .three_stage import EstimationResult, SampleSplit, estimate, split_sample
from .variance import KernelSpec, VarianceSet, residuals, variance_set
from .specification import (
    TestResult,
    cv_additive,
    cv_time,
    cv_unit,
    double_demean,
    gumbel_b,
)
from .montecarlo import DgpSpec, generate, run_table

__version__ = "0.1.0"
