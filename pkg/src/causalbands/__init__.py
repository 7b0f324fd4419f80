"""Causal function estimation and uniform inference under two-way clustering.

The pipeline: load or simulate a dense N x M clustered sample, fit nuisance
learners (full sample or multiway cross-fitting), form orthogonal generated
outcomes, project them onto a sieve basis, and calibrate uniform confidence
bands with a cluster-robust multiplier bootstrap.
"""

from .bootstrap import (
    BandResult,
    HajekScores,
    bootstrap_sup_stats,
    critical_value,
    hajek_scores,
    iid_band,
    pointwise_band,
    uniform_band,
)
from .data import (
    FoldPartition,
    GridSpec,
    Mode,
    Observation,
    TwoWaySample,
    load_csv,
    partition_folds,
    quantile_grid,
    write_csv,
)
from .estimator import (
    ClusterCovariance,
    CrossFitResult,
    SieveFit,
    cluster_covariance,
    evaluate_tau,
    fit_cross_fitted,
    fit_full_sample,
    iid_covariance,
    sigma_tau,
    sigma_tau_grid,
)
from .nuisance import (
    CondDensityModel,
    NuisanceConfig,
    NuisanceFit,
    OracleCateNuisance,
    OracleCteNuisance,
    OutcomeModel,
    PropensityModel,
    fit_conditional_density,
    fit_nuisances,
    fit_outcome_arm,
    fit_propensity,
    marginal_density,
)
from .sieve import BasisFamily, BasisSpec, GramMatrix, basis_for_values, evaluate_basis, gram_matrix, solve_least_squares
from .signals import (
    AteEstimate,
    SignalMatrix,
    ate_estimate,
    cate_signal,
    cte_signal,
    cte_signal_local,
    signal_matrix_full,
)
from .simulation import (
    CoverageReport,
    DgpConfigCATE,
    DgpConfigCTE,
    EstimatorConfig,
    gen_two_way_components,
    run_coverage,
    simulate_cate,
    simulate_cte,
)

__version__ = "0.1.0"
