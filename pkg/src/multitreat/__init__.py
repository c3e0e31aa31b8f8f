"""Nearest-neighbor matching estimators for pairwise effects among multiple nominal treatments."""

from .comparators import ComparatorEstimate, dr_att, ipw_att
from .data import Dataset, EstimandSpec, ValidationError, all_pairs, subsample_by_discrete, validate
from .estimators import (
    EffectEstimate,
    GroupRegression,
    ImputedOutcomes,
    att_closed_form,
    bias_hat,
    estimate_ate,
    estimate_att,
    fit_group_regressions,
    impute_basic,
    impute_bias_corrected,
)
from .gps import GpsModel, fit_gps, logit_scores, overlap_report
from .inference import InferenceReport, bonferroni_intervals, global_test, region_covers
from .matching import MatchResult, Metric, distance_matrix, kmeans, knn_match, vector_match, within_group_match
from .pipeline import MatchingSettings, all_variants, estimate_reference
from .variance import (
    ConditionalVariances,
    CovarianceMatrix,
    assemble_covariance,
    randomization_covariance,
    sigma2_raw,
    sigma2_residual,
    var_ybar,
)

__version__ = "0.1.0"
