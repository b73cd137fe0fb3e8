"""Phalanx formation: ensembles of logistic models over strong, diverse feature subsets."""
from .apf import ApfResult, GroupEvaluator, PairScores, Phalanx, filter_phalanxes, filter_variables, merge_phase, run_apf
from .data import BlockedDataset, FoldAssignment, Schema, from_arrays, load_dataset, make_folds, write_dataset
from .ensemble import EnsembleModel, RankDiagnostics, build_em, build_emm, predict_em, rank_diagnostics
from .errors import DataValidationError, NumericalError, ParseError, PhalanxError, UndefinedMetricError
from .learner import FittedModel, ProbabilityVector, cv_probabilities, fit_logistic, predict
from .metrics import (APR, RKL, TOP1, HitCurve, MetricSpec, ReferenceDistribution, apr_block, block_average,
                      hit_curve, metric_spec, per_block, permutation_reference, rkl_block, top1_block)

__version__ = "0.1.0"

__all__ = [
    "APR", "RKL", "TOP1", "MetricSpec", "metric_spec",
    "apr_block", "rkl_block", "top1_block", "per_block", "block_average",
    "HitCurve", "hit_curve", "ReferenceDistribution", "permutation_reference",
    "BlockedDataset", "FoldAssignment", "Schema", "from_arrays", "load_dataset", "make_folds", "write_dataset",
    "FittedModel", "ProbabilityVector", "fit_logistic", "predict", "cv_probabilities",
    "Phalanx", "PairScores", "ApfResult", "GroupEvaluator",
    "filter_variables", "merge_phase", "filter_phalanxes", "run_apf",
    "EnsembleModel", "RankDiagnostics", "build_em", "predict_em", "build_emm", "rank_diagnostics",
    "PhalanxError", "DataValidationError", "ParseError", "UndefinedMetricError", "NumericalError",
]
