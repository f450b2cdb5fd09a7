"""eqcov: prediction intervals with equalized coverage across groups.

Wraps any regression model with group-conditional split-conformal
calibration so that every protected group receives intervals with coverage
at least ``1 - alpha``.
"""

from .conformal import (
    CalibratedPredictor,
    CalibrationSpec,
    GroupCorrections,
    Learner,
    PredictionInterval,
    calibrate,
    fit_base_models,
    fit_calibrated,
    fit_predict_interval,
    inflated_quantile,
    load_predictor,
    predict_interval,
    predict_intervals,
    quantile_rank,
    save_predictor,
)
from .data import (
    SYNTHETIC_PRESETS,
    Dataset,
    SyntheticSpec,
    TableSchema,
    fit_standardizer,
    generate_synthetic,
    load_table,
    split_train_calibration,
    split_train_test,
    transform_response,
)
from .exceptions import ConfigError, DataError, EqcovError, GuaranteeError
from .metrics import bias_report, comparison_methods, evaluate, run_repeated_splits
from .models import NetConfig, fit_mean_net, fit_quantile_net, pinball_loss

from .testlab import (
    exact_rank_coverage,
    monte_carlo_coverage,
    monte_carlo_group_coverage,
    permutation_rank_coverage,
)

__version__ = "0.1.0"
