"""Leave-one-out conditional mutual information bounds on generalization."""
from .bounds import (
    LossTable,
    StabilityProfile,
    cmi_upper,
    floo_cmi_upper,
    gen_bound_from_cmi,
    jensen_cmi_upper,
    local_bound,
    loo_cmi_upper,
    loo_cv,
    measure_stability,
    measured_gap,
    stability_bounds,
    verify_lemma1,
)
from .datasets import Dataset, generate, holdout_test_set, loo_view
from .estimators import LooCMIBound, LooLogistic, LooMLP, LooRidge
from .exceptions import ConfigError, DomainError, LooCMIError, NumericalError, ParseError
from .numerics import CovSpec, c_n, log_sum_exp, pairwise_kl
from .oracle import McEstimate, exact_loo_ridge, mc_cmi, mc_floo_cmi
from .reporting import BoundReport
from .trainers import LooPredictions, LooWeights, TrainConfig, influence_loo, predict_all, train, train_loo

__version__ = "0.1.0"
