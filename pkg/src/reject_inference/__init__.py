"""Reject inference for credit scoring, with Monte Carlo stress tests.

Financed-only, Augmentation, Parceling and a semi-supervised generative
classifier, compared under controlled MCAR/MAR/MNAR financing mechanisms.
"""

from .data_model import Dataset, GeneratorSpec, GroundTruth, discretize, generate_synthetic, load_csv
from .evaluation import bootstrap_gini_diff, gini, monte_carlo_table1, acceptance_sweep, parameter_error
from .generative import GenerativeModel, fit_em, posterior
from .logistic import CovarianceEstimate, LogisticModel, covariance, fit_weighted, predict_proba
from .mechanisms import MechanismSpec, apply_mechanism, sweep_mechanism
from .methods import (
    ScoreBands,
    Scorer,
    augmentation,
    financed_only,
    generative_method,
    ideal_reweighting,
    make_score_bands,
    oracle_full,
    parceling,
)

__version__ = "0.1.0"
