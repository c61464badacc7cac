"""Bayesian sparse multivariate regression for prioritizing genetic variants."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    NumericalError,
    SparsePostError,
    ValidationError,
)
from .model import (  # noqa: F401
    Covariance,
    DataSet,
    Hyperparameters,
    IndicatorState,
    PriorKind,
    PriorSpec,
    flip_log_odds,
    log_joint_posterior,
    log_marginal_likelihood_trait,
    log_prior_indicators,
)
from .sampler import ChainInit, PosteriorSummary, SamplerConfig, run_chain, run_ensemble  # noqa: F401
from .exact import confidence_set, enumerate_posterior, exact_pips  # noqa: F401
