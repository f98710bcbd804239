"""Factorial HMMs learned by stochastic variational inference with copula chains."""

from .copula import CopulaChains, PosteriorMarginals, pair_pmf
from .elbo import TrainConfig, TrainTrace, train
from .estimators import CopulaFHMM, StructuredMeanFieldFHMM
from .evaluation import EvalReport, align_chains, loglik_per_timestep, smoothing_mse
from .exceptions import (BoundaryError, ConsistencyError, DomainError, ModelSizeError,
                         NonErgodicError, NumericalError, ParseError)
from .inference import infer_marginals
from .model import FhmmParams, exact_loglik, exact_posterior, preset_params, simulate
from .numerics import bvn_cdf
from .recognition import MlpSpec, RecognitionNet
from .smf import smf_em_fit

__version__ = "0.1.0"

__all__ = [
    "BoundaryError", "ConsistencyError", "CopulaChains", "CopulaFHMM", "DomainError",
    "EvalReport", "FhmmParams", "MlpSpec", "ModelSizeError", "NonErgodicError",
    "NumericalError", "ParseError", "PosteriorMarginals", "RecognitionNet",
    "StructuredMeanFieldFHMM", "TrainConfig", "TrainTrace", "align_chains", "bvn_cdf",
    "exact_loglik", "exact_posterior", "infer_marginals", "loglik_per_timestep",
    "pair_pmf", "preset_params", "simulate", "smf_em_fit", "smoothing_mse", "train",
]
