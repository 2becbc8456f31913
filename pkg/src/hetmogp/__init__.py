"""Heterogeneous multi-output Gaussian processes with sparse variational inference.

Each output has its own likelihood whose parameters are latent functions
built as linear combinations of shared Gaussian processes.
"""

from .data_io import GapConfig, gap_experiment, load, load_model, save, save_model
from .dataset import HeterogeneousDataset
from .inference import (ElboReport, InducingState, LmcModel, elbo, elbo_grad, init_model,
                        kl_inducing, q_f_marginals)
from .kernels import RbfKernel, gram
from .likelihoods import Bernoulli, HetGaussian, Likelihood, Poisson, likelihood_from_name
from .prediction import nlpd, predict
from .prior import LmcCoefficients, prior_full_cov, sample_heterogeneous
from .quadrature import GhRule, gh_rule
from .training import TrainConfig, TrainingError, fit

__version__ = "0.1.0"

__all__ = [
    "Bernoulli", "ElboReport", "GapConfig", "GhRule", "HetGaussian", "HeterogeneousDataset",
    "InducingState", "Likelihood", "LmcCoefficients", "LmcModel", "Poisson", "RbfKernel",
    "TrainConfig", "TrainingError", "elbo", "elbo_grad", "fit", "gap_experiment", "gh_rule",
    "gram", "init_model", "kl_inducing", "likelihood_from_name", "load", "load_model", "nlpd",
    "predict", "prior_full_cov", "q_f_marginals", "sample_heterogeneous", "save", "save_model",
]
