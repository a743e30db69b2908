"""Bayesian hierarchical random-effects meta-analysis of age-specific cancer penetrance."""

from .dist import DEFAULT_AGE_DISTRIBUTION, AgeDistribution, PenetranceModel, TruncatedWeibull
from .fixed import FixedEffectsFit, fit_fixed_effects
from .likelihood import StudyBatch, parse_baseline
from .sampler import HyperPriorConfig, PosteriorDraws, consensus_penetrance, run_mcmc
from .studies import LikelihoodInputs, StudyRecord, load_studies, prepare_studies

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_AGE_DISTRIBUTION",
    "AgeDistribution",
    "FixedEffectsFit",
    "HyperPriorConfig",
    "LikelihoodInputs",
    "PenetranceModel",
    "PosteriorDraws",
    "StudyBatch",
    "StudyRecord",
    "TruncatedWeibull",
    "consensus_penetrance",
    "fit_fixed_effects",
    "load_studies",
    "parse_baseline",
    "prepare_studies",
    "run_mcmc",
]
