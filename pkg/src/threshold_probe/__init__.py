"""Hierarchical Bayesian threshold model of cash-bail decisions."""

__version__ = "0.1.0"

from .model import (
    Case,
    Dataset,
    Hyperparams,
    JudgeParams,
    ModelParams,
    ParamSpace,
    PriorConfig,
    SkipModelParams,
    build_dataset,
    case_log_likelihood,
    decision_probability,
    log_posterior,
    log_prior,
    skip_probability,
    threshold_to_cost_ratio,
)
from .sampler import PosteriorSamples, SamplerConfig, run_chain, run_chains
from .diagnostics import effective_sample_size, split_r_hat

__all__ = [
    "Case", "Dataset", "Hyperparams", "JudgeParams", "ModelParams",
    "ParamSpace", "PriorConfig", "SkipModelParams", "build_dataset",
    "case_log_likelihood", "decision_probability", "log_posterior",
    "log_prior", "skip_probability", "threshold_to_cost_ratio",
    "PosteriorSamples", "SamplerConfig", "run_chain", "run_chains",
    "effective_sample_size", "split_r_hat",
]
