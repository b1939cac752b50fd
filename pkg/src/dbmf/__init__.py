"""Distributed Bayesian matrix factorization.

Bias-corrected stochastic-gradient Langevin sampling over block-partitioned
ratings, coordinated by a parameter server running parallel chains, with
full-Gibbs and SGD baselines.
"""

from .core import ChainState, ModelConfig, RatingsBlock, RatingTuple
from .data import Dataset, SynthSpec, load_ratings, split_train_test, synth_generate
from .evaluation import PredictiveEnsemble, posterior_predict, relative_improvement, rmse
from .samplers import NoiseSource, StepSchedule, step_size

__version__ = "0.1.0"

__all__ = [
    "ChainState",
    "Dataset",
    "ModelConfig",
    "NoiseSource",
    "PredictiveEnsemble",
    "RatingTuple",
    "RatingsBlock",
    "StepSchedule",
    "SynthSpec",
    "load_ratings",
    "posterior_predict",
    "relative_improvement",
    "rmse",
    "split_train_test",
    "step_size",
    "synth_generate",
    "__version__",
]
