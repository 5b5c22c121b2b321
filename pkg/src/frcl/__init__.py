"""Continual learning with function-space regularisation.

A shared neural feature extractor is trained across a sequence of
classification tasks. Each finished task leaves behind a sparse
Gaussian-process summary (inducing inputs plus a Gaussian belief over the
function values there) that regularises all future training through KL
terms, preventing catastrophic forgetting without storing raw datasets.
Task boundaries can be given or detected from Bayesian surprise scores.
"""

from .boundary import DetectorState, SurpriseScores, step, surprise, welch_t
from .datasets import TaskStream, load_idx, make_blobs, make_permuted_mnist, make_split_mnist
from .engine import Adam, Engine, EngineConfig, ReplayBuffer
from .errors import FrclError
from .features import FeatureNet, ParamGrad, backward, forward, init_net
from .kernel import KernelConfig, KernelWorkspace, gram, nystrom_residuals
from .numerics import CholeskyFactor, QuadratureRule, cholesky, gauss_hermite, tri_solve
from .objectives import (
    Likelihood,
    ObjectiveReport,
    WeightPosterior,
    assemble_objective,
    expected_loglik_binary,
    expected_loglik_softmax,
    init_posterior,
    kl_functional,
    kl_gauss_vs_standard,
)
from .selection import SelectionConfig, SelectionResult, score, select
from .summaries import Prediction, TaskSummary, distill, predict
from .experiment import ExperimentConfig, run_experiment, score_boundaries

__all__ = [
    "Adam",
    "CholeskyFactor",
    "DetectorState",
    "Engine",
    "EngineConfig",
    "ExperimentConfig",
    "FeatureNet",
    "FrclError",
    "KernelConfig",
    "KernelWorkspace",
    "Likelihood",
    "ObjectiveReport",
    "ParamGrad",
    "Prediction",
    "QuadratureRule",
    "ReplayBuffer",
    "SelectionConfig",
    "SelectionResult",
    "SurpriseScores",
    "TaskStream",
    "TaskSummary",
    "WeightPosterior",
    "assemble_objective",
    "backward",
    "cholesky",
    "distill",
    "expected_loglik_binary",
    "expected_loglik_softmax",
    "forward",
    "gauss_hermite",
    "gram",
    "init_net",
    "init_posterior",
    "kl_functional",
    "kl_gauss_vs_standard",
    "load_idx",
    "make_blobs",
    "make_permuted_mnist",
    "make_split_mnist",
    "nystrom_residuals",
    "predict",
    "run_experiment",
    "score",
    "score_boundaries",
    "select",
    "step",
    "surprise",
    "tri_solve",
    "welch_t",
]
