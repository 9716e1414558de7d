"""Neural surrogates for linear parabolic variational inequalities."""

__version__ = "0.1.0"

from .exceptions import (ContractError, DependencyError, DivergenceError, DomainError, EvaluationError,
                         ExtrapolationError, ParameterError, StepCountError)
from .problems import (AmericanPutSpec, DualProblemSpec, ParabolicOperator, VIProblem,
                       build_american_put_problem, build_dual_investment_problem)
from .utility import UtilityFamily, dual_utility
from .surrogate import SurrogateConfig, SurrogateModel, load_checkpoint, save_checkpoint
from .loss import LossWeights, SamplingPlan, total_loss
from .train import GridSpec, TrainConfig, evaluate_h01_error, train
from .dual import PrimalRecovery, recover
from .bench import TreeSpec, btm_optimal_stopping, btm_primal, compare, reduce_product_put
from .estimator import PrimalValueEstimator, VISolver

__all__ = [
    "AmericanPutSpec", "ContractError", "DependencyError", "DivergenceError", "DomainError",
    "DualProblemSpec", "EvaluationError", "ExtrapolationError", "GridSpec", "LossWeights",
    "ParabolicOperator", "ParameterError", "PrimalRecovery", "PrimalValueEstimator", "SamplingPlan",
    "StepCountError", "SurrogateConfig", "SurrogateModel", "TrainConfig", "TreeSpec", "UtilityFamily",
    "VIProblem", "VISolver", "btm_optimal_stopping", "btm_primal", "build_american_put_problem",
    "build_dual_investment_problem", "compare", "dual_utility", "evaluate_h01_error", "load_checkpoint",
    "recover", "reduce_product_put", "save_checkpoint", "total_loss", "train",
]
