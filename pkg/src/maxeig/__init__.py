"""maxeig: information-maximising batch experimental design for contextual
optimisation, with simulated-deployment regret evaluation."""

from .autodiff import AdamState, GradientMap, Tape, ValueNode, adam_step
from .baselines import BaselineSpec, eig_of_fixed_designs, random_designs, ucb_designs
from .critic import SeparableCritic, infonce
from .deployment import (
    EvalConfig,
    WeightedPosterior,
    calibration_series,
    posterior_estimates,
    run_deployment,
    snis_posterior,
)
from .models import ContextPair, ContinuousBumpModel, Dataset, DiscreteQuadraticModel
from .rng import RngStream
from .trainer import (
    ContinuousDesign,
    DiscretePolicy,
    FixedDiscreteDesign,
    TrainConfig,
    TrainLog,
    anneal_schedule,
    evaluate_bound,
    extract_design,
    fit,
    gumbel_softmax,
    init_continuous_design,
    init_discrete_policy,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState", "GradientMap", "Tape", "ValueNode", "adam_step",
    "BaselineSpec", "eig_of_fixed_designs", "random_designs", "ucb_designs",
    "SeparableCritic", "infonce",
    "EvalConfig", "WeightedPosterior", "calibration_series",
    "posterior_estimates", "run_deployment", "snis_posterior",
    "ContextPair", "ContinuousBumpModel", "Dataset", "DiscreteQuadraticModel",
    "RngStream",
    "ContinuousDesign", "DiscretePolicy", "FixedDiscreteDesign",
    "TrainConfig", "TrainLog", "anneal_schedule", "evaluate_bound",
    "extract_design", "fit", "gumbel_softmax",
    "init_continuous_design", "init_discrete_policy",
    "__version__",
]
