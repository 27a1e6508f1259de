"""Non-adaptive comparison designs: random assignment and prior UCB.

``ucb_designs`` scores each candidate action at each experimental
context by (prior mean + lambda * prior std) of the mean reward, with
both moments estimated from a shared Monte-Carlo batch of prior
particles.  Continuous models are maximised over a uniform action grid.
``eig_of_fixed_designs`` measures the information content of any fixed
design by training a fresh critic against it and evaluating the bound
on held-out batches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .critic import SeparableCritic
from .models import ContextPair, SimulatorModel
from .rng import RngStream
from .trainer import (
    ContinuousDesign,
    FixedDiscreteDesign,
    TrainConfig,
    evaluate_bound,
    fit,
)


@dataclass(frozen=True)
class BaselineSpec:
    """Parsed baseline request.

    kind "random": discrete models assign uniformly over treatments;
    continuous models draw N(0, sigma) actions (sigma is a standard
    deviation) clipped to bounds.  kind "ucb": see module docstring.
    """

    kind: str
    sigma: float = 1.0
    ucb_lambda: float = 1.0
    n_prior_samples: int = 512
    grid_size: int = 201

    def __post_init__(self):
        if self.kind not in ("random", "ucb"):
            raise ValueError(f"unknown baseline kind {self.kind!r}")
        if self.sigma <= 0 or self.n_prior_samples < 2 or self.grid_size < 2:
            raise ValueError("bad baseline parameters")

    @classmethod
    def parse(cls, method: str, n_prior_samples: int = 512, grid_size: int = 201) -> "BaselineSpec":
        """Parse "random", "random:SIGMA" or "ucb:LAMBDA"."""
        name, _, arg = method.partition(":")
        if name == "random":
            return cls(kind="random", sigma=float(arg) if arg else 1.0,
                       n_prior_samples=n_prior_samples, grid_size=grid_size)
        if name == "ucb":
            return cls(kind="ucb", ucb_lambda=float(arg) if arg else 1.0,
                       n_prior_samples=n_prior_samples, grid_size=grid_size)
        raise ValueError(f"unknown baseline method {method!r}")

    @property
    def label(self) -> str:
        if self.kind == "random":
            return f"random:{self.sigma:g}"
        return f"ucb:{self.ucb_lambda:g}"


def random_designs(model: SimulatorModel, n_designs: int, spec: BaselineSpec,
                   stream: RngStream):
    if model.action_kind == "discrete":
        return FixedDiscreteDesign(stream.integers(model.n_treatments, (n_designs,)))
    actions = stream.normal(0.0, spec.sigma, (n_designs,))
    return ContinuousDesign(np.clip(actions, *model.bounds), trainable=False)


def ucb_designs(model: SimulatorModel, contexts: np.ndarray, spec: BaselineSpec,
                stream: RngStream):
    """Per-context action maximising mean + lambda * std of the prior reward.

    Ties resolve to the lowest treatment index (discrete) or leftmost grid
    point (continuous); argmax already scans in that order.
    """
    lam = spec.ucb_lambda
    psi = model.sample_prior(stream, spec.n_prior_samples)
    if model.action_kind == "discrete":
        rewards = model.mean_reward_all(psi, contexts)  # [N, D, K]
        score = rewards.mean(axis=0) + lam * rewards.std(axis=0)
        return FixedDiscreteDesign(score.argmax(axis=1))
    lo, hi = model.bounds
    grid = np.linspace(lo, hi, spec.grid_size)
    chosen = np.empty(contexts.shape[0])
    for d, c in enumerate(contexts):
        rewards = model.mean_reward(psi, grid, np.full(spec.grid_size, c))  # [N, G]
        score = rewards.mean(axis=0) + lam * rewards.std(axis=0)
        chosen[d] = grid[score.argmax()]
    return ContinuousDesign(chosen, trainable=False)


def eig_of_fixed_designs(model: SimulatorModel, contexts: ContextPair, design,
                         cfg: TrainConfig, stream: RngStream):
    """Train a fresh critic against frozen designs, then estimate the bound.

    The supplied design object is never mutated.  Returns
    ((mean, standard error), critic).
    """
    if getattr(design, "trainable", False):
        raise ValueError("eig_of_fixed_designs requires a non-trainable design")
    preset = "discrete" if model.action_kind == "discrete" else "continuous"
    critic = SeparableCritic(
        preset, contexts.n_experiments, contexts.n_evaluations, stream.split("critic_init"),
    )
    _, critic, _ = fit(model, contexts, design, critic, cfg, stream.split("critic_fit"))
    estimate = evaluate_bound(model, contexts, design, critic, cfg, stream.split("eval"))
    return estimate, critic
