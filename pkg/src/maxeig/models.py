"""Bayesian reward simulators used for design training and deployment.

Both simulators share one contract under the causal graph c -> y <- a:

- ``sample_prior`` draws parameter particles psi, the only source of
  epistemic uncertainty;
- ``mean_reward`` is deterministic given (psi, a, c) and differentiable
  in the action (continuous) or in relaxed treatment weights (discrete);
- ``sample_outcomes`` adds reparameterized Gaussian noise, so outcome
  samples stay differentiable in the design;
- ``max_value`` / ``argmax_action`` give each particle's best achievable
  mean reward at an evaluation context;
- ``log_likelihood`` is the exact Gaussian log-density of a dataset,
  vectorised over particles, for importance-sampling posteriors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .rng import RngStream


@dataclass(frozen=True)
class ContextPair:
    """Experimental contexts (where we may treat) and evaluation contexts
    (where regret is assessed)."""

    experimental: np.ndarray
    evaluation: np.ndarray

    @classmethod
    def mirrored(cls, size: int = 10, low: float = -3.0, high: float = -1.0) -> "ContextPair":
        """Equally spaced grid with the evaluation grid at its mirror image."""
        c = np.linspace(low, high, size)
        return cls(experimental=c, evaluation=-c)

    @classmethod
    def with_midpoints(cls, size: int = 20, low: float = -3.5, high: float = 3.5) -> "ContextPair":
        """Equally spaced grid; evaluation contexts are the size-1 midpoints."""
        c = np.linspace(low, high, size)
        return cls(experimental=c, evaluation=0.5 * (c[:-1] + c[1:]))

    @property
    def n_experiments(self) -> int:
        return self.experimental.shape[0]

    @property
    def n_evaluations(self) -> int:
        return self.evaluation.shape[0]


@dataclass(frozen=True)
class Dataset:
    """One round of experimental data: contexts, applied actions, outcomes."""

    contexts: np.ndarray
    actions: np.ndarray
    outcomes: np.ndarray

    def __post_init__(self):
        n = self.contexts.shape[0]
        if self.actions.shape[0] != n or self.outcomes.shape[0] != n:
            raise ValueError(
                f"dataset fields must share length: {n}, "
                f"{self.actions.shape[0]}, {self.outcomes.shape[0]}"
            )

    @property
    def n(self) -> int:
        return self.contexts.shape[0]


class SimulatorModel:
    """Interface shared by the simulators; see module docstring."""

    action_kind: str  # "discrete" | "continuous"
    param_dim: int

    def sample_prior(self, stream: RngStream, n: int) -> np.ndarray:
        raise NotImplementedError

    def mean_reward(self, psi, actions, contexts):
        raise NotImplementedError

    def sample_outcomes(self, psi, actions, contexts, stream: RngStream):
        raise NotImplementedError

    def max_value(self, psi, contexts) -> np.ndarray:
        raise NotImplementedError

    def argmax_action(self, psi, contexts) -> np.ndarray:
        raise NotImplementedError

    def log_likelihood(self, dataset: Dataset, psi) -> np.ndarray:
        raise NotImplementedError


class DiscreteQuadraticModel(SimulatorModel):
    """Four treatments, each a random downward parabola in the context.

    Treatment k carries psi_k = (psi_k1, psi_k2) with independent Gaussian
    priors; psi_k1 is the mean reward at context -3 and psi_k2 the mean
    reward at context +3, and the parabola with leading coefficient -1 is
    interpolated through those two anchors:

        gamma = (psi_k1 + psi_k2 + 18) / 2
        beta  = (psi_k2 - gamma + 9) / 3
        f(c)  = -c^2 + beta * c + gamma

    Outcomes are N(f, noise_variance).
    """

    action_kind = "discrete"
    n_treatments = 4
    param_dim = 8  # flat layout (t0_at_-3, t0_at_+3, t1_at_-3, ...)

    PRIOR_MEANS = np.array([[5.0, 15.0], [5.0, 15.0], [-2.0, -1.0], [-7.0, 3.0]])
    PRIOR_VARIANCES = np.array([9.0, 2.25, 1.21, 1.21])

    def __init__(self, noise_variance: float = 0.1):
        if noise_variance <= 0:
            raise ValueError("noise_variance must be positive")
        self.noise_variance = float(noise_variance)

    def sample_prior(self, stream: RngStream, n: int) -> np.ndarray:
        eps = stream.standard_normal((n, self.n_treatments, 2))
        psi = self.PRIOR_MEANS + np.sqrt(self.PRIOR_VARIANCES)[:, None] * eps
        return psi.reshape(n, self.param_dim)

    @staticmethod
    def _coefficients(psi: np.ndarray):
        """(gamma, beta) per treatment; both shaped [..., K]."""
        p = psi.reshape(psi.shape[:-1] + (-1, 2))
        gamma = (p[..., 0] + p[..., 1] + 18.0) / 2.0
        beta = (p[..., 1] - gamma + 9.0) / 3.0
        return gamma, beta

    def mean_reward_all(self, psi: np.ndarray, contexts: np.ndarray) -> np.ndarray:
        """Mean rewards for every treatment: [B, D, K]."""
        gamma, beta = self._coefficients(np.atleast_2d(psi))
        c = np.asarray(contexts, dtype=np.float64)[None, :, None]
        return -c * c + beta[:, None, :] * c + gamma[:, None, :]

    def mean_reward(self, psi, actions, contexts):
        """Mean rewards of chosen treatments: [B, D] for integer actions [D]."""
        a = np.atleast_1d(np.asarray(actions, dtype=np.int64))
        if np.any(a < 0) or np.any(a >= self.n_treatments):
            raise ValueError(f"treatment indices must lie in [0, {self.n_treatments})")
        all_means = self.mean_reward_all(psi, np.atleast_1d(contexts))
        return np.take_along_axis(all_means, a[None, :, None], axis=2)[..., 0]

    def relaxed_mean_reward(self, psi, weights, contexts):
        """Mixture mean under per-design treatment weights [D, K]; node-aware."""
        all_means = self.mean_reward_all(psi, contexts)  # [B, D, K] constant
        return ad.reduce_sum(ad.mul(weights, all_means), axis=2)

    def sample_outcomes(self, psi, actions, contexts, stream: RngStream):
        mean = self.mean_reward(psi, actions, contexts)
        return stream.normal(mean, math.sqrt(self.noise_variance), mean.shape)

    def sample_relaxed_outcomes(self, psi, weights, contexts, stream: RngStream):
        mean = self.relaxed_mean_reward(psi, weights, contexts)
        shape = mean.shape if isinstance(mean, np.ndarray) else mean.data.shape
        return stream.normal(mean, math.sqrt(self.noise_variance), shape)

    def max_value(self, psi, contexts) -> np.ndarray:
        return self.mean_reward_all(psi, np.atleast_1d(contexts)).max(axis=2)

    def argmax_action(self, psi, contexts) -> np.ndarray:
        """Best treatment per (particle, context); ties go to the lowest index."""
        return self.mean_reward_all(psi, np.atleast_1d(contexts)).argmax(axis=2)

    def log_likelihood(self, dataset: Dataset, psi) -> np.ndarray:
        mean = self.mean_reward(psi, dataset.actions, dataset.contexts)  # [N, D]
        resid = dataset.outcomes[None, :] - mean
        var = self.noise_variance
        ll = -0.5 * (math.log(2.0 * math.pi * var) + resid * resid / var)
        return ll.sum(axis=1)


class ContinuousBumpModel(SimulatorModel):
    """Unit-height Gaussian bump in the action, centred at a random quadratic
    of the context.

    psi = (psi0..psi3), iid Uniform[0.1, 1.1].  The mean reward is
    f(a) = exp(-(a - g)^2 / h) with g = psi0 + psi1*c + psi2*c^2 and
    h = psi3.  Actions live in a box; the per-particle optimum is g
    clipped to that box.
    """

    action_kind = "continuous"
    param_dim = 4

    def __init__(self, noise_std: float = 0.1, bounds: tuple = (-4.0, 4.0)):
        if noise_std <= 0:
            raise ValueError("noise_std must be positive")
        lo, hi = float(bounds[0]), float(bounds[1])
        if not hi > lo:
            raise ValueError(f"bounds must satisfy hi > lo, got {bounds}")
        self.noise_std = float(noise_std)
        self.bounds = (lo, hi)

    def sample_prior(self, stream: RngStream, n: int) -> np.ndarray:
        return stream.uniform(0.1, 1.1, (n, self.param_dim))

    def bump_center(self, psi: np.ndarray, contexts: np.ndarray) -> np.ndarray:
        """g(psi, c) = psi0 + psi1*c + psi2*c^2, shaped [B, D]."""
        p = np.atleast_2d(psi)
        c = np.asarray(contexts, dtype=np.float64)[None, :]
        return p[:, 0:1] + p[:, 1:2] * c + p[:, 2:3] * c * c

    def _check_actions(self, actions) -> None:
        vals = np.asarray(getattr(actions, "data", actions), dtype=np.float64)
        lo, hi = self.bounds
        if np.any(vals < lo - 1e-9) or np.any(vals > hi + 1e-9):
            raise ValueError(f"actions outside bounds [{lo}, {hi}]")

    def mean_reward(self, psi, actions, contexts):
        """f for actions [D] (ndarray or node) at contexts [D]: [B, D]."""
        self._check_actions(actions)
        p = np.atleast_2d(psi)
        g = self.bump_center(p, np.atleast_1d(contexts))
        h = p[:, 3:4]
        dist = ad.sub(actions, g)
        return ad.exp(ad.neg(ad.div(ad.square(dist), h)))

    def sample_outcomes(self, psi, actions, contexts, stream: RngStream):
        mean = self.mean_reward(psi, actions, contexts)
        shape = mean.shape if isinstance(mean, np.ndarray) else mean.data.shape
        return stream.normal(mean, self.noise_std, shape)

    def max_value(self, psi, contexts) -> np.ndarray:
        g = self.bump_center(np.atleast_2d(psi), np.atleast_1d(contexts))
        h = np.atleast_2d(psi)[:, 3:4]
        a_star = np.clip(g, *self.bounds)
        d = a_star - g
        return np.exp(-(d * d) / h)

    def argmax_action(self, psi, contexts) -> np.ndarray:
        g = self.bump_center(np.atleast_2d(psi), np.atleast_1d(contexts))
        return np.clip(g, *self.bounds)

    def log_likelihood(self, dataset: Dataset, psi) -> np.ndarray:
        mean = self.mean_reward(psi, dataset.actions, dataset.contexts)
        resid = dataset.outcomes[None, :] - mean
        var = self.noise_std ** 2
        ll = -0.5 * (math.log(2.0 * math.pi * var) + resid * resid / var)
        return ll.sum(axis=1)
