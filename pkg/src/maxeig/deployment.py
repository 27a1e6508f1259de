"""Deployment stage: simulate the designed experiments in many ground-truth
environments, fit an importance-sampling posterior from each simulated
outcome batch, and score the resulting estimates.

Per realisation: a ground truth psi~ is drawn from the prior, outcomes are
simulated under the fixed designs, a self-normalised importance-sampling
(SNIS) posterior over prior particles is fitted, and posterior draws give
estimates of the max-values, the parameters and the optimal actions.
Metrics aggregate mean +- standard error across realisations with a
compensated, order-independent summation so parallel and serial runs agree
bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .models import ContextPair, Dataset, SimulatorModel
from .rng import RngStream
from .trainer import ContinuousDesign, FixedDiscreteDesign


class DegeneratePosterior(RuntimeError):
    """All importance weights vanished; the data is impossible under the prior."""


@dataclass
class WeightedPosterior:
    """Prior particles with self-normalised log-weights."""

    particles: np.ndarray  # [N, P]
    log_weights: np.ndarray  # [N], logsumexp == 0

    @property
    def n_particles(self) -> int:
        return self.particles.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def effective_sample_size(self) -> float:
        return float(1.0 / np.sum(self.weights ** 2))


@dataclass
class EvalConfig:
    n_envs: int = 200
    snis_particles: int = 10_000
    posterior_draws: int = 2000

    def __post_init__(self):
        if self.n_envs < 1 or self.snis_particles < 2 or self.posterior_draws < 1:
            raise ValueError("bad evaluation configuration")


def snis_posterior(model: SimulatorModel, dataset: Dataset, n_particles: int,
                   stream: RngStream) -> WeightedPosterior:
    """Importance-weight prior particles by the exact data likelihood."""
    if n_particles < 2:
        raise ValueError("need at least two particles")
    particles = model.sample_prior(stream, n_particles)
    if dataset.n == 0:
        log_w = np.full(n_particles, -math.log(n_particles))
        return WeightedPosterior(particles, log_w)
    log_lik = model.log_likelihood(dataset, particles)
    m = log_lik.max()
    if not np.isfinite(m):
        raise DegeneratePosterior("all importance weights are zero")
    log_norm = m + math.log(np.exp(log_lik - m).sum())
    return WeightedPosterior(particles, log_lik - log_norm)


def systematic_resample(posterior: WeightedPosterior, n_draws: int,
                        stream: RngStream) -> np.ndarray:
    """Systematic (stratified) resampling of particle rows.

    A single uniform offset drives a stride of 1/n_draws, so equal-weight
    particles split into exactly equal counts.
    """
    positions = (np.arange(n_draws) + stream.uniform01()) / n_draws
    cumulative = np.cumsum(posterior.weights)
    cumulative[-1] = 1.0
    idx = np.searchsorted(cumulative, positions, side="right")
    return posterior.particles[idx]


def posterior_estimates(model: SimulatorModel, posterior: WeightedPosterior,
                        eval_contexts: np.ndarray, n_draws: int, stream: RngStream):
    """(max-value estimates, parameter estimate, optimal-action estimates).

    All three are plain averages over ``n_draws`` resampled particles,
    except the discrete action estimate, which picks the treatment with
    the highest posterior-mean reward per evaluation context.
    """
    draws = systematic_resample(posterior, n_draws, stream)
    m_hat = model.max_value(draws, eval_contexts).mean(axis=0)
    psi_hat = draws.mean(axis=0)
    if model.action_kind == "discrete":
        mean_rewards = model.mean_reward_all(draws, eval_contexts).mean(axis=0)  # [D*, K]
        a_hat = mean_rewards.argmax(axis=1)
    else:
        a_hat = model.argmax_action(draws, eval_contexts).mean(axis=0)
    return m_hat, psi_hat, a_hat


def _design_actions(design):
    if isinstance(design, FixedDiscreteDesign):
        return design.treatments
    if isinstance(design, ContinuousDesign):
        return design.actions
    raise TypeError(f"deployment needs concrete designs, got {type(design).__name__}")


def _one_realisation(model: SimulatorModel, contexts: ContextPair, design,
                     eval_cfg: EvalConfig, env_stream: RngStream) -> dict:
    psi_true = model.sample_prior(env_stream.split("truth"), 1)
    actions = _design_actions(design)
    y = model.sample_outcomes(psi_true, actions, contexts.experimental,
                              env_stream.split("outcomes"))[0]
    dataset = Dataset(contexts.experimental, actions, y)
    posterior = snis_posterior(model, dataset, eval_cfg.snis_particles,
                               env_stream.split("particles"))
    m_hat, psi_hat, a_hat = posterior_estimates(
        model, posterior, contexts.evaluation, eval_cfg.posterior_draws,
        env_stream.split("resample"),
    )

    m_true = model.max_value(psi_true, contexts.evaluation)[0]
    a_true = model.argmax_action(psi_true, contexts.evaluation)[0]
    realised = model.mean_reward(psi_true, a_hat, contexts.evaluation)[0]

    row = {
        "mse_mstar": float(np.mean((m_hat - m_true) ** 2)),
        "mse_psi": float(np.mean((psi_hat - psi_true[0]) ** 2)),
        "regret": float(np.mean(m_true - realised)),
        "ess": posterior.effective_sample_size,
    }
    if model.action_kind == "discrete":
        row["mse_a_or_hitrate"] = float(np.mean(a_hat == a_true))
    else:
        row["mse_a_or_hitrate"] = float(np.mean((a_hat - a_true) ** 2))
    return row


def _neumaier_sum(values: np.ndarray) -> float:
    """Compensated summation; deterministic for any fixed input order."""
    total = 0.0
    comp = 0.0
    for v in values:
        t = total + v
        if abs(total) >= abs(v):
            comp += (total - t) + v
        else:
            comp += (v - t) + total
        total = t
    return total + comp


def aggregate_rows(rows: list) -> dict:
    """mean +- se per metric; rows are sorted by index before summing, so
    the result is independent of arrival order."""
    rows = sorted(rows, key=lambda r: r["env"])
    out = {"n_envs": len(rows)}
    keys = [k for k in rows[0] if k != "env"]
    for key in keys:
        vals = np.array([r[key] for r in rows])
        mean = _neumaier_sum(vals) / len(vals)
        if len(vals) > 1:
            var = _neumaier_sum((vals - mean) ** 2) / (len(vals) - 1)
            se = math.sqrt(var / len(vals))
        else:
            se = 0.0
        out[f"{key}_mean"] = mean
        out[f"{key}_se"] = se
    return out


def _env_task(args):
    model, contexts, design, eval_cfg, stream, i = args
    env_stream = stream.split(f"env-{i}")
    try:
        row = _one_realisation(model, contexts, design, eval_cfg, env_stream)
    except DegeneratePosterior:
        return {"env": i, "failed": True}
    row["env"] = i
    return row


def run_deployment(model: SimulatorModel, contexts: ContextPair, design,
                   eval_cfg: EvalConfig, stream: RngStream, pool=None) -> dict:
    """Evaluate one concrete design across ``eval_cfg.n_envs`` environments.

    Returns the aggregated metrics dict plus the count of realisations
    whose posterior degenerated (they are excluded from the averages).
    ``pool`` may be a multiprocessing pool; results are identical with or
    without one because every realisation owns a stream keyed by index.
    """
    tasks = [(model, contexts, design, eval_cfg, stream, i)
             for i in range(eval_cfg.n_envs)]
    if pool is None:
        rows = [_env_task(t) for t in tasks]
    else:
        rows = list(pool.map(_env_task, tasks, chunksize=8))
    failed = sum(1 for r in rows if r.get("failed"))
    good = [r for r in rows if not r.get("failed")]
    if not good:
        raise DegeneratePosterior("every realisation failed posterior inference")
    report = aggregate_rows(good)
    report["n_failed"] = failed
    return report


def calibration_series(model: SimulatorModel, contexts: ContextPair, design,
                       eval_cfg: EvalConfig, stream: RngStream,
                       rolling_window: int = 200) -> list:
    """Per-realisation posterior spread vs. truth error, for posterior checks.

    Each record carries the posterior standard deviation (root mean
    per-dimension variance of the resampled draws), the L2 error of the
    posterior-mean parameter estimate, and a trailing rolling mean of that
    error over ``rolling_window`` realisations.
    """
    records = []
    errors = []
    actions = _design_actions(design)
    for i in range(eval_cfg.n_envs):
        env_stream = stream.split(f"env-{i}")
        psi_true = model.sample_prior(env_stream.split("truth"), 1)
        if contexts.n_experiments > 0:
            y = model.sample_outcomes(psi_true, actions, contexts.experimental,
                                      env_stream.split("outcomes"))[0]
            dataset = Dataset(contexts.experimental, actions, y)
        else:
            dataset = Dataset(np.empty(0), np.empty(0, dtype=np.int64), np.empty(0))
        posterior = snis_posterior(model, dataset, eval_cfg.snis_particles,
                                   env_stream.split("particles"))
        draws = systematic_resample(posterior, eval_cfg.posterior_draws,
                                    env_stream.split("resample"))
        psi_hat = draws.mean(axis=0)
        post_std = math.sqrt(float(draws.var(axis=0).mean()))
        l2 = float(np.linalg.norm(psi_hat - psi_true[0]))
        errors.append(l2)
        window = errors[max(0, len(errors) - rolling_window):]
        records.append({
            "env": i,
            "posterior_std": post_std,
            "l2_error": l2,
            "l2_error_rolling": sum(window) / len(window),
        })
    return records
