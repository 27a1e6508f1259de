"""Joint stochastic-gradient training of designs and critic.

Each step samples a fresh parameter batch, simulates outcomes under the
current designs, scores outcome/max-value pairs with the critic and
ascends the contrastive bound with Adam.  Discrete treatments train
through a Gumbel-Softmax relaxation whose temperature halves on a fixed
interval, switching to straight-through (hard) sampling for the last
fifth of the run.  One Gumbel draw per design per step is shared across
the parameter batch: a design row is a single physical experiment, so
resampling per particle would average the policy rather than sample it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .critic import SeparableCritic, infonce
from .models import ContextPair, SimulatorModel
from .rng import RngStream


class TrainingDiverged(RuntimeError):
    """Raised when the objective becomes non-finite; carries the step index."""

    def __init__(self, step: int):
        super().__init__(f"non-finite objective at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    steps: int = 50_000
    batch: int = 2048
    lr: float = 1e-3
    lr_decay: float = 0.96
    lr_decay_every: int = 1000
    tau0: float = 2.0
    tau_halve_every: int = 10_000
    hard_frac: float = 0.8
    log_every: int = 250
    eval_batches: int = 50
    bn_recal_batches: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch < 1:
            raise ValueError("steps must be >= 0 and batch >= 1")
        if self.tau0 <= 0 or self.tau_halve_every < 1 or not 0 < self.hard_frac <= 1:
            raise ValueError("bad annealing parameters")


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, step: int, bound: float, lr: float, tau) -> None:
        self.records.append({
            "step": step,
            "loss": -bound,
            "bound": bound,
            "lr": lr,
            "tau": tau,
        })

    def bounds(self) -> np.ndarray:
        return np.array([r["bound"] for r in self.records])


# ---------------------------------------------------------------------------
# Design variants
# ---------------------------------------------------------------------------


@dataclass
class ContinuousDesign:
    """A vector of real-valued actions, optionally trainable."""

    actions: np.ndarray
    trainable: bool = True

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.float64).copy()


@dataclass
class DiscretePolicy:
    """Per-design treatment logits for the Gumbel-Softmax policy."""

    logits: np.ndarray
    trainable: bool = True

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64).copy()


@dataclass
class FixedDiscreteDesign:
    """Concrete treatment assignments; never trained."""

    treatments: np.ndarray
    trainable: bool = False

    def __post_init__(self):
        self.treatments = np.asarray(self.treatments, dtype=np.int64).copy()


def init_continuous_design(model, n_designs: int, stream: RngStream) -> ContinuousDesign:
    a = stream.normal(0.0, 1.0, (n_designs,))
    return ContinuousDesign(np.clip(a, *model.bounds))


def init_discrete_policy(model, n_designs: int) -> DiscretePolicy:
    return DiscretePolicy(np.zeros((n_designs, model.n_treatments)))


def anneal_schedule(step: int, cfg: TrainConfig):
    """(temperature, hard?) for a 0-based step index."""
    if not 0 <= step < max(cfg.steps, 1):
        raise ValueError(f"step {step} outside [0, {cfg.steps})")
    tau = cfg.tau0 * 0.5 ** (step // cfg.tau_halve_every)
    return tau, step >= cfg.hard_frac * cfg.steps


def gumbel_softmax(logits, tau: float, stream: RngStream, hard: bool):
    """Relaxed one-hot rows: softmax((logits + Gumbel noise) / tau).

    In hard mode the forward value is the exact one-hot argmax row while
    gradients flow through the soft relaxation (straight-through).
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    shape = logits.shape if isinstance(logits, np.ndarray) else logits.data.shape
    noise = stream.gumbel01(shape)
    soft = ad.softmax(ad.div(ad.add(logits, noise), tau), axis=1)
    if not hard:
        return soft
    soft_vals = soft if isinstance(soft, np.ndarray) else soft.data
    one_hot = np.zeros_like(soft_vals)
    one_hot[np.arange(shape[0]), soft_vals.argmax(axis=1)] = 1.0
    return ad.straight_through(soft, one_hot)


def extract_design(design):
    """Deterministic concrete designs from a (possibly trained) spec.

    Discrete policies collapse to the argmax of their logits (ties to the
    lowest treatment index); continuous actions are returned as-is, and
    callers are expected to have kept them inside model bounds.
    """
    if isinstance(design, DiscretePolicy):
        return FixedDiscreteDesign(design.logits.argmax(axis=1))
    if isinstance(design, FixedDiscreteDesign):
        return FixedDiscreteDesign(design.treatments.copy())
    if isinstance(design, ContinuousDesign):
        return ContinuousDesign(design.actions.copy(), trainable=False)
    raise TypeError(f"unknown design spec {type(design).__name__}")


def _check_design_kind(model: SimulatorModel, design) -> None:
    discrete = isinstance(design, (DiscretePolicy, FixedDiscreteDesign))
    if discrete != (model.action_kind == "discrete"):
        raise TypeError(
            f"design {type(design).__name__} does not match model action kind "
            f"{model.action_kind!r}"
        )


def _outcome_batch(model, design, contexts, psi, tau, hard,
                   noise_stream, gumbel_stream, tape):
    """Simulated outcomes under the current design, as a tape node."""
    if isinstance(design, DiscretePolicy):
        logits = tape.leaf(design.logits, requires_grad=design.trainable)
        weights = gumbel_softmax(logits, tau, gumbel_stream, hard)
        y = model.sample_relaxed_outcomes(psi, weights, contexts.experimental, noise_stream)
        return y, logits
    if isinstance(design, FixedDiscreteDesign):
        y = model.sample_outcomes(psi, design.treatments, contexts.experimental, noise_stream)
        return ad.ValueNode(y), None
    actions = tape.leaf(design.actions, requires_grad=design.trainable)
    y = model.sample_outcomes(psi, actions, contexts.experimental, noise_stream)
    return y, actions


def fit(model: SimulatorModel, contexts: ContextPair, design, critic: SeparableCritic,
        cfg: TrainConfig, stream: RngStream):
    """Run the training stage; returns (design, critic, TrainLog).

    The design object is updated in place when trainable; with
    ``cfg.steps == 0`` everything is returned untouched.
    """
    _check_design_kind(model, design)
    log = TrainLog()
    if cfg.steps == 0:
        return design, critic, log

    psi_stream = stream.split("psi")
    noise_stream = stream.split("noise")
    gumbel_stream = stream.split("gumbel")

    critic_params = critic.parameters()
    design_arrays = []
    if getattr(design, "trainable", False):
        design_arrays = [design.logits if isinstance(design, DiscretePolicy) else design.actions]
    adam = ad.AdamState.for_params(
        design_arrays + critic_params,
        lr=cfg.lr, decay=cfg.lr_decay, decay_every=cfg.lr_decay_every,
    )

    for step in range(cfg.steps):
        tau, hard = anneal_schedule(step, cfg)
        lr_now = adam.effective_lr
        tape = ad.Tape()
        registry = []

        psi = model.sample_prior(psi_stream, cfg.batch)
        m_star = model.max_value(psi, contexts.evaluation)
        y, design_node = _outcome_batch(
            model, design, contexts, psi, tau, hard, noise_stream, gumbel_stream, tape,
        )
        if design_node is not None and design_node.requires_grad:
            registry.append((design_arrays[0], design_node))
        scores = critic.score_matrix(y, m_star, tape=tape, registry=registry, training=True)
        try:
            bound = infonce(scores)
        except ad.DomainError as exc:
            raise TrainingDiverged(step) from exc
        bound_val = float(bound.data)
        if not math.isfinite(bound_val):
            raise TrainingDiverged(step)

        loss = ad.neg(bound)
        grads = tape.backward(loss)
        ad.adam_step([node for _, node in registry], grads, adam)

        if isinstance(design, ContinuousDesign) and design.trainable:
            np.clip(design.actions, *model.bounds, out=design.actions)

        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            log.append(step, bound_val, lr_now,
                       tau if isinstance(design, DiscretePolicy) else None)

    if critic.has_batch_norm():
        _recalibrate_batch_norm(model, contexts, design, critic, cfg,
                                stream.split("bn_recal"))
    return design, critic, log


def _recalibrate_batch_norm(model, contexts, design, critic, cfg, stream):
    """Settle batch-norm running statistics at the final weights.

    The per-step moving averages lag the parameter trajectory; with the
    gain 1/sigma that normalisation puts on near-constant features, stale
    statistics can wreck inference-mode scoring.  Forward passes under the
    extracted (deterministic) design fix that without touching weights.
    """
    concrete = extract_design(design)
    psi_stream = stream.split("psi")
    noise_stream = stream.split("noise")
    actions = (concrete.treatments if isinstance(concrete, FixedDiscreteDesign)
               else concrete.actions)
    for _ in range(cfg.bn_recal_batches):
        psi = model.sample_prior(psi_stream, cfg.batch)
        m_star = model.max_value(psi, contexts.evaluation)
        y = model.sample_outcomes(psi, actions, contexts.experimental, noise_stream)
        critic.encoder_y.forward(y, training=True)
        critic.encoder_m.forward(m_star, training=True)


def evaluate_bound(model: SimulatorModel, contexts: ContextPair, design,
                   critic: SeparableCritic, cfg: TrainConfig, stream: RngStream,
                   n_batches: int | None = None):
    """Held-out bound estimate with a frozen critic (inference mode).

    Returns (mean, standard error) over ``n_batches`` fresh batches.
    """
    _check_design_kind(model, design)
    n_batches = cfg.eval_batches if n_batches is None else n_batches
    psi_stream = stream.split("eval_psi")
    noise_stream = stream.split("eval_noise")
    concrete = extract_design(design)
    values = np.empty(n_batches)
    for i in range(n_batches):
        psi = model.sample_prior(psi_stream, cfg.batch)
        m_star = model.max_value(psi, contexts.evaluation)
        if isinstance(concrete, FixedDiscreteDesign):
            y = model.sample_outcomes(psi, concrete.treatments, contexts.experimental, noise_stream)
        else:
            y = model.sample_outcomes(psi, concrete.actions, contexts.experimental, noise_stream)
        values[i] = float(infonce(critic.score_matrix(y, m_star, training=False)))
    se = values.std(ddof=1) / math.sqrt(n_batches) if n_batches > 1 else 0.0
    return float(values.mean()), float(se)
