"""Experiment configuration: JSON schema, validation, scale resolution.

A config file describes one experiment family (model, context grids,
baselines) plus two scale variants ("desk" and "paper") for the
training, EIG-estimation and evaluation budgets.  Loading resolves one
scale into a flat ``ResolvedConfig``; its content hash is embedded in
every output file so mismatched artifacts are never merged silently.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

from .deployment import EvalConfig
from .models import ContextPair, ContinuousBumpModel, DiscreteQuadraticModel
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def _require_keys(section: dict, allowed: set, required: set, where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")
    missing = required - set(section)
    if missing:
        raise ConfigError(f"missing key(s) in {where}: {sorted(missing)}")


def _scaled(section: dict, scale: str, where: str) -> dict:
    _require_keys(section, {"desk", "paper"}, {"desk", "paper"}, where)
    return section[scale]


@dataclass(frozen=True)
class ResolvedConfig:
    name: str
    scale: str
    seed: int
    model: dict
    contexts: dict
    train: dict
    eig: dict
    eval: dict
    baselines: dict

    def payload(self) -> dict:
        return {
            "name": self.name,
            "scale": self.scale,
            "seed": self.seed,
            "model": self.model,
            "contexts": self.contexts,
            "train": self.train,
            "eig": self.eig,
            "eval": self.eval,
            "baselines": self.baselines,
        }

    @property
    def config_hash(self) -> str:
        return _digest(self.payload())

    @property
    def model_hash(self) -> str:
        """Hash of the model + context sections only; gates result merging."""
        return _digest({"model": self.model, "contexts": self.contexts})

    # -- builders ---------------------------------------------------------

    def build_model(self):
        kind = self.model["kind"]
        if kind == "discrete_quadratic":
            return DiscreteQuadraticModel(noise_variance=self.model["noise_variance"])
        return ContinuousBumpModel(
            noise_std=self.model["noise_std"],
            bounds=tuple(self.model["action_bounds"]),
        )

    def build_contexts(self) -> ContextPair:
        c = self.contexts
        if c["layout"] == "mirrored":
            return ContextPair.mirrored(c["size"], c["low"], c["high"])
        return ContextPair.with_midpoints(c["size"], c["low"], c["high"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **self.train)

    def eig_config(self) -> TrainConfig:
        merged = dict(self.train)
        merged.update(self.eig)
        return TrainConfig(seed=self.seed, **merged)

    def eval_config(self) -> EvalConfig:
        return EvalConfig(**self.eval)


def _digest(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


_MODEL_KEYS = {
    "discrete_quadratic": ({"kind", "noise_variance"}, {"kind", "noise_variance"}),
    "continuous_bump": (
        {"kind", "noise_std", "action_bounds"},
        {"kind", "noise_std", "action_bounds"},
    ),
}

_TRAIN_KEYS = {
    "steps", "batch", "lr", "lr_decay", "lr_decay_every",
    "tau0", "tau_halve_every", "hard_frac", "log_every", "eval_batches",
    "bn_recal_batches",
}
_EIG_KEYS = {"steps", "batch", "eval_batches"}
_EVAL_KEYS = {"n_envs", "snis_particles", "posterior_draws"}
_BASELINE_KEYS = {"random_sigmas", "ucb_lambdas", "ucb_prior_samples", "ucb_grid"}


def resolve_config(raw: dict, scale: str = "desk", seed: int | None = None) -> ResolvedConfig:
    if scale not in ("desk", "paper"):
        raise ConfigError(f"scale must be 'desk' or 'paper', got {scale!r}")
    _require_keys(
        raw,
        {"name", "seed", "model", "contexts", "train", "eig", "eval", "baselines"},
        {"name", "seed", "model", "contexts", "train", "eig", "eval", "baselines"},
        "config",
    )

    model = dict(raw["model"])
    kind = model.get("kind")
    if kind not in _MODEL_KEYS:
        raise ConfigError(f"model.kind must be one of {sorted(_MODEL_KEYS)}, got {kind!r}")
    allowed, required = _MODEL_KEYS[kind]
    _require_keys(model, allowed, required, "model")

    contexts = dict(raw["contexts"])
    _require_keys(contexts, {"layout", "size", "low", "high"},
                  {"layout", "size", "low", "high"}, "contexts")
    if contexts["layout"] not in ("mirrored", "midpoints"):
        raise ConfigError(f"contexts.layout must be 'mirrored' or 'midpoints'")
    if int(contexts["size"]) < 2:
        raise ConfigError("contexts.size must be >= 2")

    train = dict(_scaled(raw["train"], scale, "train"))
    _require_keys(train, _TRAIN_KEYS, {"steps", "batch"}, f"train.{scale}")
    eig = dict(_scaled(raw["eig"], scale, "eig"))
    _require_keys(eig, _EIG_KEYS, {"steps"}, f"eig.{scale}")
    eval_section = dict(_scaled(raw["eval"], scale, "eval"))
    _require_keys(eval_section, _EVAL_KEYS, {"n_envs"}, f"eval.{scale}")
    baselines = dict(raw["baselines"])
    _require_keys(baselines, _BASELINE_KEYS, set(), "baselines")

    resolved_seed = int(raw["seed"] if seed is None else seed)
    return ResolvedConfig(
        name=str(raw["name"]),
        scale=scale,
        seed=resolved_seed,
        model=model,
        contexts=contexts,
        train=train,
        eig=eig,
        eval=eval_section,
        baselines=baselines,
    )


def load_config(path, scale: str = "desk", seed: int | None = None) -> ResolvedConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return resolve_config(raw, scale=scale, seed=seed)
