"""Separable critic and the contrastive lower bound it scores.

The critic is a pair of MLP encoders mapping outcome batches and
max-value batches to 32-dimensional codes; the score of a pair is the
inner product of its codes.  ``infonce`` turns a square score matrix
(diagonal = jointly sampled pairs, off-diagonal = in-batch contrasts)
into the lower-bound value

    mean_i [ S_ii - logsumexp_j S_ij ] + log B,

which can never exceed log B.

Two architecture presets are provided:
- "discrete": one hidden layer of 512 units with batch norm then relu;
- "continuous": hidden layers [2 * input_dim, 412, 256] with relu.
Both output 32 units.
"""

from __future__ import annotations

import json
import math

import numpy as np

from . import autodiff as ad
from .rng import RngStream

OUTPUT_UNITS = 32


def _glorot(stream: RngStream, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return stream.uniform(-limit, limit, (fan_in, fan_out))


class Dense:
    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        self.weight = weight
        self.bias = bias

    @classmethod
    def init(cls, stream: RngStream, n_in: int, n_out: int) -> "Dense":
        return cls(_glorot(stream, n_in, n_out), np.zeros(n_out))

    def forward(self, x, tape, registry, training):
        if tape is not None:
            w = tape.leaf(self.weight)
            b = tape.leaf(self.bias)
            registry.extend([(self.weight, w), (self.bias, b)])
        else:
            w, b = self.weight, self.bias
        return ad.add(ad.matmul(x, w), b)

    def spec(self) -> dict:
        return {"kind": "dense", "shape": list(self.weight.shape)}


class BatchNorm:
    def __init__(self, width: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = np.ones(width)
        self.beta = np.zeros(width)
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x, tape, registry, training):
        if tape is not None:
            g = tape.leaf(self.gamma)
            b = tape.leaf(self.beta)
            registry.extend([(self.gamma, g), (self.beta, b)])
        else:
            g, b = self.gamma, self.beta
        return ad.batch_norm(
            x, g, b, self.running_mean, self.running_var,
            training=training, momentum=self.momentum, eps=self.eps,
        )

    def spec(self) -> dict:
        return {"kind": "batch_norm", "shape": [int(self.gamma.shape[0])]}


class Relu:
    def forward(self, x, tape, registry, training):
        return ad.relu(x)

    def spec(self) -> dict:
        return {"kind": "relu"}


class MLPEncoder:
    """Stack of layers ending in an OUTPUT_UNITS-wide linear map."""

    def __init__(self, layers, input_dim: int):
        self.layers = layers
        self.input_dim = input_dim

    @classmethod
    def for_preset(cls, preset: str, input_dim: int, stream: RngStream) -> "MLPEncoder":
        if preset == "discrete":
            layers = [
                Dense.init(stream, input_dim, 512),
                BatchNorm(512),
                Relu(),
                Dense.init(stream, 512, OUTPUT_UNITS),
            ]
        elif preset == "continuous":
            widths = [input_dim, 2 * input_dim, 412, 256]
            layers = []
            for n_in, n_out in zip(widths[:-1], widths[1:]):
                layers.append(Dense.init(stream, n_in, n_out))
                layers.append(Relu())
            layers.append(Dense.init(stream, widths[-1], OUTPUT_UNITS))
        else:
            raise ValueError(f"unknown critic preset {preset!r}")
        return cls(layers, input_dim)

    def forward(self, x, tape=None, registry=None, training=False):
        width = x.shape[1] if isinstance(x, np.ndarray) else x.data.shape[1]
        if width != self.input_dim:
            raise ad.ShapeError(f"encoder expects width {self.input_dim}, got {width}")
        registry = registry if registry is not None else []
        out = x
        for layer in self.layers:
            out = layer.forward(out, tape, registry, training)
        return out

    def parameters(self):
        for layer in self.layers:
            if isinstance(layer, Dense):
                yield layer.weight
                yield layer.bias
            elif isinstance(layer, BatchNorm):
                yield layer.gamma
                yield layer.beta


class SeparableCritic:
    """U(y, m*) = <E_y(y), E_m(m*)>, with independent MLP encoders."""

    def __init__(self, preset: str, outcome_dim: int, value_dim: int, stream: RngStream):
        self.preset = preset
        self.outcome_dim = outcome_dim
        self.value_dim = value_dim
        self.encoder_y = MLPEncoder.for_preset(preset, outcome_dim, stream.split("enc_y"))
        self.encoder_m = MLPEncoder.for_preset(preset, value_dim, stream.split("enc_m"))

    def parameters(self):
        return list(self.encoder_y.parameters()) + list(self.encoder_m.parameters())

    def has_batch_norm(self) -> bool:
        return any(
            isinstance(layer, BatchNorm)
            for enc in (self.encoder_y, self.encoder_m)
            for layer in enc.layers
        )

    def zero_parameters(self) -> "SeparableCritic":
        """Zero all weights in place (useful to assert no spurious signal)."""
        for p in self.parameters():
            p[...] = 0.0
        return self

    # -- scoring ----------------------------------------------------------

    def score_matrix(self, y_batch, m_batch, tape=None, registry=None, training=False):
        """S[i, j] = U(y_i, m*_j) for a joint batch; requires B >= 2."""
        b = y_batch.shape[0] if isinstance(y_batch, np.ndarray) else y_batch.data.shape[0]
        b_m = m_batch.shape[0] if isinstance(m_batch, np.ndarray) else m_batch.data.shape[0]
        if b < 2:
            raise ValueError(f"score matrix needs a batch of >= 2, got {b}")
        if b_m != b:
            raise ad.ShapeError(f"outcome batch {b} and max-value batch {b_m} differ")
        ey = self.encoder_y.forward(y_batch, tape, registry, training)
        em = self.encoder_m.forward(m_batch, tape, registry, training)
        return ad.matmul(ey, ad.transpose(em))

    def score_pairs(self, y_batch: np.ndarray, m_batch: np.ndarray) -> np.ndarray:
        """U(y_i, m*_i) row by row, inference mode; no batch coupling."""
        ey = self.encoder_y.forward(y_batch, training=False)
        em = self.encoder_m.forward(m_batch, training=False)
        return (ey * em).sum(axis=1)

    # -- serialisation ------------------------------------------------------

    def to_payload(self) -> dict:
        def encoder_payload(enc):
            entries = []
            for layer in enc.layers:
                entry = layer.spec()
                if isinstance(layer, Dense):
                    entry["weight"] = layer.weight.ravel().tolist()
                    entry["bias"] = layer.bias.tolist()
                elif isinstance(layer, BatchNorm):
                    entry["gamma"] = layer.gamma.tolist()
                    entry["beta"] = layer.beta.tolist()
                    entry["running_mean"] = layer.running_mean.tolist()
                    entry["running_var"] = layer.running_var.tolist()
                entries.append(entry)
            return {"input_dim": enc.input_dim, "layers": entries}

        return {
            "preset": self.preset,
            "outcome_dim": self.outcome_dim,
            "value_dim": self.value_dim,
            "encoder_y": encoder_payload(self.encoder_y),
            "encoder_m": encoder_payload(self.encoder_m),
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "SeparableCritic":
        critic = cls.__new__(cls)
        critic.preset = payload["preset"]
        critic.outcome_dim = int(payload["outcome_dim"])
        critic.value_dim = int(payload["value_dim"])

        def decode(enc_payload):
            layers = []
            for entry in enc_payload["layers"]:
                kind = entry["kind"]
                if kind == "dense":
                    shape = tuple(entry["shape"])
                    layers.append(Dense(
                        np.asarray(entry["weight"], dtype=np.float64).reshape(shape),
                        np.asarray(entry["bias"], dtype=np.float64),
                    ))
                elif kind == "batch_norm":
                    bn = BatchNorm(entry["shape"][0])
                    bn.gamma = np.asarray(entry["gamma"], dtype=np.float64)
                    bn.beta = np.asarray(entry["beta"], dtype=np.float64)
                    bn.running_mean = np.asarray(entry["running_mean"], dtype=np.float64)
                    bn.running_var = np.asarray(entry["running_var"], dtype=np.float64)
                    layers.append(bn)
                elif kind == "relu":
                    layers.append(Relu())
                else:
                    raise ValueError(f"unknown layer kind {kind!r}")
            return MLPEncoder(layers, int(enc_payload["input_dim"]))

        critic.encoder_y = decode(payload["encoder_y"])
        critic.encoder_m = decode(payload["encoder_m"])
        return critic

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_payload(), fh, sort_keys=True)

    @classmethod
    def load(cls, path) -> "SeparableCritic":
        with open(path) as fh:
            return cls.from_payload(json.load(fh))


def infonce(scores):
    """Contrastive lower bound from a square score matrix; <= log B.

    Each row contrasts its diagonal score against the batch average,
    log[exp(S_ii) / mean_j exp(S_ij)], averaged over rows.  A detached
    row-max shift keeps the exponentials in range, and dividing by B
    inside the log makes a constant score matrix evaluate to exactly 0.
    """
    vals = scores if isinstance(scores, np.ndarray) else scores.data
    if vals.ndim != 2 or vals.shape[0] != vals.shape[1]:
        raise ad.ShapeError(f"infonce expects a square score matrix, got {vals.shape}")
    if not np.all(np.isfinite(vals)):
        raise ad.DomainError("infonce: score matrix contains non-finite entries")
    b = vals.shape[0]
    row_max = vals.max(axis=1, keepdims=True)
    shifted = ad.sub(scores, row_max)
    log_mean = ad.log(ad.div(ad.reduce_sum(ad.exp(shifted), axis=1), float(b)))
    return ad.reduce_mean(ad.sub(ad.diag_part(shifted), log_mean), axis=0)
