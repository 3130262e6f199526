"""Configuration distributions: parameter normalization, PMFs, sampling and
their analytic derivatives with respect to the distribution parameters.

Quantization layers draw ``Multinomial(C, softmax(alpha_l))``; pruning layers
draw ``Binomial(C - 1, sigmoid(alpha_l))``. Every derivative reduces to the
score ``a - n * p`` times the probability, with ``n = C`` (multinomial) or
``n = C - 1`` (binomial).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import gammaln

from .arch import (
    ArchitectureSpec,
    LayerSpec,
    Mode,
    NetworkConfig,
    validate_config,
    validate_layer_config,
)
from .errors import DomainError

LOG_CLAMP = 1e-12


class Family(enum.Enum):
    MULTINOMIAL = "multinomial"
    BINOMIAL = "binomial"

    @classmethod
    def for_mode(cls, mode: Mode) -> "Family":
        return cls.MULTINOMIAL if mode is Mode.QUANTIZATION else cls.BINOMIAL


@dataclass(frozen=True)
class AlphaParams:
    """Trainable distribution parameters, one float vector per layer.

    Binomial layers carry a length-1 vector. Gradients use the same layout
    (a list of arrays aligned with ``per_layer``).
    """

    family: Family
    per_layer: tuple

    def __post_init__(self):
        layers = tuple(np.array(v, dtype=float).reshape(-1) for v in self.per_layer)
        for i, v in enumerate(layers):
            if v.size == 0 or not np.all(np.isfinite(v)):
                raise DomainError(f"alpha for layer {i} must be non-empty and finite")
            if self.family is Family.BINOMIAL and v.size != 1:
                raise DomainError(f"binomial alpha for layer {i} must be a scalar")
            v.setflags(write=False)
        object.__setattr__(self, "per_layer", layers)

    @classmethod
    def zeros(cls, arch: ArchitectureSpec) -> "AlphaParams":
        return cls(
            Family.for_mode(arch.mode),
            tuple(np.zeros(layer.num_params) for layer in arch.layers),
        )

    @classmethod
    def from_probs(cls, arch: ArchitectureSpec, probs) -> "AlphaParams":
        """Inverse normalization: a scalar or per-layer probability (binomial)
        or per-layer probability vectors (multinomial)."""
        family = Family.for_mode(arch.mode)
        if family is Family.BINOMIAL:
            ps = np.broadcast_to(np.asarray(probs, dtype=float), (len(arch),))
            return cls(family, tuple(np.log(p / (1.0 - p)) for p in ps))
        return cls(family, tuple(np.log(np.asarray(p, dtype=float)) for p in probs))

    def check(self, arch: ArchitectureSpec) -> "AlphaParams":
        if self.family is not Family.for_mode(arch.mode):
            raise DomainError(f"{self.family.value} alpha used with {arch.mode.value} architecture")
        if len(self.per_layer) != len(arch):
            raise DomainError(f"alpha has {len(self.per_layer)} layers, architecture {len(arch)}")
        for i, (v, layer) in enumerate(zip(self.per_layer, arch.layers)):
            if v.size != layer.num_params:
                raise DomainError(f"layer {i}: alpha length {v.size} != {layer.num_params}")
        return self

    def replace_entry(self, layer: int, index: int, value: float) -> "AlphaParams":
        layers = [v.copy() for v in self.per_layer]
        layers[layer][index] = value
        return AlphaParams(self.family, tuple(layers))

    def to_lists(self) -> list:
        return [v.tolist() for v in self.per_layer]


def softmax_probs(alpha_layer) -> np.ndarray:
    a = np.asarray(alpha_layer, dtype=float)
    if not np.all(np.isfinite(a)):
        raise DomainError("softmax input must be finite")
    e = np.exp(a - a.max())
    return e / e.sum()


def sigmoid_prob(alpha) -> float:
    alpha = float(np.asarray(alpha).reshape(-1)[0]) if np.ndim(alpha) else float(alpha)
    if not math.isfinite(alpha):
        raise DomainError("sigmoid input must be finite")
    if alpha >= 0:
        return 1.0 / (1.0 + math.exp(-alpha))
    e = math.exp(alpha)
    return e / (1.0 + e)


def layer_probs(alpha: AlphaParams, index: int) -> np.ndarray:
    """Normalized probabilities of layer ``index``: a vector for multinomial
    layers, a length-1 vector holding ``p`` for binomial layers."""
    v = alpha.per_layer[index]
    if alpha.family is Family.MULTINOMIAL:
        return softmax_probs(v)
    return np.array([sigmoid_prob(v[0])])


def _safe_log(p):
    return np.log(np.clip(p, LOG_CLAMP, 1.0 - LOG_CLAMP))


def multinomial_log_pmf(layer: LayerSpec, probs, cfg) -> float:
    cfg = np.array(validate_layer_config(layer, cfg), dtype=float)
    probs = np.asarray(probs, dtype=float)
    return float(
        gammaln(layer.filters + 1) - gammaln(cfg + 1).sum() + (cfg * _safe_log(probs)).sum()
    )


def multinomial_pmf(layer: LayerSpec, probs, cfg) -> float:
    return math.exp(multinomial_log_pmf(layer, probs, cfg))


def binomial_log_pmf(layer: LayerSpec, p: float, cfg) -> float:
    (a,) = validate_layer_config(layer, cfg)
    p = float(np.asarray(p).reshape(-1)[0])
    if not 0.0 < p < 1.0:
        raise DomainError(f"binomial probability must lie in (0, 1), got {p}")
    n = layer.filters - 1
    log_p, log_q = _safe_log(p), _safe_log(1.0 - p)
    return float(gammaln(n + 1) - gammaln(a + 1) - gammaln(n - a + 1) + a * log_p + (n - a) * log_q)


def binomial_pmf(layer: LayerSpec, p: float, cfg) -> float:
    return math.exp(binomial_log_pmf(layer, p, cfg))


def layer_log_pmf(layer: LayerSpec, probs, cfg) -> float:
    if layer.mode is Mode.QUANTIZATION:
        return multinomial_log_pmf(layer, probs, cfg)
    return binomial_log_pmf(layer, probs, cfg)


def layer_pmf(layer: LayerSpec, probs, cfg) -> float:
    return math.exp(layer_log_pmf(layer, probs, cfg))


def multinomial_layer_pmf_grad(layer: LayerSpec, probs, cfg, t: int) -> float:
    """d Pr(a_l) / d alpha_{l,t} = (a_t - C p_t) Pr(a_l)."""
    probs = np.asarray(probs, dtype=float)
    return (cfg[t] - layer.filters * probs[t]) * multinomial_pmf(layer, probs, cfg)


def binomial_layer_pmf_grad(layer: LayerSpec, p: float, cfg) -> float:
    """d Pr(a_l) / d alpha_l = (a - (C - 1) p) Pr(a_l)."""
    p = float(np.asarray(p).reshape(-1)[0])
    return (cfg[0] - (layer.filters - 1) * p) * binomial_pmf(layer, p, cfg)


def layer_log_pmf_table(layer: LayerSpec, alpha_layer, configs: np.ndarray) -> np.ndarray:
    """Vectorized log-PMF over an ``(n, len)`` array of valid layer configs."""
    configs = np.asarray(configs, dtype=float)
    if layer.mode is Mode.QUANTIZATION:
        logp = _safe_log(softmax_probs(alpha_layer))
        return gammaln(layer.filters + 1) - gammaln(configs + 1).sum(axis=1) + configs @ logp
    p = sigmoid_prob(alpha_layer[0])
    n = layer.filters - 1
    a = configs[:, 0]
    return (
        gammaln(n + 1) - gammaln(a + 1) - gammaln(n - a + 1)
        + a * _safe_log(p) + (n - a) * _safe_log(1.0 - p)
    )


def sample_layer(layer: LayerSpec, probs, rng: np.random.Generator) -> tuple:
    probs = np.asarray(probs, dtype=float)
    if layer.mode is Mode.QUANTIZATION:
        return tuple(int(v) for v in rng.multinomial(layer.filters, probs))
    return (int(rng.binomial(layer.filters - 1, probs[0])),)


def sample_network(alpha: AlphaParams, arch: ArchitectureSpec, rng: np.random.Generator) -> NetworkConfig:
    alpha.check(arch)
    return NetworkConfig(
        tuple(sample_layer(layer, layer_probs(alpha, i), rng) for i, layer in enumerate(arch.layers))
    )


def network_config_log_prob(alpha: AlphaParams, arch: ArchitectureSpec, cfg: NetworkConfig) -> float:
    alpha.check(arch)
    validate_config(arch, cfg)
    return math.fsum(
        layer_log_pmf(layer, layer_probs(alpha, i), cfg[i]) for i, layer in enumerate(arch.layers)
    )


def network_config_prob(alpha: AlphaParams, arch: ArchitectureSpec, cfg: NetworkConfig) -> float:
    """p(a | alpha): product of the per-layer PMFs."""
    return math.exp(network_config_log_prob(alpha, arch, cfg))


def score_vector(alpha: AlphaParams, arch: ArchitectureSpec, cfg: NetworkConfig) -> list:
    """d log p(a | alpha) / d alpha for every parameter, laid out like ``alpha``."""
    return [
        np.asarray(cfg[i], dtype=float) - layer.trials * layer_probs(alpha, i)
        for i, layer in enumerate(arch.layers)
    ]


def score(alpha: AlphaParams, arch: ArchitectureSpec, cfg: NetworkConfig, layer: int, op: int = 0) -> float:
    """The factor ``a_{l,t} - n_l p_{l,t}`` multiplying the loss in the estimator."""
    spec = arch.layers[layer]
    return float(cfg[layer][op] - spec.trials * layer_probs(alpha, layer)[op])


def network_config_prob_grad(
    alpha: AlphaParams, arch: ArchitectureSpec, cfg: NetworkConfig, layer: int, op: int = 0
) -> float:
    """d p(a | alpha) / d alpha_{l,t}: the layer score times the network probability."""
    return score(alpha, arch, cfg, layer, op) * network_config_prob(alpha, arch, cfg)
