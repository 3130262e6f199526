"""Brute-force ground truth on small configuration spaces.

Exhaustive enumeration gives exact expected losses, exact gradients (sum
of loss times the analytic probability derivative) and finite-difference
gradients. The enumeration order is fixed: the first layer varies slowest,
and within a layer quantization counts run in descending lexicographic
order while pruning values ascend.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np

from .arch import (
    ArchitectureSpec,
    NetworkConfig,
    build_architecture,
    layer_configs,
    network_config_count,
)
from .dist import AlphaParams, Family, layer_log_pmf_table, layer_probs
from .errors import DomainError, SpaceTooLarge

DEFAULT_LIMIT = 10**6


@dataclass
class EnumeratedSpace:
    """All configurations of an architecture with their probabilities under
    one alpha. ``index[i, l]`` points into ``layer_tables[l]``."""

    arch: ArchitectureSpec
    layer_tables: list  # per layer: (n_l, len) int array of layer configs
    index: np.ndarray  # (N, L)
    probs: np.ndarray  # (N,)

    def __len__(self):
        return len(self.probs)

    @cached_property
    def configs(self) -> list:
        tables = [[tuple(int(v) for v in row) for row in t] for t in self.layer_tables]
        return [
            NetworkConfig(tuple(tables[l][j] for l, j in enumerate(row))) for row in self.index
        ]

    def layer_values(self, layer: int) -> np.ndarray:
        """``(N, len)`` array of layer ``layer``'s config for every entry."""
        return self.layer_tables[layer][self.index[:, layer]]

    def losses(self, loss_fn: Callable[[NetworkConfig], float]) -> np.ndarray:
        return np.array([loss_fn(cfg) for cfg in self.configs], dtype=float)


def _check_limit(arch: ArchitectureSpec, limit: int) -> int:
    count = network_config_count(arch)
    if count > limit:
        raise SpaceTooLarge(count, limit)
    return count


def enumerate_space(arch: ArchitectureSpec, alpha: AlphaParams, limit: int = DEFAULT_LIMIT) -> EnumeratedSpace:
    alpha.check(arch)
    _check_limit(arch, limit)
    tables = [np.array(layer_configs(layer), dtype=np.int64) for layer in arch.layers]
    shape = tuple(len(t) for t in tables)
    index = np.indices(shape).reshape(len(shape), -1).T
    log_p = np.zeros(len(index))
    for l, layer in enumerate(arch.layers):
        log_p += layer_log_pmf_table(layer, alpha.per_layer[l], tables[l])[index[:, l]]
    return EnumeratedSpace(arch, tables, index, np.exp(log_p))


def _loss_vector(space: EnumeratedSpace, loss) -> np.ndarray:
    if callable(loss):
        return space.losses(loss)
    loss = np.asarray(loss, dtype=float)
    if loss.shape != space.probs.shape:
        raise DomainError(f"loss vector shape {loss.shape} != space size {len(space)}")
    return loss


def exact_expected_loss(arch: ArchitectureSpec, alpha: AlphaParams, loss, limit: int = DEFAULT_LIMIT) -> float:
    """J by compensated summation; ``loss`` is a callable or a vector aligned
    with the enumeration order."""
    space = enumerate_space(arch, alpha, limit)
    return math.fsum(space.probs * _loss_vector(space, loss))


def exact_grad(arch: ArchitectureSpec, alpha: AlphaParams, loss, limit: int = DEFAULT_LIMIT) -> list:
    """dJ/dalpha = sum_a L(a) (a_{l,t} - n_l p_{l,t}) p(a | alpha), per parameter."""
    space = enumerate_space(arch, alpha, limit)
    weighted = space.probs * _loss_vector(space, loss)
    grads = []
    for l, layer in enumerate(arch.layers):
        scores = space.layer_values(l) - layer.trials * layer_probs(alpha, l)
        grads.append(np.array([math.fsum(weighted * scores[:, t]) for t in range(scores.shape[1])]))
    return grads


def finite_diff_grad(
    arch: ArchitectureSpec, alpha: AlphaParams, loss, h: float = 1e-5, limit: int = DEFAULT_LIMIT
) -> list:
    """Central differences of the enumerated expected loss on every alpha entry."""
    space = enumerate_space(arch, alpha, limit)
    losses = _loss_vector(space, loss)
    grads = []
    for l, v in enumerate(alpha.per_layer):
        g = np.empty(v.size)
        for t in range(v.size):
            up = exact_expected_loss(arch, alpha.replace_entry(l, t, v[t] + h), losses, limit)
            down = exact_expected_loss(arch, alpha.replace_entry(l, t, v[t] - h), losses, limit)
            g[t] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def grid_optimum(
    arch: ArchitectureSpec,
    loss_fn: Callable[[NetworkConfig], float],
    cap: float = math.inf,
    complexity_fn: Callable[[NetworkConfig], float] | None = None,
    limit: int = DEFAULT_LIMIT,
) -> NetworkConfig:
    """Lowest-loss configuration with complexity at most ``cap``; ties go to
    the lexicographically smallest configuration."""
    from .complexity import config_complexity

    _check_limit(arch, limit)
    z_of = complexity_fn or (lambda cfg: config_complexity(cfg, arch))
    space = enumerate_space(arch, AlphaParams.zeros(arch), limit)
    best = None
    for cfg in space.configs:
        if math.isfinite(cap) and z_of(cfg) > cap:
            continue
        key = (loss_fn(cfg), cfg.layers)
        if best is None or key < best:
            best = key
    if best is None:
        raise DomainError(f"no configuration has complexity <= {cap}")
    return NetworkConfig(best[1])


def random_instance(
    rng: np.random.Generator,
    *,
    family: Family | None = None,
    max_layers: int = 3,
    max_filters: int = 6,
    max_ops: int = 4,
    max_space: int = 4000,
    alpha_scale: float = 1.5,
):
    """A random enumerable ``(arch, alpha, losses)`` triple for verification sweeps."""
    if family is None:
        family = Family.MULTINOMIAL if rng.random() < 0.5 else Family.BINOMIAL
    while True:
        n_layers = int(rng.integers(1, max_layers + 1))
        filters = [int(rng.integers(2, max_filters + 1)) for _ in range(n_layers)]
        if family is Family.MULTINOMIAL:
            n_ops = int(rng.integers(2, max_ops + 1))
            ops = [(int(b), int(b)) for b in rng.choice(np.arange(1, 9), size=n_ops, replace=False)]
            arch = build_architecture(filters, num_classes=2, input_shape=(1, 4, 4), quant_ops=ops)
        else:
            arch = build_architecture(filters, num_classes=2, input_shape=(1, 4, 4))
        if network_config_count(arch) <= max_space:
            break
    alpha = AlphaParams(family, tuple(rng.normal(0.0, alpha_scale, layer.num_params) for layer in arch.layers))
    losses = rng.uniform(0.0, 3.0, network_config_count(arch))
    return arch, alpha, losses
