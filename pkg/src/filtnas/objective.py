"""Losses: cross-entropy, the accuracy/complexity combination, the
interpolation loss against homogeneous anchors, and the exact expected loss."""
from __future__ import annotations

import bisect
import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .arch import ArchitectureSpec, NetworkConfig
from .complexity import complexity_loss, config_complexity, get_sigma
from .dist import AlphaParams
from .errors import DomainError
from .oracle import enumerate_space


def cross_entropy(logits, labels) -> float:
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels, dtype=int)
    lse = logsumexp(logits, axis=1)
    return float(np.mean(lse - logits[np.arange(len(labels)), labels]))


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    complexity: float
    combined: float
    lam: float

    def to_dict(self) -> dict:
        return {"ce": self.ce, "complexity": self.complexity, "combined": self.combined, "lambda": self.lam}


def combined_loss(
    ce: float,
    cfg: NetworkConfig,
    arch: ArchitectureSpec,
    target: NetworkConfig,
    lam: float,
    sigma: str = "hinge",
    **complexity_opts,
) -> LossBreakdown:
    if lam < 0:
        raise DomainError(f"lambda must be >= 0, got {lam}")
    com = complexity_loss(cfg, arch, target, sigma, **complexity_opts)
    return LossBreakdown(float(ce), com, float(ce) + lam * com, float(lam))


@dataclass(frozen=True)
class InterpTable:
    """Homogeneous anchors ``(config_id, z, ce_mean)`` sorted by complexity."""

    anchors: tuple

    def __post_init__(self):
        anchors = tuple((str(cid), float(z), float(ce)) for cid, z, ce in self.anchors)
        if len(anchors) < 2:
            raise DomainError("interpolation table needs at least two anchors")
        zs = [a[1] for a in anchors]
        if any(b <= a for a, b in zip(zs, zs[1:])):
            raise DomainError(f"anchor complexities must be strictly increasing, got {zs}")
        object.__setattr__(self, "anchors", anchors)

    @property
    def z(self) -> list:
        return [a[1] for a in self.anchors]

    def save(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["config_id", "z", "ce_mean"])
            for cid, z, ce in self.anchors:
                writer.writerow([cid, repr(z), repr(ce)])
        return path

    @classmethod
    def load(cls, path) -> "InterpTable":
        with Path(path).open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(tuple((r["config_id"], float(r["z"]), float(r["ce_mean"])) for r in rows))


def interp_ce(table: InterpTable, z: float) -> float:
    """Linear interpolation of anchor cross-entropies at complexity ``z``.

    Raises instead of extrapolating: a ``z`` outside the anchor range means
    the anchor list does not cover the search space.
    """
    zs = table.z
    if not zs[0] <= z <= zs[-1]:
        raise DomainError(f"complexity {z} outside anchor range [{zs[0]}, {zs[-1]}]")
    j = bisect.bisect_left(zs, z)
    if zs[j] == z:
        return table.anchors[j][2]
    (_, z1, ce1), (_, z2, ce2) = table.anchors[j - 1], table.anchors[j]
    w = (z - z1) / (z2 - z1)
    return ce1 + w * (ce2 - ce1)


def interpolation_loss(
    ce_a: float,
    cfg: NetworkConfig,
    arch: ArchitectureSpec,
    table: InterpTable,
    sigma: str = "identity",
    **complexity_opts,
) -> float:
    """``sigma(ce_a - interp_ce(z_a))``: negative when a configuration beats
    the homogeneous trade-off curve at its complexity."""
    z = config_complexity(cfg, arch, **complexity_opts)
    try:
        reference = interp_ce(table, z)
    except DomainError as exc:
        raise DomainError(f"config {cfg.config_id}: {exc}") from None
    return float(get_sigma(sigma)(ce_a - reference))


def expected_loss(
    alpha: AlphaParams,
    arch: ArchitectureSpec,
    loss_fn: Callable[[NetworkConfig], float],
    limit: int = 10**6,
) -> float:
    """Exact ``J = sum_a p(a | alpha) L(a)`` by enumeration (guarded by ``limit``)."""
    space = enumerate_space(arch, alpha, limit=limit)
    return math.fsum(p * loss_fn(cfg) for cfg, p in zip(space.configs, space.probs))
