"""Desk-scale convolutional network with filter-group quantization and
slimmable (shared-weight, variable-width) execution.

Layers are ``conv -> +bias -> ReLU [-> activation quantizer]``, followed
by global average pooling and a linear classifier. Activations are kept
channels-last internally; weights use ``(out, in, k, k)``. Gradients are
computed by hand and quantizers are straight-through: their backward pass
is the identity.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import softmax

from ._numeric import round_half_away
from ._seeds import child_rng
from .arch import ArchitectureSpec, Mode, NetworkConfig, active_filters, group_slices, validate_config
from .errors import DomainError, TrainingError
from .objective import cross_entropy

SPLITS = ("alpha", "omega", "validation")


# ---------------------------------------------------------------- quantizer


def quantize(values, bits: int) -> np.ndarray:
    """Symmetric uniform quantization with round-half-away-from-zero.

    ``scale = max|v| / (2^(bits-1) - 1)``; an all-zero input maps to zeros.
    The result is written as ``(k / levels) * max|v|`` so the largest
    magnitude survives exactly and re-quantizing is a no-op.
    """
    v = np.asarray(values, dtype=float)
    if not 1 <= bits <= 32:
        raise DomainError(f"bits must lie in 1..32, got {bits}")
    # One bit leaves no positive level in the formula; use {-max, 0, max}.
    levels = max(2.0 ** (bits - 1) - 1.0, 1.0)
    peak = float(np.max(np.abs(v))) if v.size else 0.0
    if peak == 0.0:
        return np.zeros_like(v)
    # divide by the peak first: peak / levels can underflow for subnormals
    return (round_half_away(v / peak * levels) / levels) * peak


# ---------------------------------------------------------------- weights


@dataclass
class Weights:
    conv: list
    bias: list
    fc_w: np.ndarray
    fc_b: np.ndarray

    def params(self) -> list:
        return [*self.conv, *self.bias, self.fc_w, self.fc_b]

    def copy(self) -> "Weights":
        return copy.deepcopy(self)

    def zeros_like(self) -> "Weights":
        return Weights(
            [np.zeros_like(w) for w in self.conv],
            [np.zeros_like(b) for b in self.bias],
            np.zeros_like(self.fc_w),
            np.zeros_like(self.fc_b),
        )

    def equals(self, other: "Weights") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.params(), other.params()))


def init_weights(arch: ArchitectureSpec, seed: int) -> Weights:
    """He-scaled uniform init (variance ``2 / fan_in``), zero biases."""
    rng = np.random.default_rng(seed)
    conv, bias = [], []
    for layer in arch.layers:
        fan_in = layer.in_channels * layer.kernel ** 2
        bound = np.sqrt(6.0 / fan_in)
        conv.append(rng.uniform(-bound, bound, (layer.filters, layer.in_channels, layer.kernel, layer.kernel)))
        bias.append(np.zeros(layer.filters))
    fan_in = arch.layers[-1].filters
    bound = np.sqrt(6.0 / fan_in)
    fc_w = rng.uniform(-bound, bound, (arch.num_classes, fan_in))
    return Weights(conv, bias, fc_w, np.zeros(arch.num_classes))


# ---------------------------------------------------------------- data


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, C, H, W)
    labels: np.ndarray  # (N,)
    splits: np.ndarray  # (N,) of split tags

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.splits = np.asarray(self.splits, dtype=object)
        if not (len(self.inputs) == len(self.labels) == len(self.splits)):
            raise DomainError("inputs, labels and splits must align")
        unknown = set(self.splits.tolist()) - set(SPLITS)
        if unknown:
            raise DomainError(f"unknown split tags {sorted(unknown)}")

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def part(self, *tags: str) -> "Dataset":
        mask = np.isin(self.splits, tags)
        return Dataset(self.inputs[mask], self.labels[mask], self.splits[mask])

    def training(self) -> "Dataset":
        return self.part("alpha", "omega")

    def batches(self, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[tuple]:
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            yield self.inputs[idx], self.labels[idx]


def _assign_splits(labels: np.ndarray, val_fraction: float, rng: np.random.Generator) -> np.ndarray:
    splits = np.empty(len(labels), dtype=object)
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_val = int(round(val_fraction * len(idx)))
        splits[idx[:n_val]] = "validation"
        rest = idx[n_val:]
        splits[rest[0::2]] = "omega"
        splits[rest[1::2]] = "alpha"
    return splits


def cluster_images(
    num_classes: int = 4,
    per_class: int = 96,
    shape=(1, 8, 8),
    noise: float = 0.3,
    seed: int = 0,
    val_fraction: float = 0.25,
) -> Dataset:
    """Seeded synthetic images: each class is an oriented sinusoidal grating
    (class-specific angle and frequency, random phase) plus Gaussian noise,
    clipped to [0, 1]. Training samples split evenly into alpha/omega halves."""
    rng = np.random.default_rng(seed)
    c, h, w = shape
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    inputs, labels = [], []
    for k in range(num_classes):
        theta = np.pi * k / num_classes
        freq = 2 * np.pi * (0.18 + 0.06 * (k % 2))
        proj = xx * np.cos(theta) + yy * np.sin(theta)
        for _ in range(per_class):
            phase = rng.uniform(0, 2 * np.pi, size=(c, 1, 1))
            img = 0.5 + 0.4 * np.sin(freq * proj[None] + phase)
            img = img + noise * rng.normal(size=(c, h, w))
            inputs.append(np.clip(img, 0.0, 1.0))
            labels.append(k)
    inputs = np.stack(inputs)
    labels = np.array(labels)
    return Dataset(inputs, labels, _assign_splits(labels, val_fraction, rng))


def level_images(
    num_classes: int = 4,
    per_class: int = 96,
    shape=(1, 8, 8),
    noise: float = 0.1,
    seed: int = 0,
    val_fraction: float = 0.25,
) -> Dataset:
    """Seeded images whose class is their mean brightness.

    Class ``k`` sits at level ``0.15 + 0.7 (k + 0.5) / num_classes`` plus
    Gaussian pixel noise. Coarse activation quantizers erase the level, so
    precision visibly matters on this task.
    """
    rng = np.random.default_rng(seed)
    levels = 0.15 + 0.7 * (np.arange(num_classes) + 0.5) / num_classes
    labels = np.repeat(np.arange(num_classes), per_class)
    x = levels[labels][:, None, None, None] + noise * rng.normal(size=(len(labels), *shape))
    return Dataset(np.clip(x, 0.0, 1.0), labels, _assign_splits(labels, val_fraction, rng))


def load_csv(path, shape, *, val_fraction: float = 0.25, seed: int = 0) -> Dataset:
    """Header-free rows ``label,p0,p1,...``; pixels min-max scaled to [0, 1]."""
    raw = np.loadtxt(path, delimiter=",", ndmin=2)
    if raw.shape[1] != 1 + int(np.prod(shape)):
        raise DomainError(f"{path}: rows have {raw.shape[1] - 1} pixels, shape {tuple(shape)} needs {int(np.prod(shape))}")
    labels = raw[:, 0].astype(np.int64)
    pixels = raw[:, 1:]
    lo, hi = pixels.min(), pixels.max()
    pixels = (pixels - lo) / (hi - lo) if hi > lo else np.zeros_like(pixels)
    rng = np.random.default_rng(seed)
    return Dataset(pixels.reshape(len(raw), *shape), labels, _assign_splits(labels, val_fraction, rng))


# ---------------------------------------------------------------- forward / backward


def _im2col(h: np.ndarray, k: int, s: int) -> np.ndarray:
    n, height, width, c = h.shape
    p = k // 2
    hp = np.pad(h, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(hp, (k, k), axis=(1, 2))[:, ::s, ::s]
    return win.reshape(n, win.shape[1], win.shape[2], c * k * k)


def _col2im(dcols: np.ndarray, in_shape: tuple, k: int, s: int) -> np.ndarray:
    n, height, width, c = in_shape
    _, ho, wo, _ = dcols.shape
    p = k // 2
    dcols = dcols.reshape(n, ho, wo, c, k, k)
    dhp = np.zeros((n, height + 2 * p, width + 2 * p, c))
    for i in range(k):
        for j in range(k):
            dhp[:, i:i + s * ho:s, j:j + s * wo:s, :] += dcols[..., i, j]
    return dhp[:, p:p + height, p:p + width]


def _plan(arch: ArchitectureSpec, cfg: NetworkConfig | None) -> list:
    """Per layer: ``(active_width, groups)``; groups are ``(start, stop, b_w, b_a)``
    ranges for quantized layers and ``None`` for float execution."""
    if cfg is None:
        return [(layer.filters, None) for layer in arch.layers]
    validate_config(arch, cfg)
    plan = []
    for layer, layer_cfg in zip(arch.layers, cfg):
        if layer.mode is Mode.QUANTIZATION:
            groups = [(a, b, *layer.ops.quant_ops[t]) for t, a, b in group_slices(layer_cfg)]
            plan.append((layer.filters, groups))
        else:
            plan.append((active_filters(layer, layer_cfg), None))
    return plan


def _check_batch(arch: ArchitectureSpec, x: np.ndarray) -> None:
    if x.ndim != 4 or tuple(x.shape[1:]) != arch.input_shape:
        raise DomainError(f"batch shape {x.shape} does not match input {arch.input_shape}")


def _forward(weights: Weights, arch: ArchitectureSpec, cfg: NetworkConfig | None, x: np.ndarray):
    x = np.asarray(x, dtype=float)
    _check_batch(arch, x)
    h = x.transpose(0, 2, 3, 1)
    cache = []
    for l, ((width, groups), layer, s) in enumerate(zip(_plan(arch, cfg), arch.layers, arch.strides())):
        c_in = h.shape[-1]
        w = weights.conv[l][:width, :c_in]
        if groups is not None:
            w = np.concatenate([quantize(w[a:b], bw) for a, b, bw, _ in groups], axis=0)
        cols = _im2col(h, layer.kernel, s)
        w_mat = w.reshape(width, -1)
        z = cols @ w_mat.T + weights.bias[l][:width]
        out = np.maximum(z, 0.0)
        if groups is not None:
            out = np.concatenate([quantize(out[..., a:b], ba) for a, b, _, ba in groups], axis=-1)
        cache.append((h.shape, cols, w_mat, z, width, c_in))
        h = out
    pooled = h.mean(axis=(1, 2))
    width = h.shape[-1]
    logits = pooled @ weights.fc_w[:, :width].T + weights.fc_b
    return logits, (cache, pooled, h.shape)


def forward(weights: Weights, arch: ArchitectureSpec, cfg: NetworkConfig | None, x) -> np.ndarray:
    """Logits of batch ``x`` (``(N, C, H, W)``) under configuration ``cfg``.

    ``cfg=None`` runs the full-width float network.
    """
    return _forward(weights, arch, cfg, x)[0]


def _backward(weights: Weights, arch: ArchitectureSpec, state, dlogits: np.ndarray) -> Weights:
    cache, pooled, last_shape = state
    grads = weights.zeros_like()
    width = pooled.shape[1]
    grads.fc_w[:, :width] = dlogits.T @ pooled
    grads.fc_b[:] = dlogits.sum(axis=0)
    n, ho, wo, _ = last_shape
    dpool = dlogits @ weights.fc_w[:, :width]
    dh = np.broadcast_to(dpool[:, None, None, :] / (ho * wo), last_shape)
    strides = arch.strides()
    for l in range(len(arch.layers) - 1, -1, -1):
        in_shape, cols, w_mat, z, width, c_in = cache[l]
        k = arch.layers[l].kernel
        dz = dh * (z > 0)
        flat = dz.reshape(-1, width)
        grads.bias[l][:width] = flat.sum(axis=0)
        grads.conv[l][:width, :c_in] = (flat.T @ cols.reshape(len(flat), -1)).reshape(width, c_in, k, k)
        if l:
            dh = _col2im(dz @ w_mat, in_shape, k, strides[l])
    return grads


def _softmax_ce_grad(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    g = softmax(logits, axis=1)
    g[np.arange(len(labels)), labels] -= 1.0
    return g / len(labels)


def loss_and_grad(weights: Weights, arch: ArchitectureSpec, cfg: NetworkConfig | None, x, y):
    """Mean cross-entropy of the batch and its gradient (straight-through)."""
    logits, state = _forward(weights, arch, cfg, x)
    ce = cross_entropy(logits, y)
    return ce, _backward(weights, arch, state, _softmax_ce_grad(logits, np.asarray(y)))


# ---------------------------------------------------------------- training


@dataclass
class TrainSettings:
    learning_rate: float = 0.1
    momentum: float = 0.5
    batch_size: int = 32
    epochs: int = 1
    seed: int = 0
    clip_norm: float | None = None

    def __post_init__(self):
        if self.learning_rate < 0:
            raise DomainError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise DomainError("momentum must lie in [0, 1)")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise DomainError("clip_norm must be positive")


@dataclass
class SGD:
    """Momentum SGD with optional global gradient-norm clipping; velocity
    buffers are created on the first step."""

    learning_rate: float
    momentum: float = 0.0
    clip_norm: float | None = None
    velocity: list | None = field(default=None, repr=False)

    @classmethod
    def from_settings(cls, settings: TrainSettings) -> "SGD":
        return cls(settings.learning_rate, settings.momentum, settings.clip_norm)

    def step(self, weights: Weights, grads: Weights) -> None:
        params, gs = weights.params(), grads.params()
        if self.clip_norm is not None:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in gs))
            if norm > self.clip_norm:
                gs = [g * (self.clip_norm / norm) for g in gs]
        if self.velocity is None:
            self.velocity = [np.zeros_like(p) for p in params]
        for p, g, v in zip(params, gs, self.velocity):
            v *= self.momentum
            v += g
            p -= self.learning_rate * v


def _check_finite(ce: float, cfg, weights: Weights) -> None:
    if not np.isfinite(ce):
        peak = max(float(np.max(np.abs(p))) for p in weights.params())
        cid = cfg.config_id if cfg is not None else "float"
        raise TrainingError(f"non-finite loss {ce} for config {cid} (max |w| = {peak:.3g})")


def train_step(
    weights: Weights,
    arch: ArchitectureSpec,
    cfg: NetworkConfig | None,
    batch: tuple,
    settings: TrainSettings,
    opt: SGD | None = None,
):
    """One SGD step on the batch cross-entropy; updates ``weights`` in place.

    Returns ``(weights, ce)`` where ``ce`` is the pre-step loss.
    """
    opt = opt or SGD.from_settings(settings)
    ce, grads = loss_and_grad(weights, arch, cfg, *batch)
    _check_finite(ce, cfg, weights)
    opt.step(weights, grads)
    return weights, ce


def slimmable_train_step(
    weights: Weights,
    arch: ArchitectureSpec,
    configs: Sequence[NetworkConfig],
    batch: tuple,
    settings: TrainSettings,
    opt: SGD | None = None,
):
    """Sum the gradients of every configuration in ``configs``, then take one step."""
    if not configs:
        raise DomainError("slimmable training needs at least one configuration")
    opt = opt or SGD.from_settings(settings)
    total, ces = None, []
    for cfg in configs:
        ce, grads = loss_and_grad(weights, arch, cfg, *batch)
        _check_finite(ce, cfg, weights)
        ces.append(ce)
        if total is None:
            total = grads
        else:
            for acc, g in zip(total.params(), grads.params()):
                acc += g
    opt.step(weights, total)
    return weights, float(np.mean(ces))


def train_epochs(
    weights: Weights,
    arch: ArchitectureSpec,
    cfg: NetworkConfig | None | Callable,
    data: Dataset,
    settings: TrainSettings,
    epochs: int,
    rng: np.random.Generator,
    opt: SGD | None = None,
) -> list:
    """Shuffled mini-batch training for ``epochs`` passes.

    ``cfg`` may be a fixed configuration, ``None`` (float), a callable drawing
    a configuration per batch from ``rng``, or a list of configurations for
    slimmable steps. Returns the per-batch losses.
    """
    opt = opt or SGD.from_settings(settings)
    losses = []
    for _ in range(epochs):
        for batch in data.batches(settings.batch_size, rng):
            if isinstance(cfg, (list, tuple)):
                _, ce = slimmable_train_step(weights, arch, cfg, batch, settings, opt)
            else:
                current = cfg(rng) if callable(cfg) else cfg
                _, ce = train_step(weights, arch, current, batch, settings, opt)
            losses.append(ce)
    return losses


def fine_tune(
    weights: Weights,
    arch: ArchitectureSpec,
    cfg: NetworkConfig,
    data: Dataset,
    settings: TrainSettings,
    epochs: int = 5,
    seed: int = 0,
) -> Weights:
    """Train a private copy of ``weights`` under ``cfg``; the original is untouched."""
    tuned = weights.copy()
    train_epochs(tuned, arch, cfg, data, settings, epochs, np.random.default_rng(seed))
    return tuned


def train_from_scratch(
    arch: ArchitectureSpec,
    cfg: NetworkConfig | None,
    data: Dataset,
    settings: TrainSettings,
    epochs: int,
    seed: int,
) -> Weights:
    weights = init_weights(arch, child_rng(seed, "init").integers(2**63))
    train_epochs(weights, arch, cfg, data, settings, epochs, child_rng(seed, "order"))
    return weights


def evaluate(weights: Weights, arch: ArchitectureSpec, cfg: NetworkConfig | None, data: Dataset):
    """``(mean cross-entropy, accuracy)`` over the whole of ``data`` in one pass."""
    if len(data) == 0:
        raise DomainError("cannot evaluate on an empty split")
    logits = forward(weights, arch, cfg, data.inputs)
    acc = float(np.mean(np.argmax(logits, axis=1) == data.labels))
    return cross_entropy(logits, data.labels), acc
