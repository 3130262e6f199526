"""Network architecture, per-layer operation sets and the configuration space.

A configuration assigns compression operations to the filters of every
layer. Both search families share one representation: each layer's
configuration is a tuple of non-negative ints.

* Quantization (multinomial family): ``(a_1, ..., a_|T|)`` counts the filters
  that receive each bitwidth tuple; the counts sum to the layer's filters.
* Pruning (binomial family): a 1-tuple ``(a,)`` holding the sampled value
  ``a`` in ``0..C-1``. The layer keeps ``a + 1`` active filters.
"""
from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from ._numeric import round_half_away_int
from .errors import DomainError

LayerConfig = tuple  # tuple[int, ...]


class Mode(enum.Enum):
    QUANTIZATION = "quantization"
    PRUNING = "pruning"


@dataclass(frozen=True)
class OperationSet:
    """Per-filter operation menu for one layer.

    In quantization mode ``quant_ops`` lists ``(b_w, b_a)`` tuples. Pruning
    mode has no explicit list: the operations are the filter counts
    ``1..C`` of the owning layer.
    """

    mode: Mode
    quant_ops: tuple = ()

    def __post_init__(self):
        ops = tuple((int(bw), int(ba)) for bw, ba in self.quant_ops)
        object.__setattr__(self, "quant_ops", ops)
        if self.mode is Mode.QUANTIZATION:
            if not ops:
                raise DomainError("quantization operation set is empty")
            if len(set(ops)) != len(ops):
                raise DomainError(f"duplicate bitwidth tuples in {ops}")
            for bw, ba in ops:
                if not (1 <= bw <= 32 and 1 <= ba <= 32):
                    raise DomainError(f"bitwidth tuple {(bw, ba)} outside 1..32")
        elif ops:
            raise DomainError("pruning operation set takes no explicit list")

    @classmethod
    def quantization(cls, ops: Sequence[Sequence[int]]) -> "OperationSet":
        return cls(Mode.QUANTIZATION, tuple(tuple(o) for o in ops))

    @classmethod
    def pruning(cls) -> "OperationSet":
        return cls(Mode.PRUNING)


@dataclass(frozen=True)
class LayerSpec:
    filters: int
    in_channels: int
    kernel: int
    out_height: int
    out_width: int
    ops: OperationSet

    def __post_init__(self):
        for name in ("filters", "in_channels", "kernel", "out_height", "out_width"):
            if int(getattr(self, name)) < 1:
                raise DomainError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def mode(self) -> Mode:
        return self.ops.mode

    @property
    def num_params(self) -> int:
        """Length of this layer's parameter vector (one per alpha entry)."""
        return len(self.ops.quant_ops) if self.mode is Mode.QUANTIZATION else 1

    @property
    def trials(self) -> int:
        """Multinomial draws (C) or binomial trials (C - 1) for this layer."""
        return self.filters if self.mode is Mode.QUANTIZATION else self.filters - 1

    @property
    def weights_per_filter(self) -> int:
        return self.in_channels * self.kernel * self.kernel


@dataclass(frozen=True)
class ArchitectureSpec:
    """A plain feed-forward conv stack followed by global pooling and a linear classifier."""

    layers: tuple
    num_classes: int
    input_shape: tuple  # (channels, height, width)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if not self.layers:
            raise DomainError("architecture needs at least one layer")
        if self.num_classes < 2:
            raise DomainError("num_classes must be >= 2")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise DomainError(f"input_shape must be (C, H, W), got {self.input_shape}")
        modes = {layer.mode for layer in self.layers}
        if len(modes) != 1:
            raise DomainError("all layers must share one compression mode")
        prev_c, prev_h, prev_w = self.input_shape
        for i, layer in enumerate(self.layers):
            if layer.in_channels != prev_c:
                raise DomainError(
                    f"layer {i}: in_channels {layer.in_channels} != {prev_c} produced upstream"
                )
            self._stride(i, prev_h, prev_w)
            prev_c, prev_h, prev_w = layer.filters, layer.out_height, layer.out_width

    def _stride(self, i: int, in_h: int, in_w: int) -> int:
        layer = self.layers[i]
        if in_h % layer.out_height or in_w % layer.out_width:
            raise DomainError(f"layer {i}: output dims must divide input dims")
        s = in_h // layer.out_height
        if in_w // layer.out_width != s:
            raise DomainError(f"layer {i}: anisotropic stride not supported")
        pad = layer.kernel // 2
        out_h = (in_h + 2 * pad - layer.kernel) // s + 1
        out_w = (in_w + 2 * pad - layer.kernel) // s + 1
        if (out_h, out_w) != (layer.out_height, layer.out_width):
            raise DomainError(
                f"layer {i}: kernel {layer.kernel} with stride {s} gives "
                f"{out_h}x{out_w}, declared {layer.out_height}x{layer.out_width}"
            )
        return s

    @property
    def mode(self) -> Mode:
        return self.layers[0].mode

    def strides(self) -> list:
        out = []
        _, h, w = self.input_shape
        for i, layer in enumerate(self.layers):
            out.append(self._stride(i, h, w))
            h, w = layer.out_height, layer.out_width
        return out

    def __len__(self):
        return len(self.layers)


def build_architecture(
    filters: Sequence[int],
    *,
    num_classes: int,
    input_shape=(1, 8, 8),
    kernel: int = 3,
    quant_ops=None,
    spatial: Sequence[int] | None = None,
) -> ArchitectureSpec:
    """Convenience constructor for a conv stack with shared kernel and op set.

    ``quant_ops`` selects quantization mode; leaving it ``None`` gives a
    pruning architecture. ``spatial`` lists per-layer output side lengths
    (default: keep the input resolution).
    """
    ops = OperationSet.pruning() if quant_ops is None else OperationSet.quantization(quant_ops)
    c_in, h, _ = input_shape
    spatial = list(spatial) if spatial is not None else [h] * len(filters)
    layers = []
    for f, s in zip(filters, spatial):
        layers.append(LayerSpec(int(f), c_in, kernel, int(s), int(s), ops))
        c_in = int(f)
    return ArchitectureSpec(tuple(layers), num_classes, tuple(input_shape))


@dataclass(frozen=True)
class NetworkConfig:
    """Per-layer configurations for a whole network (see module docstring)."""

    layers: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(
            self, "layers", tuple(tuple(int(v) for v in layer) for layer in self.layers)
        )

    def __len__(self):
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def __getitem__(self, i):
        return self.layers[i]

    @property
    def config_id(self) -> str:
        return "_".join("-".join(str(v) for v in layer) for layer in self.layers)

    @classmethod
    def from_id(cls, text: str) -> "NetworkConfig":
        return cls(tuple(tuple(int(v) for v in part.split("-")) for part in text.split("_")))


def validate_layer_config(layer: LayerSpec, cfg: Sequence[int]) -> tuple:
    cfg = tuple(int(v) for v in cfg)
    if layer.mode is Mode.QUANTIZATION:
        if len(cfg) != len(layer.ops.quant_ops):
            raise DomainError(
                f"layer config {cfg} has {len(cfg)} counts for {len(layer.ops.quant_ops)} operations"
            )
        if min(cfg) < 0 or sum(cfg) != layer.filters:
            raise DomainError(f"counts {cfg} must be >= 0 and sum to {layer.filters}")
    else:
        if len(cfg) != 1:
            raise DomainError(f"binomial layer config must be a 1-tuple, got {cfg}")
        if not 0 <= cfg[0] <= layer.filters - 1:
            raise DomainError(f"sampled value {cfg[0]} outside 0..{layer.filters - 1}")
    return cfg


def validate_config(arch: ArchitectureSpec, cfg: NetworkConfig) -> NetworkConfig:
    if len(cfg) != len(arch):
        raise DomainError(f"config has {len(cfg)} layers, architecture has {len(arch)}")
    for layer, layer_cfg in zip(arch.layers, cfg):
        validate_layer_config(layer, layer_cfg)
    return cfg


def active_filters(layer: LayerSpec, cfg: Sequence[int]) -> int:
    """Number of filters that compute under ``cfg``."""
    if layer.mode is Mode.PRUNING:
        return int(cfg[0]) + 1
    return layer.filters


def make_homogeneous(arch: ArchitectureSpec, which) -> NetworkConfig:
    """Homogeneous configuration: one operation index (quantization) or one
    width ratio in (0, 1] (pruning) applied to every layer."""
    layers = []
    if arch.mode is Mode.QUANTIZATION:
        if isinstance(which, float) and not float(which).is_integer():
            raise DomainError(f"quantization needs an operation index, got {which}")
        idx = int(which)
        for layer in arch.layers:
            if not 0 <= idx < len(layer.ops.quant_ops):
                raise DomainError(f"operation index {idx} invalid for {layer.ops.quant_ops}")
            counts = [0] * len(layer.ops.quant_ops)
            counts[idx] = layer.filters
            layers.append(tuple(counts))
    else:
        ratio = float(which)
        if not 0.0 < ratio <= 1.0:
            raise DomainError(f"width ratio must lie in (0, 1], got {ratio}")
        for layer in arch.layers:
            count = max(1, round_half_away_int(ratio * layer.filters))
            layers.append((count - 1,))
    return NetworkConfig(tuple(layers))


def layer_config_count(layer: LayerSpec) -> int:
    """Exact number of configurations of one layer (Python ints never overflow)."""
    if layer.mode is Mode.QUANTIZATION:
        t = len(layer.ops.quant_ops)
        return math.comb(layer.filters + t - 1, t - 1)
    return layer.filters


def network_config_count(arch: ArchitectureSpec) -> int:
    return math.prod(layer_config_count(layer) for layer in arch.layers)


def filter_assignment(layer: LayerSpec, cfg: Sequence[int]) -> np.ndarray:
    """Operation index of every filter: the first ``a_1`` filters take op 0,
    the next ``a_2`` take op 1, and so on."""
    if layer.mode is not Mode.QUANTIZATION:
        raise DomainError("filter_assignment applies to quantization layers")
    cfg = validate_layer_config(layer, cfg)
    return np.repeat(np.arange(len(cfg)), cfg)


def group_slices(cfg: Sequence[int]) -> list:
    """Contiguous ``(op_index, start, stop)`` filter ranges for non-empty groups."""
    out, start = [], 0
    for t, count in enumerate(cfg):
        if count:
            out.append((t, start, start + count))
        start += count
    return out


def compositions(total: int, parts: int) -> Iterator[tuple]:
    """All tuples of ``parts`` non-negative ints summing to ``total``, in
    descending lexicographic order (``(total, 0, ...)`` first)."""
    if parts == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in compositions(total - first, parts - 1):
            yield (first,) + rest


def layer_configs(layer: LayerSpec) -> list:
    """Every valid configuration of ``layer`` in the fixed enumeration order."""
    if layer.mode is Mode.QUANTIZATION:
        return list(compositions(layer.filters, len(layer.ops.quant_ops)))
    return [(a,) for a in range(layer.filters)]


def network_configs(arch: ArchitectureSpec) -> Iterator[NetworkConfig]:
    """Cartesian product of per-layer configurations, first layer slowest."""
    for combo in itertools.product(*(layer_configs(layer) for layer in arch.layers)):
        yield NetworkConfig(combo)
