"""Arithmetic complexity of configurations and the complexity loss.

Quantized layers are measured in bit operations (BOPs) with filter-group
granularity; pruned layers in multiply-accumulate counts (MACs). The
classifier head is constant across configurations and is left out.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

from .arch import ArchitectureSpec, LayerSpec, Mode, NetworkConfig, active_filters, validate_config
from .errors import ConfigError, DomainError

DEFAULT_INPUT_BITS = 8
DEFAULT_WEIGHT_BITS = 32


def homogeneous_layer_bops(m: int, n: int, k: int, b_a: int, b_w: int) -> float:
    """Closed-form BOPs of one output pixel position swept over a layer with
    ``m`` filters, ``n`` input channels, ``k x k`` kernels and uniform widths."""
    return m * n * k * k * (b_a * b_w + b_a + b_w + math.log2(n * k * k))


def accumulator_width(input_groups: Sequence[tuple], b_w: int, k: int) -> float:
    """Accumulator bits ``log2 M`` for one filter with ``b_w``-bit weights.

    ``input_groups`` holds ``(channel_count, activation_bits)`` pairs for the
    incoming feature map; ``M = 2^b_w * k^2 * sum(count * 2^b_a)`` bounds
    the magnitude of a single output.
    """
    total = sum(count * 2.0 ** bits for count, bits in input_groups)
    if total <= 0:
        raise DomainError("accumulator width needs at least one non-empty input group")
    return b_w + math.log2(k * k * total)


def input_groups(
    arch: ArchitectureSpec, cfg: NetworkConfig, index: int, input_bits: int = DEFAULT_INPUT_BITS
) -> list:
    """``(channel_count, activation_bits)`` groups feeding layer ``index``."""
    if index == 0:
        return [(arch.input_shape[0], input_bits)]
    prev = arch.layers[index - 1]
    return [
        (count, ba) for count, (_, ba) in zip(cfg[index - 1], prev.ops.quant_ops) if count
    ]


def layer_bops(layer: LayerSpec, in_groups: Sequence[tuple], out_cfg: Sequence[int]) -> float:
    """Filter-wise BOPs of a quantized layer.

    Each output group ``t2`` with ``a_t2`` filters of ``(b_w, b_a)`` costs,
    per output pixel and filter, ``k^2 [c_in * accumulator_width +
    sum_t1 a_t1 * b_a_t1 * b_w_t2]``; the layer total multiplies by ``H W``.
    """
    if layer.mode is not Mode.QUANTIZATION:
        raise DomainError("layer_bops applies to quantization layers")
    if len(out_cfg) != len(layer.ops.quant_ops) or sum(out_cfg) != layer.filters:
        raise DomainError(f"output config {tuple(out_cfg)} does not fit layer")
    c_in = sum(count for count, _ in in_groups)
    if c_in != layer.in_channels:
        raise DomainError(f"input groups cover {c_in} channels, layer expects {layer.in_channels}")
    k2 = layer.kernel ** 2
    mult_bits = sum(count * ba for count, ba in in_groups)
    total = 0.0
    for count, (bw, _) in zip(out_cfg, layer.ops.quant_ops):
        if not count:
            continue
        per_pixel = k2 * (c_in * accumulator_width(in_groups, bw, layer.kernel) + mult_bits * bw)
        total += count * per_pixel
    return layer.out_height * layer.out_width * total


def layer_macs(layer: LayerSpec, in_filters: int, out_filters: int) -> float:
    if in_filters < 1 or out_filters < 1:
        raise DomainError("MAC counts need at least one input and one output filter")
    return float(in_filters * out_filters * layer.kernel ** 2 * layer.out_height * layer.out_width)


def memory_fetch_cost(
    cfg: NetworkConfig, arch: ArchitectureSpec, weight_bits: int = DEFAULT_WEIGHT_BITS
) -> float:
    """Bits fetched to load every active conv weight once.

    Quantized layers charge each filter group at its own ``b_w``; pruned
    layers charge active weights at ``weight_bits``.
    """
    validate_config(arch, cfg)
    total = 0
    if arch.mode is Mode.QUANTIZATION:
        for layer, layer_cfg in zip(arch.layers, cfg):
            for count, (bw, _) in zip(layer_cfg, layer.ops.quant_ops):
                total += layer.weights_per_filter * count * bw
        return float(total)
    prev = arch.input_shape[0]
    for layer, layer_cfg in zip(arch.layers, cfg):
        width = active_filters(layer, layer_cfg)
        total += prev * layer.kernel ** 2 * width * weight_bits
        prev = width
    return float(total)


@dataclass
class ComplexityReport:
    per_layer: list
    total: float
    memory_cost: float
    target_total: float = float("nan")
    ratio: float = float("nan")
    unit: str = "BOPs"
    include_memory: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def _default_memory(arch: ArchitectureSpec, include_memory) -> bool:
    # Fetch bits are BOPs; adding them to MAC counts would mix units.
    if include_memory is None:
        return arch.mode is Mode.QUANTIZATION
    return bool(include_memory)


def network_complexity(
    cfg: NetworkConfig,
    arch: ArchitectureSpec,
    *,
    include_memory: bool | None = None,
    input_bits: int = DEFAULT_INPUT_BITS,
    weight_bits: int = DEFAULT_WEIGHT_BITS,
) -> ComplexityReport:
    validate_config(arch, cfg)
    include_memory = _default_memory(arch, include_memory)
    per_layer = []
    if arch.mode is Mode.QUANTIZATION:
        for i, layer in enumerate(arch.layers):
            per_layer.append(layer_bops(layer, input_groups(arch, cfg, i, input_bits), cfg[i]))
        unit = "BOPs"
    else:
        prev = arch.input_shape[0]
        for layer, layer_cfg in zip(arch.layers, cfg):
            width = active_filters(layer, layer_cfg)
            per_layer.append(layer_macs(layer, prev, width))
            prev = width
        unit = "MACs"
    memory = memory_fetch_cost(cfg, arch, weight_bits)
    total = math.fsum(per_layer) + (memory if include_memory else 0.0)
    return ComplexityReport(per_layer, total, memory, unit=unit, include_memory=include_memory)


def config_complexity(cfg: NetworkConfig, arch: ArchitectureSpec, **opts) -> float:
    """The scalar ``z_a`` used by the losses."""
    return network_complexity(cfg, arch, **opts).total


def complexity_report(
    cfg: NetworkConfig, arch: ArchitectureSpec, target: NetworkConfig, **opts
) -> ComplexityReport:
    report = network_complexity(cfg, arch, **opts)
    report.target_total = network_complexity(target, arch, **opts).total
    report.ratio = report.total / report.target_total
    return report


# Increasing functions shared by the complexity and interpolation losses.
SIGMAS: dict = {
    "identity": lambda x: x,
    "hinge": lambda x: max(0.0, x - 1.0),
    "exp": lambda x: math.exp(x - 1.0) - 1.0,
    "leaky_relu": lambda x: x if x >= 0 else 0.01 * x,
    "sigmoid": lambda x: 1.0 / (1.0 + math.exp(-x)) if x >= 0 else math.exp(x) / (1.0 + math.exp(x)),
}


def get_sigma(name: str) -> Callable[[float], float]:
    try:
        return SIGMAS[name]
    except KeyError:
        raise ConfigError(f"unknown sigma {name!r}; choose from {sorted(SIGMAS)}") from None


def complexity_loss(
    cfg: NetworkConfig, arch: ArchitectureSpec, target: NetworkConfig, sigma: str = "hinge", **opts
) -> float:
    """``sigma(z_a / z_target)``; the default hinge is zero at or below target."""
    fn = get_sigma(sigma)
    z = config_complexity(cfg, arch, **opts)
    z_target = config_complexity(target, arch, **opts)
    return float(fn(z / z_target))
