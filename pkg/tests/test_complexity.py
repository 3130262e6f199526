import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from filtnas.arch import LayerSpec, NetworkConfig, OperationSet, build_architecture, make_homogeneous, network_configs
from filtnas.complexity import (
    SIGMAS,
    accumulator_width,
    complexity_loss,
    complexity_report,
    config_complexity,
    homogeneous_layer_bops,
    input_groups,
    layer_bops,
    layer_macs,
    memory_fetch_cost,
    network_complexity,
)
from filtnas.errors import ConfigError, DomainError


def per_filter_bops(layer, channel_bits, filter_ops):
    """Independent accounting: loop over every (filter, input channel) pair.

    Each output pixel of filter f pays, per kernel tap and input channel,
    one ``b_a * b_w`` multiply and one accumulator-width add.
    """
    k2 = layer.kernel ** 2
    weights = sum(2.0 ** b for b in channel_bits)
    total = 0.0
    for bw, _ in filter_ops:
        acc = bw + math.log2(k2 * weights)
        for ba in channel_bits:
            total += k2 * (ba * bw + acc)
    return total * layer.out_height * layer.out_width


def test_homogeneous_formula_examples():
    assert homogeneous_layer_bops(1, 1, 1, 1, 1) == 3.0
    value = homogeneous_layer_bops(16, 16, 3, 8, 8)
    assert value == pytest.approx(2304 * (80 + math.log2(144)), rel=1e-15)
    # 64 + 16 + 7.16993 = 87.16993, times 2304
    assert value == pytest.approx(200_839.5, abs=0.01)


def test_homogeneous_formula_increases_with_weight_bits():
    assert homogeneous_layer_bops(16, 16, 3, 8, 16) > homogeneous_layer_bops(16, 16, 3, 8, 8)


def test_accumulator_width_examples():
    assert accumulator_width([(1, 1)], 1, 1) == 2.0
    assert accumulator_width([(16, 8)], 8, 3) == pytest.approx(8 + math.log2(9 * 16 * 256), abs=1e-12)
    assert accumulator_width([(16, 8)], 8, 3) == pytest.approx(23.17, abs=0.005)


def test_accumulator_width_collapses_for_one_group():
    n, k, ba, bw = 12, 3, 4, 6
    assert accumulator_width([(n, ba)], bw, k) == pytest.approx(ba + bw + math.log2(n * k * k), rel=1e-15)


def test_accumulator_width_rejects_empty_input():
    with pytest.raises(DomainError):
        accumulator_width([(0, 8)], 8, 3)


@settings(max_examples=50, deadline=None)
@given(
    m=st.integers(1, 64), n=st.integers(1, 64), k=st.sampled_from([1, 3, 5, 7]),
    ba=st.integers(1, 16), bw=st.integers(1, 16), side=st.integers(1, 16),
)
def test_homogeneous_consistency(m, n, k, ba, bw, side):
    ops = OperationSet.quantization([(bw, ba)])
    layer = LayerSpec(m, n, k, side, side, ops)
    got = layer_bops(layer, [(n, ba)], (m,))
    # The closed form counts one output position; the layer sweeps H*W of them.
    assert got == pytest.approx(side * side * homogeneous_layer_bops(m, n, k, ba, bw), rel=1e-9)


def test_zero_group_contributes_nothing():
    ops = OperationSet.quantization([(2, 2), (8, 8)])
    layer = LayerSpec(4, 4, 3, 8, 8, ops)
    only_second = layer_bops(layer, [(4, 8)], (0, 4))
    single = LayerSpec(4, 4, 3, 8, 8, OperationSet.quantization([(8, 8)]))
    assert only_second == layer_bops(single, [(4, 8)], (4,))


def test_first_layer_uses_input_bits():
    arch = build_architecture([1], num_classes=2, input_shape=(1, 1, 1), kernel=1, quant_ops=[(2, 3)])
    cfg = NetworkConfig(((1,),))
    assert input_groups(arch, cfg, 0) == [(1, 8)]
    # per pixel: k^2 [c_in * (b_w + log2(1 * 2^8)) + 1 * 8 * b_w] = (2 + 8) + 16
    assert layer_bops(arch.layers[0], input_groups(arch, cfg, 0), (1,)) == pytest.approx(26.0, abs=1e-12)
    assert layer_bops(arch.layers[0], input_groups(arch, cfg, 0, input_bits=4), (1,)) == pytest.approx(
        (2 + 4) + 8, abs=1e-12
    )


@settings(max_examples=50, deadline=None)
@given(data=st.data())
def test_heterogeneous_matches_per_filter_loop(data):
    n_ops = data.draw(st.integers(1, 3))
    ops = data.draw(st.lists(st.tuples(st.integers(1, 8), st.integers(1, 8)), min_size=n_ops, max_size=n_ops, unique=True))
    f_in, f_out = data.draw(st.integers(1, 6)), data.draw(st.integers(1, 6))
    arch = build_architecture([f_in, f_out], num_classes=2, input_shape=(1, 4, 4), quant_ops=ops)
    configs = list(network_configs(arch))
    cfg = configs[data.draw(st.integers(0, len(configs) - 1))]
    channel_bits = [ops[t][1] for t, count in enumerate(cfg[0]) for _ in range(count)]
    filter_ops = [ops[t] for t, count in enumerate(cfg[1]) for _ in range(count)]
    got = layer_bops(arch.layers[1], input_groups(arch, cfg, 1), cfg[1])
    assert got == pytest.approx(per_filter_bops(arch.layers[1], channel_bits, filter_ops), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(data=st.data())
def test_bops_monotone_in_every_bitwidth(data):
    bw1, ba1, bw2, ba2 = (data.draw(st.integers(1, 15)) for _ in range(4))
    which = data.draw(st.integers(0, 3))
    base = [bw1, ba1, bw2, ba2]
    bumped = list(base)
    bumped[which] += 1

    def total(bits):
        ops = [(bits[0], bits[1]), (bits[2], bits[3])]
        if ops[0] == ops[1]:
            return None
        arch = build_architecture([3, 3], num_classes=2, input_shape=(1, 4, 4), quant_ops=ops)
        return config_complexity(NetworkConfig(((1, 2), (2, 1))), arch, include_memory=False)

    a, b = total(base), total(bumped)
    if a is not None and b is not None:
        assert b >= a


def test_layer_macs_examples():
    one = LayerSpec(1, 1, 1, 1, 1, OperationSet.pruning())
    assert layer_macs(one, 1, 1) == 1.0
    layer = LayerSpec(8, 4, 3, 8, 8, OperationSet.pruning())
    assert layer_macs(layer, 4, 8) == 18_432.0
    assert layer_macs(layer, 4, 4) == 18_432.0 / 2


def test_memory_fetch_examples():
    arch = build_architecture([1], num_classes=2, input_shape=(4, 8, 8), kernel=5, quant_ops=[(8, 8)])
    assert memory_fetch_cost(NetworkConfig(((1,),)), arch) == 800.0
    arch = build_architecture([2], num_classes=2, input_shape=(2, 8, 8), kernel=5, quant_ops=[(2, 2), (8, 8)])
    assert memory_fetch_cost(NetworkConfig(((1, 1),)), arch) == 500.0


def test_memory_homogeneous_is_params_times_bits():
    arch = build_architecture([4, 6], num_classes=2, quant_ops=[(3, 3), (5, 5)])
    params = sum(l.filters * l.weights_per_filter for l in arch.layers)
    assert memory_fetch_cost(make_homogeneous(arch, 1), arch) == params * 5


def test_report_totals_and_ratio():
    arch = build_architecture([4, 4], num_classes=2, quant_ops=[(2, 2), (8, 8)])
    target = make_homogeneous(arch, 0)
    report = complexity_report(target, arch, target)
    assert report.ratio == 1.0
    assert report.total == pytest.approx(math.fsum(report.per_layer) + report.memory_cost)
    assert all(v >= 0 for v in report.per_layer)
    no_mem = network_complexity(target, arch, include_memory=False)
    assert no_mem.total == pytest.approx(math.fsum(no_mem.per_layer))


def test_pruning_defaults_to_macs_without_memory():
    arch = build_architecture([4, 4], num_classes=2)
    report = network_complexity(make_homogeneous(arch, 1.0), arch)
    assert report.unit == "MACs" and not report.include_memory
    assert report.total == layer_macs(arch.layers[0], 1, 4) + layer_macs(arch.layers[1], 4, 4)


def test_complexity_loss_examples():
    arch = build_architecture([4, 4], num_classes=2)
    target = NetworkConfig(((1,), (1,)))
    assert complexity_loss(target, arch, target) == 0.0
    # MAC chain: target 1*2 + 2*2 = 6 units, cfg 1*4 + 4*4 = 20 units (times 9*64)
    cfg = NetworkConfig(((3,), (3,)))
    assert complexity_loss(cfg, arch, target, sigma="identity") == pytest.approx(20 / 6, rel=1e-15)
    double = NetworkConfig(((3,), (0,)))  # 1*4 + 4*1 = 8 units
    half_target = NetworkConfig(((1,), (0,)))  # 1*2 + 2*1 = 4 units
    assert complexity_loss(double, arch, half_target) == pytest.approx(1.0, rel=1e-15)


def test_unknown_sigma():
    arch = build_architecture([4], num_classes=2)
    cfg = NetworkConfig(((3,),))
    with pytest.raises(ConfigError):
        complexity_loss(cfg, arch, cfg, sigma="relu6")


@pytest.mark.parametrize("name", sorted(SIGMAS))
def test_sigmas_are_increasing(name):
    fn = SIGMAS[name]
    xs = np.linspace(-3, 3, 61)
    values = [fn(float(x)) for x in xs]
    assert all(b >= a for a, b in zip(values, values[1:]))


def test_mac_complexity_depends_only_on_counts():
    arch = build_architecture([5, 3], num_classes=2)
    seen = {}
    for cfg in network_configs(arch):
        widths = (cfg[0][0] + 1, cfg[1][0] + 1)
        seen.setdefault(widths, set()).add(config_complexity(cfg, arch))
    assert all(len(v) == 1 for v in seen.values())
