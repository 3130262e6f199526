import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from filtnas.arch import LayerSpec, NetworkConfig, OperationSet, build_architecture, layer_configs
from filtnas.dist import (
    AlphaParams,
    Family,
    binomial_layer_pmf_grad,
    binomial_pmf,
    layer_pmf,
    layer_probs,
    multinomial_layer_pmf_grad,
    multinomial_pmf,
    network_config_log_prob,
    network_config_prob,
    network_config_prob_grad,
    sample_layer,
    score,
    sigmoid_prob,
    softmax_probs,
)
from filtnas.errors import DomainError


def qlayer(filters, n_ops=2):
    return LayerSpec(filters, 1, 3, 4, 4, OperationSet.quantization([(b, b) for b in range(1, n_ops + 1)]))


def player(filters):
    return LayerSpec(filters, 1, 3, 4, 4, OperationSet.pruning())


def test_softmax_examples():
    np.testing.assert_allclose(softmax_probs([0.0, 0.0]), [0.5, 0.5], rtol=0, atol=1e-15)
    np.testing.assert_allclose(softmax_probs([math.log(3), 0.0]), [0.75, 0.25], rtol=0, atol=1e-15)


def test_softmax_large_inputs():
    p = softmax_probs([1000.0, 0.0])
    assert np.all(np.isfinite(p))
    # exp(-1000) underflows; the shifted form returns (1, 0) exactly
    assert p[0] == 1.0 and p[1] == pytest.approx(0.0, abs=1e-300)
    # Shift invariance: compare against an unshifted evaluation at small values.
    np.testing.assert_allclose(softmax_probs([1003.0, 1001.0]), softmax_probs([2.0, 0.0]), rtol=1e-15)


def test_sigmoid_examples():
    assert sigmoid_prob(0.0) == 0.5
    assert sigmoid_prob(math.log(3)) == pytest.approx(0.75, abs=1e-15)
    assert 0.0 < sigmoid_prob(-700.0) < sigmoid_prob(-699.0)


@given(st.floats(-50, 50))
def test_sigmoid_symmetry(a):
    assert abs(sigmoid_prob(-a) - (1.0 - sigmoid_prob(a))) <= 1e-15


def test_multinomial_pmf_examples():
    layer = qlayer(2)
    assert multinomial_pmf(layer, [0.5, 0.5], (1, 1)) == pytest.approx(0.5, abs=1e-15)
    assert multinomial_pmf(layer, [0.5, 0.5], (2, 0)) == pytest.approx(0.25, abs=1e-15)
    total = math.fsum(multinomial_pmf(layer, [0.5, 0.5], c) for c in layer_configs(layer))
    assert total == pytest.approx(1.0, abs=1e-15)


def test_binomial_pmf_examples():
    layer = player(4)
    assert binomial_pmf(layer, 0.5, (1,)) == pytest.approx(0.375, abs=1e-15)
    assert binomial_pmf(layer, 0.5, (0,)) == pytest.approx(0.125, abs=1e-15)
    assert math.fsum(binomial_pmf(layer, 0.5, (a,)) for a in range(4)) == pytest.approx(1.0, abs=1e-15)


def test_pmf_rejects_bad_configs():
    with pytest.raises(DomainError):
        binomial_pmf(player(4), 0.5, (4,))
    with pytest.raises(DomainError):
        multinomial_pmf(qlayer(2), [0.5, 0.5], (2, 1))


def test_large_filter_counts_do_not_overflow():
    layer = qlayer(400, 3)
    p = multinomial_pmf(layer, [0.2, 0.3, 0.5], (80, 120, 200))
    assert 0.0 < p < 1.0


@settings(max_examples=40, deadline=None)
@given(filters=st.integers(1, 6), n_ops=st.integers(1, 4), seed=st.integers(0, 2**31))
def test_multinomial_normalization(filters, n_ops, seed):
    layer = qlayer(filters, n_ops)
    probs = softmax_probs(np.random.default_rng(seed).normal(0, 2, n_ops))
    total = math.fsum(multinomial_pmf(layer, probs, c) for c in layer_configs(layer))
    assert abs(total - 1.0) <= 1e-10


@settings(max_examples=40, deadline=None)
@given(filters=st.integers(1, 6), a=st.floats(-6, 6))
def test_binomial_normalization(filters, a):
    layer = player(filters)
    total = math.fsum(binomial_pmf(layer, sigmoid_prob(a), c) for c in layer_configs(layer))
    assert abs(total - 1.0) <= 1e-10


def test_multinomial_pmf_grad_examples():
    layer = qlayer(2)
    assert multinomial_layer_pmf_grad(layer, [0.5, 0.5], (1, 1), 0) == 0.0
    assert multinomial_layer_pmf_grad(layer, [0.5, 0.5], (2, 0), 0) == pytest.approx(0.25, abs=1e-15)


def test_multinomial_pmf_grad_by_finite_difference():
    layer, h = qlayer(2), 1e-5
    up = multinomial_pmf(layer, softmax_probs([h, 0.0]), (2, 0))
    down = multinomial_pmf(layer, softmax_probs([-h, 0.0]), (2, 0))
    assert (up - down) / (2 * h) == pytest.approx(0.25, rel=1e-9)


def test_binomial_pmf_grad_examples():
    layer = player(4)
    assert binomial_layer_pmf_grad(layer, 0.5, (1,)) == pytest.approx(-0.1875, abs=1e-15)
    # closed form 3 (1-p) (1-3p) * p (1-p) at p = 0.5
    p = 0.5
    assert binomial_layer_pmf_grad(layer, p, (1,)) == pytest.approx(3 * (1 - p) * (1 - 3 * p) * p * (1 - p))
    # a = (C-1) p exactly
    assert binomial_layer_pmf_grad(player(5), 0.5, (2,)) == 0.0


@settings(max_examples=40, deadline=None)
@given(filters=st.integers(1, 6), n_ops=st.integers(1, 4), seed=st.integers(0, 2**31))
def test_pmf_gradients_sum_to_zero(filters, n_ops, seed):
    rng = np.random.default_rng(seed)
    layer = qlayer(filters, n_ops)
    probs = softmax_probs(rng.normal(0, 2, n_ops))
    for t in range(n_ops):
        s = math.fsum(multinomial_layer_pmf_grad(layer, probs, c, t) for c in layer_configs(layer))
        assert abs(s) <= 1e-10
    blayer = player(filters)
    p = sigmoid_prob(rng.normal(0, 2))
    assert abs(math.fsum(binomial_layer_pmf_grad(blayer, p, c) for c in layer_configs(blayer))) <= 1e-10


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31), family=st.sampled_from(list(Family)))
def test_layer_pmf_gradients_match_finite_differences(seed, family):
    rng = np.random.default_rng(seed)
    filters, h = int(rng.integers(1, 7)), 1e-5
    if family is Family.MULTINOMIAL:
        n_ops = int(rng.integers(1, 5))
        layer, alpha = qlayer(filters, n_ops), rng.normal(0, 1.5, n_ops)
    else:
        layer, alpha = player(filters), rng.normal(0, 1.5, 1)
    configs = layer_configs(layer)
    cfg = configs[int(rng.integers(len(configs)))]
    t = int(rng.integers(alpha.size))
    norm = softmax_probs if family is Family.MULTINOMIAL else (lambda a: np.array([sigmoid_prob(a[0])]))
    up, down = alpha.copy(), alpha.copy()
    up[t] += h
    down[t] -= h
    fd = (layer_pmf(layer, norm(up), cfg) - layer_pmf(layer, norm(down), cfg)) / (2 * h)
    if family is Family.MULTINOMIAL:
        an = multinomial_layer_pmf_grad(layer, norm(alpha), cfg, t)
    else:
        an = binomial_layer_pmf_grad(layer, norm(alpha), cfg)
    assert abs(an - fd) <= max(1e-8, 1e-6 * abs(fd))


def test_sampling_degenerate():
    rng = np.random.default_rng(0)
    assert sample_layer(qlayer(5), [1 - 1e-300, 1e-300], rng) == (5, 0)


def test_sampling_is_deterministic():
    a = [sample_layer(qlayer(5, 3), [0.2, 0.3, 0.5], np.random.default_rng(9)) for _ in range(2)]
    assert a[0] == a[1]


@pytest.mark.parametrize("layer,probs", [(qlayer(3, 3), [0.2, 0.3, 0.5]), (player(5), [0.3])])
def test_sampling_law_chi_square(layer, probs):
    rng = np.random.default_rng(2024)
    configs = layer_configs(layer)
    index = {c: i for i, c in enumerate(configs)}
    counts = np.zeros(len(configs))
    n = 100_000
    for _ in range(n):
        counts[index[sample_layer(layer, probs, rng)]] += 1
    expected = np.array([layer_pmf(layer, probs, c) for c in configs]) * n
    assert chisquare(counts, expected).pvalue > 0.001
    # 4-sigma proportion check per config
    p = expected / n
    assert np.all(np.abs(counts / n - p) <= 4 * np.sqrt(p * (1 - p) / n) + 1e-12)


def test_network_prob_examples():
    arch1 = build_architecture([2], num_classes=2, quant_ops=[(2, 2), (8, 8)])
    alpha1 = AlphaParams.zeros(arch1)
    cfg = NetworkConfig(((1, 1),))
    assert network_config_prob(alpha1, arch1, cfg) == pytest.approx(multinomial_pmf(arch1.layers[0], [0.5, 0.5], (1, 1)))
    arch2 = build_architecture([2, 2], num_classes=2, quant_ops=[(2, 2), (8, 8)])
    assert network_config_prob(AlphaParams.zeros(arch2), arch2, NetworkConfig(((1, 1), (1, 1)))) == pytest.approx(0.25)
    total = math.fsum(
        network_config_prob(AlphaParams.zeros(arch2), arch2, NetworkConfig((a, b)))
        for a in layer_configs(arch2.layers[0])
        for b in layer_configs(arch2.layers[1])
    )
    assert total == pytest.approx(1.0, abs=1e-15)


def test_network_prob_shape_mismatch():
    arch = build_architecture([2, 2], num_classes=2)
    with pytest.raises(DomainError):
        network_config_prob(AlphaParams(Family.BINOMIAL, (np.zeros(1),)), arch, NetworkConfig(((0,), (0,))))
    with pytest.raises(DomainError):
        network_config_log_prob(AlphaParams.zeros(arch), arch, NetworkConfig(((0,),)))


def test_network_prob_grad_single_layer_equals_layer_grad():
    arch = build_architecture([3], num_classes=2, quant_ops=[(2, 2), (4, 4), (8, 8)])
    alpha = AlphaParams(Family.MULTINOMIAL, (np.array([0.3, -0.2, 0.1]),))
    cfg = NetworkConfig(((1, 0, 2),))
    for t in range(3):
        expected = multinomial_layer_pmf_grad(arch.layers[0], layer_probs(alpha, 0), (1, 0, 2), t)
        assert network_config_prob_grad(alpha, arch, cfg, 0, t) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("family", list(Family))
def test_network_prob_grad_matches_finite_differences(family):
    rng = np.random.default_rng(11)
    quant = [(2, 2), (3, 3), (8, 8)] if family is Family.MULTINOMIAL else None
    arch = build_architecture([3, 4], num_classes=2, quant_ops=quant)
    alpha = AlphaParams(family, tuple(rng.normal(0, 1, l.num_params) for l in arch.layers))
    h = 1e-5
    for cfg in [NetworkConfig((a, b)) for a in layer_configs(arch.layers[0]) for b in layer_configs(arch.layers[1])]:
        for l, v in enumerate(alpha.per_layer):
            for t in range(v.size):
                up = network_config_prob(alpha.replace_entry(l, t, v[t] + h), arch, cfg)
                down = network_config_prob(alpha.replace_entry(l, t, v[t] - h), arch, cfg)
                fd = (up - down) / (2 * h)
                an = network_config_prob_grad(alpha, arch, cfg, l, t)
                assert abs(an - fd) <= max(1e-8, 1e-6 * abs(fd))
                # grad / prob isolates the layer score
                ratio = an / network_config_prob(alpha, arch, cfg)
                assert ratio == pytest.approx(score(alpha, arch, cfg, l, t), rel=1e-12, abs=1e-12)


def test_score_examples():
    arch = build_architecture([4], num_classes=2)
    assert score(AlphaParams.zeros(arch), arch, NetworkConfig(((3,),)), 0) == 1.5
    qarch = build_architecture([4], num_classes=2, quant_ops=[(2, 2), (8, 8)])
    assert score(AlphaParams.zeros(qarch), qarch, NetworkConfig(((2, 2),)), 0, 1) == 0.0


@pytest.mark.parametrize("quant", [[(2, 2), (4, 4), (8, 8)], None])
def test_score_has_zero_mean(quant):
    from filtnas.dist import sample_network, score_vector

    arch = build_architecture([5], num_classes=2, quant_ops=quant)
    rng = np.random.default_rng(3)
    alpha = AlphaParams(Family.for_mode(arch.mode), (rng.normal(0, 1, arch.layers[0].num_params),))
    scores = np.array([score_vector(alpha, arch, sample_network(alpha, arch, rng))[0] for _ in range(100_000)])
    se = scores.std(axis=0, ddof=1) / math.sqrt(len(scores))
    assert np.all(np.abs(scores.mean(axis=0)) <= 4 * se)


def test_alpha_from_probs_inverts_normalization():
    arch = build_architecture([4, 4], num_classes=2)
    alpha = AlphaParams.from_probs(arch, 0.75)
    assert layer_probs(alpha, 1)[0] == pytest.approx(0.75, abs=1e-15)
    assert AlphaParams.from_probs(arch, 0.5).per_layer[0][0] == 0.0


def test_alpha_rejects_non_finite():
    with pytest.raises(DomainError):
        AlphaParams(Family.BINOMIAL, (np.array([np.nan]),))
