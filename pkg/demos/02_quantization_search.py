"""
Bitwidth allocation on a two-layer toy
======================================

Two convolutional layers of four filters each may run every filter at
(2, 2) or (8, 8) bits (weights, activations). The data are noisy images
whose class is their mean brightness, which 2-bit activations blur, so the
search should favour 8 bits when complexity is free and fall back to 2 bits
when a complexity target binds.
"""

from filtnas.arch import build_architecture, make_homogeneous
from filtnas.complexity import complexity_report
from filtnas.dist import Family, layer_probs
from filtnas.net import TrainSettings, level_images
from filtnas.search import SearchSettings, mean_quant_config, run_quant_search

arch = build_architecture([4, 4], num_classes=4, quant_ops=[(2, 2), (8, 8)])
data = level_images(seed=0)
train = TrainSettings(learning_rate=0.02, momentum=0.9, batch_size=16, clip_norm=1.0)


def settings(**extra):
    return SearchSettings(
        Family.MULTINOMIAL, sample_size=8, alpha_lr=0.1, max_iterations=1000, max_alpha_steps=500,
        warmup_epochs=20, alpha_batch_size=48, train=train, **extra,
    )


############################################################
# Accuracy only
# -------------
# With lambda = 0 the loss is plain cross-entropy.

alpha, trace = run_quant_search(arch, data, settings())
for l in range(len(arch)):
    print(f"layer {l}: P[(2,2)], P[(8,8)] = {layer_probs(alpha, l).round(3)}")
last = trace.records[-1]
print(f"{len(trace)} iterations, {last['alpha_steps']} alpha steps, mean config {last['expected_config']}")

############################################################
# A binding complexity target
# ---------------------------
# The hinge penalty charges lambda * max(0, z / z_target - 1). With the
# all-2-bit network as target, any 8-bit filter costs more than the CE it
# saves.

target = make_homogeneous(arch, 0)
alpha, trace = run_quant_search(arch, data, settings(lam=5.0, sigma="hinge", target=0))
mean_cfg = mean_quant_config(alpha, arch)
report = complexity_report(mean_cfg, arch, target)
print(f"mean config {mean_cfg.config_id}: {report.total:,.0f} BOPs, ratio to target {report.ratio:.3f}")
