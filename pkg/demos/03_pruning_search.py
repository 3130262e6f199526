"""
Width search without weight sharing
===================================

Each layer keeps its first ``a + 1`` of four filters, with ``a`` drawn from
a binomial distribution. The four-class brightness task needs some width:
one filter per layer underfits. We first establish that with an exhaustive
oracle, then check the search moves alpha in the same direction.
"""

import numpy as np

from filtnas.arch import build_architecture, network_configs
from filtnas.dist import AlphaParams, Family, layer_probs
from filtnas.net import TrainSettings, evaluate, level_images, train_from_scratch
from filtnas.oracle import exact_grad, grid_optimum
from filtnas.search import SearchSettings, expected_config, run_prune_noshare

arch = build_architecture([4, 4], num_classes=4)
data = level_images(seed=0)
train = TrainSettings(learning_rate=0.05, momentum=0.9, batch_size=16, clip_norm=1.0)

############################################################
# Oracle: train all 16 widths
# ---------------------------

ce = {}
for cfg in network_configs(arch):
    w = train_from_scratch(arch, cfg, data.training(), train, epochs=10, seed=123)
    ce[cfg.layers] = evaluate(w, arch, cfg, data.training())[0]
    print(f"{cfg.config_id}: training CE {ce[cfg.layers]:.3f}")

best = grid_optimum(arch, lambda c: ce[c.layers])
grad = exact_grad(arch, AlphaParams.zeros(arch), lambda c: ce[c.layers])
print("grid optimum:", best.config_id)
print("exact dJ/dalpha at alpha = 0:", np.round(np.concatenate(grad), 3))

############################################################
# Sampled search
# --------------
# A negative exact gradient means descent raises alpha, i.e. favours width.

for seed in range(3):
    s = SearchSettings(Family.BINOMIAL, sample_size=8, alpha_lr=0.05, max_iterations=3, t_omega=10, seed=seed, train=train)
    alpha, trace = run_prune_noshare(arch, level_images(seed=seed), s)
    probs = [float(layer_probs(alpha, l)[0]) for l in range(len(arch))]
    print(f"seed {seed}: p = {np.round(probs, 3)}, expected config {expected_config(alpha, arch).config_id}")
