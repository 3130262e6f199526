"""
Score-function gradients on a three-configuration toy
=====================================================

A single layer with two filters and two bitwidth options has exactly three
configurations: both filters at the first option, one each, or both at the
second. Give them losses 1, 2 and 3 and the expected loss is easy to write
down, so we can watch the sampled estimator converge to the exact gradient.
"""

import numpy as np

from filtnas.arch import build_architecture
from filtnas.dist import AlphaParams, sample_network
from filtnas.oracle import enumerate_space, exact_expected_loss, exact_grad
from filtnas.search import SampleSet, estimate_gradient

arch = build_architecture([2], num_classes=2, quant_ops=[(2, 2), (8, 8)])
alpha = AlphaParams.zeros(arch)
losses = {(2, 0): 1.0, (1, 1): 2.0, (0, 2): 3.0}


def loss(cfg):
    return losses[cfg[0]]


############################################################
# The enumerated space
# --------------------
# At alpha = 0 both options are equally likely per filter.

space = enumerate_space(arch, alpha)
for cfg, p in zip(space.configs, space.probs):
    print(f"{cfg.config_id:>5}  p = {p:.3f}  loss = {loss(cfg)}")
print("expected loss J =", exact_expected_loss(arch, alpha, loss))
print("exact gradient  =", exact_grad(arch, alpha, loss)[0])

############################################################
# Sampled estimates
# -----------------
# Each estimate averages loss * (a - C p) over |S| sampled configurations.
# Larger samples shrink the spread roughly as 1/|S|.

rng = np.random.default_rng(0)
for size in (1, 4, 16, 64):
    estimates = []
    for _ in range(2000):
        configs = [sample_network(alpha, arch, rng) for _ in range(size)]
        sample = SampleSet(configs, [loss(c) for c in configs])
        estimates.append(estimate_gradient(sample, alpha, arch)[0][0])
    estimates = np.array(estimates)
    print(f"|S| = {size:>2}: mean {estimates.mean():+.4f}  variance {estimates.var():.4f}")

############################################################
# Descent on alpha
# ----------------
# Following the exact gradient pushes probability toward the first (lowest
# loss) option.

from filtnas.dist import layer_probs
from filtnas.search import alpha_step

a = alpha
for step in range(201):
    if step % 50 == 0:
        print(f"step {step:>3}: p = {np.round(layer_probs(a, 0), 3)}")
    a = alpha_step(a, exact_grad(arch, a, loss), rate=1.0)
