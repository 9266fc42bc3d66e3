"""
Scoring steps and sampling keep/drop masks
==========================================

A hand-built batch of two users, walked through the gate: the long-term
similarity decides who gets denoised, the three cosines give each step a
score, and Gumbel-Sigmoid turns scores into binary masks.
"""

import numpy as np

from seqdn.alignment import InterestBundle
from seqdn.denoiser import GateConfig, apply_mask, gumbel_sigmoid, item_scores, user_gate
from seqdn.diffcompute import Tensor

rng = np.random.default_rng(0)

# two users, four hidden dims; user 0's semantic and collaborative long-term
# interests agree, user 1's point in opposite directions
e1 = np.array([[1.0, 0.2, 0.0, 0.1], [1.0, 0.0, 0.0, 0.0]])
e2 = np.array([[0.7, 0.6, 0.2, 0.0], [-1.0, 0.1, 0.0, 0.0]])
print("gate at theta=-0.9:", user_gate(e1, e2, -0.9))
print("gate at theta= 0.9:", user_gate(e1, e2, 0.9))

# %%
# Per-step scores. Steps 0-2 belong to user 0 and step 2 is off-topic.
h = np.array([[1.0, 0.2, 0.0, 0.0], [0.8, 0.4, 0.0, 0.1], [-0.7, 0.0, 0.9, 0.0], [0.0, 1.0, 0.0, 0.0]])
l = np.array([[1.0, 0.1, 0.0, 0.0], [0.9, 0.2, 0.0, 0.0], [-0.6, 0.0, -0.2, 0.9], [0.1, 1.0, 0.0, 0.0]])
bundle = InterestBundle(
    e1=Tensor(e1), e2=Tensor(e2), l=Tensor(l), h=Tensor(h),
    owner=np.array([0, 0, 0, 1]), step=np.array([0, 1, 2, 0]),
)
scores = item_scores(bundle)
print("c1:", np.round(scores.c1.data, 3))
print("c2:", np.round(scores.c2.data, 3))
print("c3:", np.round(scores.c3.data, 3))
print("score:", np.round(scores.score.data, 3))

# %%
# Without noise the mask is simply score > 0. Sampled hard masks keep a step
# when score + g > 0, so the temperature leaves the keep rates unchanged; it
# only sharpens or flattens the gradient that flows back through the soft path.
m, _ = gumbel_sigmoid(scores.score, GateConfig())
print("noiseless mask:", m.data)
for tau in (2.0, 1.0, 0.3):
    draws = np.array([gumbel_sigmoid(scores.score, GateConfig(tau_gumbel=tau), rng)[0].data for _ in range(2000)])
    _, y = gumbel_sigmoid(scores.score, GateConfig(tau_gumbel=tau))
    slope = y.data * (1 - y.data) / tau
    print(f"tau={tau}: keep rate", np.round(draws.mean(axis=0), 3), " soft-path slope", np.round(slope, 3))

# %%
# Applying a mask to a sequence; the last item always survives.
print(apply_mask([11, 12, 13, 14], [1, 1, 0, 1]))
print(apply_mask([11, 12], [0, 0]))
