"""
Relation matrices of feature maps
=================================

A relation matrix summarizes which channels of a feature map fire together.
We average the batch, flatten each channel, take all channel inner products
and scale every row to unit length.
"""

import numpy as np
import torch

from relcollab.losses import rc_general_loss, rc_target_loss
from relcollab.relation import compute_relation

rng = np.random.default_rng(0)

###############################################################################
# Two channels that are copies of each other produce identical rows; an
# orthogonal third channel only relates to itself.
f = np.zeros((1, 3, 4, 4))
f[0, 0] = rng.normal(size=(4, 4))
f[0, 1] = f[0, 0]
f[0, 2, 0, 0] = 1.0
f[0, 0, 0, 0] = 0.0
f[0, 1, 0, 0] = 0.0
r = compute_relation(torch.from_numpy(f))
print("relation matrix:\n", r.numpy().round(3))

###############################################################################
# Scaling the features leaves the matrix unchanged, and relabelling channels
# permutes rows and columns together.
print("scale invariant:", torch.allclose(compute_relation(torch.from_numpy(5 * f)), r))
perm = [2, 0, 1]
rp = compute_relation(torch.from_numpy(f[:, perm]))
print("permutation conjugates:", torch.allclose(rp, r[perm][:, perm]))

###############################################################################
# The two consistency losses compare relation matrices. The general one pulls
# two matrices together; the target one is negative and rewards distance.
a = compute_relation(torch.randn(2, 8, 6, 6))
b = compute_relation(torch.randn(2, 8, 6, 6))
print("pull-together loss:", float(rc_general_loss(a, b, 0.1)))
print("push-apart loss:   ", float(rc_target_loss(a, b, 0.1)))
