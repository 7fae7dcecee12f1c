"""
Overlap and boundary metrics
============================

DSC counts overlapping voxels. NSD asks what fraction of each boundary lies
within a physical tolerance of the other boundary, so it needs voxel spacing.
"""

import numpy as np

from relcollab.metrics import case_metrics, dsc, nsd, pairwise_dsc

truth = np.zeros((32, 32), bool)
truth[8:24, 8:24] = True
shifted = np.roll(truth, 2, axis=0)

print("dsc:", dsc(truth, shifted))
for spacing in [(1.0, 1.0), (2.0, 1.0)]:
    print("nsd spacing", spacing, "tau=3mm:", nsd(truth, shifted, spacing, tau=3.0))

###############################################################################
# Shifting by two rows is inside a 3 mm band at 1 mm rows, and outside it
# once rows are 2 mm apart, which is why spacing is mandatory for NSD.

###############################################################################
# Per-case summaries also include sensitivity, specificity and mean absolute
# error of the soft prediction.
prob = shifted * 0.9 + 0.05
print(case_metrics("demo", truth, prob, (1.0, 1.0)))

###############################################################################
# For many masks at once, ``pairwise_dsc`` fills a full score matrix.
rng = np.random.default_rng(0)
masks = rng.random((4, 16, 16)) > 0.5
print(pairwise_dsc(masks, masks).round(3))
