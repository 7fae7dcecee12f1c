"""
Architecture presets
====================

Two full-size presets mirror the 3D and 2D U-Net layouts; ``tiny`` keeps
tests and demos fast. ``stage_shapes`` gives the encoder feature size at each
resolution without building anything.
"""

import torch

from relcollab.network import build_network, unet2d, unet3d, tiny

for spec in (unet3d(), unet2d(), tiny()):
    print(spec.name, "patch", spec.patch, "deep-supervision heads", spec.ds_heads)
    for shape in spec.stage_shapes():
        print("   ", "x".join(map(str, shape)))

###############################################################################
# Build the tiny network and look at its outputs: one sigmoid map per
# supervised resolution plus both bottlenecks.
net = build_network(tiny(), seed=0)
preds, f_t, f_g = net.forward_target(torch.randn(2, 1, 64, 64))
print([tuple(p.shape) for p in preds], tuple(f_t.shape), tuple(f_g.shape))
print({k: sum(p.numel() for p in v) for k, v in net.param_groups().items()})
