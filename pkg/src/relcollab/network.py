"""Dual-encoder / shared-decoder U-Net.

Two encoders of identical shape feed one decoder: their bottlenecks are
concatenated and fused, and only the target encoder provides skip
connections. Every convolution block is conv-InstanceNorm-LeakyReLU; the
network ends in a 1-channel sigmoid head plus optional deep-supervision heads
at the next-coarser decoder resolutions.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn


@dataclass
class ArchitectureSpec:
    """Stage list of one encoder.

    ``strides[0]`` must be all ones (the first stage runs at input resolution);
    stage ``i > 0`` starts with a strided convolution. The last stage is the
    bottleneck and consists of the strided convolution only.
    """

    dims: int
    channels: list[int]
    kernels: list[tuple[int, ...]]
    strides: list[tuple[int, ...]]
    patch: tuple[int, ...]
    ds_heads: Optional[int] = None
    in_channels: int = 1
    negative_slope: float = 0.01
    norm_eps: float = 1e-5
    name: str = "custom"

    def __post_init__(self):
        self.kernels = [tuple(k) for k in self.kernels]
        self.strides = [tuple(s) for s in self.strides]
        self.patch = tuple(self.patch)
        n = len(self.channels)
        if self.dims not in (2, 3):
            raise ValueError("dims must be 2 or 3")
        if n < 2 or len(self.kernels) != n or len(self.strides) != n:
            raise ValueError("channels, kernels and strides need one entry per stage (>= 2 stages)")
        for t in (*self.kernels, *self.strides, self.patch):
            if len(t) != self.dims:
                raise ValueError(f"{t} does not have {self.dims} entries")
        if any(s != 1 for s in self.strides[0]):
            raise ValueError("first stage must have unit stride")
        if self.ds_heads is None:
            self.ds_heads = max(1, self.decoder_levels - 2)
        if not 1 <= self.ds_heads <= self.decoder_levels:
            raise ValueError(f"ds_heads must be in [1, {self.decoder_levels}]")

    @property
    def decoder_levels(self) -> int:
        return len(self.channels) - 1

    def total_stride(self) -> tuple[int, ...]:
        return tuple(int(np.prod([s[a] for s in self.strides])) for a in range(self.dims))

    def check_patch(self, shape=None) -> None:
        shape = tuple(shape if shape is not None else self.patch)
        for axis, (n, s) in enumerate(zip(shape, self.total_stride())):
            if n % s:
                raise ValueError(f"axis {axis}: extent {n} not divisible by cumulative stride {s}")

    def stage_shapes(self, shape=None) -> list[tuple[int, ...]]:
        """Expected ``(C, *spatial)`` of every encoder stage output."""
        cur = tuple(shape if shape is not None else self.patch)
        out = []
        for c, s in zip(self.channels, self.strides):
            cur = tuple(n // k for n, k in zip(cur, s))
            out.append((c, *cur))
        return out

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ArchitectureSpec":
        return cls(**json.loads(text))


def unet3d() -> ArchitectureSpec:
    return ArchitectureSpec(
        dims=3,
        channels=[32, 64, 128, 256, 320, 320],
        kernels=[(1, 3, 3)] + [(3, 3, 3)] * 5,
        strides=[(1, 1, 1), (1, 2, 2), (2, 2, 2), (2, 2, 2), (2, 2, 2), (1, 2, 2)],
        patch=(56, 160, 192),
        name="unet3d",
    )


def unet2d() -> ArchitectureSpec:
    return ArchitectureSpec(
        dims=2,
        channels=[32, 64, 128, 256, 480, 480, 480],
        kernels=[(3, 3)] * 7,
        strides=[(1, 1)] + [(2, 2)] * 6,
        patch=(448, 384),
        name="unet2d",
    )


def tiny(patch=(64, 64), base: int = 8) -> ArchitectureSpec:
    return ArchitectureSpec(
        dims=2,
        channels=[base, 2 * base, 4 * base],
        kernels=[(3, 3)] * 3,
        strides=[(1, 1), (2, 2), (2, 2)],
        patch=tuple(patch),
        ds_heads=2,
        name="tiny",
    )


PRESETS = {"unet3d": unet3d, "unet2d": unet2d, "tiny": tiny}


def _layers(dims: int):
    if dims == 2:
        return nn.Conv2d, nn.ConvTranspose2d, nn.InstanceNorm2d
    return nn.Conv3d, nn.ConvTranspose3d, nn.InstanceNorm3d


class ConvBlock(nn.Sequential):
    def __init__(self, spec: ArchitectureSpec, cin: int, cout: int, kernel, stride=None):
        conv, _, norm = _layers(spec.dims)
        stride = stride or (1,) * spec.dims
        super().__init__(
            conv(cin, cout, kernel, stride=stride, padding=tuple(k // 2 for k in kernel)),
            norm(cout, eps=spec.norm_eps, affine=True),
            nn.LeakyReLU(spec.negative_slope, inplace=True),
        )


class Encoder(nn.Module):
    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        ch, ks, st = spec.channels, spec.kernels, spec.strides
        stages = [ConvBlock(spec, spec.in_channels, ch[0], ks[0])]
        for i in range(1, len(ch)):
            down = ConvBlock(spec, ch[i - 1], ch[i], ks[i], st[i])
            if i == len(ch) - 1:
                stages.append(down)
            else:
                stages.append(nn.Sequential(down, ConvBlock(spec, ch[i], ch[i], ks[i])))
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        """Return all stage outputs; the last one is the bottleneck."""
        outs = []
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return outs


class Decoder(nn.Module):
    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        conv, convT, _ = _layers(spec.dims)
        ch, ks, st = spec.channels, spec.kernels, spec.strides
        # concat(F_G, F_T) has twice the bottleneck width
        self.fuse = ConvBlock(spec, 2 * ch[-1], ch[-1], ks[-1])
        ups, blocks = [], []
        for j in range(len(ch) - 2, -1, -1):
            ups.append(convT(ch[j + 1], ch[j], st[j + 1], stride=st[j + 1]))
            blocks.append(ConvBlock(spec, 2 * ch[j], ch[j], ks[j]))
        self.ups = nn.ModuleList(ups)
        self.blocks = nn.ModuleList(blocks)
        # heads[0] is full resolution
        self.heads = nn.ModuleList(conv(ch[j], 1, 1) for j in range(spec.ds_heads))

    def forward(self, bottlenecks, skips):
        x = self.fuse(torch.cat(bottlenecks, dim=1))
        levels = []
        for up, block, skip in zip(self.ups, self.blocks, reversed(skips)):
            x = block(torch.cat([up(x), skip], dim=1))
            levels.append(x)
        levels = levels[::-1]
        return [torch.sigmoid(head(levels[j])) for j, head in enumerate(self.heads)]


class DualEncoderNet(nn.Module):
    """General encoder, target encoder and a shared decoder.

    ``forward_target`` is the segmentation path; ``forward_general`` runs the
    general encoder alone (used for auxiliary-domain inputs).
    """

    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        self.spec = spec
        self.general_encoder = Encoder(spec)
        self.target_encoder = Encoder(spec)
        self.decoder = Decoder(spec)

    def param_groups(self) -> dict[str, list[nn.Parameter]]:
        return {
            "general_encoder": list(self.general_encoder.parameters()),
            "target_encoder": list(self.target_encoder.parameters()),
            "decoder": list(self.decoder.parameters()),
        }

    def _check_input(self, x):
        if x.ndim != self.spec.dims + 2 or x.shape[1] != self.spec.in_channels:
            raise ValueError(f"expected (B, {self.spec.in_channels}, ...) with {self.spec.dims} spatial axes, "
                             f"got {tuple(x.shape)}")
        self.spec.check_patch(x.shape[2:])

    def forward_general(self, x):
        self._check_input(x)
        return self.general_encoder(x)[-1]

    def forward_target(self, x, zero_general: bool = False):
        """Return ``(predictions, F_T, F_G)``; predictions are ordered full resolution first.

        ``zero_general`` replaces the general half of the concatenation by
        zeros (diagnostic).
        """
        self._check_input(x)
        f_g = self.general_encoder(x)[-1]
        t_outs = self.target_encoder(x)
        f_t = t_outs[-1]
        g_in = torch.zeros_like(f_g) if zero_general else f_g
        preds = self.decoder([g_in, f_t], t_outs[:-1])
        return preds, f_t, f_g

    def forward(self, x):
        return self.forward_target(x)[0][0]


def _init_weights(module: nn.Module, slope: float) -> None:
    if isinstance(module, (nn.Conv2d, nn.Conv3d, nn.ConvTranspose2d, nn.ConvTranspose3d)):
        nn.init.kaiming_normal_(module.weight, a=slope)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


def build_network(spec: ArchitectureSpec, seed: int = 0) -> DualEncoderNet:
    """Construct a seeded network. Raises ``ValueError`` if the patch is not stride-divisible."""
    spec.check_patch()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = DualEncoderNet(spec)
        net.apply(lambda m: _init_weights(m, spec.negative_slope))
    return net
