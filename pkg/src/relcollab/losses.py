"""Segmentation loss with deep supervision, relation-consistency losses and the ramp-up."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from .data import ConfigError

PROB_CLAMP = 1e-7


def _check_shapes(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def dice_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Soft dice loss over all elements of ``pred``; empty-vs-empty gives 0."""
    _check_shapes(pred, target)
    inter = (pred * target).sum()
    return 1.0 - (2.0 * inter + eps) / (pred.sum() + target.sum() + eps)


def cross_entropy_loss(pred: torch.Tensor, target: torch.Tensor, logits: bool = False) -> torch.Tensor:
    """Mean binary cross-entropy. Probabilities are clamped to [1e-7, 1 - 1e-7]."""
    _check_shapes(pred, target)
    if logits:
        return F.binary_cross_entropy_with_logits(pred, target)
    p = pred.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p)).mean()


def deep_supervision_weights(n: int) -> list[float]:
    """Weights ``2^-s`` for scales s = 0..n-1 (full resolution first), summing to 1."""
    if n < 1:
        raise ValueError("need at least one output scale")
    raw = [2.0 ** -s for s in range(n)]
    total = sum(raw)
    return [w / total for w in raw]


def downsample_mask(target: torch.Tensor, size: Sequence[int]) -> torch.Tensor:
    if tuple(target.shape[2:]) == tuple(size):
        return target
    return F.interpolate(target, size=tuple(size), mode="nearest")


def seg_loss(outputs: Sequence[torch.Tensor], target: torch.Tensor, eps: float = 1e-5,
             per_sample: bool = True) -> torch.Tensor:
    """Weighted dice + cross-entropy over deep-supervision scales.

    ``outputs`` are sigmoid probabilities ``(B, 1, *spatial)`` ordered from
    full resolution down; ``target`` is the full-resolution mask and is
    nearest-downsampled for coarser scales. With ``per_sample`` the loss is
    computed per batch row and averaged, otherwise dice is pooled over the
    batch.
    """
    if len(outputs) == 0:
        raise ValueError("seg_loss needs at least one output")
    total = outputs[0].new_zeros(())
    for w, out in zip(deep_supervision_weights(len(outputs)), outputs):
        tgt = downsample_mask(target, out.shape[2:])
        if per_sample:
            terms = [dice_loss(o, t, eps) + cross_entropy_loss(o, t) for o, t in zip(out, tgt)]
            term = torch.stack(terms).mean()
        else:
            term = dice_loss(out, tgt, eps) + cross_entropy_loss(out, tgt)
        total = total + w * term
    return total


def _sq_frobenius(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"relation matrices differ in size: {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).sum()


def rc_general_loss(r_aux: torch.Tensor, r_tgt: torch.Tensor, lam: float) -> torch.Tensor:
    """``lam * ||R_G(aux) - R_G(target)||_F^2``; pulls the general encoder's relations together."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return lam * _sq_frobenius(r_aux, r_tgt)


def rc_target_loss(r_general: torch.Tensor, r_target: torch.Tensor, lam: float,
                   clamp: Optional[float] = None) -> torch.Tensor:
    """``-lam * ||R_G(target) - R_T(target)||_F^2``; minimizing it pushes the encoders apart.

    With unit rows the distance is bounded by 4C. ``clamp`` optionally caps
    the distance earlier.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    d = _sq_frobenius(r_general, r_target)
    if clamp is not None:
        d = torch.clamp(d, max=clamp)
    return -lam * d


@dataclass(frozen=True)
class RampSchedule:
    base: float = 0.1
    t_max: int = 1000
    gaussian: bool = True

    def __post_init__(self):
        if self.t_max <= 0:
            raise ConfigError("t_max must be >= 1")
        if self.base < 0:
            raise ConfigError("ramp base must be >= 0")


def ramp_lambda(step: int, schedule: RampSchedule) -> float:
    """``base * exp(-5 (1 - t/t_max)^2)``, or the unsquared exponent when ``gaussian`` is off.

    Steps beyond ``t_max`` are clamped, so the value never exceeds ``base``.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    t = min(step, schedule.t_max)
    phase = 1.0 - t / schedule.t_max
    if schedule.gaussian:
        phase = phase * phase
    return schedule.base * math.exp(-5.0 * phase)


@dataclass
class LossBundle:
    seg: float
    rc_general: float
    rc_target: float
    lambda_g: float
    lambda_t: float

    def as_record(self, step: int) -> dict:
        return {
            "step": step,
            "seg": self.seg,
            "rc_general": self.rc_general,
            "rc_target": self.rc_target,
            "lambda_G": self.lambda_g,
            "lambda_T": self.lambda_t,
        }
