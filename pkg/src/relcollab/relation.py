"""Channel-wise Gram relation matrices of encoder feature maps.

A feature batch ``(B, C, *spatial)`` is averaged over the batch, flattened to
``(C, N)`` in row-major spatial order, turned into the Gram matrix ``A A^T``
and finally L2-normalized row by row.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

ROW_EPS = 1e-12


def batch_mean(features: torch.Tensor) -> torch.Tensor:
    if features.ndim < 3:
        raise ValueError(f"expected (B, C, *spatial), got shape {tuple(features.shape)}")
    return features.mean(dim=0, keepdim=True)


def flatten_channels(features: torch.Tensor) -> torch.Tensor:
    """``(1, C, *spatial)`` -> ``(C, prod(spatial))``, row-major over spatial axes."""
    if features.shape[0] != 1:
        raise ValueError("flatten_channels expects a single (batch-averaged) feature map")
    return features.reshape(features.shape[1], -1)


def gram(a: torch.Tensor) -> torch.Tensor:
    return a @ a.transpose(-1, -2)


def normalize_rows(g: torch.Tensor) -> torch.Tensor:
    """Divide every row by its L2 norm.

    All-zero rows (dead channels) stay zero and pass no gradient.
    """
    sq = (g * g).sum(dim=-1, keepdim=True)
    live = sq > 0
    norm = torch.sqrt(torch.where(live, sq, torch.ones_like(sq))) + ROW_EPS
    return torch.where(live, g / norm, torch.zeros_like(g))


def compute_relation(features: torch.Tensor, per_sample: bool = False) -> torch.Tensor:
    """Relation matrix of a feature batch.

    ``per_sample`` is an experimental variant that builds one relation matrix
    per sample and averages them instead of averaging features first.
    """
    if per_sample:
        mats = [normalize_rows(gram(flatten_channels(f[None]))) for f in features]
        return torch.stack(mats).mean(dim=0)
    return normalize_rows(gram(flatten_channels(batch_mean(features))))


def save_relation(path, matrix, stage: str = "bottleneck", step: int = 0, **extra) -> None:
    """Write ``path.npy`` plus a ``path.json`` sidecar with C, stage and step."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = matrix.detach().cpu().numpy() if isinstance(matrix, torch.Tensor) else np.asarray(matrix)
    np.save(path.with_suffix(".npy"), arr.astype(np.float32))
    side = {"C": int(arr.shape[0]), "stage": stage, "step": int(step), **extra}
    path.with_suffix(".json").write_text(json.dumps(side, sort_keys=True))


def load_relation(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    arr = np.load(path.with_suffix(".npy"))
    side = json.loads(path.with_suffix(".json").read_text())
    return arr, side
