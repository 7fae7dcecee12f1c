"""Region and boundary metrics for binary masks.

Degenerate cases follow the usual challenge convention: two empty masks
score 1 and exactly one empty mask scores 0. Surfaces use face adjacency
(4-connectivity in 2D, 6 in 3D), with out-of-grid voxels treated as
background. Band distances are physical (mm) and respect anisotropic spacing.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage


class MissingSpacingError(ValueError):
    """NSD needs physical voxel spacing."""


def _pair(truth, pred):
    g = np.asarray(truth).astype(bool)
    s = np.asarray(pred).astype(bool)
    if g.shape != s.shape:
        raise ValueError(f"shape mismatch: {g.shape} vs {s.shape}")
    return g, s


def _dice_from_counts(inter, size_g, size_s):
    denom = np.add(size_g, size_s, dtype=np.float64)
    num = np.multiply(inter, 2.0, dtype=np.float64)
    return np.divide(num, denom, out=np.ones_like(num), where=denom > 0)


def dsc(truth, pred) -> float:
    """Dice overlap of two binary masks; 1 when both are empty."""
    g, s = _pair(truth, pred)
    return float(_dice_from_counts(np.logical_and(g, s).sum(), g.sum(), s.sum()))


def pairwise_dsc(truths, preds) -> np.ndarray:
    """Dice matrix between every mask in ``truths`` (A, *grid) and every mask in ``preds`` (B, *grid).

    Intersections are counted with one matrix product, so large all-pairs
    sweeps stay cheap. Counts are exact in float64 for grids below 2**53 voxels.
    """
    t = np.asarray(truths).astype(bool)
    p = np.asarray(preds).astype(bool)
    if t.shape[1:] != p.shape[1:]:
        raise ValueError(f"grid mismatch: {t.shape[1:]} vs {p.shape[1:]}")
    tf = t.reshape(len(t), -1).astype(np.float64)
    pf = p.reshape(len(p), -1).astype(np.float64)
    inter = tf @ pf.T
    return _dice_from_counts(inter, tf.sum(1)[:, None], pf.sum(1)[None, :])


def extract_surface(mask) -> np.ndarray:
    """Foreground voxels with at least one face-adjacent background or out-of-grid neighbour."""
    m = np.asarray(mask).astype(bool)
    if not m.any():
        return np.zeros_like(m)
    struct = ndimage.generate_binary_structure(m.ndim, 1)
    eroded = ndimage.binary_erosion(m, structure=struct, border_value=0)
    return m & ~eroded


def surface_band(surface: np.ndarray, spacing: Sequence[float], tau: float) -> np.ndarray:
    """Voxels within physical distance ``tau`` of any surface voxel (centre to centre)."""
    if not surface.any():
        return np.zeros_like(surface)
    dist = ndimage.distance_transform_edt(~surface, sampling=spacing)
    return dist <= tau


def nsd(truth, pred, spacing: Optional[Sequence[float]], tau: float = 3.0) -> float:
    g, s = _pair(truth, pred)
    if spacing is None:
        raise MissingSpacingError("NSD requires voxel spacing in mm")
    if len(spacing) != g.ndim or min(spacing) <= 0:
        raise ValueError(f"invalid spacing {spacing} for a {g.ndim}D mask")
    if tau <= 0:
        raise ValueError("tau must be > 0")
    sg, ss = extract_surface(g), extract_surface(s)
    ng, ns = int(sg.sum()), int(ss.sum())
    if ng == 0 and ns == 0:
        return 1.0
    if ng == 0 or ns == 0:
        return 0.0
    hit_g = np.logical_and(sg, surface_band(ss, spacing, tau)).sum()
    hit_s = np.logical_and(ss, surface_band(sg, spacing, tau)).sum()
    return float((hit_g + hit_s) / (ng + ns))


def sen_spec_mae(truth, pred) -> tuple[float, float, float, tuple[str, ...]]:
    """Sensitivity, specificity and mean absolute error.

    ``pred`` may be soft; it is thresholded at 0.5 for Sen/Spec while MAE uses
    the raw values. If truth has no positives (negatives) the sensitivity
    (specificity) is reported as 1 and flagged.
    """
    t = np.asarray(truth).astype(bool)
    p = np.asarray(pred, dtype=np.float64)
    if t.shape != p.shape:
        raise ValueError(f"shape mismatch: {t.shape} vs {p.shape}")
    hard = p >= 0.5
    tp = np.sum(hard & t)
    fn = np.sum(~hard & t)
    tn = np.sum(~hard & ~t)
    fp = np.sum(hard & ~t)
    flags = []
    if tp + fn:
        sen = tp / (tp + fn)
    else:
        sen, flags = 1.0, flags + ["sen_absent"]
    if tn + fp:
        spec = tn / (tn + fp)
    else:
        spec, flags = 1.0, flags + ["spec_absent"]
    mae = float(np.abs(p - t).mean())
    return float(sen), float(spec), mae, tuple(flags)


@dataclass
class CaseMetrics:
    id: str
    dsc: float
    nsd: float
    sen: float
    spec: float
    mae: float
    flags: tuple[str, ...] = ()


def case_metrics(case_id: str, truth, prob, spacing=None, tau: float = 3.0,
                 with_nsd: bool = True) -> CaseMetrics:
    """All metrics for one case; ``prob`` is thresholded at 0.5 for DSC/NSD."""
    truth = np.asarray(truth).astype(bool)
    hard = np.asarray(prob) >= 0.5
    flags = []
    if not truth.any() and not hard.any():
        flags.append("both_empty")
    elif not truth.any() or not hard.any():
        flags.append("one_empty")
    nsd_val = nsd(truth, hard, spacing, tau) if with_nsd else math.nan
    sen, spec, mae, f2 = sen_spec_mae(truth, prob)
    return CaseMetrics(case_id, dsc(truth, hard), nsd_val, sen, spec, mae, tuple(flags) + f2)


COLUMNS = ("dsc", "nsd", "sen", "spec", "mae")


@dataclass
class MetricReport:
    cases: list[CaseMetrics] = field(default_factory=list)

    def summary(self) -> dict:
        out: dict = {"n": len(self.cases)}
        for col in COLUMNS:
            vals = np.array([getattr(c, col) for c in self.cases], dtype=np.float64)
            vals = vals[~np.isnan(vals)]
            out[col] = {
                "mean": float(vals.mean()) if vals.size else math.nan,
                "std": float(vals.std()) if vals.size else math.nan,
            }
        out["flagged"] = sum(bool(c.flags) for c in self.cases)
        return out

    def mean(self, col: str) -> float:
        return self.summary()[col]["mean"]

    def write(self, out_dir) -> None:
        """``metrics.csv`` (one row per case) and ``summary.json`` (mean and std)."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("id",) + COLUMNS + ("flags",))
            for c in self.cases:
                w.writerow([c.id] + [repr(float(getattr(c, k))) for k in COLUMNS] + [";".join(c.flags)])
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=2))
