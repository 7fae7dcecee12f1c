"""Relation-matrix plots: pairs side by side with their absolute difference, plus a difference curve."""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Iterable, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .relation import load_relation  # noqa: E402

log = logging.getLogger(__name__)

# (name, first matrix, second matrix, title)
PAIRINGS = (
    ("general", "rg_aux", "rg_tgt", "general encoder: auxiliary vs target input"),
    ("target", "rg_tgt", "rt_tgt", "target input: general vs target encoder"),
)


def available_steps(run_dir) -> list[int]:
    root = Path(run_dir) / "relations"
    if not root.is_dir():
        return []
    steps = []
    for d in root.iterdir():
        if d.is_dir() and d.name.startswith("step_"):
            try:
                steps.append(int(d.name[5:]))
            except ValueError:
                continue
    return sorted(steps)


def three_panel(a: np.ndarray, b: np.ndarray, labels, title: str, path) -> np.ndarray:
    """Save ``a``, ``b`` and ``|a - b|`` side by side; returns the difference panel."""
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.4))
    diff = np.abs(a - b)
    for ax, mat, lab, cmap in zip(axes, (a, b, diff), (*labels, "|difference|"), ("viridis", "viridis", "Reds")):
        im = ax.imshow(mat, cmap=cmap, vmin=0 if cmap == "Reds" else -1, vmax=max(float(diff.max()), 1e-12)
                       if cmap == "Reds" else 1)
        ax.set_title(lab, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return diff


def inspect_relations(run_dir, steps: Optional[Iterable[int]] = None, out_dir=None) -> list[dict]:
    """Plot every requested step and write ``relation_diff.csv`` / ``relation_diff.png``.

    Missing steps are skipped with a warning. Returns the curve rows (step,
    squared Frobenius difference of each pairing); an empty list means nothing
    was found.
    """
    run_dir = Path(run_dir)
    out = Path(out_dir) if out_dir else run_dir / "inspect"
    have = available_steps(run_dir)
    wanted = sorted(set(steps)) if steps else have
    rows = []
    for step in wanted:
        if step not in have:
            log.warning("no relation matrices for step %d", step)
            continue
        base = run_dir / "relations" / f"step_{step}"
        mats = {k: load_relation(base / k)[0] for k in ("rg_aux", "rg_tgt", "rt_tgt")}
        out.mkdir(parents=True, exist_ok=True)
        row = {"step": step}
        for name, ka, kb, title in PAIRINGS:
            three_panel(mats[ka], mats[kb], (ka, kb), f"{title} (step {step})", out / f"{name}_step_{step}.png")
            row[f"{name}_sqdiff"] = float(((mats[ka] - mats[kb]) ** 2).sum())
        rows.append(row)
    if rows:
        with open(out / "relation_diff.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for name, *_ in PAIRINGS:
            ax.plot([r["step"] for r in rows], [r[f"{name}_sqdiff"] for r in rows], marker="o", label=name)
        ax.set_xlabel("step")
        ax.set_ylabel("squared Frobenius difference")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "relation_diff.png", dpi=80)
        plt.close(fig)
    return rows
