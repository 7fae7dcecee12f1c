"""Samples, folds, paired-batch sampling and the synthetic two-domain lesion phantom."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np
import torch


HU_RANGE = (-1024.0, 3071.0)


class ConfigError(ValueError):
    """Raised for invalid phantom, split or preprocessing configuration."""


class DomainTag(str, Enum):
    TARGET_LABELED = "target_labeled"
    TARGET_UNLABELED = "target_unlabeled"
    AUXILIARY = "auxiliary"


@dataclass(frozen=True, eq=False)
class Sample:
    """One 2D slice or 3D volume with an optional binary mask.

    Arrays are made read-only on construction. A ``target_unlabeled`` sample
    never carries a label, so no loss can see one.
    """

    id: str
    image: np.ndarray
    label: Optional[np.ndarray] = None
    spacing: Optional[tuple[float, ...]] = None
    domain_tag: DomainTag = DomainTag.TARGET_LABELED
    source: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        tag = DomainTag(self.domain_tag)
        object.__setattr__(self, "domain_tag", tag)
        image = np.array(self.image, dtype=np.float32)
        image.setflags(write=False)
        object.__setattr__(self, "image", image)
        if tag is DomainTag.TARGET_UNLABELED and self.label is not None:
            object.__setattr__(self, "label", None)
        if self.label is not None:
            label = np.asarray(self.label)
            if label.shape != image.shape:
                raise ValueError(f"{self.id}: label shape {label.shape} != image shape {image.shape}")
            if not np.isin(label, (0, 1)).all():
                raise ValueError(f"{self.id}: label values must be 0 or 1")
            label = label.astype(np.uint8)
            label.setflags(write=False)
            object.__setattr__(self, "label", label)
        if self.spacing is not None:
            spacing = tuple(float(s) for s in self.spacing)
            if len(spacing) != image.ndim or min(spacing) <= 0:
                raise ValueError(f"{self.id}: spacing {spacing} invalid for a {image.ndim}D image")
            object.__setattr__(self, "spacing", spacing)

    @property
    def ndim(self) -> int:
        return self.image.ndim

    @property
    def is_labeled(self) -> bool:
        return self.label is not None


@dataclass(frozen=True)
class DatasetSplit:
    fold_index: int
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    seed: int


# ---------------------------------------------------------------------------
# phantom generator


@dataclass
class LesionFamily:
    """Shape family for synthetic lesions.

    Blobs are axis-aligned ellipsoids whose semi-axes are ``radius`` scaled
    per axis by a factor drawn from ``[1, elongation]``. ``intensity`` is the
    lesion value in HU-like units.
    """

    blobs: tuple[int, int] = (1, 1)
    radius: tuple[float, float] = (6.0, 10.0)
    elongation: float = 1.0
    intensity: float = -100.0


def _target_family() -> LesionFamily:
    # diffuse, faint, several patches (ground-glass-like)
    return LesionFamily(blobs=(2, 4), radius=(3.0, 7.0), elongation=1.8, intensity=-450.0)


def _auxiliary_family() -> LesionFamily:
    # single compact, denser lesion
    return LesionFamily(blobs=(1, 1), radius=(5.0, 10.0), elongation=1.2, intensity=-150.0)


@dataclass
class PhantomConfig:
    shape: tuple[int, ...] = (64, 64)
    n_target_labeled: int = 20
    n_target_unlabeled: int = 0
    n_auxiliary: int = 0
    target: LesionFamily = field(default_factory=_target_family)
    auxiliary: LesionFamily = field(default_factory=_auxiliary_family)
    background: float = -800.0
    noise: float = 60.0
    vessels: int = 3
    spacing: tuple[float, ...] = (1.0, 1.0)
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        d = dict(d)
        for key in ("target", "auxiliary"):
            if key in d and isinstance(d[key], dict):
                fam = {k: tuple(v) if isinstance(v, list) else v for k, v in d[key].items()}
                d[key] = LesionFamily(**fam)
        for key in ("shape", "spacing"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown phantom config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def validate(self) -> None:
        if len(self.shape) not in (2, 3) or min(self.shape) < 1:
            raise ConfigError(f"shape must be 2D or 3D with positive extents, got {self.shape}")
        if len(self.spacing) != len(self.shape) or min(self.spacing) <= 0:
            raise ConfigError("spacing must have one positive entry per axis")
        counts = (self.n_target_labeled, self.n_target_unlabeled, self.n_auxiliary)
        if min(counts) < 0 or sum(counts) == 0:
            raise ConfigError(f"sample counts must be non-negative with a positive total, got {counts}")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        used = []
        if self.n_target_labeled or self.n_target_unlabeled:
            used.append(("target", self.target))
        if self.n_auxiliary:
            used.append(("auxiliary", self.auxiliary))
        for name, fam in used:
            lo, hi = fam.blobs
            if lo < 0 or hi < lo:
                raise ConfigError(f"{name}: blob count range {fam.blobs} invalid")
            rlo, rhi = fam.radius
            if rlo <= 0 or rhi < rlo or fam.elongation < 1:
                raise ConfigError(f"{name}: radius range {fam.radius} / elongation {fam.elongation} invalid")
            reach = int(np.ceil(rhi * fam.elongation))
            if hi > 0 and min(self.shape) < 2 * reach + 1:
                raise ConfigError(f"{name}: grid {self.shape} too small for lesion radius {rhi * fam.elongation:g}")


def rasterize_ellipsoid(shape: Sequence[int], center: Sequence[float], semi_axes: Sequence[float]) -> np.ndarray:
    """Boolean mask of voxels whose centres satisfy sum(((x-c)/a)^2) <= 1."""
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    acc = np.zeros(tuple(shape), dtype=np.float64)
    for g, c, a in zip(grids, center, semi_axes):
        acc = acc + ((g - c) / a) ** 2
    return acc <= 1.0


def _draw_lesions(rng: np.random.Generator, shape, fam: LesionFamily):
    mask = np.zeros(shape, dtype=bool)
    geometry = []
    n = int(rng.integers(fam.blobs[0], fam.blobs[1] + 1))
    for _ in range(n):
        r = rng.uniform(*fam.radius)
        axes = [r * rng.uniform(1.0, fam.elongation) for _ in shape]
        center = [rng.uniform(np.ceil(a), s - 1 - np.ceil(a)) for a, s in zip(axes, shape)]
        mask |= rasterize_ellipsoid(shape, center, axes)
        geometry.append({"center": [float(c) for c in center], "semi_axes": [float(a) for a in axes]})
    return mask, geometry


def _draw_vessels(rng: np.random.Generator, shape, count: int) -> np.ndarray:
    # thin bright straight segments, never labeled
    mask = np.zeros(shape, dtype=bool)
    for _ in range(count):
        a = np.array([rng.uniform(0, s - 1) for s in shape])
        b = np.array([rng.uniform(0, s - 1) for s in shape])
        for t in np.linspace(0.0, 1.0, 2 * max(shape)):
            idx = tuple(np.round(a + t * (b - a)).astype(int))
            mask[idx] = True
    return mask


def _render(rng, cfg: PhantomConfig, fam: LesionFamily):
    lesion, geometry = _draw_lesions(rng, cfg.shape, fam)
    image = np.full(cfg.shape, cfg.background, dtype=np.float64)
    if cfg.vessels:
        image[_draw_vessels(rng, cfg.shape, cfg.vessels)] = -200.0
    image[lesion] = fam.intensity
    if cfg.noise > 0:
        image = image + rng.normal(0.0, cfg.noise, size=cfg.shape)
    # integer HU keeps on-disk storage lossless
    # integer values inside the usual CT range, so 16-bit storage is lossless
    image = np.clip(np.round(image), HU_RANGE[0], HU_RANGE[1])
    return image.astype(np.float32), lesion.astype(np.uint8), geometry


def generate_phantom_dataset(cfg: PhantomConfig) -> list[Sample]:
    """Seeded two-domain phantom set; identical configs give identical samples."""
    cfg.validate()
    out: list[Sample] = []
    plan = (
        (DomainTag.TARGET_LABELED, cfg.n_target_labeled, cfg.target, "tl"),
        (DomainTag.TARGET_UNLABELED, cfg.n_target_unlabeled, cfg.target, "tu"),
        (DomainTag.AUXILIARY, cfg.n_auxiliary, cfg.auxiliary, "aux"),
    )
    for stream, (tag, count, fam, prefix) in enumerate(plan):
        rng = np.random.default_rng([cfg.seed, stream])
        for i in range(count):
            image, label, geometry = _render(rng, cfg, fam)
            out.append(
                Sample(
                    id=f"{prefix}{i:03d}",
                    image=image,
                    label=None if tag is DomainTag.TARGET_UNLABELED else label,
                    spacing=tuple(cfg.spacing),
                    domain_tag=tag,
                    source="phantom",
                    meta={"lesions": geometry},
                )
            )
    return out


# ---------------------------------------------------------------------------
# folds


def make_folds(ids: Sequence[str], k: int, seed: int, few_shot: bool = False) -> list[DatasetSplit]:
    """Shuffle ``ids`` with ``seed`` and cut them into ``k`` near-equal groups.

    In the conventional mode fold ``i`` holds out group ``i`` and trains on the
    rest. With ``few_shot`` the roles swap: the small group is the training
    set and everything else is tested (4 train / 16 test for 20 ids, k=5).
    """
    ids = list(ids)
    if k < 2:
        raise ConfigError("k must be >= 2")
    if len(ids) < k:
        raise ConfigError(f"k={k} exceeds the number of ids ({len(ids)})")
    if len(set(ids)) != len(ids):
        raise ConfigError("ids must be unique")
    order = np.random.default_rng(seed).permutation(len(ids))
    groups = [tuple(ids[j] for j in chunk) for chunk in np.array_split(order, k)]
    splits = []
    for i, group in enumerate(groups):
        rest = tuple(x for j, g in enumerate(groups) if j != i for x in g)
        train, test = (group, rest) if few_shot else (rest, group)
        splits.append(DatasetSplit(fold_index=i, train_ids=train, test_ids=test, seed=seed))
    return splits


# ---------------------------------------------------------------------------
# batches


def fit_to_patch(array: np.ndarray, patch: Sequence[int], rng: Optional[np.random.Generator],
                 fill: float = 0.0, offset: Optional[Sequence[int]] = None) -> tuple[np.ndarray, tuple[int, ...]]:
    """Crop (random or at ``offset``) and/or pad ``array`` to ``patch``.

    Returns the patch and the crop offset used so a label can follow the same
    window. Padding is symmetric with ``fill``.
    """
    if len(patch) != array.ndim:
        raise ValueError(f"patch {tuple(patch)} does not match a {array.ndim}D array")
    pads = []
    for n, p in zip(array.shape, patch):
        extra = max(p - n, 0)
        pads.append((extra // 2, extra - extra // 2))
    if any(sum(pd) for pd in pads):
        array = np.pad(array, pads, constant_values=fill)
    if offset is None:
        offset = tuple(
            int(rng.integers(0, n - p + 1)) if rng is not None and n > p else (n - p) // 2
            for n, p in zip(array.shape, patch)
        )
    window = tuple(slice(o, o + p) for o, p in zip(offset, patch))
    return array[window], tuple(offset)


@dataclass
class BatchPair:
    """Synchronized target and auxiliary batches for one training step.

    ``target_labels`` holds masks only for the rows listed in
    ``labeled_index``; unlabeled rows have no label tensor at all.
    """

    target_images: torch.Tensor
    auxiliary_images: torch.Tensor
    target_labels: torch.Tensor
    labeled_index: torch.Tensor
    target_ids: tuple[str, ...] = ()
    auxiliary_ids: tuple[str, ...] = ()

    @property
    def batch_size(self) -> int:
        return self.target_images.shape[0]

    @property
    def n_labeled(self) -> int:
        return int(self.labeled_index.numel())

    def __post_init__(self):
        if self.target_images.shape != self.auxiliary_images.shape:
            raise ValueError("target and auxiliary batches must share batch size and patch shape")


def _stack(samples: Sequence[Sample], patch, rng, fill: float):
    images, labels = [], []
    for s in samples:
        img, off = fit_to_patch(s.image, patch, rng, fill=fill)
        images.append(img)
        if s.label is not None:
            labels.append(fit_to_patch(s.label, patch, None, offset=off)[0])
    imgs = torch.from_numpy(np.stack(images)[:, None].astype(np.float32))
    labs = torch.from_numpy(np.stack(labels)[:, None].astype(np.float32)) if labels else None
    return imgs, labs


def sample_batch_pair(target_pool: Sequence[Sample], auxiliary_pool: Sequence[Sample], B: int,
                      rng: np.random.Generator, patch: Sequence[int],
                      labeled_fraction: float = 1.0, fill: float = 0.0) -> BatchPair:
    """Draw ``B`` target and ``B`` auxiliary samples (with replacement) and crop them to ``patch``.

    When the target pool contains unlabeled samples, ``round(B*labeled_fraction)``
    rows come from its labeled part and the rest from its unlabeled part. A
    pool with only one kind supplies every row.
    """
    if B < 1:
        raise ConfigError("B must be >= 1")
    if not target_pool or not auxiliary_pool:
        raise ValueError("target and auxiliary pools must be non-empty")
    labeled = [s for s in target_pool if s.is_labeled]
    unlabeled = [s for s in target_pool if not s.is_labeled]
    if labeled and unlabeled:
        n_lab = int(round(B * labeled_fraction))
    else:
        n_lab = B if labeled else 0
    picks = [labeled[i] for i in rng.integers(0, len(labeled), n_lab)] if n_lab else []
    picks += [unlabeled[i] for i in rng.integers(0, len(unlabeled), B - n_lab)] if B - n_lab else []
    aux = [auxiliary_pool[i] for i in rng.integers(0, len(auxiliary_pool), B)]

    t_img, t_lab = _stack(picks, patch, rng, fill)
    a_img, _ = _stack(aux, patch, rng, fill)
    if t_lab is None:
        t_lab = torch.zeros((0, 1, *patch), dtype=torch.float32)
    return BatchPair(
        target_images=t_img,
        auxiliary_images=a_img,
        target_labels=t_lab,
        labeled_index=torch.arange(n_lab),
        target_ids=tuple(s.id for s in picks),
        auxiliary_ids=tuple(s.id for s in aux),
    )


# ---------------------------------------------------------------------------
# intensity preprocessing


@dataclass
class PreprocessConfig:
    window: Optional[tuple[float, float]] = (-1000.0, 400.0)
    mode: str = "minmax"  # or "zscore"

    def __post_init__(self):
        if self.mode not in ("minmax", "zscore"):
            raise ConfigError(f"unknown normalization mode {self.mode!r}")
        if self.window is not None:
            self.window = tuple(float(w) for w in self.window)
            if self.window[0] >= self.window[1]:
                raise ConfigError(f"window {self.window} must be increasing")


def preprocess(sample: Sample, cfg: PreprocessConfig) -> Sample:
    """Clip to ``cfg.window`` then min-max scale to [0, 1] or z-score.

    A constant image maps to zeros under both modes (min-max has no range;
    z-score falls back to plain zero-centering).
    """
    img = sample.image.astype(np.float64)
    if not np.isfinite(img).all():
        raise ValueError(f"{sample.id}: non-finite intensities")
    if cfg.window is not None:
        img = np.clip(img, *cfg.window)
    info: dict = {"window": cfg.window, "mode": cfg.mode}
    if cfg.mode == "minmax":
        lo, hi = float(img.min()), float(img.max())
        img = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
        info.update(lo=lo, hi=hi)
    else:
        mu, sd = float(img.mean()), float(img.std())
        img = (img - mu) / sd if sd > 0 else img - mu
        info.update(mean=mu, std=sd, fallback=sd == 0)
    meta = dict(sample.meta)
    meta["preprocess"] = info
    return replace(sample, image=img.astype(np.float32), meta=meta)
