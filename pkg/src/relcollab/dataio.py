"""On-disk datasets: NIfTI volumes, grayscale PNG slices and a JSON manifest."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Optional

import nibabel as nib
import numpy as np
from PIL import Image

from .data import DomainTag, Sample

MANIFEST = "manifest.json"
# 2D images are written as uint16 PNG holding value + HU_OFFSET
HU_OFFSET = 1024


def read_volume(path) -> tuple[np.ndarray, tuple[float, ...]]:
    img = nib.load(str(path))
    data = np.asarray(img.dataobj)
    spacing = tuple(float(z) for z in img.header.get_zooms()[: data.ndim])
    return data, spacing


def write_volume(path, array: np.ndarray, spacing) -> None:
    affine = np.diag([*spacing, 1.0])
    img = nib.Nifti1Image(array, affine)
    img.header.set_zooms(tuple(spacing))
    nib.save(img, str(path))


def read_raster(path, offset: float = 0.0) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.array(im)
    return arr.astype(np.float32) - offset


def write_raster(path, array: np.ndarray, offset: float = 0.0) -> None:
    arr = np.asarray(array, dtype=np.float64) + offset
    if arr.min() < 0 or arr.max() > 65535 or not np.allclose(arr, np.round(arr)):
        raise ValueError(f"{path}: values not representable losslessly in a 16-bit PNG")
    Image.fromarray(np.round(arr).astype(np.uint16)).save(path, format="PNG")


def _ext(ndim: int) -> str:
    return ".png" if ndim == 2 else ".nii"


def save_dataset(samples: Iterable[Sample], out_dir, seed: Optional[int] = None,
                 config: Optional[dict] = None, config_hash: Optional[str] = None) -> dict:
    """Write samples under ``out_dir/images`` and ``out_dir/labels`` plus a manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(exist_ok=True)
    entries = []
    for s in samples:
        ext = _ext(s.ndim)
        img_rel = f"images/{s.id}{ext}"
        lab_rel = f"labels/{s.id}{ext}" if s.label is not None else None
        if ext == ".png":
            write_raster(out / img_rel, s.image, HU_OFFSET)
            if lab_rel:
                write_raster(out / lab_rel, s.label)
        else:
            spacing = s.spacing or (1.0,) * s.ndim
            write_volume(out / img_rel, s.image.astype(np.int16 if _integral(s.image) else np.float32), spacing)
            if lab_rel:
                write_volume(out / lab_rel, s.label.astype(np.uint8), spacing)
        entries.append({
            "id": s.id,
            "tag": s.domain_tag.value,
            "source": s.source,
            "spacing": list(s.spacing) if s.spacing else None,
            "image": img_rel,
            "label": lab_rel,
        })
    counts = {t.value: sum(e["tag"] == t.value for e in entries) for t in DomainTag}
    manifest = {
        "ids": [e["id"] for e in entries],
        "counts": counts,
        "seed": seed,
        "config_hash": config_hash,
        "config": config,
        "png_offset": HU_OFFSET,
        "samples": entries,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def _integral(a: np.ndarray) -> bool:
    return bool(np.all(a == np.round(a)) and a.min() >= -32768 and a.max() <= 32767)


def load_dataset(root) -> list[Sample]:
    root = Path(root)
    mpath = root / MANIFEST
    if not mpath.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {root}")
    manifest = json.loads(mpath.read_text())
    offset = manifest.get("png_offset", 0)
    samples = []
    for e in manifest["samples"]:
        spacing = tuple(e["spacing"]) if e.get("spacing") else None
        if e["image"].endswith(".png"):
            image = read_raster(root / e["image"], offset)
            label = read_raster(root / e["label"]) if e.get("label") else None
        else:
            image, file_spacing = read_volume(root / e["image"])
            spacing = spacing or file_spacing
            label = read_volume(root / e["label"])[0] if e.get("label") else None
        samples.append(Sample(
            id=e["id"], image=image, label=label, spacing=spacing,
            domain_tag=DomainTag(e["tag"]), source=e.get("source", ""),
        ))
    return samples
