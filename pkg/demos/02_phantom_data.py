"""
Synthetic lesion phantoms
=========================

The phantom generator draws CT-like slices with elliptical lesions. Target
and auxiliary domains use different lesion families, so they share the idea
of "lesion" but differ in shape statistics.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from relcollab.data import DomainTag, PhantomConfig, PreprocessConfig, generate_phantom_dataset, make_folds, preprocess
from relcollab.dataio import load_dataset, save_dataset

out = Path(__file__).with_name("_output")
out.mkdir(exist_ok=True)

cfg = PhantomConfig(n_target_labeled=4, n_target_unlabeled=2, n_auxiliary=4, seed=0)
samples = generate_phantom_dataset(cfg)
for s in samples[:3]:
    print(s.id, s.domain_tag.value, "lesions:", len(s.meta["lesions"]))

###############################################################################
# Preprocessing clips to a window and rescales; the applied transform is
# recorded on the sample.
pre = preprocess(samples[0], PreprocessConfig(window=(-1000, 400)))
print("preprocess record:", pre.meta["preprocess"])

###############################################################################
# Show one slice from each domain.
fig, axes = plt.subplots(1, 2, figsize=(7, 3.5))
for ax, tag in zip(axes, (DomainTag.TARGET_LABELED, DomainTag.AUXILIARY)):
    s = next(x for x in samples if x.domain_tag is tag)
    ax.imshow(s.image, cmap="gray")
    ax.contour(s.label, levels=[0.5], colors="r")
    ax.set_title(tag.value)
    ax.axis("off")
fig.savefig(out / "phantoms.png", dpi=80)

###############################################################################
# Datasets round-trip through a directory of PNG (2D) or NIfTI (3D) files
# with a JSON manifest.
manifest = save_dataset(samples, out / "phantom_ds", seed=cfg.seed, config=cfg.to_dict(), config_hash=cfg.digest())
print("manifest counts:", manifest["counts"])
print("reloaded:", len(load_dataset(out / "phantom_ds")), "samples")

###############################################################################
# Folds are seeded shuffles of the labeled target ids.
ids = [s.id for s in samples if s.domain_tag is DomainTag.TARGET_LABELED]
for split in make_folds(ids, 2, seed=0):
    print("fold", split.fold_index, "train", split.train_ids, "test", split.test_ids)
