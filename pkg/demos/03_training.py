"""
Training the dual-encoder network
=================================

A short run on a phantom set. The general encoder only sees the relation
loss between domains; the target encoder and decoder carry the segmentation
loss, and the target encoder is additionally pushed away from the general
encoder's relation matrix.
"""

from pathlib import Path

from relcollab.data import DomainTag, PhantomConfig, generate_phantom_dataset
from relcollab.inspect import inspect_relations
from relcollab.trainer import TrainConfig, train

out = Path(__file__).with_name("_output")
ds = generate_phantom_dataset(PhantomConfig(n_target_labeled=8, n_auxiliary=8, seed=1))
target = [s for s in ds if s.domain_tag is DomainTag.TARGET_LABELED]
aux = [s for s in ds if s.domain_tag is DomainTag.AUXILIARY]

###############################################################################
# Train for 60 steps, saving relation matrices every 20 steps.
cfg = TrainConfig(mode="full", max_steps=60, relation_every=20, seed=0)
res = train(cfg, target[:6], aux, eval_set=target[6:], run_dir=out / "run")
for rec in res.state.history[::20] + res.state.history[-1:]:
    print(rec)

###############################################################################
# The loss weights ramp up and reach their base value on the last step.
print("lambda at start / end:", res.state.history[0]["lambda_G"], res.state.history[-1]["lambda_G"])
print("held-out summary:", res.report.summary())

###############################################################################
# Plot relation matrices and their differences over training.
rows = inspect_relations(out / "run")
for r in rows:
    print(r)
