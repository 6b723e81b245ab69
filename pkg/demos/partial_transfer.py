"""Partial-set transfer on the synthetic scenario, source-only versus the full method.

Run with ``python3 demos/partial_transfer.py``. Takes roughly three minutes
on one core. The source has twelve classes and the target only the first
six, so a good run should push the weights of classes 6..11 towards zero.
"""

from dataclasses import replace

import numpy as np

from arpm import ScenarioSpec, TrainConfig, generate_scenario
from arpm.reweight import class_weight_summary
from arpm.scenario import accuracy
from arpm.trainer import Trainer

source, target = generate_scenario(ScenarioSpec(seed=2019))
print(f"source: {len(source)} samples, {source.labels.max() + 1} classes")
print(f"target: {len(target)} samples, {target.labels.max() + 1} classes (labels used for scoring only)")

config = TrainConfig(seed=2019, total_steps=2000, eval_every=250)
baseline = Trainer(replace(config, lam=0.0, use_nrc=False, use_reweight=False), source, target)
baseline.run()
print(f"\nsource-only target accuracy: {accuracy(baseline.model, target):.3f}")

full = Trainer(config, source, target)
_, log = full.run()
print(f"full method target accuracy: {accuracy(full.model, target):.3f}")

steps, acc = log.accuracy_curve()
print("\naccuracy over training:")
for s, a in zip(steps, acc):
    print(f"  step {s:5d}  {a:.3f}")

print("\nrelative weight change per round:", np.round(log.relative_weight_changes(), 3).tolist())
print("\nmean weight per source class after the last round:")
roles = source.class_roles
for c, count, mean_w in class_weight_summary(source.labels, full.weights.w):
    print(f"  class {c:2d} ({roles[c]:14s}) {mean_w:.3f}")
