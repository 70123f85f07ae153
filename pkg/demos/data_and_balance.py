"""Synthetic data, class statistics and offline balancing.

Run with ``python demos/data_and_balance.py``; everything is written to a
temporary directory.
"""

import tempfile
from pathlib import Path

from affectkit import augment as A
from affectkit import data as D

root = Path(tempfile.mkdtemp(prefix="affectkit-demo-"))

# a small balanced set of six expression classes, 16x16 pixels
manifest = D.generate_synthetic(root / "src", "lsd", per_class=20, size=16, seed=0)
records = D.parse_manifest(manifest, "lsd")
print("samples:", len(records))

# knock two classes down so the set is skewed
keep = {0: 4, 1: 8}
records = [r for r in records if int(r.image_path[-9:-4]) < keep.get(r.expression, 20)]
D.write_manifest(manifest, records, "lsd")
dist = D.class_distribution(records, "lsd")
print("counts:", dict(zip(dist.names, dist.counts.tolist())))
print("imbalance ratio:", round(dist.imbalance_ratio, 2))

# inverse-frequency weights, normalised to mean 1
w = D.class_weights(records, "lsd")
print("weights:", [round(float(v), 3) for v in w.expr_weights])

# plan and render augmented copies until every class matches the largest one
plan = A.balance_plan(dist, records, seed=7)
print("copies planned per class:", plan.extra)
out = A.materialize(plan, A.AugmentPolicy(num_ops=2, magnitude=9, seed=7), records, manifest, root / "bal", "lsd")
balanced = D.class_distribution(D.parse_manifest(out, "lsd"), "lsd")
print("balanced counts:", balanced.counts.tolist())

# per-channel statistics used for input normalisation
mean, std = D.normalization_stats([D.resolve(out, r) for r in D.parse_manifest(out, "lsd")])
print(D.format_stats(mean, std))
