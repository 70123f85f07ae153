"""Train a few small models, add a deviation model, then ensemble them.

Takes around a minute on a laptop CPU.
"""

import tempfile
from pathlib import Path

from affectkit import data as D
from affectkit import ensemble as E
from affectkit import trainer as T
from affectkit.gradcheck import gradient_check

root = Path(tempfile.mkdtemp(prefix="affectkit-demo-"))
manifest = D.generate_synthetic(root / "train", "lsd", per_class=30, size=16, seed=0)
held_out = D.generate_synthetic(root / "test", "lsd", per_class=30, size=16, seed=1)

# first, confirm the analytic gradients against finite differences
report = gradient_check("full", seed=0)
print("gradcheck:", "PASS" if report.passed else "FAIL", f"max error {report.max_error:.1e}")

# plain models with different seeds
paths = []
for seed in range(3):
    cfg = T.TrainConfig(task="lsd", epochs=4, batch_size=32, base_lr=3e-3, seed=seed,
                        checkpoint=str(root / f"plain{seed}"), feature_dim=32)
    res = T.fit(cfg, manifest)
    print(f"plain{seed}: last epoch train score {res.history[-1]['train_score']:.3f}")
    paths.append(res.last)

# a deviation model starts from a trained backbone and keeps a frozen copy of it
cfg = T.TrainConfig(task="lsd", epochs=4, batch_size=32, base_lr=3e-3, seed=9, deviation=True,
                    checkpoint=str(root / "deviation"), feature_dim=32, init_checkpoint=str(paths[0]))
res = T.fit(cfg, manifest)
print(f"deviation: last epoch train score {res.history[-1]['train_score']:.3f}")
paths.append(res.last)

# average the members' probabilities and score everything on a fresh draw,
# normalised with the training statistics
mean, std = T.manifest_stats(manifest, "lsd")
split = T.load_split(held_out, "lsd", mean, std, 16)
ens = E.EnsembleSet.load(paths)
print(E.ensemble_evaluate(ens, split, "lsd", threads=2).to_text())
